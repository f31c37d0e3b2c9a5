#pragma once

// CSV click logs -> per-field categorical index vectors with binary labels.
// Vocabularies are field-scoped with index 0 reserved for out-of-vocabulary
// and missing values; numeric columns are log-bucketized into tokens first.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "destine/errors.hpp"
#include "destine/numerics.hpp"

namespace destine {

enum class FieldKind { categorical, numeric };

struct FieldSchema {
    struct Field {
        std::string name;
        FieldKind kind = FieldKind::categorical;
    };

    std::vector<Field> fields;
    std::string label_column = "label";

    std::size_t num_fields() const { return fields.size(); }

    void validate() const {
        if (fields.empty()) throw SchemaError("schema needs at least one feature field");
        std::unordered_set<std::string> seen;
        for (const auto& f : fields) {
            if (f.name.empty()) throw SchemaError("empty field name");
            if (!seen.insert(f.name).second) {
                throw SchemaError("duplicate field name '" + f.name + "'");
            }
            if (f.name == label_column) {
                throw SchemaError("label column '" + label_column +
                                  "' listed among feature fields");
            }
        }
    }
};

struct RawRecord {
    std::vector<std::string> values;  // one per schema field, schema order
    std::string label;                // empty when the file has no label column
    std::size_t line = 0;             // 1-based line number in the source file
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

inline bool is_binary_label(const std::string& s) { return s == "0" || s == "1"; }

}  // namespace detail

// Plain comma-separated UTF-8 with a header line; no quoting or escaping.
// Columns beyond the schema are ignored; absent trailing cells read as empty.
inline std::vector<RawRecord> load_csv(const std::string& path, const FieldSchema& schema,
                                       bool require_label = true) {
    schema.validate();
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty file '" + path + "'", 1);
    const auto header = detail::split_csv_line(line);

    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col.emplace(header[i], i);

    std::vector<std::size_t> field_col(schema.fields.size());
    for (std::size_t f = 0; f < schema.fields.size(); ++f) {
        auto it = col.find(schema.fields[f].name);
        if (it == col.end()) {
            throw SchemaError("header of '" + path + "' lacks column '" +
                              schema.fields[f].name + "'");
        }
        field_col[f] = it->second;
    }
    std::size_t label_col = 0;
    bool has_label = false;
    if (auto it = col.find(schema.label_column); it != col.end()) {
        label_col = it->second;
        has_label = true;
    } else if (require_label) {
        throw SchemaError("header of '" + path + "' lacks column '" +
                          schema.label_column + "'");
    }

    std::vector<RawRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        auto cell = [&](std::size_t idx) -> std::string {
            return idx < cells.size() ? cells[idx] : std::string();
        };
        RawRecord rec;
        rec.line = line_no;
        rec.values.reserve(schema.fields.size());
        for (std::size_t f = 0; f < schema.fields.size(); ++f) {
            rec.values.push_back(cell(field_col[f]));
        }
        if (has_label) {
            rec.label = cell(label_col);
            if (!detail::is_binary_label(rec.label)) {
                throw ParseError("label must be 0 or 1, got '" + rec.label + "'", line_no);
            }
        }
        records.push_back(std::move(rec));
    }
    return records;
}

// Numeric value -> categorical token. Missing or unparseable values become
// "B_miss", values <= 0 become "B_neg", everything else "B_<floor(ln(1+v))>".
inline std::string bucketize_numeric(const std::string& value) {
    if (value.empty()) return "B_miss";
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (end == value.c_str() || *end != '\0' || !std::isfinite(v)) return "B_miss";
    if (v <= 0.0) return "B_neg";
    return "B_" + std::to_string(static_cast<long long>(std::floor(std::log1p(v))));
}

class Vocabulary {
public:
    Vocabulary() = default;

    explicit Vocabulary(std::vector<std::vector<std::string>> field_tokens)
        : tokens_(std::move(field_tokens)) {
        index_.resize(tokens_.size());
        offsets_.resize(tokens_.size());
        std::size_t offset = 0;
        for (std::size_t f = 0; f < tokens_.size(); ++f) {
            offsets_[f] = offset;
            for (std::size_t i = 0; i < tokens_[f].size(); ++i) {
                if (!index_[f].emplace(tokens_[f][i], i + 1).second) {  // 0 is the OOV slot
                    throw DomainError("duplicate token '" + tokens_[f][i] + "' in field " +
                                      std::to_string(f));
                }
            }
            offset += cardinality(f);
        }
        total_ = offset;
    }

    std::size_t num_fields() const { return tokens_.size(); }

    // Kept tokens plus the reserved OOV index.
    std::size_t cardinality(std::size_t field) const { return tokens_[field].size() + 1; }

    std::size_t offset(std::size_t field) const { return offsets_[field]; }
    std::size_t total_features() const { return total_; }

    // Local index within the field; 0 for unknown or missing tokens.
    std::size_t local_index(std::size_t field, const std::string& token) const {
        if (token.empty()) return 0;
        const auto& map = index_[field];
        auto it = map.find(token);
        return it == map.end() ? 0 : it->second;
    }

    std::size_t global_index(std::size_t field, const std::string& token) const {
        return offsets_[field] + local_index(field, token);
    }

    bool in_field_range(std::size_t field, std::size_t global) const {
        return global >= offsets_[field] && global < offsets_[field] + cardinality(field);
    }

    // Tokens of one field in local-index order (index 1 first; 0 is implicit).
    const std::vector<std::string>& field_tokens(std::size_t field) const {
        return tokens_[field];
    }

private:
    std::vector<std::vector<std::string>> tokens_;
    std::vector<std::unordered_map<std::string, std::size_t>> index_;
    std::vector<std::size_t> offsets_;
    std::size_t total_ = 0;
};

struct EncodedSample {
    std::vector<std::size_t> indices;  // one global feature index per field
    int label = 0;
};

struct Dataset {
    FieldSchema schema;
    Vocabulary vocab;
    std::vector<EncodedSample> samples;

    std::size_t size() const { return samples.size(); }
};

namespace detail {

inline std::string field_token(const RawRecord& rec, const FieldSchema& schema,
                               std::size_t field) {
    const std::string& raw = rec.values[field];
    if (schema.fields[field].kind == FieldKind::numeric) return bucketize_numeric(raw);
    return raw;
}

}  // namespace detail

// Token frequencies must come from the training split only. Tokens seen at
// least `min_count` times get indices 1.. per field, ordered by descending
// frequency with lexicographic tie-breaks; everything else folds to index 0.
inline Vocabulary build_vocab(std::span<const RawRecord> records, const FieldSchema& schema,
                              std::size_t min_count) {
    schema.validate();
    if (records.empty()) throw DomainError("cannot build a vocabulary from zero records");

    std::vector<std::vector<std::string>> field_tokens(schema.num_fields());
    for (std::size_t f = 0; f < schema.num_fields(); ++f) {
        std::unordered_map<std::string, std::size_t> freq;
        for (const auto& rec : records) {
            const std::string token = detail::field_token(rec, schema, f);
            if (token.empty()) continue;  // missing -> reserved index 0
            ++freq[token];
        }
        std::vector<std::pair<std::string, std::size_t>> kept;
        for (auto& [token, count] : freq) {
            if (count >= min_count) kept.emplace_back(token, count);
        }
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        auto& tokens = field_tokens[f];
        tokens.reserve(kept.size());
        for (auto& [token, count] : kept) tokens.push_back(token);
    }
    return Vocabulary(std::move(field_tokens));
}

// Feature side of encoding; usable for label-less prediction inputs.
inline std::vector<std::size_t> encode_features(const RawRecord& rec,
                                                const FieldSchema& schema,
                                                const Vocabulary& vocab) {
    std::vector<std::size_t> indices(schema.num_fields());
    for (std::size_t f = 0; f < schema.num_fields(); ++f) {
        indices[f] = vocab.global_index(f, detail::field_token(rec, schema, f));
    }
    return indices;
}

inline EncodedSample encode(const RawRecord& rec, const FieldSchema& schema,
                            const Vocabulary& vocab) {
    if (!detail::is_binary_label(rec.label)) {
        throw ParseError("label must be 0 or 1, got '" + rec.label + "'", rec.line);
    }
    return EncodedSample{encode_features(rec, schema, vocab), rec.label == "1" ? 1 : 0};
}

struct SplitRatios {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

// Seeded shuffle of 0..n-1 followed by a contiguous train/validation/test cut.
// Each part gets floor(n*ratio) rows; remainder rows go to train.
inline std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n,
                                                             const SplitRatios& ratios,
                                                             std::uint64_t seed) {
    if (ratios.train <= 0.0 || ratios.validation <= 0.0 || ratios.test <= 0.0) {
        throw DomainError("split ratios must all be positive");
    }
    if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
        throw DomainError("split ratios must sum to 1");
    }
    if (n < 3) throw DomainError("need at least 3 samples to split");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SeededRng rng(seed);
    rng.shuffle(order);

    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.validation));
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.test));
    const std::size_t n_train = n - n_val - n_test;  // floor(n*train) + remainder

    std::array<std::vector<std::size_t>, 3> parts;
    parts[0].assign(order.begin(), order.begin() + n_train);
    parts[1].assign(order.begin() + n_train, order.begin() + n_train + n_val);
    parts[2].assign(order.begin() + n_train + n_val, order.end());
    return parts;
}

inline std::tuple<Dataset, Dataset, Dataset> split(const Dataset& dataset,
                                                   const SplitRatios& ratios,
                                                   std::uint64_t seed) {
    const auto parts = split_indices(dataset.samples.size(), ratios, seed);
    auto take = [&](const std::vector<std::size_t>& idx) {
        Dataset out;
        out.schema = dataset.schema;
        out.vocab = dataset.vocab;
        out.samples.reserve(idx.size());
        for (std::size_t i : idx) out.samples.push_back(dataset.samples[i]);
        return out;
    };
    return {take(parts[0]), take(parts[1]), take(parts[2])};
}

}  // namespace destine
