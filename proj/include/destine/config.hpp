#pragma once

// JSON run configuration: data, model, train and output sections with
// defaults applied, unknown keys rejected, and every error naming the
// offending key. The "effective" flavor additionally carries the values a
// training run derives from the data (field count, feature count, vocabulary)
// and is what checkpoints embed.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "destine/errors.hpp"
#include "destine/features.hpp"
#include "destine/model.hpp"
#include "destine/training.hpp"

namespace destine {

using json = nlohmann::json;

struct DataConfig {
    std::string path;
    FieldSchema schema;
    std::uint64_t split_seed = 1;
    std::size_t min_count = 2;
};

struct OutputConfig {
    std::string checkpoint_path;
    std::string metrics_path;
    std::string test_split_path;  // optional: dump the raw test partition
};

struct RunConfig {
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    OutputConfig output;
    std::optional<Vocabulary> vocab;  // effective configs only
};

// How strict to be about the derived fields.
enum class ConfigKind {
    train,      // user config for `train`: derived keys rejected
    gradcheck,  // standalone model config: derived keys allowed, data optional
    effective,  // checkpoint payload: derived keys + vocabulary required
};

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::string& section,
                                std::initializer_list<const char*> known) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* k : known) {
            if (key == k) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw ConfigError(section.empty() ? key : section + "." + key, "unknown key");
        }
    }
}

template <class T>
T get_or(const json& obj, const std::string& section, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(section + "." + key, e.what());
    }
}

template <class T>
T get_required(const json& obj, const std::string& section, const char* key) {
    if (!obj.contains(key)) {
        throw ConfigError(section + "." + key, "missing required key");
    }
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(section + "." + key, e.what());
    }
}

// Count-like keys: negative JSON integers would otherwise wrap around when
// fetched as unsigned types.
template <class T>
T get_count(const json& obj, const std::string& section, const char* key, T fallback) {
    if (obj.contains(key) && obj.at(key).is_number_integer() &&
        obj.at(key).get<long long>() < 0) {
        throw ConfigError(section + "." + key, "must be non-negative");
    }
    return get_or<T>(obj, section, key, fallback);
}

inline FieldSchema parse_schema(const json& obj) {
    if (!obj.is_object()) throw ConfigError("data.schema", "must be an object");
    reject_unknown_keys(obj, "data.schema", {"label", "fields"});
    FieldSchema schema;
    schema.label_column = get_or<std::string>(obj, "data.schema", "label", "label");
    if (!obj.contains("fields") || !obj.at("fields").is_array()) {
        throw ConfigError("data.schema.fields", "must be an array of field objects");
    }
    for (const auto& f : obj.at("fields")) {
        if (!f.is_object()) throw ConfigError("data.schema.fields", "entries must be objects");
        reject_unknown_keys(f, "data.schema.fields", {"name", "kind"});
        FieldSchema::Field field;
        field.name = get_required<std::string>(f, "data.schema.fields", "name");
        const auto kind = get_or<std::string>(f, "data.schema.fields", "kind", "categorical");
        if (kind == "categorical") {
            field.kind = FieldKind::categorical;
        } else if (kind == "numeric") {
            field.kind = FieldKind::numeric;
        } else {
            throw ConfigError("data.schema.fields.kind",
                              "must be 'categorical' or 'numeric', got '" + kind + "'");
        }
        schema.fields.push_back(std::move(field));
    }
    try {
        schema.validate();
    } catch (const SchemaError& e) {
        throw ConfigError("data.schema", e.what());
    }
    return schema;
}

inline json schema_to_json(const FieldSchema& schema) {
    json fields = json::array();
    for (const auto& f : schema.fields) {
        fields.push_back({{"name", f.name},
                          {"kind", f.kind == FieldKind::numeric ? "numeric" : "categorical"}});
    }
    return json{{"label", schema.label_column}, {"fields", std::move(fields)}};
}

inline Vocabulary parse_vocab(const json& arr) {
    if (!arr.is_array()) throw ConfigError("data.vocab", "must be an array of token arrays");
    std::vector<std::vector<std::string>> field_tokens;
    for (const auto& field : arr) {
        if (!field.is_array()) throw ConfigError("data.vocab", "must be an array of token arrays");
        std::vector<std::string> tokens;
        for (const auto& token : field) tokens.push_back(token.get<std::string>());
        field_tokens.push_back(std::move(tokens));
    }
    return Vocabulary(std::move(field_tokens));
}

inline json vocab_to_json(const Vocabulary& vocab) {
    json arr = json::array();
    for (std::size_t f = 0; f < vocab.num_fields(); ++f) {
        arr.push_back(vocab.field_tokens(f));
    }
    return arr;
}

}  // namespace detail

inline RunConfig parse_run_config(const json& doc, ConfigKind kind) {
    if (!doc.is_object()) throw ConfigError("", "config must be a JSON object");
    detail::reject_unknown_keys(doc, "", {"data", "model", "train", "output"});

    RunConfig config;

    // data
    const bool data_required = kind != ConfigKind::gradcheck;
    if (doc.contains("data")) {
        const json& data = doc.at("data");
        if (!data.is_object()) throw ConfigError("data", "must be an object");
        detail::reject_unknown_keys(data, "data",
                                    {"path", "schema", "split_seed", "min_count", "vocab"});
        config.data.path = kind == ConfigKind::train
                               ? detail::get_required<std::string>(data, "data", "path")
                               : detail::get_or<std::string>(data, "data", "path", "");
        if (!data.contains("schema")) throw ConfigError("data.schema", "missing required key");
        config.data.schema = detail::parse_schema(data.at("schema"));
        config.data.split_seed =
            detail::get_count<std::uint64_t>(data, "data", "split_seed", 1);
        config.data.min_count = detail::get_count<std::size_t>(data, "data", "min_count", 2);
        if (data.contains("vocab")) {
            if (kind == ConfigKind::train) {
                throw ConfigError("data.vocab", "derived during training; remove it");
            }
            config.vocab = detail::parse_vocab(data.at("vocab"));
            if (config.vocab->num_fields() != config.data.schema.num_fields()) {
                throw ConfigError("data.vocab", "field count does not match schema");
            }
        } else if (kind == ConfigKind::effective) {
            throw ConfigError("data.vocab", "missing required key");
        }
    } else if (data_required) {
        throw ConfigError("data", "missing required section");
    }

    // model
    const json model = doc.contains("model") ? doc.at("model") : json::object();
    if (!model.is_object()) throw ConfigError("model", "must be an object");
    detail::reject_unknown_keys(
        model, "model",
        {"embed_dim", "head_dim", "num_heads", "num_layers", "variant", "scale_scores",
         "dropout_rate", "use_dnn", "dnn_widths", "l2_weight", "num_fields", "total_features"});
    config.model.embed_dim = detail::get_count<std::size_t>(model, "model", "embed_dim", 64);
    config.model.head_dim = detail::get_count<std::size_t>(model, "model", "head_dim", 32);
    config.model.num_heads = detail::get_count<std::size_t>(model, "model", "num_heads", 2);
    config.model.num_layers = detail::get_count<std::size_t>(model, "model", "num_layers", 3);
    const auto variant = detail::get_or<std::string>(model, "model", "variant", "full");
    try {
        config.model.variant = attention_variant_from_string(variant);
    } catch (const DomainError& e) {
        throw ConfigError("model.variant", e.what());
    }
    config.model.scale_scores = detail::get_or<bool>(model, "model", "scale_scores", false);
    config.model.dropout_rate = detail::get_or<double>(model, "model", "dropout_rate", 0.2);
    config.model.use_dnn = detail::get_or<bool>(model, "model", "use_dnn", false);
    if (model.contains("dnn_widths") && model.at("dnn_widths").is_array()) {
        for (const auto& w : model.at("dnn_widths")) {
            if (w.is_number_integer() && w.get<long long>() < 0) {
                throw ConfigError("model.dnn_widths", "widths must be non-negative");
            }
        }
    }
    config.model.dnn_widths = detail::get_or<std::vector<std::size_t>>(
        model, "model", "dnn_widths", {400, 400});
    config.model.l2_weight = detail::get_or<double>(model, "model", "l2_weight", 5e-4);

    const bool has_derived = model.contains("num_fields") || model.contains("total_features");
    if (kind == ConfigKind::train && has_derived) {
        throw ConfigError(model.contains("num_fields") ? "model.num_fields"
                                                       : "model.total_features",
                          "derived from the data; remove it");
    }
    if (kind == ConfigKind::gradcheck) {
        config.model.num_fields = detail::get_count<std::size_t>(model, "model", "num_fields", 4);
        config.model.total_features =
            detail::get_count<std::size_t>(model, "model", "total_features", 64);
    } else if (kind == ConfigKind::effective) {
        config.model.num_fields =
            detail::get_required<std::size_t>(model, "model", "num_fields");
        config.model.total_features =
            detail::get_required<std::size_t>(model, "model", "total_features");
    } else {
        // Placeholders so validate() passes; the pipeline fills them in.
        config.model.num_fields = 1;
        config.model.total_features = 1;
    }

    // train
    const json train = doc.contains("train") ? doc.at("train") : json::object();
    if (!train.is_object()) throw ConfigError("train", "must be an object");
    detail::reject_unknown_keys(
        train, "train", {"batch_size", "max_epochs", "patience", "seed", "learning_rate"});
    config.train.batch_size = detail::get_count<std::size_t>(train, "train", "batch_size", 256);
    config.train.max_epochs = detail::get_count<std::size_t>(train, "train", "max_epochs", 20);
    config.train.patience = detail::get_count<std::size_t>(train, "train", "patience", 3);
    config.train.seed = detail::get_count<std::uint64_t>(train, "train", "seed", 1);
    config.train.learning_rate =
        detail::get_or<double>(train, "train", "learning_rate", 0.001);

    // output
    const json output = doc.contains("output") ? doc.at("output") : json::object();
    if (!output.is_object()) throw ConfigError("output", "must be an object");
    detail::reject_unknown_keys(output, "output", {"checkpoint", "metrics", "test_split"});
    if (kind == ConfigKind::train) {
        config.output.checkpoint_path =
            detail::get_required<std::string>(output, "output", "checkpoint");
        config.output.metrics_path =
            detail::get_required<std::string>(output, "output", "metrics");
    } else {
        config.output.checkpoint_path =
            detail::get_or<std::string>(output, "output", "checkpoint", "");
        config.output.metrics_path = detail::get_or<std::string>(output, "output", "metrics", "");
    }
    config.output.test_split_path =
        detail::get_or<std::string>(output, "output", "test_split", "");

    config.model.validate();
    config.train.validate(config.model.use_dnn);
    return config;
}

inline RunConfig load_run_config(const std::string& path, ConfigKind kind) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path, std::string("not valid JSON: ") + e.what());
    }
    return parse_run_config(doc, kind);
}

// Full dump of the configuration a run actually used, vocabulary included.
inline json effective_config_json(const RunConfig& config) {
    if (!config.vocab.has_value()) {
        throw DomainError("effective config needs a vocabulary");
    }
    json model{{"embed_dim", config.model.embed_dim},
               {"head_dim", config.model.head_dim},
               {"num_heads", config.model.num_heads},
               {"num_layers", config.model.num_layers},
               {"variant", to_string(config.model.variant)},
               {"scale_scores", config.model.scale_scores},
               {"dropout_rate", config.model.dropout_rate},
               {"use_dnn", config.model.use_dnn},
               {"dnn_widths", config.model.dnn_widths},
               {"l2_weight", config.model.l2_weight},
               {"num_fields", config.model.num_fields},
               {"total_features", config.model.total_features}};
    json data{{"path", config.data.path},
              {"schema", detail::schema_to_json(config.data.schema)},
              {"split_seed", config.data.split_seed},
              {"min_count", config.data.min_count},
              {"vocab", detail::vocab_to_json(*config.vocab)}};
    json train{{"batch_size", config.train.batch_size},
               {"max_epochs", config.train.max_epochs},
               {"patience", config.train.patience},
               {"seed", config.train.seed},
               {"learning_rate", config.train.learning_rate}};
    json output{{"checkpoint", config.output.checkpoint_path},
                {"metrics", config.output.metrics_path}};
    if (!config.output.test_split_path.empty()) {
        output["test_split"] = config.output.test_split_path;
    }
    return json{{"data", std::move(data)},
                {"model", std::move(model)},
                {"train", std::move(train)},
                {"output", std::move(output)}};
}

}  // namespace destine
