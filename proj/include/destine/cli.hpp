#pragma once

// Command implementations behind the `destine` binary. Each returns a process
// exit code: 0 success, 1 runtime failure, 2 validation/usage failure.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "destine/checkpoint.hpp"
#include "destine/config.hpp"
#include "destine/errors.hpp"
#include "destine/features.hpp"
#include "destine/model.hpp"
#include "destine/synth.hpp"
#include "destine/training.hpp"

namespace destine::cli {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

namespace detail {

// Validation-style problems (bad config, bad inputs) exit 2; I/O and other
// runtime problems exit 1.
template <class Fn>
int run_guarded(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const SchemaError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const CheckpointError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const DomainError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

inline void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << contents;
    if (!out) throw IoError("failed writing '" + path + "'");
}

// Raw records back to CSV, label first then schema field order.
inline std::string records_to_csv(std::span<const RawRecord> records,
                                  const FieldSchema& schema) {
    std::string out = schema.label_column;
    for (const auto& f : schema.fields) {
        out += ',';
        out += f.name;
    }
    out += '\n';
    for (const auto& rec : records) {
        out += rec.label;
        for (const auto& value : rec.values) {
            out += ',';
            out += value;
        }
        out += '\n';
    }
    return out;
}

inline std::vector<double> eval_scores(const std::vector<EncodedSample>& samples,
                                       ModelParams& params, const ModelConfig& config,
                                       std::size_t batch_size) {
    std::vector<double> scores;
    scores.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::span<const EncodedSample> batch(samples.data() + start, end - start);
        const auto s = forward(batch, params, config, Mode::eval, nullptr, nullptr);
        scores.insert(scores.end(), s.begin(), s.end());
    }
    return scores;
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        RunConfig config = load_run_config(config_path, ConfigKind::train);

        const auto records = load_csv(config.data.path, config.data.schema);
        const auto parts =
            split_indices(records.size(), SplitRatios{}, config.data.split_seed);

        std::vector<RawRecord> train_records;
        train_records.reserve(parts[0].size());
        for (std::size_t i : parts[0]) train_records.push_back(records[i]);
        const Vocabulary vocab =
            build_vocab(train_records, config.data.schema, config.data.min_count);

        auto encode_part = [&](const std::vector<std::size_t>& idx) {
            Dataset ds;
            ds.schema = config.data.schema;
            ds.vocab = vocab;
            ds.samples.reserve(idx.size());
            for (std::size_t i : idx) {
                ds.samples.push_back(encode(records[i], config.data.schema, vocab));
            }
            return ds;
        };
        const Dataset train_split = encode_part(parts[0]);
        const Dataset val_split = encode_part(parts[1]);
        const Dataset test_split = encode_part(parts[2]);

        config.model.num_fields = config.data.schema.num_fields();
        config.model.total_features = vocab.total_features();
        config.vocab = vocab;

        auto [params, report] =
            train(train_split, val_split, test_split, config.model, config.train, &err);
        err << "test auc=" << report.test_auc << " logloss=" << report.test_logloss << "\n";

        save_checkpoint(config.output.checkpoint_path, config, params);
        detail::write_file(config.output.metrics_path, metrics_to_csv(report));
        if (!config.output.test_split_path.empty()) {
            std::vector<RawRecord> test_records;
            test_records.reserve(parts[2].size());
            for (std::size_t i : parts[2]) test_records.push_back(records[i]);
            detail::write_file(config.output.test_split_path,
                               detail::records_to_csv(test_records, config.data.schema));
        }
        (void)out;
        return kExitOk;
    });
}

inline int cmd_evaluate(const std::string& checkpoint_path, const std::string& data_path,
                        std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        Checkpoint ckpt = load_checkpoint(checkpoint_path);
        const auto records = load_csv(data_path, ckpt.config.data.schema);

        std::vector<EncodedSample> samples;
        std::vector<int> labels;
        samples.reserve(records.size());
        for (const auto& rec : records) {
            samples.push_back(encode(rec, ckpt.config.data.schema, *ckpt.config.vocab));
            labels.push_back(samples.back().label);
        }
        const auto scores = detail::eval_scores(samples, ckpt.params, ckpt.config.model,
                                                ckpt.config.train.batch_size);
        out << "auc=" << destine::detail::format_double(auc(scores, labels))
            << " logloss=" << destine::detail::format_double(logloss(scores, labels)) << "\n";
        return kExitOk;
    });
}

inline int cmd_predict(const std::string& checkpoint_path, const std::string& data_path,
                       const std::string& out_path, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        Checkpoint ckpt = load_checkpoint(checkpoint_path);
        const auto records =
            load_csv(data_path, ckpt.config.data.schema, /*require_label=*/false);

        std::vector<EncodedSample> samples;
        samples.reserve(records.size());
        for (const auto& rec : records) {
            samples.push_back(EncodedSample{
                encode_features(rec, ckpt.config.data.schema, *ckpt.config.vocab), 0});
        }
        std::string csv = "row_index,score\n";
        if (!samples.empty()) {
            const auto scores = detail::eval_scores(samples, ckpt.params, ckpt.config.model,
                                                    ckpt.config.train.batch_size);
            for (std::size_t i = 0; i < scores.size(); ++i) {
                csv += std::to_string(i) + "," + destine::detail::format_double(scores[i]) + "\n";
            }
        }
        detail::write_file(out_path, csv);
        return kExitOk;
    });
}

inline int cmd_gradcheck(const std::string& config_path, double tol, double h,
                         double corrupt_backward, std::ostream& out, std::ostream& err) {
    return detail::run_guarded(err, [&] {
        const RunConfig config = load_run_config(config_path, ConfigKind::gradcheck);
        const auto report = grad_check(config.model, config.train.seed, h, tol,
                                       /*batch_size=*/4, corrupt_backward);
        for (const auto& row : report.tensors) {
            out << "tensor=" << row.tensor
                << " max_rel_err=" << destine::detail::format_double(row.max_rel_error)
                << " checked=" << row.entries_checked << "\n";
        }
        out << (report.passed() ? "gradcheck passed" : "gradcheck FAILED") << " (tol "
            << destine::detail::format_double(report.tolerance) << ", h "
            << destine::detail::format_double(report.step) << ")\n";
        return report.passed() ? kExitOk : kExitRuntime;
    });
}

inline int cmd_synth(const std::string& out_path, std::size_t n, std::uint64_t seed,
                     std::ostream& err) {
    return detail::run_guarded(err, [&] {
        synth::write_csv(out_path, n, seed);
        return kExitOk;
    });
}

}  // namespace destine::cli
