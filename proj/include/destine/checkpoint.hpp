#pragma once

// Checkpoint document: {format_version, config, tensors}. The config is the
// effective run configuration (vocabulary included) so a checkpoint alone can
// encode raw CSV rows and score them. Tensor data is flat row-major; JSON
// doubles round-trip exactly.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "destine/config.hpp"
#include "destine/errors.hpp"
#include "destine/model.hpp"

namespace destine {

constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    RunConfig config;
    ModelParams params;
};

namespace detail {

inline ModelParams allocate_params(const ModelConfig& config) {
    SeededRng rng(0);
    ModelParams p = init_params(config, rng);
    for (auto& view : param_views(p)) {
        for (std::size_t i = 0; i < view.size; ++i) view.data[i] = 0.0;
    }
    return p;
}

}  // namespace detail

inline json checkpoint_to_json(const RunConfig& config, const ModelParams& params) {
    json tensors = json::object();
    auto dump = [&](const std::vector<TensorView>& views) {
        for (const auto& view : views) {
            tensors[view.name] = {
                {"shape", view.shape},
                {"data", std::vector<double>(view.data, view.data + view.size)}};
        }
    };
    dump(param_views(params));
    dump(state_views(params));
    return json{{"format_version", kCheckpointFormatVersion},
                {"config", effective_config_json(config)},
                {"tensors", std::move(tensors)}};
}

inline void save_checkpoint(const std::string& path, const RunConfig& config,
                            const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << checkpoint_to_json(config, params).dump(1) << "\n";
    if (!out) throw IoError("failed writing '" + path + "'");
}

inline Checkpoint checkpoint_from_json(const json& doc) {
    if (!doc.is_object()) throw CheckpointError("checkpoint must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
        if (key != "format_version" && key != "config" && key != "tensors") {
            throw CheckpointError("unknown checkpoint key '" + key + "'");
        }
    }
    if (!doc.contains("format_version") || !doc.at("format_version").is_number_integer()) {
        throw CheckpointError("checkpoint lacks an integer format_version");
    }
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
        throw CheckpointError("unsupported checkpoint format_version " +
                              std::to_string(version) + "; expected " +
                              std::to_string(kCheckpointFormatVersion));
    }
    if (!doc.contains("config")) throw CheckpointError("checkpoint lacks config");
    if (!doc.contains("tensors") || !doc.at("tensors").is_object()) {
        throw CheckpointError("checkpoint lacks a tensors object");
    }

    Checkpoint ckpt;
    try {
        ckpt.config = parse_run_config(doc.at("config"), ConfigKind::effective);
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }
    if (ckpt.config.vocab->total_features() != ckpt.config.model.total_features) {
        throw CheckpointError("checkpoint vocabulary size disagrees with model.total_features");
    }
    if (ckpt.config.data.schema.num_fields() != ckpt.config.model.num_fields) {
        throw CheckpointError("checkpoint schema field count disagrees with model.num_fields");
    }

    ckpt.params = detail::allocate_params(ckpt.config.model);
    const json& tensors = doc.at("tensors");

    auto load = [&](const std::vector<TensorView>& views) {
        for (const auto& view : views) {
            if (!tensors.contains(view.name)) {
                throw CheckpointError("checkpoint lacks tensor '" + view.name + "'");
            }
            const json& t = tensors.at(view.name);
            const auto shape = t.at("shape").get<std::vector<std::size_t>>();
            if (shape != view.shape) {
                throw CheckpointError("tensor '" + view.name +
                                      "' shape disagrees with the checkpoint config");
            }
            const auto data = t.at("data").get<std::vector<double>>();
            if (data.size() != view.size) {
                throw CheckpointError("tensor '" + view.name + "' data length mismatch");
            }
            for (std::size_t i = 0; i < view.size; ++i) view.data[i] = data[i];
        }
    };
    std::size_t expected = 0;
    try {
        const auto p = param_views(ckpt.params);
        const auto s = state_views(ckpt.params);
        load(p);
        load(s);
        expected = p.size() + s.size();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed tensor entry: ") + e.what());
    }
    if (tensors.size() != expected) {
        throw CheckpointError("checkpoint carries " + std::to_string(tensors.size()) +
                              " tensors; the config implies " + std::to_string(expected));
    }
    return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    return checkpoint_from_json(doc);
}

}  // namespace destine
