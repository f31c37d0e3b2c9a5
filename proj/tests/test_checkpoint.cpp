#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "destine/checkpoint.hpp"
#include "destine/config.hpp"
#include "testing_util.hpp"

using namespace destine;

namespace {

RunConfig effective_fixture() {
    RunConfig config;
    config.data.path = "data.csv";
    config.data.schema.fields = {{"f1", FieldKind::categorical},
                                 {"f2", FieldKind::categorical}};
    config.data.schema.label_column = "label";
    config.data.split_seed = 5;
    config.data.min_count = 1;
    config.vocab = Vocabulary({{"a", "b"}, {"x"}});
    config.model.num_fields = 2;
    config.model.embed_dim = 3;
    config.model.head_dim = 2;
    config.model.num_heads = 2;
    config.model.num_layers = 1;
    config.model.dropout_rate = 0.1;
    config.model.use_dnn = true;
    config.model.dnn_widths = {4};
    config.model.total_features = config.vocab->total_features();
    config.output.checkpoint_path = "ckpt.json";
    config.output.metrics_path = "metrics.csv";
    return config;
}

}  // namespace

TEST_CASE("checkpoint round-trips parameters and running state exactly") {
    RunConfig config = effective_fixture();
    SeededRng rng(77);
    ModelParams params = init_params(config.model, rng);
    // Make the running statistics distinctive so the round trip covers them.
    params.dnn->blocks[0].running_mean[1] = 0.125;
    params.dnn->blocks[0].running_var[2] = 7.5;

    const auto path = testutil::scratch_dir() / "roundtrip.json";
    save_checkpoint(path.string(), config, params);
    const Checkpoint restored = load_checkpoint(path.string());

    const auto original_views = param_views(params);
    const auto restored_views = param_views(restored.params);
    REQUIRE(original_views.size() == restored_views.size());
    for (std::size_t t = 0; t < original_views.size(); ++t) {
        REQUIRE(original_views[t].name == restored_views[t].name);
        for (std::size_t i = 0; i < original_views[t].size; ++i) {
            REQUIRE(original_views[t].data[i] == restored_views[t].data[i]);
        }
    }
    CHECK(restored.params.dnn->blocks[0].running_mean[1] == 0.125);
    CHECK(restored.params.dnn->blocks[0].running_var[2] == 7.5);

    CHECK(restored.config.model.num_fields == 2);
    CHECK(restored.config.model.total_features == config.model.total_features);
    CHECK(restored.config.data.schema.fields[1].name == "f2");
    CHECK(restored.config.vocab->local_index(0, "b") == 2);

    // The effective config embedded in the checkpoint re-validates as one.
    const json doc = checkpoint_to_json(config, params);
    CHECK_NOTHROW(parse_run_config(doc.at("config"), ConfigKind::effective));
}

TEST_CASE("checkpoint load rejects corrupt documents") {
    RunConfig config = effective_fixture();
    SeededRng rng(78);
    ModelParams params = init_params(config.model, rng);
    json doc = checkpoint_to_json(config, params);

    {
        json bad = doc;
        bad["format_version"] = 2;
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }
    {
        json bad = doc;
        bad.erase("tensors");
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }
    {
        json bad = doc;
        bad["tensors"]["embedding"]["shape"] = {1, 1};
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }
    {
        json bad = doc;
        bad["tensors"]["embedding"]["data"].push_back(0.0);
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }
    {
        json bad = doc;
        bad["tensors"].erase("out_w");
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }
    {
        json bad = doc;
        bad["tensors"]["stray"] = {{"shape", {1}}, {"data", {0.0}}};
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }
    {
        json bad = doc;
        bad["config"]["model"]["total_features"] = 999;
        CHECK_THROWS_AS(checkpoint_from_json(bad), CheckpointError);
    }

    const auto path = testutil::write_scratch("broken.json", "{ not json");
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("run config parsing: defaults, unknown keys, derived keys") {
    const json minimal = {
        {"data",
         {{"path", "train.csv"},
          {"schema", {{"label", "label"}, {"fields", {{{"name", "f1"}}, {{"name", "f2"}}}}}}}},
        {"output", {{"checkpoint", "c.json"}, {"metrics", "m.csv"}}}};
    const RunConfig config = parse_run_config(minimal, ConfigKind::train);
    CHECK(config.model.embed_dim == 64);
    CHECK(config.model.head_dim == 32);
    CHECK(config.model.num_heads == 2);
    CHECK(config.model.dropout_rate == 0.2);
    CHECK(config.train.learning_rate == 0.001);
    CHECK(config.data.min_count == 2);
    CHECK(config.data.schema.fields[0].kind == FieldKind::categorical);

    json unknown = minimal;
    unknown["model"] = {{"embde_dim", 8}};
    try {
        parse_run_config(unknown, ConfigKind::train);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "model.embde_dim");
    }

    json missing = minimal;
    missing["data"].erase("path");
    try {
        parse_run_config(missing, ConfigKind::train);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "data.path");
    }

    json derived = minimal;
    derived["model"] = {{"num_fields", 3}};
    CHECK_THROWS_AS(parse_run_config(derived, ConfigKind::train), ConfigError);

    json bad_variant = minimal;
    bad_variant["model"] = {{"variant", "extra_full"}};
    try {
        parse_run_config(bad_variant, ConfigKind::train);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "model.variant");
    }

    // Gradcheck-style configs need no data section and accept derived keys.
    const json standalone = {{"model", {{"num_fields", 4}, {"total_features", 30},
                                        {"embed_dim", 6}, {"head_dim", 4}}}};
    const RunConfig gc = parse_run_config(standalone, ConfigKind::gradcheck);
    CHECK(gc.model.num_fields == 4);
    CHECK(gc.model.total_features == 30);
}
