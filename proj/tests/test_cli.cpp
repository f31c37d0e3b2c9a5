#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "destine/checkpoint.hpp"
#include "destine/features.hpp"
#include "destine/training.hpp"
#include "testing_util.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

const char* binary_path() {
    const char* bin = std::getenv("DESTINE_BIN");
    REQUIRE(bin != nullptr);
    return bin;
}

fs::path work_dir() {
    const auto dir = testutil::scratch_dir() / "cli";
    fs::create_directories(dir);
    return dir;
}

RunResult run_cli(const std::string& args) {
    const auto log = work_dir() / "last_run.log";
    const std::string command =
        std::string(binary_path()) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(command.c_str());
    RunResult result;
    result.exit_code = WEXITSTATUS(status);
    result.output = testutil::read_file(log.string());
    return result;
}

std::string train_config_json(const fs::path& dir, const std::string& tag,
                              const std::string& extra_model = "") {
    const std::string data = (dir / "train_data.csv").string();
    return std::string("{\n") +
           "  \"data\": {\"path\": \"" + data +
           "\", \"schema\": {\"label\": \"label\", \"fields\": [" +
           "{\"name\": \"f1\"}, {\"name\": \"f2\"}, {\"name\": \"f3\"}]}, " +
           "\"split_seed\": 3, \"min_count\": 2},\n" +
           "  \"model\": {\"embed_dim\": 8, \"head_dim\": 4, \"num_heads\": 2, " +
           "\"num_layers\": 1, \"dropout_rate\": 0.0, \"l2_weight\": 1e-6" + extra_model +
           "},\n" +
           "  \"train\": {\"batch_size\": 64, \"max_epochs\": 3, \"patience\": 5, " +
           "\"seed\": 11, \"learning_rate\": 0.003},\n" +
           "  \"output\": {\"checkpoint\": \"" + (dir / (tag + "_ckpt.json")).string() +
           "\", \"metrics\": \"" + (dir / (tag + "_metrics.csv")).string() +
           "\", \"test_split\": \"" + (dir / (tag + "_test.csv")).string() + "\"}\n}\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

}  // namespace

TEST_CASE("cli synth generates deterministic data and validates n") {
    const auto dir = work_dir();
    const auto a = run_cli("synth " + (dir / "s1.csv").string() + " --n 2000 --seed 5");
    REQUIRE(a.exit_code == 0);
    const auto b = run_cli("synth " + (dir / "s2.csv").string() + " --n 2000 --seed 5");
    REQUIRE(b.exit_code == 0);
    CHECK(testutil::read_file((dir / "s1.csv").string()) ==
          testutil::read_file((dir / "s2.csv").string()));

    const auto too_small = run_cli("synth " + (dir / "s3.csv").string() + " --n 50 --seed 5");
    CHECK(too_small.exit_code == 2);
}

TEST_CASE("cli train rejects configs missing data.path") {
    const auto dir = work_dir();
    write_text(dir / "bad.json",
               R"({"data": {"schema": {"label": "label", "fields": [{"name": "f1"}]}},
                   "output": {"checkpoint": "c.json", "metrics": "m.csv"}})");
    const auto result = run_cli("train " + (dir / "bad.json").string());
    CHECK(result.exit_code == 2);
    CHECK(result.output.find("data.path") != std::string::npos);
}

TEST_CASE("cli train end to end: artifacts, determinism, evaluate, predict") {
    const auto dir = work_dir();
    REQUIRE(run_cli("synth " + (dir / "train_data.csv").string() + " --n 2500 --seed 21")
                .exit_code == 0);

    write_text(dir / "run_a.json", train_config_json(dir, "a"));
    write_text(dir / "run_b.json", train_config_json(dir, "b"));

    const auto a = run_cli("train " + (dir / "run_a.json").string());
    REQUIRE(a.exit_code == 0);
    const auto b = run_cli("train " + (dir / "run_b.json").string());
    REQUIRE(b.exit_code == 0);

    // Artifacts exist and parse.
    const auto ckpt_doc = json::parse(testutil::read_file((dir / "a_ckpt.json").string()));
    CHECK(ckpt_doc.at("format_version") == 1);
    const std::string metrics_a = testutil::read_file((dir / "a_metrics.csv").string());
    const std::string metrics_b = testutil::read_file((dir / "b_metrics.csv").string());
    REQUIRE(!metrics_a.empty());
    CHECK(metrics_a.substr(0, 36) == "epoch,train_loss,val_auc,val_logloss");

    // Identical config + seed => byte-identical metrics.
    REQUIRE(metrics_a == metrics_b);

    // evaluate on the dumped test split reproduces the metrics test row.
    const auto eval = run_cli("evaluate " + (dir / "a_ckpt.json").string() + " " +
                              (dir / "a_test.csv").string());
    REQUIRE(eval.exit_code == 0);
    std::istringstream rows(metrics_a);
    std::string line, last;
    while (std::getline(rows, line)) {
        if (!line.empty()) last = line;
    }
    REQUIRE(last.substr(0, 6) == "test,,");
    const auto comma = last.find(',', 6);
    const std::string test_auc = last.substr(6, comma - 6);
    const std::string test_logloss = last.substr(comma + 1);
    CHECK(eval.output.find("auc=" + test_auc + " ") != std::string::npos);
    CHECK(eval.output.find("logloss=" + test_logloss) != std::string::npos);

    // predict writes one score per row, order preserving, scores in (0,1).
    const auto predict = run_cli("predict " + (dir / "a_ckpt.json").string() + " " +
                                 (dir / "a_test.csv").string() + " " +
                                 (dir / "a_pred.csv").string());
    REQUIRE(predict.exit_code == 0);
    std::istringstream pred(testutil::read_file((dir / "a_pred.csv").string()));
    std::getline(pred, line);
    REQUIRE(line == "row_index,score");
    std::vector<double> scores;
    while (std::getline(pred, line)) {
        if (line.empty()) continue;
        const auto pos = line.find(',');
        REQUIRE(line.substr(0, pos) == std::to_string(scores.size()));
        scores.push_back(std::stod(line.substr(pos + 1)));
    }
    const auto test_rows = testutil::read_file((dir / "a_test.csv").string());
    const auto row_count = static_cast<std::size_t>(
        std::count(test_rows.begin(), test_rows.end(), '\n')) - 1;
    REQUIRE(scores.size() == row_count);
    for (double s : scores) {
        CHECK(s > 0.0);
        CHECK(s < 1.0);
    }

    // The predict scores reproduce the evaluate metrics on the same file.
    {
        destine::FieldSchema schema;
        schema.fields = {{"f1", destine::FieldKind::categorical},
                         {"f2", destine::FieldKind::categorical},
                         {"f3", destine::FieldKind::categorical}};
        const auto records = destine::load_csv((dir / "a_test.csv").string(), schema);
        std::vector<int> labels;
        for (const auto& rec : records) labels.push_back(rec.label == "1" ? 1 : 0);
        const double auc_from_predict = destine::auc(scores, labels);
        CHECK(eval.output.find("auc=" + destine::detail::format_double(auc_from_predict)) !=
              std::string::npos);
    }
}

TEST_CASE("cli evaluate error contracts") {
    const auto dir = work_dir();

    // Single-class file: AUC undefined.
    write_text(dir / "oneclass.csv", "label,f1,f2,f3\n1,a,a,a\n1,b,b,b\n1,c,c,c\n");
    REQUIRE(fs::exists(dir / "a_ckpt.json"));  // produced by the end-to-end case
    const auto single = run_cli("evaluate " + (dir / "a_ckpt.json").string() + " " +
                                (dir / "oneclass.csv").string());
    CHECK(single.exit_code == 2);

    // Corrupted checkpoint JSON: validation failure with a parse location.
    write_text(dir / "broken_ckpt.json", "{\"format_version\": 1, ");
    const auto broken = run_cli("evaluate " + (dir / "broken_ckpt.json").string() + " " +
                                (dir / "oneclass.csv").string());
    CHECK(broken.exit_code == 2);
    CHECK(broken.output.find("JSON") != std::string::npos);

    const auto missing = run_cli("evaluate " + (dir / "no_such.json").string() + " " +
                                 (dir / "oneclass.csv").string());
    CHECK(missing.exit_code == 1);
}

TEST_CASE("cli predict with an all-zero checkpoint scores one half everywhere") {
    const auto dir = work_dir();
    REQUIRE(fs::exists(dir / "a_ckpt.json"));
    destine::Checkpoint ckpt = destine::load_checkpoint((dir / "a_ckpt.json").string());
    for (auto& view : destine::param_views(ckpt.params)) {
        for (std::size_t i = 0; i < view.size; ++i) view.data[i] = 0.0;
    }
    destine::save_checkpoint((dir / "zero_ckpt.json").string(), ckpt.config, ckpt.params);

    // Label column absent: predict must not require it.
    write_text(dir / "unlabeled.csv", "f1,f2,f3\na,b,c\nj,j,e\nq,b,a\n");
    const auto result = run_cli("predict " + (dir / "zero_ckpt.json").string() + " " +
                                (dir / "unlabeled.csv").string() + " " +
                                (dir / "zero_pred.csv").string());
    REQUIRE(result.exit_code == 0);
    std::istringstream pred(testutil::read_file((dir / "zero_pred.csv").string()));
    std::string line;
    std::getline(pred, line);
    int rows = 0;
    while (std::getline(pred, line)) {
        if (line.empty()) continue;
        CHECK(line.substr(line.find(',') + 1) == "0.5");
        ++rows;
    }
    CHECK(rows == 3);
}

TEST_CASE("cli gradcheck exit codes") {
    const auto dir = work_dir();
    write_text(dir / "gc.json",
               R"({"model": {"num_fields": 4, "total_features": 24, "embed_dim": 6,
                             "head_dim": 4, "num_heads": 2, "num_layers": 2,
                             "dropout_rate": 0.2, "l2_weight": 5e-4},
                   "train": {"seed": 7}})");

    const auto ok = run_cli("gradcheck " + (dir / "gc.json").string());
    REQUIRE(ok.exit_code == 0);
    CHECK(ok.output.find("gradcheck passed") != std::string::npos);
    CHECK(ok.output.find("tensor=embedding") != std::string::npos);

    const auto sabotaged =
        run_cli("gradcheck " + (dir / "gc.json").string() + " --corrupt-backward 0.01");
    CHECK(sabotaged.exit_code == 1);

    const auto absurd = run_cli("gradcheck " + (dir / "gc.json").string() + " --tol 1e-12");
    CHECK(absurd.exit_code == 1);
}

TEST_CASE("cli rejects unknown subcommands and missing arguments") {
    CHECK(run_cli("frobnicate").exit_code == 2);
    CHECK(run_cli("train").exit_code == 2);
    CHECK(run_cli("synth out.csv").exit_code == 2);  // --n is required
}
