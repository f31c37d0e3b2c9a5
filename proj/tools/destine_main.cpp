// destine: train, evaluate and poke at disentangled self-attention CTR models.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "destine/cli.hpp"

int main(int argc, char** argv) try {
    CLI::App app{"Disentangled self-attention CTR model toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string checkpoint_path;
    std::string data_path;
    std::string out_path;
    std::size_t synth_n = 0;
    std::uint64_t synth_seed = 1;
    double tol = 1e-4;
    double step = 1e-5;
    double corrupt = 0.0;

    auto* train = app.add_subcommand("train", "Train a model from a JSON config");
    train->add_option("config", config_path, "JSON run configuration")->required();

    auto* evaluate = app.add_subcommand("evaluate", "Report AUC/logloss on a labeled CSV");
    evaluate->add_option("checkpoint", checkpoint_path, "checkpoint JSON")->required();
    evaluate->add_option("data", data_path, "labeled CSV")->required();

    auto* predict = app.add_subcommand("predict", "Score rows of a CSV");
    predict->add_option("checkpoint", checkpoint_path, "checkpoint JSON")->required();
    predict->add_option("data", data_path, "input CSV (label column optional)")->required();
    predict->add_option("out", out_path, "output CSV of row_index,score")->required();

    auto* gradcheck =
        app.add_subcommand("gradcheck", "Finite-difference check of the backward pass");
    gradcheck->set_help_flag("--help", "print help");  // frees -h for the step size
    gradcheck->add_option("config", config_path, "JSON run configuration")->required();
    gradcheck->add_option("--tol", tol, "max relative error allowed");
    gradcheck->add_option("--h", step, "central-difference step");
    gradcheck->add_option("--corrupt-backward", corrupt, "perturb one analytic gradient")
        ->group("");  // self-test hook, hidden from help

    auto* synth = app.add_subcommand("synth", "Write a synthetic interaction dataset");
    synth->add_option("out", out_path, "output CSV path")->required();
    synth->add_option("--n", synth_n, "number of rows (>= 100)")->required();
    synth->add_option("--seed", synth_seed, "generator seed")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return destine::cli::kExitValidation;
    }

    if (train->parsed()) return destine::cli::cmd_train(config_path, std::cout, std::cerr);
    if (evaluate->parsed()) {
        return destine::cli::cmd_evaluate(checkpoint_path, data_path, std::cout, std::cerr);
    }
    if (predict->parsed()) {
        return destine::cli::cmd_predict(checkpoint_path, data_path, out_path, std::cerr);
    }
    if (gradcheck->parsed()) {
        return destine::cli::cmd_gradcheck(config_path, tol, step, corrupt, std::cout,
                                           std::cerr);
    }
    if (synth->parsed()) return destine::cli::cmd_synth(out_path, synth_n, synth_seed, std::cerr);
    return destine::cli::kExitValidation;
} catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return destine::cli::kExitRuntime;
}
