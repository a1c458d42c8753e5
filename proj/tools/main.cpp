#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mbn/commands.hpp"

using namespace mbn::cli;

namespace {

ExperimentConfig load_config(const std::string& path, const std::string& out_override,
                             std::optional<uint64_t> seed_override) {
    ExperimentConfig cfg = ExperimentConfig::from_json_file(path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (seed_override) {
        cfg.data.seed = *seed_override;
        cfg.trainer.seed = *seed_override;
        cfg.eval.seed = *seed_override;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-balanced margin training on synthetic grouped data"};
    app.require_subcommand(1);

    std::string config_path, out_dir, mode_str, model_path, test_path;
    std::optional<uint64_t> seed;
    uint64_t gradcheck_seed = 2024;
    int gradcheck_trials = 8;
    bool gradcheck_corrupt = false;

    CLI::App* gen = app.add_subcommand("gen-data", "generate train/meta/test dataset files");
    gen->add_option("--config", config_path, "experiment config (JSON)")->required();
    gen->add_option("--out", out_dir, "output directory (overrides config)");
    gen->add_option("--seed", seed, "seed override for data/trainer/eval");

    CLI::App* tr = app.add_subcommand("train", "train a model (MBN or fixed-margin baseline)");
    tr->add_option("--config", config_path, "experiment config (JSON)")->required();
    tr->add_option("--mode", mode_str, "mbn-arc|mbn-cos|mbn-soft|arcface|cosface|softmax")->required();
    tr->add_option("--out", out_dir, "output directory (overrides config)");
    tr->add_option("--seed", seed, "seed override");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a trained model on the test split");
    ev->add_option("--config", config_path, "experiment config (JSON)")->required();
    ev->add_option("--out", out_dir, "output directory (overrides config)");
    ev->add_option("--model", model_path, "model file (default <out>/model.txt)");
    ev->add_option("--test", test_path, "test dataset file (default from config)");
    ev->add_option("--seed", seed, "seed override");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference checks of all gradient paths");
    gc->add_option("--seed", gradcheck_seed, "randomization seed");
    gc->add_option("--trials", gradcheck_trials, "instances per check");
    gc->add_flag("--corrupt", gradcheck_corrupt, "corrupt one derivative (self-test of the checker)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(load_config(config_path, out_dir, seed), std::cout);
        if (tr->parsed())
            return cmd_train(load_config(config_path, out_dir, seed), mode_from_name(mode_str), std::cout);
        if (ev->parsed()) return cmd_eval(load_config(config_path, out_dir, seed), model_path, test_path, std::cout);
        if (gc->parsed()) return cmd_gradcheck(gradcheck_seed, gradcheck_trials, gradcheck_corrupt, std::cout);
    } catch (const mbn::ad::EvalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
