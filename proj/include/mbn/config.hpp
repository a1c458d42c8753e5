#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbn/datagen.hpp"
#include "mbn/fairmetrics.hpp"
#include "mbn/trainer.hpp"

namespace mbn::cli {

struct DataConfig {
    uint64_t seed = 1;
    int raw_dim = 32;
    std::string ratio = "7:1:1:1";  // identity-count ratio across groups; parts may be fractions like 5/3
    int classes_total = 240;
    int samples_per_class = 10;
    std::vector<double> sigma = {0.25, 0.35, 0.40, 0.45};  // one per group; group count = list size
    std::vector<int> anchor_groups = {0};
    int eval_identities_per_group = 20;  // shared by meta and test splits
    int meta_samples_per_identity = 4;
    int test_samples_per_identity = 8;
    std::string train_file;  // optional explicit dataset paths; default <out>/<split>.ds
    std::string meta_file;
    std::string test_file;

    int group_count() const { return static_cast<int>(sigma.size()); }
    std::vector<data::GroupSpec> train_specs() const;  // resolves the ratio string
    void validate() const;
};

struct EvalSection {
    int pair_budget = 200;
    double difficulty_fraction = 0.5;
    uint64_t seed = 17;
    void validate() const;
};

struct ExperimentConfig {
    std::string run_label = "experiment";
    std::string output_dir = "out";
    DataConfig data;
    train::TrainerConfig trainer;
    std::optional<double> anchor_margin_override;  // otherwise the mode default applies
    std::optional<double> margin_init_override;
    EvalSection eval;

    static ExperimentConfig from_json_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;  // effective config (defaults applied)
    void validate() const;
};

std::vector<int> parse_ratio(const std::string& ratio, int classes_total);

}  // namespace mbn::cli
