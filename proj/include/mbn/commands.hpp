#pragma once

#include <iosfwd>
#include <string>

#include "mbn/config.hpp"

namespace mbn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitCheck = 3;

enum class Mode { MbnArc, MbnCos, MbnSoft, Arcface, Cosface, Softmax };

const char* mode_name(Mode m);
Mode mode_from_name(const std::string& name);

// Resolves the mode into variant, margins, and meta on/off; config overrides
// win over the mode defaults.
void apply_mode(train::TrainerConfig& trainer, Mode mode, const ExperimentConfig& config);

struct DatasetPaths {
    std::string train;
    std::string meta;
    std::string test;
};

DatasetPaths dataset_paths(const ExperimentConfig& config);

int cmd_gen_data(const ExperimentConfig& config, std::ostream& log);
int cmd_train(const ExperimentConfig& config, Mode mode, std::ostream& log);
int cmd_eval(const ExperimentConfig& config, const std::string& model_path, const std::string& test_path,
             std::ostream& log);
int cmd_gradcheck(uint64_t seed, int trials, bool corrupt, std::ostream& log);

}  // namespace mbn::cli
