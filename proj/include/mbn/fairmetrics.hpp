#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mbn/datagen.hpp"
#include "mbn/tensor.hpp"
#include "mbn/trainer.hpp"

namespace mbn::fair {

struct Pair {
    int a = 0;
    int b = 0;
    bool same = false;
};

// Verification pairs per group; both members share the group, no pair
// repeats, and every group carries at least one positive and one negative.
struct PairSet {
    std::map<int, std::vector<Pair>> by_group;
    void validate(const std::vector<int>& groups) const;
};

// Scores candidate pairs by cosine similarity and keeps the hardest
// `difficulty_fraction` of the per-group budget (low-similarity positives,
// high-similarity negatives), filling the rest uniformly at random.
PairSet build_pairs(const data::GroupedDataset& test, const Tensor& embeddings, int budget_per_group,
                    double difficulty_fraction, uint64_t seed);

struct AccuracyResult {
    double accuracy_pct = 0.0;
    double threshold = 0.0;
};

// Best single-threshold pair classification accuracy; the sweep visits all
// midpoints between sorted distinct similarities plus both outer thresholds,
// breaking ties toward the lower threshold.
AccuracyResult verification_accuracy(const std::vector<double>& similarities, const std::vector<char>& same_flags);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

std::vector<RocPoint> roc_points(const std::vector<double>& similarities, const std::vector<char>& same_flags);

struct FairnessSummary {
    double average = 0.0;
    double std_dev = 0.0;   // sample standard deviation (divisor k-1)
    double ser = 0.0;       // max group error / min group error
    bool ser_degenerate = false;  // some accuracy hit 100%; SER undefined
};

FairnessSummary fairness_summary(const std::vector<double>& accuracies_pct);

struct ScatterResult {
    double ratio = 0.0;
    double intra = 0.0;  // mean cosine of features to their identity center
    double inter = 0.0;  // mean cosine between identity centers
    bool guarded = false;
};

ScatterResult feature_scatter(const Tensor& embeddings, const std::vector<int>& identities);

struct GroupReport {
    double accuracy_pct = 0.0;
    double threshold = 0.0;
    ScatterResult scatter;
    std::vector<RocPoint> roc;
    int positives = 0;
    int negatives = 0;
};

struct FairnessReport {
    std::map<int, GroupReport> groups;
    FairnessSummary summary;
    double global_threshold = 0.0;  // single sweep over the pooled pairs
    std::map<int, double> accuracy_at_global;

    std::string to_text() const;
    std::string roc_csv() const;
};

struct EvalConfig {
    int pair_budget = 200;
    double difficulty_fraction = 0.5;
    uint64_t seed = 17;
};

// Embeds the test set, builds pairs, and computes all per-group metrics plus
// the summary. Deterministic given model, data, and config.
FairnessReport evaluate(const train::ModelParams& model, const data::GroupedDataset& test,
                        const EvalConfig& config);

}  // namespace mbn::fair
