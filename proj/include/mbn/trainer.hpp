#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mbn/autodiff.hpp"
#include "mbn/datagen.hpp"
#include "mbn/losses.hpp"
#include "mbn/tensor.hpp"

namespace mbn::train {

struct EncoderLayer {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out
};

// Small encoder (affine stack with relu between layers, final L2
// normalization) plus the normalized classifier head.
struct ModelParams {
    int input_dim = 0;
    int embed_dim = 0;
    std::vector<EncoderLayer> encoder;
    losses::ClassifierHead head;

    int classes() const { return head.classes(); }
    std::vector<std::pair<std::string, const Tensor*>> named_leaves() const;
    void set_leaf(const std::string& name, const Tensor& value);
};

ModelParams init_model(int input_dim, const std::vector<int>& hidden, int embed_dim, int classes,
                       double scale, uint64_t seed);

struct ModelLeaves {
    ad::ParameterSet params;                   // empty when built as constants
    std::map<std::string, ad::NodeRef> nodes;  // name -> leaf node
};

ModelLeaves make_leaves(ad::Graph& g, const ModelParams& model, bool as_constants = false);

// n x input_dim inputs -> n x embed_dim unit-row embeddings
ad::NodeRef model_forward(ad::Graph& g, const std::map<std::string, ad::NodeRef>& leaves, int encoder_layers,
                          ad::NodeRef inputs);

// Embed raw features with fixed parameters (evaluation path).
Tensor embed(const ModelParams& model, const Tensor& features);

void save_model(const ModelParams& model, const std::string& path);
ModelParams load_model(const std::string& path);

struct DecayStep {
    int iteration = 0;
    double factor = 1.0;  // multiplier on the base rate from this iteration on
};

struct TrainerConfig {
    double alpha = 0.1;
    std::vector<DecayStep> alpha_decay;
    double beta = 1e-3;
    std::vector<DecayStep> beta_decay;
    double model_momentum = 0.9;
    double weight_decay = 5e-4;
    double margin_momentum = 0.9;
    int batch_size = 64;
    int iterations = 200;
    uint64_t seed = 1;
    losses::Variant variant = losses::Variant::Arc;
    double anchor_margin = 0.3;
    double margin_init = 0.3;
    std::set<int> anchor_groups = {0};
    std::vector<int> hidden = {32};
    int embed_dim = 16;
    double scale = 60.0;
    losses::MetaLossConfig meta;
    bool meta_enabled = true;

    void validate(int group_count) const;
    double model_lr(int t) const;
    double margin_lr(int t) const;
};

struct TraceRow {
    int iteration = 0;
    std::map<int, double> margins;   // all groups, anchors included (post-update values)
    double train_loss = 0.0;
    double meta_loss = 0.0;          // NaN when no margin step ran
    std::map<int, double> skewness;  // signed B^g for non-anchor groups
    double lr_model = 0.0;
    double lr_margin = 0.0;
    bool margin_update_skipped = false;
};

struct TrainTrace {
    std::vector<int> group_order;
    std::vector<TraceRow> rows;
    std::string to_csv() const;
};

struct TrainResult {
    ModelParams model;
    losses::MarginSchedule schedule;
    TrainTrace trace;
};

// Raised on a non-finite loss or gradient; carries the completed iterations'
// trace so callers can persist it.
class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, int iter, TrainTrace partial)
        : std::runtime_error(what), iteration(iter), trace(std::move(partial)) {}
    int iteration;
    TrainTrace trace;
};

// One differentiable SGD step: w_hat = w - alpha * dL/dw with create-graph
// gradients, so w_hat stays a function of the margin leaves.
std::map<std::string, ad::NodeRef> virtual_step(ad::Graph& g, const ad::ParameterSet& w,
                                                ad::NodeRef train_loss, double alpha);

struct MarginOptState {
    std::map<int, double> velocity;
};

struct MarginStepOutcome {
    double meta_loss = 0.0;
    std::map<int, double> skewness;
    std::map<int, int> triplet_counts;
};

// Meta-gradient update of the learnable margins through w_hat. Throws
// losses::InsufficientMetaTriplets when a group yields no triplet; the
// caller decides the retry policy.
MarginStepOutcome margin_step(ad::Graph& g, const std::map<std::string, ad::NodeRef>& w_hat,
                              int encoder_layers, const Tensor& meta_features,
                              const std::vector<int>& meta_identities, const std::vector<int>& meta_groups,
                              const std::map<int, ad::NodeRef>& margin_nodes,
                              losses::MarginSchedule& schedule, MarginOptState& state,
                              const losses::MetaLossConfig& meta_config, double beta, double momentum);

struct ModelOptState {
    std::map<std::string, Tensor> velocity;
};

// Momentum SGD with weight decay on the model values; head columns are
// renormalized afterwards.
void model_step(ModelParams& model, const std::map<std::string, Tensor>& grads, ModelOptState& state,
                double alpha, double momentum, double weight_decay);

TrainResult train(const data::GroupedDataset& train_set, const data::GroupedDataset& meta_set,
                  const TrainerConfig& config);

// Fixed-margin training (no meta step); same plumbing otherwise.
TrainResult train_baseline(const data::GroupedDataset& train_set, const TrainerConfig& config);

}  // namespace mbn::train
