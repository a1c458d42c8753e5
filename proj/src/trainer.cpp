#include "mbn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace mbn::train {

using ad::Graph;
using ad::NodeRef;
using ad::ParameterSet;

namespace {

uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e9b5ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string enc_name(size_t layer, const char* leaf) {
    return "enc" + std::to_string(layer) + "." + leaf;
}

double decayed(double base, const std::vector<DecayStep>& steps, int t) {
    double factor = 1.0;
    for (const DecayStep& s : steps)
        if (t >= s.iteration) factor = s.factor;
    return base * factor;
}

}  // namespace

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_leaves() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (size_t l = 0; l < encoder.size(); ++l) {
        out.emplace_back(enc_name(l, "W"), &encoder[l].weight);
        out.emplace_back(enc_name(l, "b"), &encoder[l].bias);
    }
    out.emplace_back("head.W", &head.weights);
    return out;
}

void ModelParams::set_leaf(const std::string& name, const Tensor& value) {
    for (size_t l = 0; l < encoder.size(); ++l) {
        if (name == enc_name(l, "W")) {
            encoder[l].weight = value;
            return;
        }
        if (name == enc_name(l, "b")) {
            encoder[l].bias = value;
            return;
        }
    }
    if (name == "head.W") {
        head.weights = value;
        return;
    }
    throw std::invalid_argument("ModelParams: unknown leaf " + name);
}

ModelParams init_model(int input_dim, const std::vector<int>& hidden, int embed_dim, int classes,
                       double scale, uint64_t seed) {
    if (input_dim < 1 || embed_dim < 1 || classes < 1)
        throw std::invalid_argument("init_model: dimensions must be positive");
    ModelParams m;
    m.input_dim = input_dim;
    m.embed_dim = embed_dim;
    m.head.scale = scale;
    std::mt19937_64 rng(mix(seed));
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<int> dims{input_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(embed_dim);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        EncoderLayer layer;
        layer.weight = Tensor(dims[l], dims[l + 1]);
        double std_dev = std::sqrt(2.0 / dims[l]);
        for (auto& v : layer.weight.data) v = std_dev * gauss(rng);
        // small nonzero biases keep relu-dead rows away from the final
        // normalization's zero vector
        layer.bias = Tensor(1, dims[l + 1]);
        for (auto& v : layer.bias.data) v = 0.01 * gauss(rng);
        m.encoder.push_back(std::move(layer));
    }
    m.head.weights = Tensor(embed_dim, classes);
    for (auto& v : m.head.weights.data) v = gauss(rng);
    m.head.renormalize_columns();
    return m;
}

ModelLeaves make_leaves(Graph& g, const ModelParams& model, bool as_constants) {
    ModelLeaves leaves;
    for (const auto& [name, tensor] : model.named_leaves()) {
        NodeRef ref = as_constants ? g.constant(*tensor) : g.parameter(*tensor);
        if (!as_constants) leaves.params.add(name, ref);
        leaves.nodes[name] = ref;
    }
    return leaves;
}

NodeRef model_forward(Graph& g, const std::map<std::string, NodeRef>& leaves, int encoder_layers,
                      NodeRef inputs) {
    NodeRef h = inputs;
    int n = g.node(inputs.id).rows;
    NodeRef ones = g.constant(Tensor(n, 1, 1.0));
    for (int l = 0; l < encoder_layers; ++l) {
        NodeRef w = leaves.at(enc_name(l, "W"));
        NodeRef b = leaves.at(enc_name(l, "b"));
        h = g.add(g.matmul(h, w), g.matmul(ones, b));
        if (l + 1 < encoder_layers) h = g.relu(h);
    }
    return g.l2_normalize_rows(h);
}

Tensor embed(const ModelParams& model, const Tensor& features) {
    if (features.cols != model.input_dim)
        throw std::invalid_argument("embed: feature dim " + std::to_string(features.cols) + " != model input " +
                                    std::to_string(model.input_dim));
    Graph g;
    ModelLeaves leaves = make_leaves(g, model, /*as_constants=*/true);
    NodeRef emb = model_forward(g, leaves.nodes, static_cast<int>(model.encoder.size()), g.constant(features));
    return g.evaluate(emb);
}

void save_model(const ModelParams& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);
    out << "mbn-model 1\n";
    out << model.input_dim << ' ' << model.embed_dim << ' ' << model.classes() << ' '
        << model.encoder.size() << ' ';
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", model.head.scale);
    out << buf << '\n';
    for (const auto& [name, tensor] : model.named_leaves()) {
        out << name << ' ' << tensor->rows << ' ' << tensor->cols;
        for (double v : tensor->data) {
            std::snprintf(buf, sizeof buf, " %.17g", v);
            out << buf;
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("save_model: write failed on " + path);
}

ModelParams load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != "mbn-model" || version != 1)
        throw std::runtime_error("load_model: bad header in " + path);
    int input_dim, embed_dim, classes;
    size_t layers;
    double scale;
    if (!(in >> input_dim >> embed_dim >> classes >> layers >> scale))
        throw std::runtime_error("load_model: bad dimensions in " + path);
    ModelParams m;
    m.input_dim = input_dim;
    m.embed_dim = embed_dim;
    m.head.scale = scale;
    m.encoder.resize(layers);
    auto read_tensor = [&](const std::string& expect) {
        std::string name;
        int r, c;
        if (!(in >> name >> r >> c) || name != expect)
            throw std::runtime_error("load_model: expected leaf " + expect + " in " + path);
        Tensor t(r, c);
        for (auto& v : t.data)
            if (!(in >> v)) throw std::runtime_error("load_model: truncated values for " + expect);
        return t;
    };
    for (size_t l = 0; l < layers; ++l) {
        m.encoder[l].weight = read_tensor(enc_name(l, "W"));
        m.encoder[l].bias = read_tensor(enc_name(l, "b"));
    }
    m.head.weights = read_tensor("head.W");
    if (m.head.weights.rows != embed_dim || m.head.weights.cols != classes)
        throw std::runtime_error("load_model: head shape disagrees with header in " + path);
    return m;
}

void TrainerConfig::validate(int group_count) const {
    if (alpha <= 0.0) throw std::invalid_argument("TrainerConfig: alpha must be > 0");
    if (beta < 0.0) throw std::invalid_argument("TrainerConfig: beta must be >= 0");
    if (iterations < 1) throw std::invalid_argument("TrainerConfig: iterations must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainerConfig: batch size must be >= 1");
    if (model_momentum < 0.0 || model_momentum >= 1.0 || margin_momentum < 0.0 || margin_momentum >= 1.0)
        throw std::invalid_argument("TrainerConfig: momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainerConfig: weight decay must be >= 0");
    if (embed_dim < 2) throw std::invalid_argument("TrainerConfig: embed_dim must be >= 2");
    if (scale <= 0.0) throw std::invalid_argument("TrainerConfig: scale must be > 0");
    meta.validate();
    if (meta_enabled && variant != losses::Variant::None && batch_size % group_count != 0)
        throw std::invalid_argument("TrainerConfig: batch size must be divisible by the group count");
}

double TrainerConfig::model_lr(int t) const { return decayed(alpha, alpha_decay, t); }
double TrainerConfig::margin_lr(int t) const { return decayed(beta, beta_decay, t); }

std::string TrainTrace::to_csv() const {
    std::ostringstream out;
    out << "iteration";
    for (int gr : group_order) out << ",m_" << gr;
    out << ",train_loss,meta_loss";
    for (int gr : group_order) out << ",skew_" << gr;
    out << ",lr_model,lr_margin,margin_update_skipped\n";
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
    };
    for (const TraceRow& row : rows) {
        out << row.iteration;
        for (int gr : group_order) put(row.margins.count(gr) ? row.margins.at(gr) : 0.0);
        put(row.train_loss);
        put(row.meta_loss);
        for (int gr : group_order)
            put(row.skewness.count(gr) ? row.skewness.at(gr) : std::nan(""));
        put(row.lr_model);
        put(row.lr_margin);
        out << ',' << (row.margin_update_skipped ? 1 : 0) << '\n';
    }
    return out.str();
}

std::map<std::string, NodeRef> virtual_step(Graph& g, const ParameterSet& w, NodeRef train_loss, double alpha) {
    auto grads = g.gradient(train_loss, w, /*differentiable=*/true);
    std::map<std::string, NodeRef> w_hat;
    NodeRef lr = g.scalar(alpha);
    for (const auto& [name, leaf] : w.items()) w_hat[name] = g.sub(leaf, g.mul(lr, grads.at(name)));
    return w_hat;
}

MarginStepOutcome margin_step(Graph& g, const std::map<std::string, NodeRef>& w_hat, int encoder_layers,
                              const Tensor& meta_features, const std::vector<int>& meta_identities,
                              const std::vector<int>& meta_groups, const std::map<int, NodeRef>& margin_nodes,
                              losses::MarginSchedule& schedule, MarginOptState& state,
                              const losses::MetaLossConfig& meta_config, double beta, double momentum) {
    NodeRef meta_emb = model_forward(g, w_hat, encoder_layers, g.constant(meta_features));
    losses::MetaSkewness ms =
        losses::meta_skewness_loss(g, meta_emb, meta_identities, meta_groups, meta_config, schedule.anchor_groups);
    for (const auto& [gr, value] : schedule.margins) {
        (void)value;
        if (!ms.triplet_counts.count(gr)) throw losses::InsufficientMetaTriplets(gr);
    }

    ParameterSet margin_params;
    for (const auto& [gr, node] : margin_nodes) margin_params.add("margin." + std::to_string(gr), node);
    auto grads = g.gradient(ms.loss, margin_params, /*differentiable=*/false);

    losses::MarginBounds bounds = schedule.bounds();
    for (auto& [gr, value] : schedule.margins) {
        double grad = g.evaluate(grads.at("margin." + std::to_string(gr))).value();
        double& v = state.velocity[gr];
        v = momentum * v + grad;
        value = std::min(std::max(value - beta * v, bounds.lo), bounds.hi);
    }

    MarginStepOutcome outcome;
    outcome.meta_loss = g.evaluate(ms.loss).value();
    outcome.skewness = ms.signed_skew;
    outcome.triplet_counts = ms.triplet_counts;
    return outcome;
}

void model_step(ModelParams& model, const std::map<std::string, Tensor>& grads, ModelOptState& state,
                double alpha, double momentum, double weight_decay) {
    for (const auto& [name, tensor] : model.named_leaves()) {
        const Tensor& g = grads.at(name);
        if (!g.same_shape(*tensor)) throw std::invalid_argument("model_step: gradient shape mismatch for " + name);
        auto [it, inserted] = state.velocity.try_emplace(name, Tensor(g.rows, g.cols, 0.0));
        Tensor& v = it->second;
        Tensor updated = *tensor;
        for (int i = 0; i < g.size(); ++i) {
            double adjusted = g.data[i] + weight_decay * updated.data[i];
            v.data[i] = momentum * v.data[i] + adjusted;
            updated.data[i] -= alpha * v.data[i];
        }
        model.set_leaf(name, updated);
    }
    model.head.renormalize_columns();
}

namespace {

struct MetaIndex {
    // group -> identity -> sample rows (identities with >= 2 samples only)
    std::map<int, std::vector<std::pair<int, std::vector<int>>>> usable;
};

MetaIndex index_meta(const data::GroupedDataset& meta) {
    MetaIndex idx;
    std::map<std::pair<int, int>, std::vector<int>> by_gid;
    for (int i = 0; i < meta.size(); ++i) by_gid[{meta.groups[i], meta.identities[i]}].push_back(i);
    for (const auto& [key, rows] : by_gid)
        if (rows.size() >= 2) idx.usable[key.first].emplace_back(key.second, rows);
    return idx;
}

struct MetaBatch {
    Tensor features;
    std::vector<int> identities;
    std::vector<int> groups;
};

// group-balanced meta batch: per group, per_group/2 identities with two
// distinct samples each, so every sample has a positive
MetaBatch sample_meta_batch(const data::GroupedDataset& meta, const MetaIndex& idx, int per_group,
                            std::mt19937_64& rng) {
    std::vector<int> rows;
    for (const auto& [group, ids] : idx.usable) {
        int want = std::max(1, per_group / 2);
        std::vector<int> order(ids.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(rng)]);
        }
        int take = std::min<int>(want, static_cast<int>(order.size()));
        for (int k = 0; k < take; ++k) {
            const auto& [identity, samples] = ids[order[k]];
            (void)identity;
            std::uniform_int_distribution<size_t> pick(0, samples.size() - 1);
            size_t first = pick(rng);
            size_t second = pick(rng);
            while (second == first) second = pick(rng);
            rows.push_back(samples[first]);
            rows.push_back(samples[second]);
        }
    }
    MetaBatch batch;
    batch.features = Tensor(static_cast<int>(rows.size()), meta.raw_dim);
    for (size_t r = 0; r < rows.size(); ++r) {
        for (int c = 0; c < meta.raw_dim; ++c) batch.features.at(static_cast<int>(r), c) = meta.features.at(rows[r], c);
        batch.identities.push_back(meta.identities[rows[r]]);
        batch.groups.push_back(meta.groups[rows[r]]);
    }
    return batch;
}

TrainResult run_training(const data::GroupedDataset& train_set, const data::GroupedDataset* meta_set,
                         const TrainerConfig& config) {
    std::vector<int> group_order = train_set.group_ids();
    int group_count = 0;
    for (int gr : group_order) group_count = std::max(group_count, gr + 1);
    config.validate(static_cast<int>(group_order.size()));
    train_set.validate();

    bool meta_active = config.meta_enabled && config.variant != losses::Variant::None;
    if (meta_active && meta_set == nullptr) throw std::invalid_argument("train: meta set required");
    if (meta_active) meta_set->validate();

    int classes = 0;
    for (int id : train_set.identities) classes = std::max(classes, id + 1);

    ModelParams model = init_model(train_set.raw_dim, config.hidden, config.embed_dim, classes, config.scale,
                                   mix(config.seed));
    losses::MarginSchedule schedule =
        config.variant == losses::Variant::None
            ? losses::MarginSchedule::make(losses::Variant::None, group_count, config.anchor_groups, 0.0, 0.0)
            : losses::MarginSchedule::make(config.variant, group_count, config.anchor_groups,
                                           config.anchor_margin, config.margin_init);

    std::mt19937_64 batch_rng(mix(config.seed + 0x1111));
    std::mt19937_64 meta_rng(mix(config.seed + 0x2222));
    MetaIndex meta_index;
    if (meta_active) meta_index = index_meta(*meta_set);

    ModelOptState model_state;
    MarginOptState margin_state;
    TrainTrace trace;
    trace.group_order = group_order;

    std::uniform_int_distribution<int> sample_pick(0, train_set.size() - 1);
    int per_group = config.batch_size / std::max<size_t>(group_order.size(), 1);

    for (int t = 0; t < config.iterations; ++t) {
      try {
        double alpha_t = config.model_lr(t);
        double beta_t = config.margin_lr(t);

        // train mini-batch, uniform over the biased training set
        std::vector<int> batch(config.batch_size);
        for (int& b : batch) b = sample_pick(batch_rng);
        Tensor bx(config.batch_size, train_set.raw_dim);
        std::vector<int> by(config.batch_size), bg(config.batch_size);
        for (int i = 0; i < config.batch_size; ++i) {
            for (int c = 0; c < train_set.raw_dim; ++c) bx.at(i, c) = train_set.features.at(batch[i], c);
            by[i] = train_set.identities[batch[i]];
            bg[i] = train_set.groups[batch[i]];
        }

        Graph g;
        ModelLeaves leaves = make_leaves(g, model);
        std::map<int, NodeRef> margin_nodes;
        for (const auto& [gr, value] : schedule.margins) margin_nodes[gr] = g.parameter(Tensor::scalar(value));

        NodeRef emb = model_forward(g, leaves.nodes, static_cast<int>(model.encoder.size()), g.constant(bx));
        NodeRef train_loss = adaptive_margin_loss(g, emb, by, bg, leaves.nodes.at("head.W"),
                                                  model.head.scale, schedule, margin_nodes);

        TraceRow row;
        row.iteration = t;
        row.lr_model = alpha_t;
        row.lr_margin = beta_t;
        row.train_loss = g.evaluate(train_loss).value();
        row.meta_loss = std::nan("");
        if (!std::isfinite(row.train_loss))
            throw TrainingAborted("train: non-finite loss at iteration " + std::to_string(t), t, trace);

        if (meta_active) {
            auto w_hat = virtual_step(g, leaves.params, train_loss, alpha_t);
            bool done = false;
            for (int attempt = 0; attempt < 2 && !done; ++attempt) {
                MetaBatch mb = sample_meta_batch(*meta_set, meta_index, per_group, meta_rng);
                try {
                    MarginStepOutcome outcome =
                        margin_step(g, w_hat, static_cast<int>(model.encoder.size()), mb.features,
                                    mb.identities, mb.groups, margin_nodes, schedule, margin_state,
                                    config.meta, beta_t, config.margin_momentum);
                    row.meta_loss = outcome.meta_loss;
                    row.skewness = outcome.skewness;
                    done = true;
                } catch (const losses::InsufficientMetaTriplets&) {
                    // one resample, then skip this iteration's margin update
                }
            }
            row.margin_update_skipped = !done;
            // margin leaves take the updated values for the actual model step
            for (const auto& [gr, node] : margin_nodes)
                g.set_value(node, Tensor::scalar(schedule.margins.at(gr)));
        }

        auto grads = g.gradient(train_loss, leaves.params, /*differentiable=*/false);
        std::map<std::string, Tensor> grad_values;
        for (const auto& [name, node] : grads) grad_values[name] = g.evaluate(node);
        model_step(model, grad_values, model_state, alpha_t, config.model_momentum, config.weight_decay);

        for (int gr : group_order) row.margins[gr] = schedule.margin_for(gr);
        trace.rows.push_back(std::move(row));
      } catch (const ad::EvalError& e) {
        throw TrainingAborted(std::string(e.what()) + " at iteration " + std::to_string(t), t, trace);
      }
    }

    return {std::move(model), std::move(schedule), std::move(trace)};
}

}  // namespace

TrainResult train(const data::GroupedDataset& train_set, const data::GroupedDataset& meta_set,
                  const TrainerConfig& config) {
    return run_training(train_set, &meta_set, config);
}

TrainResult train_baseline(const data::GroupedDataset& train_set, const TrainerConfig& config) {
    TrainerConfig fixed = config;
    fixed.meta_enabled = false;
    return run_training(train_set, nullptr, fixed);
}

}  // namespace mbn::train
