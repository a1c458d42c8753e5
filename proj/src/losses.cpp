#include "mbn/losses.hpp"

#include <algorithm>
#include <cmath>

namespace mbn::losses {

using ad::Graph;
using ad::NodeRef;

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Arc: return "arc";
        case Variant::Cos: return "cos";
        case Variant::None: return "none";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "arc") return Variant::Arc;
    if (name == "cos") return Variant::Cos;
    if (name == "none") return Variant::None;
    throw std::invalid_argument("unknown loss variant: " + name);
}

MarginSchedule MarginSchedule::make(Variant v, int group_count, std::set<int> anchors, double anchor_margin,
                                    double init) {
    MarginSchedule s;
    s.variant = v;
    s.group_count = group_count;
    s.anchor_groups = std::move(anchors);
    s.anchor_margin = anchor_margin;
    for (int g = 0; g < group_count; ++g)
        if (!s.is_anchor(g)) s.margins[g] = init;
    s.validate();
    return s;
}

MarginBounds MarginSchedule::bounds() const {
    // arc margins beyond 1 rad leave the monotone region of cos(theta+m)
    switch (variant) {
        case Variant::Arc: return {0.0, 1.0};
        case Variant::Cos: return {0.0, 0.8};
        case Variant::None: return {0.0, 0.0};
    }
    return {0.0, 0.0};
}

double MarginSchedule::margin_for(int group) const {
    if (is_anchor(group)) return anchor_margin;
    auto it = margins.find(group);
    if (it == margins.end()) throw std::invalid_argument("unknown group id " + std::to_string(group));
    return it->second;
}

void MarginSchedule::clamp_margins() {
    MarginBounds b = bounds();
    for (auto& [g, m] : margins) m = std::min(std::max(m, b.lo), b.hi);
}

void MarginSchedule::validate() const {
    if (group_count < 1) throw std::invalid_argument("MarginSchedule: group count must be >= 1");
    if (anchor_groups.empty()) throw std::invalid_argument("MarginSchedule: anchor set must be nonempty");
    if (group_count > 1 && static_cast<int>(anchor_groups.size()) >= group_count)
        throw std::invalid_argument("MarginSchedule: anchors must be a strict subset of groups");
    for (int g : anchor_groups)
        if (g < 0 || g >= group_count) throw std::invalid_argument("MarginSchedule: anchor id out of range");
    for (int g = 0; g < group_count; ++g) {
        if (is_anchor(g)) {
            if (margins.count(g)) throw std::invalid_argument("MarginSchedule: anchor group has a margin entry");
        } else if (!margins.count(g)) {
            throw std::invalid_argument("MarginSchedule: missing margin for group " + std::to_string(g));
        }
    }
    MarginBounds b = bounds();
    for (const auto& [g, m] : margins)
        if (m < b.lo || m > b.hi)
            throw std::invalid_argument("MarginSchedule: margin of group " + std::to_string(g) +
                                        " out of bounds");
}

void ClassifierHead::renormalize_columns() {
    for (int c = 0; c < weights.cols; ++c) {
        double n = 0.0;
        for (int r = 0; r < weights.rows; ++r) n += weights.at(r, c) * weights.at(r, c);
        n = std::sqrt(n);
        if (n == 0.0) throw std::runtime_error("ClassifierHead: zero column cannot be normalized");
        if (std::fabs(n - 1.0) < 1e-12) continue;  // already unit; keep no-op updates exact
        for (int r = 0; r < weights.rows; ++r) weights.at(r, c) /= n;
    }
}

void ClassifierHead::validate() const {
    if (scale <= 0.0) throw std::invalid_argument("ClassifierHead: scale must be > 0");
    for (int c = 0; c < weights.cols; ++c) {
        double n = 0.0;
        for (int r = 0; r < weights.rows; ++r) n += weights.at(r, c) * weights.at(r, c);
        if (std::fabs(std::sqrt(n) - 1.0) > 1e-6)
            throw std::invalid_argument("ClassifierHead: column " + std::to_string(c) + " is not unit-norm");
    }
}

void MetaLossConfig::validate() const {
    if (gamma < 0.0) throw std::invalid_argument("MetaLossConfig: gamma must be >= 0");
    if (tau < 0.0) throw std::invalid_argument("MetaLossConfig: tau must be >= 0");
}

namespace {

void check_embeddings_unit_rows(Graph& g, NodeRef embeddings) {
    const Tensor& e = g.evaluate(embeddings);
    for (int r = 0; r < e.rows; ++r)
        if (std::fabs(row_norm(e, r) - 1.0) > 1e-6)
            throw std::invalid_argument("embedding row " + std::to_string(r) + " is not unit-norm");
}

// Cross entropy over scaled cosine logits where the true-class logit is
// replaced by `margined`. Shared by both adaptive variants and the
// norm-softmax baseline so the zero-margin reduction is structural.
NodeRef cosine_softmax_loss(Graph& g, NodeRef cosines, NodeRef margined, const std::vector<int>& labels,
                            double scale, int classes) {
    NodeRef s = g.scalar(scale);
    NodeRef true_cos = g.select_by_index(cosines, labels);
    NodeRef delta = g.sub(margined, true_cos);
    NodeRef logits = g.add(g.mul(cosines, s), g.scatter_by_index(g.mul(delta, s), labels, classes));
    // constant shift by s keeps every exp argument <= ~0 without changing the loss
    NodeRef z = g.row_sum(g.exp(g.sub(logits, s)));
    NodeRef lse = g.add(g.log(z), s);
    NodeRef per_sample = g.sub(lse, g.mul(margined, s));
    return g.mean(per_sample);
}

}  // namespace

NodeRef adaptive_margin_loss(Graph& g, NodeRef embeddings, const std::vector<int>& labels,
                             const std::vector<int>& groups, NodeRef head_weights, double scale,
                             const MarginSchedule& schedule, const std::map<int, NodeRef>& margin_nodes) {
    const ad::Node& emb = g.node(embeddings.id);
    const ad::Node& hw = g.node(head_weights.id);
    int n = emb.rows, classes = hw.cols;
    if (emb.cols != hw.rows)
        throw std::invalid_argument("adaptive_margin_loss: embedding dim " + std::to_string(emb.cols) +
                                    " vs head dim " + std::to_string(hw.rows));
    if (static_cast<int>(labels.size()) != n || static_cast<int>(groups.size()) != n)
        throw std::invalid_argument("adaptive_margin_loss: need one label and group per sample");
    for (int y : labels)
        if (y < 0 || y >= classes) throw std::invalid_argument("label out of range: " + std::to_string(y));
    for (int gr : groups) {
        if (schedule.is_anchor(gr)) continue;
        if (!schedule.margins.count(gr) || (schedule.variant != Variant::None && !margin_nodes.count(gr)))
            throw std::invalid_argument("unknown group id " + std::to_string(gr));
    }
    check_embeddings_unit_rows(g, embeddings);

    NodeRef cosines = g.matmul(embeddings, head_weights);
    NodeRef true_cos = g.select_by_index(cosines, labels);

    NodeRef margined = true_cos;
    if (schedule.variant != Variant::None) {
        // per-sample margin vector from group indicators and margin nodes
        std::map<int, Tensor> indicator;
        for (int i = 0; i < n; ++i) {
            auto [it, inserted] = indicator.try_emplace(groups[i], Tensor(n, 1, 0.0));
            it->second.at(i, 0) = 1.0;
        }
        NodeRef lambda;
        bool have = false;
        for (const auto& [gr, ind] : indicator) {
            NodeRef m = schedule.is_anchor(gr) ? g.scalar(schedule.anchor_margin) : margin_nodes.at(gr);
            NodeRef term = g.mul(g.constant(ind), m);
            lambda = have ? g.add(lambda, term) : term;
            have = true;
        }
        if (schedule.variant == Variant::Arc)
            margined = g.cos(g.add(g.arccos(true_cos), lambda));
        else
            margined = g.sub(true_cos, lambda);
    }
    return cosine_softmax_loss(g, cosines, margined, labels, scale, classes);
}

NodeRef norm_softmax_loss(Graph& g, NodeRef embeddings, const std::vector<int>& labels, NodeRef head_weights,
                          double scale) {
    MarginSchedule plain;
    plain.variant = Variant::None;
    plain.group_count = 1;
    plain.anchor_groups = {0};
    std::vector<int> groups(labels.size(), 0);
    return adaptive_margin_loss(g, embeddings, labels, groups, head_weights, scale, plain, {});
}

std::vector<Triplet> mine_triplets(const Tensor& embeddings, const std::vector<int>& identities, double tau) {
    int n = embeddings.rows;
    if (static_cast<int>(identities.size()) != n)
        throw std::invalid_argument("mine_triplets: need one identity per row");
    std::vector<Triplet> out;
    for (int i = 0; i < n; ++i) {
        int best_pos = -1, best_neg = -1;
        double dp = -1.0, dn = 0.0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            double d = row_sq_dist(embeddings, i, embeddings, j);
            if (identities[j] == identities[i]) {
                if (best_pos < 0 || d > dp) {
                    dp = d;
                    best_pos = j;
                }
            } else {
                if (best_neg < 0 || d < dn) {
                    dn = d;
                    best_neg = j;
                }
            }
        }
        if (best_pos < 0 || best_neg < 0) continue;
        if (dn - dp <= tau) out.push_back({i, best_pos, best_neg});
    }
    return out;
}

NodeRef sample_generalization(Graph& g, NodeRef anchor_rows, NodeRef positive_rows, NodeRef negative_rows,
                              double gamma) {
    if (gamma < 0.0) throw std::invalid_argument("sample_generalization: gamma must be >= 0");
    NodeRef dpos = g.sub(anchor_rows, positive_rows);
    NodeRef dneg = g.sub(anchor_rows, negative_rows);
    NodeRef dp2 = g.dot_product_rows(dpos, dpos);
    NodeRef dn2 = g.dot_product_rows(dneg, dneg);
    return g.exp(g.sub(dp2, g.mul(g.scalar(gamma), dn2)));
}

MetaSkewness meta_skewness_loss(Graph& g, NodeRef meta_embeddings, const std::vector<int>& identities,
                                const std::vector<int>& groups, const MetaLossConfig& config,
                                const std::set<int>& anchor_groups) {
    config.validate();
    if (anchor_groups.empty()) throw std::invalid_argument("meta_skewness_loss: anchor set must be nonempty");
    const Tensor& emb = g.evaluate(meta_embeddings);
    int n = emb.rows;
    if (static_cast<int>(identities.size()) != n || static_cast<int>(groups.size()) != n)
        throw std::invalid_argument("meta_skewness_loss: need one identity and group per row");
    check_embeddings_unit_rows(g, meta_embeddings);

    std::map<int, std::vector<int>> by_group;
    for (int i = 0; i < n; ++i) by_group[groups[i]].push_back(i);

    // mine per group on detached values; gradients flow only through the
    // selected triplets' distances
    std::map<int, std::vector<Triplet>> mined;
    for (const auto& [gr, idx] : by_group) {
        Tensor sub(static_cast<int>(idx.size()), emb.cols);
        std::vector<int> ids(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            for (int c = 0; c < emb.cols; ++c) sub.at(static_cast<int>(k), c) = emb.at(idx[k], c);
            ids[k] = identities[idx[k]];
        }
        std::vector<Triplet> local = mine_triplets(sub, ids, config.tau);
        std::vector<Triplet>& global = mined[gr];
        for (const Triplet& t : local) global.push_back({idx[t.anchor], idx[t.positive], idx[t.negative]});
        if (global.empty()) throw InsufficientMetaTriplets(gr);
    }

    auto generalization_mean = [&](const std::vector<Triplet>& ts) {
        std::vector<int> a, p, ng;
        for (const Triplet& t : ts) {
            a.push_back(t.anchor);
            p.push_back(t.positive);
            ng.push_back(t.negative);
        }
        NodeRef l = sample_generalization(g, g.gather_rows(meta_embeddings, a), g.gather_rows(meta_embeddings, p),
                                          g.gather_rows(meta_embeddings, ng), config.gamma);
        return g.mean(l);
    };

    // anchor mean pools all anchor groups' triplets
    std::vector<Triplet> anchor_pool;
    for (int ag : anchor_groups) {
        auto it = mined.find(ag);
        if (it == mined.end()) throw InsufficientMetaTriplets(ag);
        anchor_pool.insert(anchor_pool.end(), it->second.begin(), it->second.end());
    }
    NodeRef anchor_mean = generalization_mean(anchor_pool);
    double anchor_mean_value = g.evaluate(anchor_mean).value();

    MetaSkewness result;
    for (const auto& [gr, ts] : mined) result.triplet_counts[gr] = static_cast<int>(ts.size());

    NodeRef loss;
    bool have = false;
    for (const auto& [gr, ts] : mined) {
        if (anchor_groups.count(gr)) continue;
        NodeRef mean_g = generalization_mean(ts);
        result.signed_skew[gr] = g.evaluate(mean_g).value() - anchor_mean_value;
        NodeRef term = g.abs(g.sub(mean_g, anchor_mean));
        loss = have ? g.add(loss, term) : term;
        have = true;
    }
    if (!have) loss = g.constant(Tensor::scalar(0.0));
    result.loss = loss;
    return result;
}

}  // namespace mbn::losses
