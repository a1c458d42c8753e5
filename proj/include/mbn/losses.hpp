#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbn/autodiff.hpp"
#include "mbn/tensor.hpp"

namespace mbn::losses {

enum class Variant { Arc, Cos, None };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct MarginBounds {
    double lo = 0.0;
    double hi = 0.0;
};

// Anchor groups keep the fixed margin; every other group carries a learnable
// margin, clamped to the variant's bounds after each update.
struct MarginSchedule {
    Variant variant = Variant::None;
    int group_count = 0;
    std::set<int> anchor_groups;
    double anchor_margin = 0.0;
    std::map<int, double> margins;  // non-anchor group id -> current value

    static MarginSchedule make(Variant v, int group_count, std::set<int> anchors, double anchor_margin,
                               double init);

    MarginBounds bounds() const;
    bool is_anchor(int group) const { return anchor_groups.count(group) > 0; }
    double margin_for(int group) const;
    void clamp_margins();
    void validate() const;
};

struct ClassifierHead {
    Tensor weights;  // d x c, columns L2-normalized
    double scale = 60.0;

    int dim() const { return weights.rows; }
    int classes() const { return weights.cols; }
    void renormalize_columns();
    void validate() const;
};

struct MetaLossConfig {
    double gamma = 0.5;  // trade-off between positive- and negative-pair distance
    double tau = 0.2;    // online triplet selection threshold
    void validate() const;
};

// Adaptive-margin cross entropy over cosine logits (arc: angle offset on the
// true class; cos: cosine offset). margin_nodes supplies one 1x1 graph node
// per non-anchor group so the loss stays differentiable in the margins.
ad::NodeRef adaptive_margin_loss(ad::Graph& g, ad::NodeRef embeddings, const std::vector<int>& labels,
                                 const std::vector<int>& groups, ad::NodeRef head_weights, double scale,
                                 const MarginSchedule& schedule,
                                 const std::map<int, ad::NodeRef>& margin_nodes);

ad::NodeRef norm_softmax_loss(ad::Graph& g, ad::NodeRef embeddings, const std::vector<int>& labels,
                              ad::NodeRef head_weights, double scale);

struct Triplet {
    int anchor = -1;
    int positive = -1;
    int negative = -1;
    bool operator==(const Triplet&) const = default;
};

// Online hard mining over one group's sub-batch: per anchor, the positive at
// maximal squared distance and the negative at minimal one; keeps triplets
// with d_n^2 - d_p^2 <= tau. Ties break toward the lowest sample index.
std::vector<Triplet> mine_triplets(const Tensor& embeddings, const std::vector<int>& identities, double tau);

// exp(|f-f_p|^2 - gamma * |f-f_n|^2) per row; inputs are row-aligned
// anchor/positive/negative embedding matrices.
ad::NodeRef sample_generalization(ad::Graph& g, ad::NodeRef anchor_rows, ad::NodeRef positive_rows,
                                  ad::NodeRef negative_rows, double gamma);

class InsufficientMetaTriplets : public std::runtime_error {
public:
    explicit InsufficientMetaTriplets(int g)
        : std::runtime_error("insufficient meta triplets in group " + std::to_string(g)), group(g) {}
    int group;
};

struct MetaSkewness {
    ad::NodeRef loss;                   // sum over non-anchor groups of |mean l^g - mean l^anchor|
    std::map<int, double> signed_skew;  // non-anchor group -> mean l^g - mean l^anchor
    std::map<int, int> triplet_counts;  // group -> surviving triplet count
};

MetaSkewness meta_skewness_loss(ad::Graph& g, ad::NodeRef meta_embeddings, const std::vector<int>& identities,
                                const std::vector<int>& groups, const MetaLossConfig& config,
                                const std::set<int>& anchor_groups);

}  // namespace mbn::losses
