#include <cmath>
#include <random>

#include "doctest.h"
#include "mbn/autodiff.hpp"
#include "mbn/losses.hpp"

using mbn::Tensor;
using namespace mbn::ad;
using namespace mbn::losses;

namespace {

Tensor random_unit_rows(std::mt19937_64& rng, int n, int d) {
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t(n, d);
    for (int r = 0; r < n; ++r) {
        double norm = 0.0;
        for (int c = 0; c < d; ++c) {
            t.at(r, c) = g(rng);
            norm += t.at(r, c) * t.at(r, c);
        }
        norm = std::sqrt(norm);
        for (int c = 0; c < d; ++c) t.at(r, c) /= norm;
    }
    return t;
}

Tensor unit_columns(const Tensor& rows) {  // transpose of unit rows
    Tensor t(rows.cols, rows.rows);
    for (int r = 0; r < rows.rows; ++r)
        for (int c = 0; c < rows.cols; ++c) t.at(c, r) = rows.at(r, c);
    return t;
}

// training-like batch: embeddings drawn near their class column so the
// true-class angle stays in the monotone region
struct Batch {
    Tensor raw;  // n x d, pre-normalization
    std::vector<int> labels;
    std::vector<int> groups;
    Tensor head;  // d x c unit columns
};

Batch make_batch(std::mt19937_64& rng, int n, int d, int classes, int group_count) {
    Batch b;
    b.head = unit_columns(random_unit_rows(rng, classes, d));
    std::uniform_int_distribution<int> lab(0, classes - 1), grp(0, group_count - 1);
    std::normal_distribution<double> g(0.0, 0.35);
    b.raw = Tensor(n, d);
    for (int i = 0; i < n; ++i) {
        b.labels.push_back(lab(rng));
        b.groups.push_back(grp(rng));
        for (int c = 0; c < d; ++c) b.raw.at(i, c) = b.head.at(c, b.labels[i]) + g(rng);
    }
    return b;
}

// plain softmax cross-entropy oracle over explicit logits
double softmax_ce(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels) {
    double total = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double mx = logits[i][0];
        for (double v : logits[i]) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : logits[i]) z += std::exp(v - mx);
        total += std::log(z) + mx - logits[i][labels[i]];
    }
    return total / static_cast<double>(logits.size());
}

}  // namespace

TEST_CASE("margin schedule construction and clamping") {
    auto s = MarginSchedule::make(Variant::Arc, 4, {0}, 0.3, 0.3);
    CHECK(s.margin_for(0) == 0.3);
    CHECK(s.margin_for(2) == 0.3);
    CHECK(s.margins.size() == 3);
    s.margins[1] = 5.0;
    s.clamp_margins();
    CHECK(s.margins[1] == 1.0);  // arc bound
    s.margins[1] = -0.2;
    s.clamp_margins();
    CHECK(s.margins[1] == 0.0);

    CHECK_THROWS_AS(MarginSchedule::make(Variant::Arc, 4, {0, 1, 2, 3}, 0.3, 0.3), std::invalid_argument);
    CHECK_THROWS_AS(MarginSchedule::make(Variant::Arc, 4, {}, 0.3, 0.3), std::invalid_argument);
    CHECK_THROWS_AS((void)s.margin_for(17), std::invalid_argument);
}

TEST_CASE("cos variant single-sample closed form") {
    // true-class cosine 0.8, other 0.1, lambda 0.15, s=1
    Graph g;
    auto raw = g.constant(Tensor::row({1.0, 0.0}));
    auto emb = g.l2_normalize_rows(raw);
    Tensor W(2, 2);
    W.at(0, 0) = 0.8;
    W.at(1, 0) = 0.6;
    W.at(0, 1) = 0.1;
    W.at(1, 1) = std::sqrt(1.0 - 0.01);
    auto head = g.constant(W);
    auto sched = MarginSchedule::make(Variant::Cos, 2, {0}, 0.0, 0.15);
    std::map<int, NodeRef> margin_nodes{{1, g.parameter(Tensor::scalar(0.15))}};
    auto loss = adaptive_margin_loss(g, emb, {0}, {1}, head, 1.0, sched, margin_nodes);
    double expected = std::log(std::exp(0.65) + std::exp(0.1)) - 0.65;
    CHECK(g.evaluate(loss).value() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("arc variant: margin strictly increases the loss at fixed weights") {
    Graph g;
    auto emb = g.l2_normalize_rows(g.constant(Tensor::row({1.0, 0.0})));
    Tensor W(2, 2);
    W.at(0, 0) = 0.5;  // theta_y = pi/3
    W.at(1, 0) = std::sqrt(0.75);
    W.at(0, 1) = 0.1;
    W.at(1, 1) = std::sqrt(0.99);
    auto head = g.constant(W);
    auto sched = MarginSchedule::make(Variant::Arc, 2, {0}, 0.0, 0.0);
    auto m = g.parameter(Tensor::scalar(0.0));
    std::map<int, NodeRef> margin_nodes{{1, m}};
    auto loss = adaptive_margin_loss(g, emb, {0}, {1}, head, 1.0, sched, margin_nodes);
    double at0 = g.evaluate(loss).value();
    g.set_value(m, Tensor::scalar(0.3));
    double at03 = g.evaluate(loss).value();
    CHECK(at03 > at0);
}

TEST_CASE("norm softmax: uniform logits give log c") {
    Graph g;
    auto emb = g.l2_normalize_rows(g.constant(Tensor::row({1.0, 0.0, 0.0})));
    Tensor W(3, 5);
    for (int c = 0; c < 5; ++c) W.at(0, c) = 1.0;  // identical unit columns
    auto head = g.constant(W);
    auto loss = norm_softmax_loss(g, emb, {2}, head, 60.0);
    CHECK(g.evaluate(loss).value() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("norm softmax matches scalar oracle on random 3-class batches") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        int n = 6, d = 4, c = 3;
        Tensor emb = random_unit_rows(rng, n, d);
        Tensor W = unit_columns(random_unit_rows(rng, c, d));
        std::vector<int> labels;
        std::uniform_int_distribution<int> lab(0, c - 1);
        for (int i = 0; i < n; ++i) labels.push_back(lab(rng));

        Graph g;
        auto loss = norm_softmax_loss(g, g.constant(emb), labels, g.constant(W), 60.0);

        std::vector<std::vector<double>> logits(n, std::vector<double>(c));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                double cs = 0.0;
                for (int k = 0; k < d; ++k) cs += emb.at(i, k) * W.at(k, j);
                logits[i][j] = 60.0 * cs;
            }
        CHECK(g.evaluate(loss).value() == doctest::Approx(softmax_ce(logits, labels)).epsilon(1e-10));
    }
}

TEST_CASE("reduction identity: zero margins equal norm softmax to 1e-12") {
    std::mt19937_64 rng(23);
    for (auto variant : {Variant::Arc, Variant::Cos}) {
        for (int trial = 0; trial < 6; ++trial) {
            Batch b = make_batch(rng, 12, 6, 5, 4);
            Graph g;
            auto emb = g.l2_normalize_rows(g.constant(b.raw));
            auto head = g.constant(b.head);
            auto sched = MarginSchedule::make(variant, 4, {0}, 0.0, 0.0);
            std::map<int, NodeRef> margin_nodes;
            for (int gr = 1; gr < 4; ++gr) margin_nodes[gr] = g.parameter(Tensor::scalar(0.0));
            auto adaptive = adaptive_margin_loss(g, emb, b.labels, b.groups, head, 60.0, sched, margin_nodes);
            auto baseline = norm_softmax_loss(g, emb, b.labels, head, 60.0);
            CHECK(std::fabs(g.evaluate(adaptive).value() - g.evaluate(baseline).value()) <= 1e-12);
        }
    }
}

TEST_CASE("monotonicity: raising one margin never lowers the batch loss") {
    std::mt19937_64 rng(31);
    for (auto variant : {Variant::Arc, Variant::Cos}) {
        for (int trial = 0; trial < 8; ++trial) {
            Batch b = make_batch(rng, 16, 8, 6, 4);
            Graph g;
            auto emb = g.l2_normalize_rows(g.constant(b.raw));
            auto head = g.constant(b.head);
            double init = variant == Variant::Arc ? 0.3 : 0.15;
            auto sched = MarginSchedule::make(variant, 4, {0}, init, init);
            std::map<int, NodeRef> margin_nodes;
            for (int gr = 1; gr < 4; ++gr) margin_nodes[gr] = g.parameter(Tensor::scalar(init));
            auto loss = adaptive_margin_loss(g, emb, b.labels, b.groups, head, 60.0, sched, margin_nodes);
            double before = g.evaluate(loss).value();
            std::uniform_int_distribution<int> pick(1, 3);
            int gr = pick(rng);
            g.set_value(margin_nodes[gr], Tensor::scalar(init + 0.2));
            double after = g.evaluate(loss).value();
            bool group_in_batch = false;
            for (int x : b.groups) group_in_batch |= (x == gr);
            if (group_in_batch)
                CHECK(after >= before);
            else
                CHECK(after == doctest::Approx(before).epsilon(1e-14));
        }
    }
}

TEST_CASE("margin gradient is zero for groups absent from the batch") {
    std::mt19937_64 rng(41);
    Batch b = make_batch(rng, 10, 6, 4, 4);
    for (auto& gr : b.groups)
        if (gr == 2) gr = 1;  // remove group 2 from the batch
    Graph g;
    auto emb = g.l2_normalize_rows(g.constant(b.raw));
    auto head = g.constant(b.head);
    auto sched = MarginSchedule::make(Variant::Arc, 4, {0}, 0.3, 0.3);
    ParameterSet ps;
    std::map<int, NodeRef> margin_nodes;
    for (int gr = 1; gr < 4; ++gr) {
        margin_nodes[gr] = g.parameter(Tensor::scalar(0.3));
        ps.add("m" + std::to_string(gr), margin_nodes[gr]);
    }
    auto loss = adaptive_margin_loss(g, emb, b.labels, b.groups, head, 60.0, sched, margin_nodes);
    auto grads = g.gradient(loss, ps, false);
    CHECK(g.evaluate(grads.at("m2")).value() == 0.0);
    CHECK(g.evaluate(grads.at("m1")).value() != 0.0);
}

TEST_CASE("loss gradients match finite differences (embeddings, W, margins)") {
    std::mt19937_64 rng(53);
    for (auto variant : {Variant::Arc, Variant::Cos}) {
        Batch b = make_batch(rng, 8, 5, 4, 4);
        Graph g;
        auto raw = g.parameter(b.raw);
        auto emb = g.l2_normalize_rows(raw);
        auto head = g.parameter(b.head);
        double init = variant == Variant::Arc ? 0.3 : 0.15;
        auto sched = MarginSchedule::make(variant, 4, {0}, init, init);
        ParameterSet ps;
        ps.add("raw", raw);
        ps.add("W", head);
        std::map<int, NodeRef> margin_nodes;
        for (int gr = 1; gr < 4; ++gr) {
            margin_nodes[gr] = g.parameter(Tensor::scalar(init));
            ps.add("m" + std::to_string(gr), margin_nodes[gr]);
        }
        auto loss = adaptive_margin_loss(g, emb, b.labels, b.groups, head, 60.0, sched, margin_nodes);
        auto grads = g.gradient(loss, ps, false);
        for (const auto& [name, gnode] : grads) {
            Tensor analytic = g.evaluate(gnode);
            NodeRef leaf = ps.at(name);
            Tensor base = g.node(leaf.id).value;
            auto f = [&](const Tensor& x) {
                g.set_value(leaf, x);
                return g.evaluate(loss).value();
            };
            Tensor numeric = mbn::ad::finite_difference_gradient(f, base, 1e-5);
            g.set_value(leaf, base);
            for (int i = 0; i < analytic.size(); ++i) {
                INFO("variant " << std::string(variant_name(variant)) << " leaf " << name << " entry " << i);
                double abs_err = std::fabs(analytic.data[i] - numeric.data[i]);
                double rel_err = abs_err / std::max(std::fabs(analytic.data[i]), 1e-300);
                CHECK((abs_err < 1e-8 || rel_err < 1e-5));
            }
        }
    }
}

TEST_CASE("mine_triplets hand cases") {
    // anchor 0: positives at squared distance 0.1 and 0.4, negatives at 0.3 and 0.5
    Tensor e(5, 1);
    e.at(0, 0) = 0.0;
    e.at(1, 0) = std::sqrt(0.1);
    e.at(2, 0) = std::sqrt(0.4);
    e.at(3, 0) = -std::sqrt(0.3);
    e.at(4, 0) = -std::sqrt(0.5);
    std::vector<int> ids{0, 0, 0, 1, 1};
    auto triplets = mine_triplets(e, ids, 0.2);
    REQUIRE(!triplets.empty());
    Triplet first = triplets.front();
    CHECK(first.anchor == 0);
    CHECK(first.positive == 2);  // d_p^2 = 0.4 (hardest positive)
    CHECK(first.negative == 3);  // d_n^2 = 0.3 (hardest negative); 0.3-0.4 <= 0.2 kept

    // clearly separated identities: d_n^2 - d_p^2 > tau everywhere -> empty
    Tensor sep(4, 1);
    sep.at(0, 0) = 0.0;
    sep.at(1, 0) = 0.1;
    sep.at(2, 0) = 10.0;
    sep.at(3, 0) = 10.1;
    CHECK(mine_triplets(sep, {0, 0, 1, 1}, 0.2).empty());

    // single identity: no negatives -> no triplets
    CHECK(mine_triplets(sep, {0, 0, 0, 0}, 0.2).empty());
}

TEST_CASE("mine_triplets breaks ties toward the lowest index") {
    Tensor e(5, 1);
    e.at(0, 0) = 0.0;
    e.at(1, 0) = 1.0;
    e.at(2, 0) = -1.0;  // same |distance| as row 1
    e.at(3, 0) = 2.0;
    e.at(4, 0) = -2.0;
    auto triplets = mine_triplets(e, {0, 0, 0, 1, 1}, 100.0);
    REQUIRE(!triplets.empty());
    CHECK(triplets.front().anchor == 0);
    CHECK(triplets.front().positive == 1);  // tie between rows 1 and 2 at d^2=1
    CHECK(triplets.front().negative == 3);  // tie between rows 3 and 4 at d^2=4
}

TEST_CASE("sample_generalization values") {
    Graph g;
    // f == f_p, gamma 0 -> exp(0) = 1
    auto a = g.constant(Tensor::row({1.0, 0.0}));
    auto p = g.constant(Tensor::row({1.0, 0.0}));
    auto n = g.constant(Tensor::row({0.0, 1.0}));
    CHECK(g.evaluate(sample_generalization(g, a, p, n, 0.0)).value() == doctest::Approx(1.0));

    // d_p^2 = 0.5, d_n^2 = 0.2, gamma 0.5 -> exp(0.4)
    auto p2 = g.constant(Tensor::row({0.75, std::sqrt(1.0 - 0.75 * 0.75)}));
    auto n2 = g.constant(Tensor::row({0.9, std::sqrt(1.0 - 0.81)}));
    CHECK(g.evaluate(sample_generalization(g, a, p2, n2, 0.5)).value() ==
          doctest::Approx(std::exp(0.4)).epsilon(1e-12));

    // positivity on random inputs
    std::mt19937_64 rng(3);
    auto ra = g.constant(random_unit_rows(rng, 6, 4));
    auto rp = g.constant(random_unit_rows(rng, 6, 4));
    auto rn = g.constant(random_unit_rows(rng, 6, 4));
    const Tensor& l = g.evaluate(sample_generalization(g, ra, rp, rn, 0.5));
    for (double v : l.data) CHECK(v > 0.0);
}

namespace {

// one group on the unit circle: two identities, two samples each, arranged so
// all four mined triplets share the same (d_p^2, d_n^2)
void place_group(Tensor& emb, std::vector<int>& ids, std::vector<int>& groups, int base_row, int group,
                 int id_base, double cos_a) {
    double a = std::acos(cos_a);
    double phis[4] = {0.0, a, M_PI, M_PI + a};
    int local_ids[4] = {0, 0, 1, 1};
    for (int k = 0; k < 4; ++k) {
        emb.at(base_row + k, 2 * group) = std::cos(phis[k]);
        emb.at(base_row + k, 2 * group + 1) = std::sin(phis[k]);
        ids[base_row + k] = id_base + local_ids[k];
        groups[base_row + k] = group;
    }
}

}  // namespace

TEST_CASE("meta skewness loss: direct arithmetic on constructed groups") {
    // group means engineered to 1.2 (anchor), 1.5, 1.1, 1.9 with gamma 0.5:
    // l = exp(1 - 3 cos a), so cos a = (1 - ln target) / 3
    double targets[4] = {1.2, 1.5, 1.1, 1.9};
    Tensor emb(16, 8);
    std::vector<int> ids(16), groups(16);
    for (int gr = 0; gr < 4; ++gr) {
        double cos_a = (1.0 - std::log(targets[gr])) / 3.0;
        place_group(emb, ids, groups, 4 * gr, gr, 2 * gr, cos_a);
    }
    Graph g;
    auto e = g.constant(emb);
    MetaLossConfig cfg;
    cfg.gamma = 0.5;
    cfg.tau = 4.0;  // keep every mined triplet
    auto ms = meta_skewness_loss(g, e, ids, groups, cfg, {0});
    CHECK(g.evaluate(ms.loss).value() == doctest::Approx(0.3 + 0.1 + 0.7).epsilon(1e-9));
    CHECK(ms.signed_skew.at(1) == doctest::Approx(0.3).epsilon(1e-9));
    CHECK(ms.signed_skew.at(2) == doctest::Approx(-0.1).epsilon(1e-9));
    CHECK(ms.signed_skew.at(3) == doctest::Approx(0.7).epsilon(1e-9));
    CHECK(ms.triplet_counts.at(0) == 4);
}

TEST_CASE("meta skewness loss: identical distance multisets give zero bias") {
    Tensor emb(8, 4);
    std::vector<int> ids(8), groups(8);
    place_group(emb, ids, groups, 0, 0, 0, 0.25);
    place_group(emb, ids, groups, 4, 1, 2, 0.25);
    Graph g;
    MetaLossConfig cfg;
    cfg.tau = 4.0;
    auto ms = meta_skewness_loss(g, g.constant(emb), ids, groups, cfg, {0});
    CHECK(g.evaluate(ms.loss).value() == 0.0);
    CHECK(ms.signed_skew.at(1) == 0.0);
}

TEST_CASE("meta skewness loss: only anchors present gives zero loss") {
    Tensor emb(4, 2);
    std::vector<int> ids(4), groups(4);
    place_group(emb, ids, groups, 0, 0, 0, 0.25);
    Graph g;
    MetaLossConfig cfg;
    cfg.tau = 4.0;
    auto ms = meta_skewness_loss(g, g.constant(emb), ids, groups, cfg, {0});
    CHECK(g.evaluate(ms.loss).value() == 0.0);
    CHECK(ms.signed_skew.empty());
}

TEST_CASE("meta skewness loss: starving group is reported by id") {
    Tensor emb(8, 4);
    std::vector<int> ids(8), groups(8);
    place_group(emb, ids, groups, 0, 0, 0, 0.25);
    place_group(emb, ids, groups, 4, 1, 2, 0.25);
    for (int k = 4; k < 8; ++k) ids[k] = 2;  // group 1 collapses to one identity
    Graph g;
    MetaLossConfig cfg;
    cfg.tau = 4.0;
    try {
        meta_skewness_loss(g, g.constant(emb), ids, groups, cfg, {0});
        FAIL("expected InsufficientMetaTriplets");
    } catch (const InsufficientMetaTriplets& e) {
        CHECK(e.group == 1);
    }
}

TEST_CASE("meta skewness loss: invariant under within-group permutation, nonnegative") {
    std::mt19937_64 rng(67);
    for (int trial = 0; trial < 5; ++trial) {
        // two identities x three samples per group, random placements
        int per_group = 6, k = 3, d = 6;
        Tensor emb(per_group * k, d);
        std::vector<int> ids(per_group * k), groups(per_group * k);
        Tensor pts = random_unit_rows(rng, per_group * k, d);
        for (int gr = 0; gr < k; ++gr)
            for (int j = 0; j < per_group; ++j) {
                int r = gr * per_group + j;
                for (int c = 0; c < d; ++c) emb.at(r, c) = pts.at(r, c);
                ids[r] = gr * 2 + (j < 3 ? 0 : 1);
                groups[r] = gr;
            }
        Graph g;
        MetaLossConfig cfg;
        cfg.tau = 8.0;
        auto ms = meta_skewness_loss(g, g.constant(emb), ids, groups, cfg, {0});
        double base = g.evaluate(ms.loss).value();
        CHECK(base >= 0.0);

        // permute rows within each group
        std::vector<int> perm(per_group * k);
        for (int gr = 0; gr < k; ++gr) {
            std::vector<int> local{0, 1, 2, 3, 4, 5};
            std::shuffle(local.begin(), local.end(), rng);
            for (int j = 0; j < per_group; ++j) perm[gr * per_group + j] = gr * per_group + local[j];
        }
        Tensor emb2(per_group * k, d);
        std::vector<int> ids2(per_group * k), groups2(per_group * k);
        for (int r = 0; r < per_group * k; ++r) {
            for (int c = 0; c < d; ++c) emb2.at(r, c) = emb.at(perm[r], c);
            ids2[r] = ids[perm[r]];
            groups2[r] = groups[perm[r]];
        }
        Graph g2;
        auto ms2 = meta_skewness_loss(g2, g2.constant(emb2), ids2, groups2, cfg, {0});
        CHECK(std::fabs(g2.evaluate(ms2.loss).value() - base) <= 1e-12);
    }
}

TEST_CASE("adaptive loss input validation") {
    std::mt19937_64 rng(71);
    Batch b = make_batch(rng, 4, 5, 3, 2);
    Graph g;
    auto emb = g.l2_normalize_rows(g.constant(b.raw));
    auto head = g.constant(b.head);
    auto sched = MarginSchedule::make(Variant::Arc, 2, {0}, 0.3, 0.3);
    std::map<int, NodeRef> mn{{1, g.parameter(Tensor::scalar(0.3))}};

    auto bad_labels = b.labels;
    bad_labels[0] = 99;
    CHECK_THROWS_AS(adaptive_margin_loss(g, emb, bad_labels, b.groups, head, 60.0, sched, mn),
                    std::invalid_argument);

    auto bad_groups = b.groups;
    bad_groups[0] = 7;
    CHECK_THROWS_AS(adaptive_margin_loss(g, emb, b.labels, bad_groups, head, 60.0, sched, mn),
                    std::invalid_argument);

    auto non_unit = g.constant(b.raw);  // skips normalization
    CHECK_THROWS_AS(adaptive_margin_loss(g, non_unit, b.labels, b.groups, head, 60.0, sched, mn),
                    std::invalid_argument);
}
