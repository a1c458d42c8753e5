#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mbn/datagen.hpp"
#include "mbn/fairmetrics.hpp"
#include "mbn/trainer.hpp"

using namespace mbn::fair;
using mbn::Tensor;

namespace {

// exhaustive threshold-sweep oracle: tries every observed similarity value,
// slightly below and slightly above, keeping the best accuracy
double sweep_oracle(const std::vector<double>& sims, const std::vector<char>& flags) {
    std::vector<double> candidates;
    for (double s : sims) {
        candidates.push_back(s - 1e-9);
        candidates.push_back(s);
        candidates.push_back(s + 1e-9);
    }
    candidates.push_back(-2.0);
    candidates.push_back(2.0);
    double best = 0.0;
    for (double th : candidates) {
        int correct = 0;
        for (size_t i = 0; i < sims.size(); ++i)
            if ((sims[i] >= th) == static_cast<bool>(flags[i])) ++correct;
        best = std::max(best, 100.0 * correct / static_cast<double>(sims.size()));
    }
    return best;
}

}  // namespace

TEST_CASE("verification accuracy basics") {
    // perfectly separated
    auto r = verification_accuracy({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
    CHECK(r.accuracy_pct == 100.0);
    CHECK(r.threshold > 0.2);
    CHECK(r.threshold < 0.8);

    // identical scores, balanced flags: one-sided prediction, 50%
    auto r2 = verification_accuracy({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
    CHECK(r2.accuracy_pct == 50.0);

    // one inversion
    auto r3 = verification_accuracy({0.9, 0.4, 0.8, 0.1}, {1, 0, 0, 1});
    CHECK(r3.accuracy_pct == sweep_oracle({0.9, 0.4, 0.8, 0.1}, {1, 0, 0, 1}));

    CHECK_THROWS_AS(verification_accuracy({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(verification_accuracy({0.5, 0.6}, {1, 1}), std::invalid_argument);
}

TEST_CASE("verification accuracy equals the exhaustive sweep oracle on random fixtures") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(rng() % 49);
        std::vector<double> sims(n);
        std::vector<char> flags(n);
        bool pos = false, neg = false;
        for (int i = 0; i < n; ++i) {
            sims[i] = u(rng);
            flags[i] = coin(rng) ? 1 : 0;
            (flags[i] ? pos : neg) = true;
        }
        if (!pos) flags[0] = 1;
        if (!neg) flags[n - 1] = 0;
        auto r = verification_accuracy(sims, flags);
        CHECK(r.accuracy_pct == doctest::Approx(sweep_oracle(sims, flags)).epsilon(1e-12));
    }
}

TEST_CASE("roc points: endpoints, monotonicity, hand case") {
    auto pts = roc_points({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
    CHECK(pts.front().fpr == 0.0);
    CHECK(pts.front().tpr == 0.0);
    CHECK(pts.back().fpr == 1.0);
    CHECK(pts.back().tpr == 1.0);
    bool hits_perfect = false;
    for (const auto& p : pts) hits_perfect |= (p.fpr == 0.0 && p.tpr == 1.0);
    CHECK(hits_perfect);

    // identical scores: diagonal endpoints only
    auto flat = roc_points({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
    REQUIRE(flat.size() == 2);
    CHECK(flat[1].fpr == 1.0);
    CHECK(flat[1].tpr == 1.0);

    // 6-pair hand case, enumerated by hand:
    // sims 0.9+, 0.7-, 0.6+, 0.4+, 0.3-, 0.1-  (P=3, N=3)
    std::vector<double> sims{0.9, 0.7, 0.6, 0.4, 0.3, 0.1};
    std::vector<char> flags{1, 0, 1, 1, 0, 0};
    auto hand = roc_points(sims, flags);
    REQUIRE(hand.size() == 7);
    CHECK(hand[1].tpr == doctest::Approx(1.0 / 3));
    CHECK(hand[1].fpr == 0.0);
    CHECK(hand[2].fpr == doctest::Approx(1.0 / 3));
    CHECK(hand[4].tpr == doctest::Approx(1.0));
    for (size_t i = 1; i < hand.size(); ++i) {
        CHECK(hand[i].fpr >= hand[i - 1].fpr);
        CHECK(hand[i].tpr >= hand[i - 1].tpr);
    }
}

TEST_CASE("fairness summary reproduces printed table rows") {
    // Arcface row
    auto arc = fairness_summary({97.37, 94.55, 95.68, 93.87});
    CHECK(std::fabs(arc.average - 95.37) <= 0.01);
    CHECK(std::fabs(arc.std_dev - 1.53) <= 0.01);
    CHECK(std::fabs(arc.ser - 2.33) <= 0.01);

    // MBN(arc) row
    auto mbn = fairness_summary({96.87, 95.63, 96.20, 95.00});
    CHECK(std::fabs(mbn.average - 95.93) <= 0.01);
    CHECK(std::fabs(mbn.std_dev - 0.80) <= 0.01);
    CHECK(std::fabs(mbn.ser - 1.59) <= 0.01);

    // equal accuracies
    auto eq = fairness_summary({95.0, 95.0, 95.0, 95.0});
    CHECK(eq.std_dev == 0.0);
    CHECK(eq.ser == 1.0);

    // degenerate SER marker
    auto deg = fairness_summary({100.0, 95.0});
    CHECK(deg.ser_degenerate);

    CHECK_THROWS_AS(fairness_summary({95.0}), std::invalid_argument);

    // permutation invariance
    auto p1 = fairness_summary({97.37, 94.55, 95.68, 93.87});
    auto p2 = fairness_summary({93.87, 95.68, 94.55, 97.37});
    CHECK(p1.std_dev == doctest::Approx(p2.std_dev).epsilon(1e-15));
    CHECK(p1.ser == doctest::Approx(p2.ser).epsilon(1e-15));
}

TEST_CASE("feature scatter on constructed configurations") {
    // features equal their centers; centers at pairwise cosine 0.5
    Tensor emb(2, 3);
    emb.at(0, 0) = 1.0;
    emb.at(1, 0) = 0.5;
    emb.at(1, 1) = std::sqrt(0.75);
    auto r = feature_scatter(emb, {0, 1});
    CHECK(r.intra == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.inter == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.ratio == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(!r.guarded);

    // orthogonal centers trigger the denominator guard
    Tensor orth(2, 2);
    orth.at(0, 0) = 1.0;
    orth.at(1, 1) = 1.0;
    auto g = feature_scatter(orth, {0, 1});
    CHECK(g.guarded);

    CHECK_THROWS_AS(feature_scatter(emb, {0, 0}), std::invalid_argument);
}

TEST_CASE("feature scatter is invariant under orthogonal transforms") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    int n = 12, d = 4;
    Tensor emb(n, d);
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) {
        ids[i] = i % 3;
        double norm = 0.0;
        for (int c = 0; c < d; ++c) {
            emb.at(i, c) = gauss(rng) + (ids[i] == c ? 2.0 : 0.0);
            norm += emb.at(i, c) * emb.at(i, c);
        }
        norm = std::sqrt(norm);
        for (int c = 0; c < d; ++c) emb.at(i, c) /= norm;
    }
    // random rotation via Gram-Schmidt on a Gaussian matrix
    std::vector<std::vector<double>> q(d, std::vector<double>(d));
    for (auto& row : q)
        for (auto& v : row) v = gauss(rng);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += q[i][c] * q[j][c];
            for (int c = 0; c < d; ++c) q[i][c] -= dot * q[j][c];
        }
        double norm = 0.0;
        for (int c = 0; c < d; ++c) norm += q[i][c] * q[i][c];
        norm = std::sqrt(norm);
        for (int c = 0; c < d; ++c) q[i][c] /= norm;
    }
    Tensor rotated(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += emb.at(i, c) * q[j][c];
            rotated.at(i, j) = s;
        }
    auto a = feature_scatter(emb, ids);
    auto b = feature_scatter(rotated, ids);
    CHECK(a.ratio == doctest::Approx(b.ratio).epsilon(1e-9));
}

TEST_CASE("build_pairs: budgets, difficulty, determinism") {
    using namespace mbn::data;
    GroupedDataset test = generate({{0, 6, 4, 0.3}, {1, 6, 4, 0.5}}, 16, 42, Split::Test);
    // identity embeddings: reuse raw features (unit rows)
    const Tensor& emb = test.features;

    PairSet ps = build_pairs(test, emb, 20, 0.5, 9);
    for (const auto& [gr, pairs] : ps.by_group) {
        int pos = 0, neg = 0;
        for (const Pair& p : pairs) (p.same ? pos : neg) += 1;
        CHECK(pos == 10);
        CHECK(neg == 10);
    }

    PairSet again = build_pairs(test, emb, 20, 0.5, 9);
    for (const auto& [gr, pairs] : ps.by_group) {
        REQUIRE(again.by_group.at(gr).size() == pairs.size());
        for (size_t i = 0; i < pairs.size(); ++i) {
            CHECK(pairs[i].a == again.by_group.at(gr)[i].a);
            CHECK(pairs[i].b == again.by_group.at(gr)[i].b);
        }
    }

    // difficulty 0 still balanced and deterministic
    PairSet easy = build_pairs(test, emb, 20, 0.0, 9);
    CHECK(easy.by_group.at(0).size() == 20);

    // 2 identities x 2 samples: exactly 2 positive candidates; budget 4
    GroupedDataset tiny = generate({{0, 2, 2, 0.3}}, 16, 1, Split::Test);
    PairSet small = build_pairs(tiny, tiny.features, 4, 0.5, 3);
    int pos = 0, neg = 0;
    for (const Pair& p : small.by_group.at(0)) (p.same ? pos : neg) += 1;
    CHECK(pos == 2);
    CHECK(neg == 2);

    // single-sample identities leave no positive pair
    GroupedDataset lone = generate({{0, 4, 1, 0.3}}, 16, 1, Split::Test);
    CHECK_THROWS_AS(build_pairs(lone, lone.features, 4, 0.5, 3), std::invalid_argument);
}

TEST_CASE("evaluate: reports are internally consistent and deterministic") {
    using namespace mbn::data;
    using namespace mbn::train;
    GroupedDataset test = generate({{0, 5, 6, 0.25}, {1, 5, 6, 0.45}}, 16, 11, Split::Test);
    ModelParams model = init_model(16, {12}, 8, 10, 60.0, 4);

    EvalConfig cfg;
    cfg.pair_budget = 30;
    cfg.difficulty_fraction = 0.5;
    cfg.seed = 2;
    FairnessReport r1 = evaluate(model, test, cfg);
    FairnessReport r2 = evaluate(model, test, cfg);
    CHECK(r1.to_text() == r2.to_text());
    CHECK(r1.roc_csv() == r2.roc_csv());

    double mean = 0.0;
    for (const auto& [gr, rep] : r1.groups) mean += rep.accuracy_pct;
    mean /= static_cast<double>(r1.groups.size());
    CHECK(std::fabs(mean - r1.summary.average) <= 1e-9);
}

TEST_CASE("evaluate: near-perfect data flags degenerate SER") {
    using namespace mbn::data;
    using namespace mbn::train;
    // almost-zero noise: classes collapse to points, any reasonable model separates them
    GroupedDataset test = generate({{0, 4, 5, 1e-6}, {1, 4, 5, 1e-6}}, 16, 13, Split::Test);
    ModelParams model = init_model(16, {}, 8, 8, 60.0, 21);
    EvalConfig cfg;
    cfg.pair_budget = 16;
    cfg.difficulty_fraction = 0.5;
    cfg.seed = 3;
    FairnessReport r = evaluate(model, test, cfg);
    CHECK(r.summary.ser_degenerate);
    CHECK(r.to_text().find("ser degenerate") != std::string::npos);
}
