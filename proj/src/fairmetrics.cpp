#include "mbn/fairmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mbn::fair {

namespace {

uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e9b5ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void format_double(std::ostringstream& out, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
}

// take `count` entries from `candidates`: the first `hard` (already sorted
// hardest-first), then a uniform draw from the remainder
std::vector<int> pick_with_difficulty(const std::vector<int>& order, int count, double fraction,
                                      std::mt19937_64& rng) {
    int hard = std::min<int>(count, static_cast<int>(std::llround(fraction * count)));
    std::vector<int> chosen(order.begin(), order.begin() + hard);
    std::vector<int> rest(order.begin() + hard, order.end());
    for (int need = count - hard; need > 0; --need) {
        std::uniform_int_distribution<size_t> pick(0, rest.size() - 1);
        size_t at = pick(rng);
        chosen.push_back(rest[at]);
        rest.erase(rest.begin() + static_cast<long>(at));
    }
    return chosen;
}

}  // namespace

void PairSet::validate(const std::vector<int>& groups) const {
    for (const auto& [gr, pairs] : by_group) {
        bool pos = false, neg = false;
        std::set<std::pair<int, int>> seen;
        for (const Pair& p : pairs) {
            if (groups[p.a] != gr || groups[p.b] != gr)
                throw std::invalid_argument("PairSet: pair members must share group " + std::to_string(gr));
            auto key = std::minmax(p.a, p.b);
            if (!seen.insert({key.first, key.second}).second)
                throw std::invalid_argument("PairSet: repeated pair in group " + std::to_string(gr));
            (p.same ? pos : neg) = true;
        }
        if (!pos || !neg)
            throw std::invalid_argument("PairSet: group " + std::to_string(gr) +
                                        " needs at least one positive and one negative pair");
    }
}

PairSet build_pairs(const data::GroupedDataset& test, const Tensor& embeddings, int budget_per_group,
                    double difficulty_fraction, uint64_t seed) {
    if (budget_per_group < 2) throw std::invalid_argument("build_pairs: budget must be >= 2 per group");
    if (difficulty_fraction < 0.0 || difficulty_fraction > 1.0)
        throw std::invalid_argument("build_pairs: difficulty fraction must lie in [0, 1]");
    if (embeddings.rows != test.size()) throw std::invalid_argument("build_pairs: one embedding row per sample");

    PairSet out;
    auto by_group = test.indices_by_group();
    for (const auto& [gr, rows] : by_group) {
        std::vector<Pair> positives, negatives;
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = i + 1; j < rows.size(); ++j) {
                bool same = test.identities[rows[i]] == test.identities[rows[j]];
                (same ? positives : negatives).push_back({rows[i], rows[j], same});
            }
        if (positives.empty())
            throw std::invalid_argument("build_pairs: group " + std::to_string(gr) + " has no positive pair");
        if (negatives.empty())
            throw std::invalid_argument("build_pairs: group " + std::to_string(gr) + " has no negative pair");

        auto similarity = [&](const Pair& p) { return row_dot(embeddings, p.a, embeddings, p.b); };
        // hardest positives: lowest similarity; hardest negatives: highest
        std::vector<int> pos_order(positives.size()), neg_order(negatives.size());
        for (size_t i = 0; i < pos_order.size(); ++i) pos_order[i] = static_cast<int>(i);
        for (size_t i = 0; i < neg_order.size(); ++i) neg_order[i] = static_cast<int>(i);
        std::stable_sort(pos_order.begin(), pos_order.end(), [&](int a, int b) {
            return similarity(positives[a]) < similarity(positives[b]);
        });
        std::stable_sort(neg_order.begin(), neg_order.end(), [&](int a, int b) {
            return similarity(negatives[a]) > similarity(negatives[b]);
        });

        std::mt19937_64 rng(mix(seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(gr) + 1))));
        int n_pos = std::min<int>(budget_per_group / 2, static_cast<int>(positives.size()));
        int n_neg = std::min<int>(budget_per_group / 2, static_cast<int>(negatives.size()));
        std::vector<Pair>& dest = out.by_group[gr];
        for (int ix : pick_with_difficulty(pos_order, n_pos, difficulty_fraction, rng))
            dest.push_back(positives[ix]);
        for (int ix : pick_with_difficulty(neg_order, n_neg, difficulty_fraction, rng))
            dest.push_back(negatives[ix]);
    }
    out.validate(test.groups);
    return out;
}

AccuracyResult verification_accuracy(const std::vector<double>& similarities, const std::vector<char>& same_flags) {
    if (similarities.empty() || similarities.size() != same_flags.size())
        throw std::invalid_argument("verification_accuracy: empty or mismatched input");
    bool any_pos = false, any_neg = false;
    for (char f : same_flags) (f ? any_pos : any_neg) = true;
    if (!any_pos || !any_neg)
        throw std::invalid_argument("verification_accuracy: need at least one positive and one negative");

    std::vector<double> distinct = similarities;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<double> thresholds;
    thresholds.push_back(distinct.front() - 1.0);
    for (size_t i = 0; i + 1 < distinct.size(); ++i) thresholds.push_back(0.5 * (distinct[i] + distinct[i + 1]));
    thresholds.push_back(distinct.back() + 1.0);

    AccuracyResult best{-1.0, 0.0};
    for (double th : thresholds) {  // ascending: ties resolve toward the lower threshold
        int correct = 0;
        for (size_t i = 0; i < similarities.size(); ++i) {
            bool predicted_same = similarities[i] >= th;
            if (predicted_same == static_cast<bool>(same_flags[i])) ++correct;
        }
        double acc = 100.0 * correct / static_cast<double>(similarities.size());
        if (acc > best.accuracy_pct) best = {acc, th};
    }
    return best;
}

std::vector<RocPoint> roc_points(const std::vector<double>& similarities, const std::vector<char>& same_flags) {
    if (similarities.empty() || similarities.size() != same_flags.size())
        throw std::invalid_argument("roc_points: empty or mismatched input");
    int total_pos = 0, total_neg = 0;
    for (char f : same_flags) (f ? total_pos : total_neg) += 1;
    if (total_pos == 0 || total_neg == 0)
        throw std::invalid_argument("roc_points: need at least one positive and one negative");

    // descending thresholds; predict same when similarity >= threshold
    std::vector<size_t> order(similarities.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return similarities[a] > similarities[b]; });

    std::vector<RocPoint> points;
    points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    int tp = 0, fp = 0;
    size_t i = 0;
    while (i < order.size()) {
        double th = similarities[order[i]];
        while (i < order.size() && similarities[order[i]] == th) {
            (same_flags[order[i]] ? tp : fp) += 1;
            ++i;
        }
        points.push_back({static_cast<double>(fp) / total_neg, static_cast<double>(tp) / total_pos, th});
    }
    return points;  // last point is (1, 1) by construction
}

FairnessSummary fairness_summary(const std::vector<double>& accuracies_pct) {
    if (accuracies_pct.size() < 2) throw std::invalid_argument("fairness_summary: need >= 2 groups");
    for (double a : accuracies_pct)
        if (a < 0.0 || a > 100.0) throw std::invalid_argument("fairness_summary: accuracy out of [0, 100]");

    FairnessSummary s;
    double k = static_cast<double>(accuracies_pct.size());
    for (double a : accuracies_pct) s.average += a;
    s.average /= k;
    double ss = 0.0;
    for (double a : accuracies_pct) ss += (a - s.average) * (a - s.average);
    s.std_dev = std::sqrt(ss / (k - 1.0));

    double max_err = 0.0, min_err = std::numeric_limits<double>::infinity();
    for (double a : accuracies_pct) {
        double err = 100.0 - a;
        max_err = std::max(max_err, err);
        min_err = std::min(min_err, err);
    }
    if (min_err == 0.0) {
        s.ser_degenerate = true;
        s.ser = std::nan("");
    } else {
        s.ser = max_err / min_err;
    }
    return s;
}

ScatterResult feature_scatter(const Tensor& embeddings, const std::vector<int>& identities) {
    if (static_cast<int>(identities.size()) != embeddings.rows)
        throw std::invalid_argument("feature_scatter: one identity per row");
    std::map<int, std::vector<int>> by_id;
    for (int i = 0; i < embeddings.rows; ++i) by_id[identities[i]].push_back(i);
    if (by_id.size() < 2) throw std::invalid_argument("feature_scatter: need >= 2 identities");

    std::map<int, std::vector<double>> centers;
    for (const auto& [id, rows] : by_id) {
        std::vector<double> c(embeddings.cols, 0.0);
        for (int r : rows)
            for (int j = 0; j < embeddings.cols; ++j) c[j] += embeddings.at(r, j);
        double norm = 0.0;
        for (double v : c) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12)
            throw std::runtime_error("feature_scatter: identity " + std::to_string(id) + " has a zero center");
        for (double& v : c) v /= norm;
        centers[id] = std::move(c);
    }

    ScatterResult res;
    int n = 0;
    for (const auto& [id, rows] : by_id) {
        const auto& c = centers[id];
        for (int r : rows) {
            double dot = 0.0;
            for (int j = 0; j < embeddings.cols; ++j) dot += embeddings.at(r, j) * c[j];
            res.intra += dot;
            ++n;
        }
    }
    res.intra /= n;

    int pairs = 0;
    for (auto it = centers.begin(); it != centers.end(); ++it) {
        auto jt = it;
        for (++jt; jt != centers.end(); ++jt) {
            double dot = 0.0;
            for (size_t j = 0; j < it->second.size(); ++j) dot += it->second[j] * jt->second[j];
            res.inter += dot;
            ++pairs;
        }
    }
    res.inter /= pairs;

    double denom = res.inter;
    if (std::fabs(denom) < 1e-8) {
        res.guarded = true;
        denom = 1e-8;
    }
    res.ratio = res.intra / denom;
    return res;
}

std::string FairnessReport::to_text() const {
    std::ostringstream out;
    out << "mbn-fairness-report 1\n";
    out << "groups " << groups.size() << "\n";
    for (const auto& [gr, rep] : groups) {
        out << "group " << gr << " accuracy ";
        format_double(out, rep.accuracy_pct);
        out << " threshold ";
        format_double(out, rep.threshold);
        out << " scatter ";
        format_double(out, rep.scatter.ratio);
        out << " scatter_guarded " << (rep.scatter.guarded ? 1 : 0);
        out << " positives " << rep.positives << " negatives " << rep.negatives << "\n";
    }
    out << "average ";
    format_double(out, summary.average);
    out << "\nstd ";
    format_double(out, summary.std_dev);
    out << "\nser ";
    if (summary.ser_degenerate)
        out << "degenerate";
    else
        format_double(out, summary.ser);
    out << "\nglobal_threshold ";
    format_double(out, global_threshold);
    out << "\n";
    for (const auto& [gr, acc] : accuracy_at_global) {
        out << "group_accuracy_at_global " << gr << " ";
        format_double(out, acc);
        out << "\n";
    }
    return out.str();
}

std::string FairnessReport::roc_csv() const {
    std::ostringstream out;
    out << "group,threshold,fpr,tpr\n";
    for (const auto& [gr, rep] : groups)
        for (const RocPoint& p : rep.roc) {
            out << gr << ',';
            format_double(out, p.threshold);
            out << ',';
            format_double(out, p.fpr);
            out << ',';
            format_double(out, p.tpr);
            out << '\n';
        }
    return out.str();
}

FairnessReport evaluate(const train::ModelParams& model, const data::GroupedDataset& test,
                        const EvalConfig& config) {
    test.validate();
    Tensor emb = train::embed(model, test.features);
    PairSet pairs = build_pairs(test, emb, config.pair_budget, config.difficulty_fraction, config.seed);

    FairnessReport report;
    std::vector<double> accuracies;
    std::vector<double> pooled_sims;
    std::vector<char> pooled_flags;
    for (const auto& [gr, group_pairs] : pairs.by_group) {
        std::vector<double> sims;
        std::vector<char> flags;
        for (const Pair& p : group_pairs) {
            sims.push_back(row_dot(emb, p.a, emb, p.b));
            flags.push_back(p.same ? 1 : 0);
            pooled_sims.push_back(sims.back());
            pooled_flags.push_back(flags.back());
        }
        GroupReport rep;
        AccuracyResult acc = verification_accuracy(sims, flags);
        rep.accuracy_pct = acc.accuracy_pct;
        rep.threshold = acc.threshold;
        rep.roc = roc_points(sims, flags);
        for (char f : flags) (f ? rep.positives : rep.negatives) += 1;

        // per-group scatter over that group's test samples
        auto rows = test.indices_by_group().at(gr);
        Tensor ge(static_cast<int>(rows.size()), emb.cols);
        std::vector<int> gid(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) {
            for (int c = 0; c < emb.cols; ++c) ge.at(static_cast<int>(i), c) = emb.at(rows[i], c);
            gid[i] = test.identities[rows[i]];
        }
        rep.scatter = feature_scatter(ge, gid);

        accuracies.push_back(rep.accuracy_pct);
        report.groups[gr] = std::move(rep);
    }
    report.summary = fairness_summary(accuracies);

    AccuracyResult global = verification_accuracy(pooled_sims, pooled_flags);
    report.global_threshold = global.threshold;
    for (const auto& [gr, group_pairs] : pairs.by_group) {
        int correct = 0;
        for (const Pair& p : group_pairs) {
            bool predicted = row_dot(emb, p.a, emb, p.b) >= global.threshold;
            if (predicted == p.same) ++correct;
        }
        report.accuracy_at_global[gr] = 100.0 * correct / static_cast<double>(group_pairs.size());
    }
    return report;
}

}  // namespace mbn::fair
