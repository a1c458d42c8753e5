#include "mbn/commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>

namespace mbn::cli {

namespace fs = std::filesystem;
using ad::Graph;
using ad::NodeRef;
using ad::ParameterSet;

const char* mode_name(Mode m) {
    switch (m) {
        case Mode::MbnArc: return "mbn-arc";
        case Mode::MbnCos: return "mbn-cos";
        case Mode::MbnSoft: return "mbn-soft";
        case Mode::Arcface: return "arcface";
        case Mode::Cosface: return "cosface";
        case Mode::Softmax: return "softmax";
    }
    return "?";
}

Mode mode_from_name(const std::string& name) {
    for (Mode m : {Mode::MbnArc, Mode::MbnCos, Mode::MbnSoft, Mode::Arcface, Mode::Cosface, Mode::Softmax})
        if (name == mode_name(m)) return m;
    throw std::invalid_argument("unknown mode: " + name);
}

void apply_mode(train::TrainerConfig& trainer, Mode mode, const ExperimentConfig& config) {
    switch (mode) {
        case Mode::MbnArc:
            trainer.variant = losses::Variant::Arc;
            trainer.meta_enabled = true;
            trainer.anchor_margin = 0.3;
            trainer.margin_init = 0.3;
            break;
        case Mode::MbnCos:
            trainer.variant = losses::Variant::Cos;
            trainer.meta_enabled = true;
            trainer.anchor_margin = 0.15;
            trainer.margin_init = 0.15;
            break;
        case Mode::MbnSoft:
            // anchors run plain norm-softmax (zero margin); the learned groups
            // still use the arc formulation
            trainer.variant = losses::Variant::Arc;
            trainer.meta_enabled = true;
            trainer.anchor_margin = 0.0;
            trainer.margin_init = 0.3;
            break;
        case Mode::Arcface:
            trainer.variant = losses::Variant::Arc;
            trainer.meta_enabled = false;
            trainer.anchor_margin = 0.3;
            trainer.margin_init = 0.3;
            break;
        case Mode::Cosface:
            trainer.variant = losses::Variant::Cos;
            trainer.meta_enabled = false;
            trainer.anchor_margin = 0.2;
            trainer.margin_init = 0.2;
            break;
        case Mode::Softmax:
            trainer.variant = losses::Variant::None;
            trainer.meta_enabled = false;
            trainer.anchor_margin = 0.0;
            trainer.margin_init = 0.0;
            break;
    }
    if (config.anchor_margin_override) trainer.anchor_margin = *config.anchor_margin_override;
    if (config.margin_init_override) trainer.margin_init = *config.margin_init_override;
}

DatasetPaths dataset_paths(const ExperimentConfig& config) {
    DatasetPaths p;
    fs::path out(config.output_dir);
    p.train = config.data.train_file.empty() ? (out / "train.ds").string() : config.data.train_file;
    p.meta = config.data.meta_file.empty() ? (out / "meta.ds").string() : config.data.meta_file;
    p.test = config.data.test_file.empty() ? (out / "test.ds").string() : config.data.test_file;
    return p;
}

namespace {

void ensure_output_dir(const ExperimentConfig& config) {
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) throw std::invalid_argument("cannot create output directory " + config.output_dir);
}

void echo_config(const ExperimentConfig& config) {
    std::ofstream out(fs::path(config.output_dir) / "config.json");
    if (!out) throw std::invalid_argument("cannot write config echo in " + config.output_dir);
    out << config.to_json_text();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot write " + path.string());
    out << text;
}

data::MetaSplitParams balanced_params(const DataConfig& dc, int samples_per_identity) {
    data::MetaSplitParams p;
    for (int g = 0; g < dc.group_count(); ++g) p.group_ids.push_back(g);
    p.sigmas = dc.sigma;
    p.raw_dim = dc.raw_dim;
    p.samples_per_identity = samples_per_identity;
    return p;
}

}  // namespace

int cmd_gen_data(const ExperimentConfig& config, std::ostream& log) {
    ensure_output_dir(config);
    const DataConfig& dc = config.data;

    data::GroupedDataset train_set = data::generate(dc.train_specs(), dc.raw_dim, dc.seed, data::Split::Train);
    int meta_offset = dc.classes_total;
    data::GroupedDataset meta_set = data::make_meta_split(balanced_params(dc, dc.meta_samples_per_identity),
                                                          dc.eval_identities_per_group, dc.seed, meta_offset);
    int test_offset = meta_offset + dc.group_count() * dc.eval_identities_per_group;
    data::GroupedDataset test_set =
        data::make_meta_split(balanced_params(dc, dc.test_samples_per_identity), dc.eval_identities_per_group,
                              dc.seed, test_offset, data::Split::Test);

    DatasetPaths paths = dataset_paths(config);
    data::save(train_set, paths.train);
    data::save(meta_set, paths.meta);
    data::save(test_set, paths.test);
    echo_config(config);

    for (const auto* ds : {&train_set, &meta_set, &test_set}) {
        log << data::split_name(ds->split) << ":";
        std::map<int, int> counts;
        for (int g : ds->groups) counts[g]++;
        for (const auto& [g, n] : counts) log << " group" << g << "=" << n;
        log << " (total " << ds->size() << ")\n";
    }
    return kExitOk;
}

int cmd_train(const ExperimentConfig& config, Mode mode, std::ostream& log) {
    ensure_output_dir(config);
    DatasetPaths paths = dataset_paths(config);
    for (const std::string& p : {paths.train, paths.meta, paths.test})
        if (!fs::exists(p))
            throw std::invalid_argument("dataset file missing: " + p + " (run gen-data first)");

    data::GroupedDataset train_set = data::load(paths.train);
    data::GroupedDataset meta_set = data::load(paths.meta);

    train::TrainerConfig trainer = config.trainer;
    apply_mode(trainer, mode, config);

    echo_config(config);
    fs::path out(config.output_dir);
    try {
        train::TrainResult result = trainer.meta_enabled
                                        ? train::train(train_set, meta_set, trainer)
                                        : train::train_baseline(train_set, trainer);
        write_text(out / "trace.csv", result.trace.to_csv());
        train::save_model(result.model, (out / "model.txt").string());

        const auto& last = result.trace.rows.back();
        log << "mode=" << mode_name(mode) << " iterations=" << result.trace.rows.size()
            << " final_train_loss=" << last.train_loss << "\n";
        log << "margins:";
        for (const auto& [g, m] : last.margins) log << " m_" << g << "=" << m;
        log << "\n";
        return kExitOk;
    } catch (const train::TrainingAborted& e) {
        write_text(out / "trace.csv", e.trace.to_csv());
        log << "aborted: " << e.what() << " (partial trace retained)\n";
        return kExitNumeric;
    }
}

int cmd_eval(const ExperimentConfig& config, const std::string& model_path, const std::string& test_path,
             std::ostream& log) {
    ensure_output_dir(config);
    fs::path out(config.output_dir);
    std::string model_file = model_path.empty() ? (out / "model.txt").string() : model_path;
    std::string test_file = test_path.empty() ? dataset_paths(config).test : test_path;
    if (!fs::exists(model_file)) throw std::invalid_argument("model file missing: " + model_file);
    if (!fs::exists(test_file)) throw std::invalid_argument("test dataset missing: " + test_file);

    train::ModelParams model = train::load_model(model_file);
    data::GroupedDataset test_set = data::load(test_file);
    if (test_set.raw_dim != model.input_dim)
        throw std::invalid_argument("model input dim " + std::to_string(model.input_dim) +
                                    " does not match dataset dim " + std::to_string(test_set.raw_dim));

    fair::EvalConfig ec;
    ec.pair_budget = config.eval.pair_budget;
    ec.difficulty_fraction = config.eval.difficulty_fraction;
    ec.seed = config.eval.seed;
    fair::FairnessReport report = fair::evaluate(model, test_set, ec);

    write_text(out / "report.txt", report.to_text());
    write_text(out / "roc.csv", report.roc_csv());

    char buf[160];
    if (report.summary.ser_degenerate)
        std::snprintf(buf, sizeof buf, "avg=%.17g std=%.17g ser=degenerate", report.summary.average,
                      report.summary.std_dev);
    else
        std::snprintf(buf, sizeof buf, "avg=%.17g std=%.17g ser=%.17g", report.summary.average,
                      report.summary.std_dev, report.summary.ser);
    log << buf << "\n";
    return kExitOk;
}

namespace {

struct CheckResult {
    std::string name;
    double worst = 0.0;
    double tolerance = 0.0;
    bool pass = true;
};

// worst relative error over entries with significant analytic magnitude;
// small entries count via their absolute error against the 1e-8 budget
void fold_error(CheckResult& check, double analytic, double numeric) {
    double abs_err = std::fabs(analytic - numeric);
    double err;
    if (std::fabs(analytic) > 1e-6)
        err = std::min(abs_err / std::fabs(analytic), abs_err / 1e-8);
    else
        err = abs_err / 1e-8 * check.tolerance;  // scale so tolerance comparison stays uniform
    check.worst = std::max(check.worst, err);
    if (err >= check.tolerance) check.pass = false;
}

Tensor random_tensor(std::mt19937_64& rng, int r, int c, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(r, c);
    for (auto& v : t.data) v = d(rng);
    return t;
}

void fd_against(CheckResult& check, Graph& g, NodeRef root, NodeRef leaf, double step, bool corrupt_one) {
    ParameterSet ps;
    ps.add("x", leaf);
    auto grads = g.gradient(root, ps, false);
    Tensor analytic = g.evaluate(grads.at("x"));
    if (corrupt_one && analytic.size() > 0) analytic.data[0] += 1e-3;  // negative-control fixture
    Tensor base = g.node(leaf.id).value;
    auto f = [&](const Tensor& x) {
        g.set_value(leaf, x);
        return g.evaluate(root).value();
    };
    Tensor numeric = ad::finite_difference_gradient(f, base, step);
    g.set_value(leaf, base);
    for (int i = 0; i < analytic.size(); ++i) fold_error(check, analytic.data[i], numeric.data[i]);
}

CheckResult check_per_op(uint64_t seed, int trials, bool corrupt) {
    CheckResult check{"first-order per-op", 0.0, 1e-5, true};
    std::mt19937_64 rng(seed);
    for (int trial = 0; trial < trials; ++trial) {
        Graph g;
        auto X = g.parameter(random_tensor(rng, 3, 4, -0.9, 0.9));
        auto Y = g.parameter(random_tensor(rng, 3, 4, 0.2, 1.5));
        auto M = g.parameter(random_tensor(rng, 4, 2, -1.0, 1.0));
        std::vector<NodeRef> roots{
            g.sum(g.add(X, Y)),
            g.sum(g.sub(X, Y)),
            g.sum(g.mul(X, Y)),
            g.sum(g.div(X, Y)),
            g.sum(g.matmul(X, M)),
            g.sum(g.neg(X)),
            g.sum(g.exp(X)),
            g.sum(g.log(Y)),
            g.sum(g.cos(X)),
            g.sum(g.arccos(X)),
            g.sum(g.abs(X)),
            g.sum(g.relu(X)),
            g.sum(g.power(Y, 1.7)),
            g.sum(g.clamp(X, -0.5, 0.5)),
            g.mean(X),
            g.sum(g.maximum(X, Y)),
            g.sum(g.mul(g.l2_normalize_rows(X), Y)),
            g.sum(g.exp(g.dot_product_rows(X, Y))),
            g.sum(g.exp(g.select_by_index(X, {2, 0, 3}))),
        };
        bool corrupt_here = corrupt && trial == 0;
        for (size_t r = 0; r < roots.size(); ++r) {
            fd_against(check, g, roots[r], X, 1e-6, corrupt_here && r == 0);
            fd_against(check, g, roots[r], Y, 1e-6, false);
        }
    }
    return check;
}

CheckResult check_losses(uint64_t seed, int trials) {
    CheckResult check{"adaptive-loss gradients", 0.0, 1e-5, true};
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int trial = 0; trial < trials; ++trial) {
        for (auto variant : {losses::Variant::Arc, losses::Variant::Cos}) {
            int n = 8, d = 5, classes = 4, groups = 4;
            Tensor W(d, classes);
            for (auto& v : W.data) v = gauss(rng);
            losses::ClassifierHead head{W, 60.0};
            head.renormalize_columns();
            Tensor raw(n, d);
            std::vector<int> labels(n), grp(n);
            std::uniform_int_distribution<int> lab(0, classes - 1), gpick(0, groups - 1);
            for (int i = 0; i < n; ++i) {
                labels[i] = lab(rng);
                grp[i] = gpick(rng);
                for (int c = 0; c < d; ++c) raw.at(i, c) = head.weights.at(c, labels[i]) + 0.35 * gauss(rng);
            }
            Graph g;
            auto raw_leaf = g.parameter(raw);
            auto emb = g.l2_normalize_rows(raw_leaf);
            auto head_leaf = g.parameter(head.weights);
            double init = variant == losses::Variant::Arc ? 0.3 : 0.15;
            auto sched = losses::MarginSchedule::make(variant, groups, {0}, init, init);
            std::map<int, NodeRef> margin_nodes;
            std::vector<NodeRef> margin_leaves;
            for (int gr = 1; gr < groups; ++gr) {
                margin_nodes[gr] = g.parameter(Tensor::scalar(init));
                margin_leaves.push_back(margin_nodes[gr]);
            }
            auto loss = losses::adaptive_margin_loss(g, emb, labels, grp, head_leaf, 60.0, sched, margin_nodes);
            fd_against(check, g, loss, raw_leaf, 1e-5, false);
            fd_against(check, g, loss, head_leaf, 1e-5, false);
            for (NodeRef m : margin_leaves) fd_against(check, g, loss, m, 1e-5, false);
        }
    }
    return check;
}

CheckResult check_mixed_second(uint64_t seed, int trials) {
    CheckResult check{"mixed second derivative", 0.0, 1e-3, true};
    std::mt19937_64 rng(seed + 2);
    for (int trial = 0; trial < trials; ++trial) {
        Graph g;
        Tensor w0 = random_tensor(rng, 2, 2, -0.8, 0.8);
        Tensor m0 = random_tensor(rng, 1, 1, 0.1, 0.5);
        auto w = g.parameter(w0);
        auto m = g.parameter(m0);
        ParameterSet pw, pm;
        pw.add("w", w);
        pm.add("m", m);
        auto f = g.mean(g.cos(g.add(g.arccos(g.clamp(w, -0.9, 0.9)), m)));
        Tensor dir = random_tensor(rng, 2, 2, -1.0, 1.0);
        auto analytic = g.mixed_second(f, pw, {{"w", dir}}, pm);

        double hm = 1e-4, hw = 1e-4;
        auto inner = [&](double mv) {
            g.set_value(m, Tensor::scalar(mv));
            double acc = 0.0;
            for (int i = 0; i < 4; ++i) {
                Tensor p = w0;
                p.data[i] += hw;
                g.set_value(w, p);
                double fp = g.evaluate(f).value();
                p.data[i] = w0.data[i] - hw;
                g.set_value(w, p);
                double fm = g.evaluate(f).value();
                acc += dir.data[i] * (fp - fm) / (2 * hw);
            }
            g.set_value(w, w0);
            return acc;
        };
        double numeric = (inner(m0.value() + hm) - inner(m0.value() - hm)) / (2 * hm);
        g.set_value(m, m0);
        fold_error(check, analytic.at("m").value(), numeric);
    }
    return check;
}

CheckResult check_meta_gradient(uint64_t seed, int trials) {
    CheckResult check{"meta-gradient (bilevel)", 0.0, 1e-3, true};
    for (int trial = 0; trial < trials; ++trial) {
        uint64_t s = seed + 100 + trial;
        auto variant = trial % 2 == 0 ? losses::Variant::Arc : losses::Variant::Cos;
        data::GroupedDataset train_set = data::generate(
            {{0, 8, 4, 0.25}, {1, 4, 4, 0.35}, {2, 4, 4, 0.40}, {3, 4, 4, 0.45}}, 8, s, data::Split::Train);
        data::MetaSplitParams mp;
        mp.group_ids = {0, 1, 2, 3};
        mp.sigmas = {0.25, 0.35, 0.40, 0.45};
        mp.raw_dim = 8;
        mp.samples_per_identity = 3;
        data::GroupedDataset meta_set = data::make_meta_split(mp, 4, s, 1000);

        train::ModelParams model = train::init_model(8, {}, 4, 20, 30.0, s + 5);
        double m0 = variant == losses::Variant::Cos ? 0.15 : 0.3;
        auto schedule = losses::MarginSchedule::make(variant, 4, {0}, m0, m0);

        Graph g;
        train::ModelLeaves leaves = train::make_leaves(g, model);
        std::map<int, NodeRef> margin_nodes;
        for (const auto& [gr, value] : schedule.margins) margin_nodes[gr] = g.parameter(Tensor::scalar(value));
        int n = 16;
        Tensor bx(n, 8);
        std::vector<int> by(n), bg(n);
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < 8; ++c) bx.at(i, c) = train_set.features.at(i, c);
            by[i] = train_set.identities[i];
            bg[i] = train_set.groups[i];
        }
        NodeRef emb = train::model_forward(g, leaves.nodes, 1, g.constant(bx));
        NodeRef lt =
            losses::adaptive_margin_loss(g, emb, by, bg, leaves.nodes.at("head.W"), 30.0, schedule, margin_nodes);
        auto w_hat = train::virtual_step(g, leaves.params, lt, 0.2);
        NodeRef meta_emb = train::model_forward(g, w_hat, 1, g.constant(meta_set.features));
        losses::MetaLossConfig mc;
        mc.tau = 4.0;
        auto ms = losses::meta_skewness_loss(g, meta_emb, meta_set.identities, meta_set.groups, mc, {0});

        ParameterSet margin_params;
        for (const auto& [gr, node] : margin_nodes) margin_params.add("m" + std::to_string(gr), node);
        auto grads = g.gradient(ms.loss, margin_params, false);
        double h = 1e-4;
        for (const auto& [gr, node] : margin_nodes) {
            double analytic = g.evaluate(grads.at("m" + std::to_string(gr))).value();
            double base = g.node(node.id).value.value();
            g.set_value(node, Tensor::scalar(base + h));
            double up = g.evaluate(ms.loss).value();
            g.set_value(node, Tensor::scalar(base - h));
            double down = g.evaluate(ms.loss).value();
            g.set_value(node, Tensor::scalar(base));
            fold_error(check, analytic, (up - down) / (2 * h));
        }
    }
    return check;
}

}  // namespace

int cmd_gradcheck(uint64_t seed, int trials, bool corrupt, std::ostream& log) {
    std::vector<CheckResult> results;
    results.push_back(check_per_op(seed, std::max(1, trials), corrupt));
    results.push_back(check_losses(seed, std::max(1, trials / 4)));
    results.push_back(check_mixed_second(seed, std::max(1, trials)));
    results.push_back(check_meta_gradient(seed, std::max(2, trials / 2)));

    bool all_pass = true;
    char buf[160];
    for (const CheckResult& r : results) {
        std::snprintf(buf, sizeof buf, "%-26s worst %.3e  tol %.0e  %s", r.name.c_str(), r.worst, r.tolerance,
                      r.pass ? "PASS" : "FAIL");
        log << buf << "\n";
        all_pass &= r.pass;
    }
    return all_pass ? kExitOk : kExitCheck;
}

}  // namespace mbn::cli
