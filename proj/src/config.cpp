#include "mbn/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mbn::cli {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* a : allowed) ok |= (key == a);
        if (!ok) throw std::invalid_argument("config: unknown key \"" + key + "\" in " + section);
    }
}

std::vector<train::DecayStep> parse_decay(const json& j, const std::string& name) {
    std::vector<train::DecayStep> steps;
    if (!j.is_array()) throw std::invalid_argument("config: " + name + " must be a list of [iteration, factor]");
    for (const auto& entry : j) {
        if (!entry.is_array() || entry.size() != 2)
            throw std::invalid_argument("config: " + name + " entries must be [iteration, factor]");
        steps.push_back({entry[0].get<int>(), entry[1].get<double>()});
    }
    return steps;
}

json decay_to_json(const std::vector<train::DecayStep>& steps) {
    json out = json::array();
    for (const auto& s : steps) out.push_back({s.iteration, s.factor});
    return out;
}

std::vector<train::DecayStep> default_decay(int iterations) {
    // two 10x drops, mirroring the shape of the reference schedule
    return {{static_cast<int>(iterations * 0.55), 0.1}, {static_cast<int>(iterations * 0.8), 0.01}};
}

}  // namespace

std::vector<int> parse_ratio(const std::string& ratio, int classes_total) {
    std::vector<double> parts;
    std::stringstream ss(ratio);
    std::string token;
    while (std::getline(ss, token, ':')) {
        size_t slash = token.find('/');
        try {
            if (slash == std::string::npos) {
                parts.push_back(std::stod(token));
            } else {
                double num = std::stod(token.substr(0, slash));
                double den = std::stod(token.substr(slash + 1));
                if (den == 0.0) throw std::invalid_argument("zero denominator");
                parts.push_back(num / den);
            }
        } catch (const std::exception&) {
            throw std::invalid_argument("config: malformed ratio part \"" + token + "\" in \"" + ratio + "\"");
        }
        if (parts.back() <= 0.0) throw std::invalid_argument("config: ratio parts must be positive");
    }
    if (parts.size() < 2) throw std::invalid_argument("config: ratio needs at least two parts");
    double total = 0.0;
    for (double p : parts) total += p;
    std::vector<int> counts;
    for (double p : parts) {
        double exact = classes_total * p / total;
        int rounded = static_cast<int>(std::llround(exact));
        if (std::fabs(exact - rounded) > 1e-6)
            throw std::invalid_argument("config: ratio " + ratio + " does not divide classes_total=" +
                                        std::to_string(classes_total) + " into whole identities");
        if (rounded < 1) throw std::invalid_argument("config: ratio leaves a group without identities");
        counts.push_back(rounded);
    }
    return counts;
}

std::vector<data::GroupSpec> DataConfig::train_specs() const {
    std::vector<int> counts = parse_ratio(ratio, classes_total);
    if (counts.size() != sigma.size())
        throw std::invalid_argument("config: ratio has " + std::to_string(counts.size()) +
                                    " parts but sigma lists " + std::to_string(sigma.size()) + " groups");
    std::vector<data::GroupSpec> specs;
    for (size_t g = 0; g < counts.size(); ++g)
        specs.push_back({static_cast<int>(g), counts[g], samples_per_class, sigma[g]});
    return specs;
}

void DataConfig::validate() const {
    if (raw_dim < 8) throw std::invalid_argument("config: data.raw_dim must be >= 8");
    if (classes_total < static_cast<int>(sigma.size()))
        throw std::invalid_argument("config: data.classes_total too small for the group count");
    if (samples_per_class < 1) throw std::invalid_argument("config: data.samples_per_class must be >= 1");
    if (sigma.size() < 2) throw std::invalid_argument("config: data.sigma must list at least two groups");
    for (double s : sigma)
        if (s <= 0.0) throw std::invalid_argument("config: data.sigma entries must be > 0");
    if (anchor_groups.empty()) throw std::invalid_argument("config: data.anchor_groups must be nonempty");
    for (int g : anchor_groups)
        if (g < 0 || g >= group_count())
            throw std::invalid_argument("config: data.anchor_groups entry out of range");
    if (static_cast<int>(anchor_groups.size()) >= group_count())
        throw std::invalid_argument("config: anchors must be a strict subset of groups");
    if (eval_identities_per_group < 2)
        throw std::invalid_argument("config: data.eval_identities_per_group must be >= 2");
    if (meta_samples_per_identity < 2)
        throw std::invalid_argument("config: data.meta_samples_per_identity must be >= 2");
    if (test_samples_per_identity < 2)
        throw std::invalid_argument("config: data.test_samples_per_identity must be >= 2");
    (void)train_specs();
    for (const std::string& f : {train_file, meta_file, test_file})
        if (!f.empty() && !std::filesystem::exists(f))
            throw std::invalid_argument("config: referenced dataset file does not exist: " + f);
}

void EvalSection::validate() const {
    if (pair_budget < 2) throw std::invalid_argument("config: eval.pair_budget must be >= 2");
    if (difficulty_fraction < 0.0 || difficulty_fraction > 1.0)
        throw std::invalid_argument("config: eval.difficulty_fraction must lie in [0, 1]");
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str());
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: JSON parse error: ") + e.what());
    }
    check_keys(j, "the top level", {"run_label", "output_dir", "data", "trainer", "eval"});

    ExperimentConfig cfg;
    cfg.run_label = j.value("run_label", cfg.run_label);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);

    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, "data",
                   {"seed", "raw_dim", "ratio", "classes_total", "samples_per_class", "sigma", "anchor_groups",
                    "eval_identities_per_group", "meta_samples_per_identity", "test_samples_per_identity",
                    "train_file", "meta_file", "test_file"});
        DataConfig& dc = cfg.data;
        dc.seed = d.value("seed", dc.seed);
        dc.raw_dim = d.value("raw_dim", dc.raw_dim);
        dc.ratio = d.value("ratio", dc.ratio);
        dc.classes_total = d.value("classes_total", dc.classes_total);
        dc.samples_per_class = d.value("samples_per_class", dc.samples_per_class);
        if (d.contains("sigma")) dc.sigma = d.at("sigma").get<std::vector<double>>();
        if (d.contains("anchor_groups")) dc.anchor_groups = d.at("anchor_groups").get<std::vector<int>>();
        dc.eval_identities_per_group = d.value("eval_identities_per_group", dc.eval_identities_per_group);
        dc.meta_samples_per_identity = d.value("meta_samples_per_identity", dc.meta_samples_per_identity);
        dc.test_samples_per_identity = d.value("test_samples_per_identity", dc.test_samples_per_identity);
        dc.train_file = d.value("train_file", dc.train_file);
        dc.meta_file = d.value("meta_file", dc.meta_file);
        dc.test_file = d.value("test_file", dc.test_file);
    }

    if (j.contains("trainer")) {
        const json& t = j.at("trainer");
        check_keys(t, "trainer",
                   {"alpha", "alpha_decay", "beta", "beta_decay", "model_momentum", "weight_decay",
                    "margin_momentum", "batch_size", "iterations", "seed", "hidden", "embed_dim", "scale",
                    "gamma", "tau", "anchor_margin", "margin_init"});
        train::TrainerConfig& tc = cfg.trainer;
        tc.alpha = t.value("alpha", tc.alpha);
        tc.beta = t.value("beta", tc.beta);
        tc.model_momentum = t.value("model_momentum", tc.model_momentum);
        tc.weight_decay = t.value("weight_decay", tc.weight_decay);
        tc.margin_momentum = t.value("margin_momentum", tc.margin_momentum);
        tc.batch_size = t.value("batch_size", tc.batch_size);
        tc.iterations = t.value("iterations", tc.iterations);
        tc.seed = t.value("seed", tc.seed);
        if (t.contains("hidden")) tc.hidden = t.at("hidden").get<std::vector<int>>();
        tc.embed_dim = t.value("embed_dim", tc.embed_dim);
        tc.scale = t.value("scale", tc.scale);
        tc.meta.gamma = t.value("gamma", tc.meta.gamma);
        tc.meta.tau = t.value("tau", tc.meta.tau);
        if (t.contains("alpha_decay")) tc.alpha_decay = parse_decay(t.at("alpha_decay"), "trainer.alpha_decay");
        if (t.contains("beta_decay")) tc.beta_decay = parse_decay(t.at("beta_decay"), "trainer.beta_decay");
        if (t.contains("anchor_margin")) cfg.anchor_margin_override = t.at("anchor_margin").get<double>();
        if (t.contains("margin_init")) cfg.margin_init_override = t.at("margin_init").get<double>();
    }
    if (cfg.trainer.alpha_decay.empty()) cfg.trainer.alpha_decay = default_decay(cfg.trainer.iterations);
    if (cfg.trainer.beta_decay.empty()) cfg.trainer.beta_decay = default_decay(cfg.trainer.iterations);
    cfg.trainer.anchor_groups = std::set<int>(cfg.data.anchor_groups.begin(), cfg.data.anchor_groups.end());

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, "eval", {"pair_budget", "difficulty_fraction", "seed"});
        cfg.eval.pair_budget = e.value("pair_budget", cfg.eval.pair_budget);
        cfg.eval.difficulty_fraction = e.value("difficulty_fraction", cfg.eval.difficulty_fraction);
        cfg.eval.seed = e.value("seed", cfg.eval.seed);
    }

    cfg.validate();
    return cfg;
}

std::string ExperimentConfig::to_json_text() const {
    json t{{"alpha", trainer.alpha},
           {"alpha_decay", decay_to_json(trainer.alpha_decay)},
           {"beta", trainer.beta},
           {"beta_decay", decay_to_json(trainer.beta_decay)},
           {"model_momentum", trainer.model_momentum},
           {"weight_decay", trainer.weight_decay},
           {"margin_momentum", trainer.margin_momentum},
           {"batch_size", trainer.batch_size},
           {"iterations", trainer.iterations},
           {"seed", trainer.seed},
           {"hidden", trainer.hidden},
           {"embed_dim", trainer.embed_dim},
           {"scale", trainer.scale},
           {"gamma", trainer.meta.gamma},
           {"tau", trainer.meta.tau}};
    if (anchor_margin_override) t["anchor_margin"] = *anchor_margin_override;
    if (margin_init_override) t["margin_init"] = *margin_init_override;

    json j{{"run_label", run_label},
           {"output_dir", output_dir},
           {"data",
            {{"seed", data.seed},
             {"raw_dim", data.raw_dim},
             {"ratio", data.ratio},
             {"classes_total", data.classes_total},
             {"samples_per_class", data.samples_per_class},
             {"sigma", data.sigma},
             {"anchor_groups", data.anchor_groups},
             {"eval_identities_per_group", data.eval_identities_per_group},
             {"meta_samples_per_identity", data.meta_samples_per_identity},
             {"test_samples_per_identity", data.test_samples_per_identity},
             {"train_file", data.train_file},
             {"meta_file", data.meta_file},
             {"test_file", data.test_file}}},
           {"trainer", t},
           {"eval",
            {{"pair_budget", eval.pair_budget},
             {"difficulty_fraction", eval.difficulty_fraction},
             {"seed", eval.seed}}}};
    return j.dump(2) + "\n";
}

void ExperimentConfig::validate() const {
    if (run_label.empty()) throw std::invalid_argument("config: run_label must be nonempty");
    if (output_dir.empty()) throw std::invalid_argument("config: output_dir must be nonempty");
    data.validate();
    eval.validate();
    train::TrainerConfig probe = trainer;  // margins are mode-dependent; validate the rest
    probe.anchor_margin = 0.3;
    probe.margin_init = 0.3;
    probe.variant = losses::Variant::Arc;
    probe.validate(data.group_count());
    if (anchor_margin_override && *anchor_margin_override < 0.0)
        throw std::invalid_argument("config: trainer.anchor_margin must be >= 0");
    if (margin_init_override && *margin_init_override < 0.0)
        throw std::invalid_argument("config: trainer.margin_init must be >= 0");
}

}  // namespace mbn::cli
