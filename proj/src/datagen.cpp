#include "mbn/datagen.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace mbn::data {

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Meta: return "meta";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "meta") return Split::Meta;
    if (name == "test") return Split::Test;
    throw std::invalid_argument("unknown split tag: " + name);
}

void GroupSpec::validate() const {
    if (class_count < 1) throw std::invalid_argument("GroupSpec: class count must be >= 1");
    if (samples_per_class < 1) throw std::invalid_argument("GroupSpec: samples per class must be >= 1");
    if (sigma <= 0.0) throw std::invalid_argument("GroupSpec: sigma must be > 0");
}

std::vector<int> GroupedDataset::group_ids() const {
    std::set<int> s(groups.begin(), groups.end());
    return {s.begin(), s.end()};
}

std::map<int, std::vector<int>> GroupedDataset::indices_by_group() const {
    std::map<int, std::vector<int>> m;
    for (int i = 0; i < size(); ++i) m[groups[i]].push_back(i);
    return m;
}

std::map<int, std::vector<int>> GroupedDataset::indices_by_identity() const {
    std::map<int, std::vector<int>> m;
    for (int i = 0; i < size(); ++i) m[identities[i]].push_back(i);
    return m;
}

std::map<int, int> GroupedDataset::class_counts_by_group() const {
    std::map<int, std::set<int>> ids;
    for (int i = 0; i < size(); ++i) ids[groups[i]].insert(identities[i]);
    std::map<int, int> m;
    for (const auto& [g, s] : ids) m[g] = static_cast<int>(s.size());
    return m;
}

void GroupedDataset::validate() const {
    if (features.cols != raw_dim) throw std::invalid_argument("GroupedDataset: feature width != raw_dim");
    if (static_cast<int>(identities.size()) != size() || static_cast<int>(groups.size()) != size())
        throw std::invalid_argument("GroupedDataset: label arrays must match sample count");
    if (!features.all_finite()) throw std::invalid_argument("GroupedDataset: non-finite feature");
    for (int r = 0; r < size(); ++r)
        if (std::fabs(row_norm(features, r) - 1.0) > 1e-9)
            throw std::invalid_argument("GroupedDataset: row " + std::to_string(r) + " is not unit-norm");
}

namespace {

// splitmix64; decorrelates the per-(seed, split, group) streams
uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e9b5ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t stream_seed(uint64_t seed, Split split, int group) {
    return mix(mix(seed ^ (0x5851f42d4c957f2dULL * (static_cast<uint64_t>(split) + 1))) +
               static_cast<uint64_t>(group) * 0xda942042e4dd58b5ULL);
}

void unit_gaussian_row(std::mt19937_64& rng, std::normal_distribution<double>& gauss, double* row, int d) {
    double norm = 0.0;
    do {
        norm = 0.0;
        for (int c = 0; c < d; ++c) {
            row[c] = gauss(rng);
            norm += row[c] * row[c];
        }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (int c = 0; c < d; ++c) row[c] /= norm;
}

}  // namespace

GroupedDataset generate(const std::vector<GroupSpec>& specs, int raw_dim, uint64_t seed, Split split,
                        int id_offset) {
    if (raw_dim < 8) throw std::invalid_argument("generate: raw_dim must be >= 8");
    if (specs.empty()) throw std::invalid_argument("generate: specs must be nonempty");
    std::set<int> seen;
    int total = 0;
    for (const GroupSpec& s : specs) {
        s.validate();
        if (!seen.insert(s.group).second)
            throw std::invalid_argument("generate: duplicate group id " + std::to_string(s.group));
        total += s.class_count * s.samples_per_class;
    }

    GroupedDataset ds;
    ds.raw_dim = raw_dim;
    ds.split = split;
    ds.features = Tensor(total, raw_dim);
    ds.identities.resize(total);
    ds.groups.resize(total);

    int row = 0;
    int next_id = id_offset;
    std::vector<double> prototype(raw_dim), sample(raw_dim);
    for (const GroupSpec& s : specs) {
        std::mt19937_64 rng(stream_seed(seed, split, s.group));
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int cls = 0; cls < s.class_count; ++cls) {
            unit_gaussian_row(rng, gauss, prototype.data(), raw_dim);
            for (int k = 0; k < s.samples_per_class; ++k) {
                double norm = 0.0;
                for (int c = 0; c < raw_dim; ++c) {
                    sample[c] = prototype[c] + s.sigma * gauss(rng);
                    norm += sample[c] * sample[c];
                }
                norm = std::sqrt(norm);
                for (int c = 0; c < raw_dim; ++c) ds.features.at(row, c) = sample[c] / norm;
                ds.identities[row] = next_id;
                ds.groups[row] = s.group;
                ++row;
            }
            ++next_id;
        }
    }
    return ds;
}

GroupedDataset make_meta_split(const MetaSplitParams& params, int identities_per_group, uint64_t seed,
                               int id_offset, Split split) {
    if (identities_per_group < 2)
        throw std::invalid_argument("make_meta_split: need >= 2 identities per group for triplet mining");
    if (params.group_ids.size() != params.sigmas.size())
        throw std::invalid_argument("make_meta_split: group/sigma lists must align");
    std::vector<GroupSpec> specs;
    for (size_t i = 0; i < params.group_ids.size(); ++i)
        specs.push_back({params.group_ids[i], identities_per_group, params.samples_per_identity,
                         params.sigmas[i]});
    return generate(specs, params.raw_dim, seed, split, id_offset);
}

void save(const GroupedDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save: cannot open " + path);
    std::set<int> gset(ds.groups.begin(), ds.groups.end());
    char buf[64];
    out << ds.raw_dim << ' ' << ds.size() << ' ' << gset.size() << ' ' << split_name(ds.split) << '\n';
    for (int r = 0; r < ds.size(); ++r) {
        for (int c = 0; c < ds.raw_dim; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.features.at(r, c));
            out << buf << ' ';
        }
        out << ds.identities[r] << ' ' << ds.groups[r] << '\n';
    }
    if (!out) throw std::runtime_error("save: write failed on " + path);
}

GroupedDataset load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load: cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("load: missing header in " + path);
    std::istringstream hs(header);
    int raw_dim = 0, n = 0, k = 0;
    std::string tag;
    if (!(hs >> raw_dim >> n >> k >> tag) || raw_dim < 1 || n < 0 || k < 0)
        throw std::runtime_error("load: malformed header in " + path);

    GroupedDataset ds;
    ds.raw_dim = raw_dim;
    ds.split = split_from_name(tag);
    ds.features = Tensor(n, raw_dim);
    ds.identities.resize(n);
    ds.groups.resize(n);
    std::string line;
    for (int r = 0; r < n; ++r) {
        if (!std::getline(in, line)) throw std::runtime_error("load: truncated file at record " + std::to_string(r));
        std::istringstream ls(line);
        for (int c = 0; c < raw_dim; ++c)
            if (!(ls >> ds.features.at(r, c)))
                throw std::runtime_error("load: record " + std::to_string(r) + " has fewer than " +
                                         std::to_string(raw_dim) + " feature values");
        if (!(ls >> ds.identities[r] >> ds.groups[r]))
            throw std::runtime_error("load: record " + std::to_string(r) + " is missing identity/group");
        double extra;
        if (ls >> extra) throw std::runtime_error("load: record " + std::to_string(r) + " has extra fields");
    }
    if (!ds.features.all_finite()) throw std::runtime_error("load: non-finite feature value in " + path);
    std::set<int> gset(ds.groups.begin(), ds.groups.end());
    if (static_cast<int>(gset.size()) != k)
        throw std::runtime_error("load: header group count disagrees with records in " + path);
    return ds;
}

}  // namespace mbn::data
