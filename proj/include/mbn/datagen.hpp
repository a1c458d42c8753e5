#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mbn/tensor.hpp"

namespace mbn::data {

enum class Split { Train, Meta, Test };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct GroupSpec {
    int group = 0;
    int class_count = 0;
    int samples_per_class = 0;
    double sigma = 0.25;  // intra-class noise; larger means harder group

    void validate() const;
};

// Labeled samples on the unit hypersphere. Identity ids are globally unique
// across the splits of one experiment (train ids start at 0, meta and test
// continue after), so identity disjointness is integer disjointness.
struct GroupedDataset {
    int raw_dim = 0;
    Split split = Split::Train;
    Tensor features;             // n x raw_dim, unit rows
    std::vector<int> identities;
    std::vector<int> groups;

    int size() const { return features.rows; }
    std::vector<int> group_ids() const;
    std::map<int, std::vector<int>> indices_by_group() const;
    std::map<int, std::vector<int>> indices_by_identity() const;
    std::map<int, int> class_counts_by_group() const;
    void validate() const;
};

// Samples `class_count` prototypes per group uniformly on the sphere, then
// perturbs with per-group Gaussian noise and renormalizes. Deterministic in
// (seed, split, group id); identity ids start at id_offset.
GroupedDataset generate(const std::vector<GroupSpec>& specs, int raw_dim, uint64_t seed, Split split,
                        int id_offset = 0);

struct MetaSplitParams {
    std::vector<int> group_ids;
    std::vector<double> sigmas;  // aligned with group_ids
    int raw_dim = 32;
    int samples_per_identity = 4;
};

// Balanced clean split: `identities_per_group` fresh identities per group,
// disjoint from any split generated with another Split tag and the same seed.
GroupedDataset make_meta_split(const MetaSplitParams& params, int identities_per_group, uint64_t seed,
                               int id_offset, Split split = Split::Meta);

void save(const GroupedDataset& ds, const std::string& path);
GroupedDataset load(const std::string& path);

}  // namespace mbn::data
