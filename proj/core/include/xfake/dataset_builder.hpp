#pragma once

#include <filesystem>

#include "xfake/manifest.hpp"
#include "xfake/synth.hpp"

namespace xfake {

// Clean corpus with train/val/test splits, azimuths uniform in [0, 360).
struct DatasetPlan {
    int train_per_class = 200;
    int val_per_class = 50;
    int test_per_class = 50;
    uint64_t seed = 0;
    Source source = Source::real;
    std::string id_prefix = "img";
};

DatasetManifest build_dataset(const SynthGenerator& gen, const DatasetPlan& plan,
                              const std::filesystem::path& dir);

// Simulated pool where a seeded half of each class carries one of the listed
// corruptions (cycled); every entry gets a clean same-pose reference so that
// paired metrics can score it. Truth about which ids are corrupted is written
// to truth.json next to the manifest.
struct SimPoolPlan {
    int per_class = 100;
    uint64_t seed = 0;
    std::vector<CorruptionSpec> corruptions{{CorruptionKind::clutter_swap, 0.6}};
    std::string id_prefix = "sim";
    std::string split = "train";
};

struct SimPool {
    DatasetManifest sim;        // corrupted+clean mixture, source=simulated
    DatasetManifest reference;  // same ids, clean same-pose renders, source=real
    std::vector<std::string> corrupted_ids;
    std::vector<std::string> clean_ids;
};

SimPool build_sim_pool(const SynthGenerator& gen, const SimPoolPlan& plan,
                       const std::filesystem::path& dir);

}  // namespace xfake
