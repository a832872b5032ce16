#include "xfake/dataset_builder.hpp"

#include <json.hpp>

#include <fstream>

namespace xfake {

namespace {

void add_entry(DatasetManifest& m, const std::filesystem::path& dir, const TargetImage& img,
               const std::string& split) {
    const std::string file = "images/" + img.id + ".png";
    write_png16(dir / file, img.pixels);
    ManifestEntry e;
    e.file = file;
    e.class_id = img.class_id;
    e.azimuth_deg = img.azimuth_deg;
    e.source = img.source;
    e.split = split;
    e.id = img.id;
    m.entries.push_back(std::move(e));
}

DatasetManifest empty_manifest(const SynthGenerator& gen, const std::filesystem::path& dir) {
    DatasetManifest m;
    m.root = dir;
    m.image_size = gen.spec().image_size;
    for (const auto& t : gen.spec().templates) m.class_names.push_back(t.name);
    return m;
}

}  // namespace

DatasetManifest build_dataset(const SynthGenerator& gen, const DatasetPlan& plan,
                              const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    DatasetManifest m = empty_manifest(gen, dir);
    Rng az_rng(Rng::derive(plan.seed, 0xA2));
    uint64_t counter = 0;
    for (const auto& [split, count] :
         {std::pair<std::string, int>{"train", plan.train_per_class},
          {"val", plan.val_per_class},
          {"test", plan.test_per_class}}) {
        for (int c = 0; c < gen.num_classes(); ++c) {
            for (int i = 0; i < count; ++i) {
                const double az = az_rng.uniform(0.0, 360.0);
                TargetImage img = gen.synth(c, az, Rng::derive(plan.seed, 0x100 + counter));
                img.source = plan.source;
                img.id = plan.id_prefix + "-" + split + "-c" + std::to_string(c) + "-" +
                         std::to_string(i);
                add_entry(m, dir, img, split);
                ++counter;
            }
        }
    }
    save_manifest(m, dir / "manifest.json");
    return m;
}

SimPool build_sim_pool(const SynthGenerator& gen, const SimPoolPlan& plan,
                       const std::filesystem::path& dir) {
    if (plan.corruptions.empty())
        throw InvalidArgument("build_sim_pool: need at least one corruption spec");
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "ref" / "images");

    SimPool pool;
    pool.sim = empty_manifest(gen, dir);
    pool.reference = empty_manifest(gen, dir / "ref");

    Rng az_rng(Rng::derive(plan.seed, 0xB3));
    uint64_t counter = 0;
    for (int c = 0; c < gen.num_classes(); ++c) {
        for (int i = 0; i < plan.per_class; ++i) {
            const double az = az_rng.uniform(0.0, 360.0);
            const uint64_t img_seed = Rng::derive(plan.seed, 0x200 + counter);
            const std::string id =
                plan.id_prefix + "-c" + std::to_string(c) + "-" + std::to_string(i);

            TargetImage sim = gen.synth(c, az, img_seed);
            sim.source = Source::simulated;
            const bool corrupted = (i % 2) == 1;  // even/odd split keeps classes balanced
            if (corrupted) {
                const auto& cs = plan.corruptions[counter % plan.corruptions.size()];
                sim = gen.corrupt(sim, cs, Rng::derive(plan.seed, 0x300 + counter));
                pool.corrupted_ids.push_back(id);
            } else {
                pool.clean_ids.push_back(id);
            }
            sim.id = id;
            add_entry(pool.sim, dir, sim, plan.split);

            TargetImage ref = gen.synth(c, az, Rng::derive(plan.seed, 0x400 + counter));
            ref.source = Source::real;
            ref.id = id;
            add_entry(pool.reference, dir / "ref", ref, plan.split);
            ++counter;
        }
    }
    save_manifest(pool.sim, dir / "manifest.json");
    save_manifest(pool.reference, dir / "ref" / "manifest.json");

    nlohmann::json truth;
    truth["corrupted_ids"] = pool.corrupted_ids;
    truth["clean_ids"] = pool.clean_ids;
    std::ofstream f(dir / "truth.json");
    if (!f) throw IoError("cannot write truth.json");
    f << truth.dump(2) << "\n";
    return pool;
}

}  // namespace xfake
