#include "xfake/manifest.hpp"

#include <json.hpp>

#include <fstream>
#include <unordered_set>

namespace xfake {

using nlohmann::json;

std::vector<const ManifestEntry*> DatasetManifest::split_entries(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(&e);
    return out;
}

DatasetManifest load_manifest(const std::filesystem::path& json_path) {
    std::ifstream f(json_path);
    if (!f) throw ManifestMissingFile("manifest not readable: " + json_path.string());
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw ManifestMalformed("manifest JSON parse failure in " + json_path.string() + ": " +
                                e.what());
    }

    DatasetManifest m;
    m.root = json_path.parent_path();
    try {
        m.class_names = doc.at("class_names").get<std::vector<std::string>>();
        m.image_size = doc.at("image_size").get<int>();
        for (const auto& je : doc.at("entries")) {
            ManifestEntry e;
            e.file = je.at("file").get<std::string>();
            e.class_id = je.at("class_id").get<int>();
            e.azimuth_deg = je.at("azimuth_deg").get<double>();
            e.source = source_from_string(je.at("source").get<std::string>());
            e.split = je.at("split").get<std::string>();
            e.id = je.at("id").get<std::string>();
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw ManifestMalformed("manifest field error in " + json_path.string() + ": " + e.what());
    }

    if (m.class_names.empty()) throw ManifestMalformed("manifest declares no classes");
    if (m.image_size <= 0) throw ManifestMalformed("manifest image_size must be positive");

    std::unordered_set<std::string> seen;
    for (const auto& e : m.entries) {
        if (e.class_id < 0 || e.class_id >= m.num_classes())
            throw ManifestMalformed("entry '" + e.id + "' has class_id out of range");
        if (!(e.azimuth_deg >= 0.0 && e.azimuth_deg < 360.0))
            throw ManifestMalformed("entry '" + e.id + "' has azimuth_deg out of [0,360)");
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw ManifestMalformed("entry '" + e.id + "' has unknown split '" + e.split + "'");
        if (!seen.insert(e.id).second)
            throw ManifestDuplicateId("duplicate manifest id '" + e.id + "'");
        if (!std::filesystem::exists(m.resolve(e)))
            throw ManifestDanglingReference("entry '" + e.id + "' references missing file " +
                                            m.resolve(e).string());
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& json_path) {
    json doc;
    doc["class_names"] = manifest.class_names;
    doc["image_size"] = manifest.image_size;
    doc["entries"] = json::array();
    for (const auto& e : manifest.entries) {
        doc["entries"].push_back({{"file", e.file},
                                  {"class_id", e.class_id},
                                  {"azimuth_deg", e.azimuth_deg},
                                  {"source", source_to_string(e.source)},
                                  {"split", e.split},
                                  {"id", e.id}});
    }
    std::ofstream f(json_path);
    if (!f) throw IoError("cannot write manifest: " + json_path.string());
    f << doc.dump(2) << "\n";
}

TargetImage load_image(const DatasetManifest& manifest, const ManifestEntry& entry) {
    TargetImage img;
    img.pixels = read_png16(manifest.resolve(entry));
    img.class_id = entry.class_id;
    img.azimuth_deg = entry.azimuth_deg;
    img.source = entry.source;
    img.id = entry.id;
    return img;
}

}  // namespace xfake
