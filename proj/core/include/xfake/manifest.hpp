#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xfake/errors.hpp"
#include "xfake/image.hpp"

namespace xfake {

class ManifestMissingFile : public IoError {
  public:
    using IoError::IoError;
};
class ManifestMalformed : public IoError {
  public:
    using IoError::IoError;
};
class ManifestDanglingReference : public IoError {
  public:
    using IoError::IoError;
};
class ManifestDuplicateId : public InvalidArgument {
  public:
    using InvalidArgument::InvalidArgument;
};

struct ManifestEntry {
    std::string file;  // relative to the manifest's directory
    int class_id = 0;
    double azimuth_deg = 0.0;
    Source source = Source::simulated;
    std::string split;  // train | val | test
    std::string id;
};

struct DatasetManifest {
    std::filesystem::path root;  // directory holding the manifest file
    std::vector<std::string> class_names;
    int image_size = 0;
    std::vector<ManifestEntry> entries;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::vector<const ManifestEntry*> split_entries(const std::string& split) const;
    std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.file; }
};

// Parses and fully validates; entry order is preserved. Image files must
// exist under the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& json_path);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& json_path);

TargetImage load_image(const DatasetManifest& manifest, const ManifestEntry& entry);

}  // namespace xfake
