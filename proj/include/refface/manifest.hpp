#pragma once

#include <string>
#include <vector>

#include "refface/tensor.hpp"

namespace refface {

struct ManifestRecord {
    int id_label = 0;
    std::string split;  // train | test
    std::string hq;
    std::string lq;  // empty until a degrade pass fills it
    std::vector<std::string> refs;
    std::string preset;  // empty | moderate | severe
};

// Dataset index. Image paths are stored relative to the manifest file so a
// dataset directory can be moved as a unit.
struct DatasetManifest {
    int version = 1;
    uint64_t seed = 0;
    int image_size = 32;
    int refs_per_identity = 1;
    std::vector<ManifestRecord> records;
    std::string base_dir;  // directory of the manifest file; not serialized

    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);

    std::string resolve(const std::string& rel) const;
    std::vector<const ManifestRecord*> split_records(const std::string& split) const;
    std::vector<int> split_ids(const std::string& split) const;
};

}  // namespace refface
