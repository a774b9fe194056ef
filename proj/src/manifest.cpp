#include "refface/manifest.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "refface/errors.hpp"

namespace refface {

namespace fs = std::filesystem;
using nlohmann::json;

void DatasetManifest::save(const std::string& path) const {
    json j;
    j["version"] = version;
    j["seed"] = seed;
    j["image_size"] = image_size;
    j["refs_per_identity"] = refs_per_identity;
    j["records"] = json::array();
    for (const auto& r : records) {
        json jr;
        jr["id_label"] = r.id_label;
        jr["split"] = r.split;
        jr["hq"] = r.hq;
        jr["lq"] = r.lq;
        jr["refs"] = r.refs;
        jr["preset"] = r.preset;
        j["records"].push_back(std::move(jr));
    }
    std::ofstream f(path);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << j.dump(1) << "\n";
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError(path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("manifest parse error in " + path + ": " + e.what());
    }
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.image_size = j.at("image_size").get<int>();
    m.refs_per_identity = j.at("refs_per_identity").get<int>();
    for (const auto& jr : j.at("records")) {
        ManifestRecord r;
        r.id_label = jr.at("id_label").get<int>();
        r.split = jr.at("split").get<std::string>();
        r.hq = jr.at("hq").get<std::string>();
        r.lq = jr.at("lq").get<std::string>();
        r.refs = jr.at("refs").get<std::vector<std::string>>();
        r.preset = jr.at("preset").get<std::string>();
        m.records.push_back(std::move(r));
    }
    m.base_dir = fs::path(path).parent_path().string();
    return m;
}

std::string DatasetManifest::resolve(const std::string& rel) const {
    if (rel.empty()) return rel;
    fs::path p(rel);
    if (p.is_absolute()) return rel;
    return (fs::path(base_dir) / p).lexically_normal().string();
}

std::vector<const ManifestRecord*> DatasetManifest::split_records(const std::string& split) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(&r);
    return out;
}

std::vector<int> DatasetManifest::split_ids(const std::string& split) const {
    std::vector<int> ids;
    for (const auto& r : records)
        if (r.split == split &&
            std::find(ids.begin(), ids.end(), r.id_label) == ids.end())
            ids.push_back(r.id_label);
    return ids;
}

}  // namespace refface
