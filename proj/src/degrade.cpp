#include "refface/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "refface/errors.hpp"
#include "refface/rng.hpp"

namespace refface::degrade {

namespace fs = std::filesystem;

void DegradationPreset::validate() const {
    if (blur_sigma_lo > blur_sigma_hi || downscale_lo > downscale_hi ||
        noise_sigma_lo > noise_sigma_hi || quality_lo > quality_hi)
        throw ConfigError("degrade." + name + ": range lo must be <= hi");
    if (downscale_hi > 1.0 || downscale_lo <= 0.0)
        throw ConfigError("degrade." + name + ".downscale: must be in (0, 1]");
    if (quality_lo < 1 || quality_hi > 100)
        throw ConfigError("degrade." + name + ".quality: must be in [1, 100]");
    if (rounds != 2) throw ConfigError("degrade." + name + ".rounds: must be 2 (second-order)");
}

DegradationPreset DegradationPreset::moderate() { return DegradationPreset{}; }

DegradationPreset DegradationPreset::severe() {
    DegradationPreset p;
    p.name = "severe";
    p.blur_sigma_lo = 1.5;
    p.blur_sigma_hi = 3.0;
    p.downscale_lo = 0.25;
    p.downscale_hi = 0.5;
    p.noise_sigma_lo = 0.03;
    p.noise_sigma_hi = 0.08;
    p.quality_lo = 20;
    p.quality_hi = 50;
    return p;
}

DegradationPreset DegradationPreset::by_name(const std::string& name) {
    if (name == "moderate") return moderate();
    if (name == "severe") return severe();
    throw ConfigError("degrade.preset: unknown preset '" + name + "'");
}

Image apply(const Image& hq, const DegradationPreset& preset, uint64_t seed) {
    preset.validate();
    Rng rng(Rng::derive(seed, 0xDE62ADE));
    Image img = hq;
    for (int round = 0; round < preset.rounds; round++) {
        const double sigma = rng.uniform(preset.blur_sigma_lo, preset.blur_sigma_hi);
        const double scale = rng.uniform(preset.downscale_lo, preset.downscale_hi);
        const double noise = rng.uniform(preset.noise_sigma_lo, preset.noise_sigma_hi);
        const int quality = static_cast<int>(rng.uniform_int(preset.quality_lo, preset.quality_hi));

        img = gaussian_blur(img, sigma);
        const int h2 = std::max(4, static_cast<int>(std::lround(hq.h * scale)));
        const int w2 = std::max(4, static_cast<int>(std::lround(hq.w * scale)));
        img = resize_bilinear(img, h2, w2);
        for (double& v : img.data) v += noise * rng.normal();
        img.clamp01();
        img = dct_compress(img, quality);
        img = resize_bilinear(img, hq.h, hq.w);
    }
    img.clamp01();
    return img;
}

DatasetManifest apply_batch(const DatasetManifest& manifest, const DegradationPreset& preset,
                            uint64_t seed, const std::string& out_dir) {
    preset.validate();
    DatasetManifest out = manifest;
    out.base_dir = out_dir;

    char buf[64];
    for (size_t i = 0; i < out.records.size(); i++) {
        ManifestRecord& rec = out.records[i];
        const std::string hq_abs = manifest.resolve(rec.hq);
        const Image hq = read_png(hq_abs);  // throws MissingArtifactError with the path

        const Image lq = apply(hq, preset, Rng::derive(seed, i));
        std::snprintf(buf, sizeof(buf), "images/%04d", rec.id_label);
        fs::create_directories(fs::path(out_dir) / buf);
        const std::string hq_stem = fs::path(rec.hq).stem().string();  // hq_<k>
        const std::string lq_rel =
            std::string(buf) + "/lq_" + hq_stem.substr(hq_stem.find('_') + 1) + ".png";
        write_png((fs::path(out_dir) / lq_rel).string(), lq);

        rec.lq = lq_rel;
        rec.preset = preset.name;
        // hq/ref paths must stay valid from the new base dir
        rec.hq = fs::relative(hq_abs, out_dir).string();
        for (auto& ref : rec.refs) ref = fs::relative(manifest.resolve(ref), out_dir).string();
    }
    out.save((fs::path(out_dir) / "manifest.json").string());
    return out;
}

}  // namespace refface::degrade
