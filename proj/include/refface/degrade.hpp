#pragma once

#include <string>

#include "refface/image.hpp"
#include "refface/manifest.hpp"

namespace refface::degrade {

// Two-round degradation: blur -> downscale -> noise -> compression ->
// upscale back, parameters drawn independently per round.
struct DegradationPreset {
    std::string name = "moderate";
    double blur_sigma_lo = 0.5, blur_sigma_hi = 1.5;
    double downscale_lo = 0.5, downscale_hi = 1.0;
    double noise_sigma_lo = 0.0, noise_sigma_hi = 0.03;
    int quality_lo = 60, quality_hi = 95;
    int rounds = 2;

    void validate() const;
    static DegradationPreset moderate();
    static DegradationPreset severe();
    static DegradationPreset by_name(const std::string& name);
};

Image apply(const Image& hq, const DegradationPreset& preset, uint64_t seed);

// Degrades every record's HQ image into out_dir/images/{id}/lq_{k}.png and
// returns a manifest with lq/preset fields filled. Reference images are
// never touched.
DatasetManifest apply_batch(const DatasetManifest& manifest, const DegradationPreset& preset,
                            uint64_t seed, const std::string& out_dir);

}  // namespace refface::degrade
