#pragma once

#include <array>
#include <string>
#include <vector>

#include "refface/image.hpp"
#include "refface/manifest.hpp"
#include "refface/rng.hpp"

namespace refface::toyfaces {

inline constexpr int kGeometryDims = 7;
inline constexpr double kMinIdentitySeparation = 0.05;  // geometry L-inf

struct Mark {
    double x = 0.5, y = 0.5;  // position in [0,1]^2 (face-relative)
    double radius = 0.03;     // in (0, 0.05]
};

// Parametric description of one synthetic person. Geometry order:
// face aspect, eye spacing, eye size, mouth width, mouth curvature,
// nose length, brow angle; all in [0,1].
struct IdentitySpec {
    int id_label = 0;
    std::array<double, kGeometryDims> geometry{};
    std::array<double, 12> albedo{};  // skin, iris, lip, hair raw params in [0,1]
    std::vector<Mark> marks;
    double hair_region = 0.5;
};

struct NuisanceSpec {
    double pose_dx = 0, pose_dy = 0;  // [-0.1, 0.1]
    double rotation_deg = 0;          // [-15, 15]
    double illumination = 1.0;        // [0.7, 1.3]
    double expression = 0.0;          // mouth openness [0,1]
    double background = 0.5;          // [0,1]
};

struct DatasetConfig {
    int n_identities = 16;
    int hq_per_identity = 3;
    int refs_per_identity = 5;
    int image_size = 32;
    double split_fraction = 0.75;
    uint64_t seed = 1;
};

IdentitySpec sample_identity(uint64_t seed);
NuisanceSpec sample_nuisance(uint64_t seed);

double geometry_linf(const IdentitySpec& a, const IdentitySpec& b);

Image render_face(const IdentitySpec& identity, const NuisanceSpec& nuisance, int size);

// Draws n identities with rejection so every pair is separated by more than
// kMinIdentitySeparation in geometry L-inf. Throws GenerationError after
// 1000 rejected attempts for one slot.
std::vector<IdentitySpec> draw_identities(int n, uint64_t seed);

// Renders the corpus under out_dir (images/{id}/{role}_{k}.png) and writes
// out_dir/manifest.json. Returns the loaded manifest.
DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& out_dir);

}  // namespace refface::toyfaces
