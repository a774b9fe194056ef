#include "refface/toyfaces.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "refface/errors.hpp"

namespace refface::toyfaces {

namespace fs = std::filesystem;

namespace {

struct Vec3 {
    double r = 0, g = 0, b = 0;
};

Vec3 mix(const Vec3& a, const Vec3& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// antialiased coverage from a signed distance, edge width w
double aa(double d, double w) { return std::clamp(0.5 - d / w, 0.0, 1.0); }

double ellipse_sd(double u, double v, double a, double b) {
    const double q = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
    return (q - 1.0) * std::min(a, b);
}

double segment_sd(double px, double py, double ax, double ay, double bx, double by,
                  double thickness) {
    const double abx = bx - ax, aby = by - ay;
    const double apx = px - ax, apy = py - ay;
    const double t = std::clamp((apx * abx + apy * aby) / (abx * abx + aby * aby + 1e-12), 0.0, 1.0);
    const double dx = apx - t * abx, dy = apy - t * aby;
    return std::sqrt(dx * dx + dy * dy) - thickness;
}

struct FaceGeom {
    double a_face, b_face, eye_spacing, eye_w, eye_h, mouth_hw, mouth_curve, nose_len, brow_slope;
    Vec3 skin, iris, lip, hair;
};

FaceGeom derive_geom(const IdentitySpec& id) {
    const auto& g = id.geometry;
    const auto& al = id.albedo;
    FaceGeom f;
    f.a_face = 0.55 + 0.18 * g[0];
    f.b_face = 0.72;
    f.eye_spacing = 0.16 + 0.18 * g[1];
    f.eye_w = 0.07 + 0.07 * g[2];
    f.eye_h = 0.05 + 0.045 * g[2];
    f.mouth_hw = 0.10 + 0.15 * g[3];
    f.mouth_curve = (g[4] - 0.5) * 0.16;
    f.nose_len = 0.10 + 0.22 * g[5];
    f.brow_slope = (g[6] - 0.5) * 0.5;

    f.skin.r = 0.50 + 0.40 * al[0];
    f.skin.g = f.skin.r * (0.68 + 0.22 * al[1]);
    f.skin.b = f.skin.g * (0.60 + 0.25 * al[2]);
    f.iris = {0.10 + 0.50 * al[3], 0.10 + 0.50 * al[4], 0.10 + 0.60 * al[5]};
    f.lip = {0.45 + 0.40 * al[6], 0.20 + 0.20 * al[7], 0.20 + 0.20 * al[8]};
    f.hair.r = 0.05 + 0.75 * al[9];
    f.hair.g = f.hair.r * (0.50 + 0.45 * al[10]);
    f.hair.b = f.hair.g * (0.40 + 0.50 * al[11]);
    return f;
}

Vec3 shade_point(double u, double v, const IdentitySpec& id, const FaceGeom& f,
                 const NuisanceSpec& nu, double w) {
    Vec3 color;
    {
        const double t = 0.15 + 0.70 * nu.background;
        color = {t, t * 0.98, t * 1.04};
    }

    const double face_d = ellipse_sd(u, v - 0.05, f.a_face, f.b_face);
    color = mix(color, f.skin, aa(face_d, w));

    // hair: a cap over the head; the coverage parameter moves the hairline
    {
        const double hairline = -0.67 + 0.32 * id.hair_region;
        const double outer = ellipse_sd(u, v - 0.05, f.a_face * 1.12, f.b_face * 1.08);
        const double d = std::max(outer, v - hairline);
        color = mix(color, f.hair, aa(d, w));
    }

    // brows
    {
        const double by = -0.32;
        const double half = f.eye_w * 1.25;
        for (int s = -1; s <= 1; s += 2) {
            const double cx = s * f.eye_spacing;
            const double d = segment_sd(u, v, cx - half, by + s * f.brow_slope * half,
                                        cx + half, by - s * f.brow_slope * half, 0.022);
            color = mix(color, {0.12, 0.09, 0.07}, aa(d, w));
        }
    }

    // eyes: white, iris, pupil
    for (int s = -1; s <= 1; s += 2) {
        const double cx = s * f.eye_spacing, cy = -0.15;
        const double dw = ellipse_sd(u - cx, v - cy, f.eye_w, f.eye_h);
        color = mix(color, {0.93, 0.93, 0.95}, aa(dw, w));
        const double ri = f.eye_h * 0.78;
        const double dist = std::sqrt((u - cx) * (u - cx) + (v - cy) * (v - cy));
        color = mix(color, f.iris, aa(dist - ri, w));
        color = mix(color, {0.05, 0.05, 0.06}, aa(dist - ri * 0.45, w));
    }

    // nose ridge, slightly darker than skin
    {
        const double d = segment_sd(u, v, 0.0, -0.05, 0.0, -0.05 + f.nose_len, 0.02);
        color = mix(color, {f.skin.r * 0.85, f.skin.g * 0.85, f.skin.b * 0.85}, aa(d, w));
    }

    // mouth: curved band, opens with expression
    {
        const double vm = 0.42;
        const double lh = 0.035 + 0.085 * nu.expression;
        const double t = u / f.mouth_hw;
        if (std::abs(t) < 1.35) {
            const double mid = vm + f.mouth_curve * (t * t - 0.5);
            const double d = std::max(std::abs(v - mid) - lh, (std::abs(t) - 1.0) * f.mouth_hw);
            color = mix(color, f.lip, aa(d, w));
            if (lh > 0.05) {
                const double dc =
                    std::max(std::abs(v - mid) - (lh - 0.028), (std::abs(t) - 0.78) * f.mouth_hw);
                color = mix(color, {0.10, 0.05, 0.05}, aa(dc, w));
            }
        }
    }

    // distinguishing marks, drawn last so they stay visible
    for (const Mark& m : id.marks) {
        const double mu = (m.x - 0.5) * 2.0 * f.a_face * 0.80;
        const double mv = 0.05 + (m.y - 0.5) * 2.0 * f.b_face * 0.80;
        const double d = std::sqrt((u - mu) * (u - mu) + (v - mv) * (v - mv)) - m.radius * 2.0;
        color = mix(color, {f.skin.r * 0.38, f.skin.g * 0.34, f.skin.b * 0.34}, aa(d, w));
    }
    return color;
}

}  // namespace

IdentitySpec sample_identity(uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xFACE));
    IdentitySpec id;
    for (auto& g : id.geometry) g = rng.uniform();
    for (auto& a : id.albedo) a = rng.uniform();
    const int n_marks = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < n_marks; i++) {
        Mark m;
        m.x = rng.uniform(0.25, 0.75);
        m.y = rng.uniform(0.25, 0.75);
        m.radius = rng.uniform(0.02, 0.05);
        id.marks.push_back(m);
    }
    id.hair_region = rng.uniform();
    return id;
}

NuisanceSpec sample_nuisance(uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xBEEF));
    NuisanceSpec nu;
    nu.pose_dx = rng.uniform(-0.1, 0.1);
    nu.pose_dy = rng.uniform(-0.1, 0.1);
    nu.rotation_deg = rng.uniform(-15.0, 15.0);
    nu.illumination = rng.uniform(0.7, 1.3);
    nu.expression = rng.uniform();
    nu.background = rng.uniform();
    return nu;
}

double geometry_linf(const IdentitySpec& a, const IdentitySpec& b) {
    double d = 0;
    for (int i = 0; i < kGeometryDims; i++) d = std::max(d, std::abs(a.geometry[i] - b.geometry[i]));
    return d;
}

Image render_face(const IdentitySpec& identity, const NuisanceSpec& nuisance, int size) {
    if (size != 32 && size != 48 && size != 64)
        throw ConfigError("render_face: size must be one of {32, 48, 64}");

    const FaceGeom f = derive_geom(identity);
    const double theta = nuisance.rotation_deg * 3.14159265358979323846 / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double w = 2.5 / size;  // antialias width in face units

    Image img(size, size, 3);
    const double sub[2] = {-0.25, 0.25};
    for (int y = 0; y < size; y++) {
        for (int x = 0; x < size; x++) {
            Vec3 acc;
            for (double oy : sub)
                for (double ox : sub) {
                    const double u0 = ((x + 0.5 + ox) / size) * 2.0 - 1.0 - 2.0 * nuisance.pose_dx;
                    const double v0 = ((y + 0.5 + oy) / size) * 2.0 - 1.0 - 2.0 * nuisance.pose_dy;
                    const double ru = ct * u0 + st * v0;
                    const double rv = -st * u0 + ct * v0;
                    const Vec3 c = shade_point(ru, rv, identity, f, nuisance, w);
                    acc.r += c.r;
                    acc.g += c.g;
                    acc.b += c.b;
                }
            img.at(y, x, 0) = std::clamp(acc.r * 0.25 * nuisance.illumination, 0.0, 1.0);
            img.at(y, x, 1) = std::clamp(acc.g * 0.25 * nuisance.illumination, 0.0, 1.0);
            img.at(y, x, 2) = std::clamp(acc.b * 0.25 * nuisance.illumination, 0.0, 1.0);
        }
    }
    return img;
}

std::vector<IdentitySpec> draw_identities(int n, uint64_t seed) {
    std::vector<IdentitySpec> out;
    out.reserve(n);
    for (int k = 0; k < n; k++) {
        bool accepted = false;
        for (int attempt = 0; attempt < 1000; attempt++) {
            IdentitySpec cand =
                sample_identity(Rng::derive(seed, static_cast<uint64_t>(k) * 1009 + attempt));
            bool ok = true;
            for (const auto& prev : out)
                if (geometry_linf(cand, prev) <= kMinIdentitySeparation) {
                    ok = false;
                    break;
                }
            if (ok) {
                cand.id_label = k;
                out.push_back(std::move(cand));
                accepted = true;
                break;
            }
        }
        if (!accepted)
            throw GenerationError("identity rejection loop exceeded 1000 attempts at slot " +
                                  std::to_string(k));
    }
    return out;
}

DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
    if (cfg.n_identities < 4) throw ConfigError("data.n_identities: must be >= 4");
    if (cfg.refs_per_identity < 1) throw ConfigError("data.refs_per_identity: must be >= 1");
    if (cfg.hq_per_identity < 1) throw ConfigError("data.hq_per_identity: must be >= 1");
    if (!(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0))
        throw ConfigError("data.split_fraction: must be in (0, 1)");

    const auto identities = draw_identities(cfg.n_identities, cfg.seed);
    int n_train = static_cast<int>(std::llround(cfg.n_identities * cfg.split_fraction));
    n_train = std::clamp(n_train, 1, cfg.n_identities - 1);

    DatasetManifest m;
    m.seed = cfg.seed;
    m.image_size = cfg.image_size;
    m.refs_per_identity = cfg.refs_per_identity;
    m.base_dir = out_dir;

    char buf[64];
    for (int k = 0; k < cfg.n_identities; k++) {
        const IdentitySpec& id = identities[k];
        std::snprintf(buf, sizeof(buf), "images/%04d", k);
        const std::string id_dir = buf;
        fs::create_directories(fs::path(out_dir) / id_dir);

        std::vector<std::string> ref_paths;
        for (int r = 0; r < cfg.refs_per_identity; r++) {
            const NuisanceSpec nu = sample_nuisance(
                Rng::derive(cfg.seed, (static_cast<uint64_t>(k) << 20) | (0x10000u + r)));
            const Image img = render_face(id, nu, cfg.image_size);
            std::snprintf(buf, sizeof(buf), "%s/ref_%d.png", id_dir.c_str(), r);
            write_png((fs::path(out_dir) / buf).string(), img);
            ref_paths.push_back(buf);
        }
        for (int h = 0; h < cfg.hq_per_identity; h++) {
            const NuisanceSpec nu =
                sample_nuisance(Rng::derive(cfg.seed, (static_cast<uint64_t>(k) << 20) | h));
            const Image img = render_face(id, nu, cfg.image_size);
            std::snprintf(buf, sizeof(buf), "%s/hq_%d.png", id_dir.c_str(), h);
            write_png((fs::path(out_dir) / buf).string(), img);

            ManifestRecord rec;
            rec.id_label = k;
            rec.split = k < n_train ? "train" : "test";
            rec.hq = buf;
            rec.refs = ref_paths;
            m.records.push_back(std::move(rec));
        }
    }
    m.save((fs::path(out_dir) / "manifest.json").string());
    return m;
}

}  // namespace refface::toyfaces
