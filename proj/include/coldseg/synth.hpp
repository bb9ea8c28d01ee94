#pragma once

// Synthetic segmentation scenes: a bright inner disk wrapped by a darker
// ring, with a side blob attached to the ring's left flank. Four classes
// (background, disk, ring, blob) with distinct intensity bands, mild shading
// and Gaussian noise. The generator is fully driven by named RNG streams, so
// a dataset is a pure function of (config, seed).
//
// The shifted test split reuses the in-domain test scenes and changes only
// the intensities (gamma curve, optional inversion, extra noise). Identity
// shift parameters therefore reproduce the in-domain split bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "coldseg/data.hpp"
#include "coldseg/rng.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

inline constexpr int kSceneClasses = 4;

struct SceneConfig {
    int size = 32;
    // Per-class intensity means: background, disk, ring, blob.
    std::array<double, kSceneClasses> class_mean{0.20, 0.85, 0.45, 0.65};
    double noise_std = 0.04;
    // Geometry, as fractions of the image side.
    double disk_r_lo = 0.14, disk_r_hi = 0.18;
    double ring_t_lo = 0.06, ring_t_hi = 0.09;
    double blob_r_lo = 0.09, blob_r_hi = 0.12;
    double center_jitter = 0.05;
    // Blob direction from the disk center, degrees (180 = straight left).
    double blob_angle_lo = 150.0, blob_angle_hi = 210.0;
    // Max magnitude of the horizontal shading ramp; per-image slope is
    // uniform in [-illum_slope, illum_slope].
    double illum_slope = 0.08;
    // Geometry redraws allowed before generation gives up. A draw is only
    // rejected when some class ends up with zero pixels, which the default
    // geometry does not produce; the cap guards against misconfiguration.
    int max_tries = 20;

    void validate() const {
        if (size < 8) throw std::invalid_argument("SceneConfig: size must be at least 8");
        if (noise_std < 0) throw std::invalid_argument("SceneConfig: noise_std must be >= 0");
        if (!(disk_r_lo > 0 && disk_r_hi >= disk_r_lo))
            throw std::invalid_argument("SceneConfig: bad disk radius range");
        if (!(ring_t_lo > 0 && ring_t_hi >= ring_t_lo))
            throw std::invalid_argument("SceneConfig: bad ring thickness range");
        if (!(blob_r_lo > 0 && blob_r_hi >= blob_r_lo))
            throw std::invalid_argument("SceneConfig: bad blob radius range");
        if (center_jitter < 0 || center_jitter > 0.2)
            throw std::invalid_argument("SceneConfig: center_jitter must be in [0, 0.2]");
        if (max_tries < 1) throw std::invalid_argument("SceneConfig: max_tries must be >= 1");
    }
};

struct ShiftConfig {
    double gamma_lo = 1.6, gamma_hi = 2.4;
    double invert_p = 0.5;
    double extra_noise = 0.05;

    bool is_identity() const {
        return gamma_lo == 1.0 && gamma_hi == 1.0 && invert_p == 0.0 && extra_noise == 0.0;
    }

    void validate() const {
        if (!(gamma_lo > 0 && gamma_hi >= gamma_lo))
            throw std::invalid_argument("ShiftConfig: bad gamma range");
        if (invert_p < 0 || invert_p > 1)
            throw std::invalid_argument("ShiftConfig: invert_p must be in [0, 1]");
        if (extra_noise < 0) throw std::invalid_argument("ShiftConfig: extra_noise must be >= 0");
    }
};

struct AugmentConfig {
    bool enabled = true;
    double hflip_p = 0.5;
    double vflip_p = 0.0;
    double rot_max_deg = 15.0;
    double scale_lo = 0.9, scale_hi = 1.1;
    double noise_std = 0.02;

    void validate() const {
        if (hflip_p < 0 || hflip_p > 1 || vflip_p < 0 || vflip_p > 1)
            throw std::invalid_argument("AugmentConfig: flip probabilities must be in [0, 1]");
        if (rot_max_deg < 0 || rot_max_deg > 180)
            throw std::invalid_argument("AugmentConfig: rot_max_deg must be in [0, 180]");
        if (!(scale_lo > 0 && scale_hi >= scale_lo))
            throw std::invalid_argument("AugmentConfig: bad scale range");
        if (noise_std < 0) throw std::invalid_argument("AugmentConfig: noise_std must be >= 0");
    }
};

struct SplitCounts {
    int train = 24, val = 8, test = 24;

    void validate() const {
        if (train < 1 || val < 1 || test < 1)
            throw std::invalid_argument("SplitCounts: every split needs at least one example");
    }
};

namespace detail {

struct SceneGeometry {
    double cx, cy;       // disk center, pixels
    double disk_r;       // inner disk radius
    double ring_out;     // outer ring radius
    double blob_r;       // blob radius
    double bx, by;       // blob center
    double slope;        // horizontal shading slope
};

inline SceneGeometry draw_geometry(const SceneConfig& cfg, RngStream& rng) {
    const double s = static_cast<double>(cfg.size);
    SceneGeometry g;
    g.cx = 0.5 * (s - 1) + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * s;
    g.cy = 0.5 * (s - 1) + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * s;
    g.disk_r = rng.uniform(cfg.disk_r_lo, cfg.disk_r_hi) * s;
    g.ring_out = g.disk_r + rng.uniform(cfg.ring_t_lo, cfg.ring_t_hi) * s;
    g.blob_r = rng.uniform(cfg.blob_r_lo, cfg.blob_r_hi) * s;
    const double theta = rng.uniform(cfg.blob_angle_lo, cfg.blob_angle_hi) * (3.14159265358979323846 / 180.0);
    const double dist = g.ring_out + 0.5 * g.blob_r;
    g.bx = g.cx + dist * std::cos(theta);
    g.by = g.cy + dist * std::sin(theta);
    g.slope = rng.uniform(-cfg.illum_slope, cfg.illum_slope);
    return g;
}

// Priority labeling: disk beats ring beats blob, so the blob shows up as a
// crescent clipped by the ring it leans against.
inline std::uint8_t label_at(const SceneGeometry& g, int x, int y) {
    const double dx = x - g.cx, dy = y - g.cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    if (d <= g.disk_r) return 1;
    if (d <= g.ring_out) return 2;
    const double bx = x - g.bx, by = y - g.by;
    if (std::sqrt(bx * bx + by * by) <= g.blob_r) return 3;
    return 0;
}

}  // namespace detail

// Draw one scene from the given stream. Redraws the geometry (from the same
// stream) until every class has at least one pixel; errors out after
// cfg.max_tries rejected draws.
inline Example<float> generate_scene(const SceneConfig& cfg, RngStream& rng) {
    cfg.validate();
    const int n = cfg.size;
    for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
        const detail::SceneGeometry g = detail::draw_geometry(cfg, rng);

        LabelMap label({n, n});
        std::array<int, kSceneClasses> count{};
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const std::uint8_t c = detail::label_at(g, x, y);
                label.at(y, x) = c;
                ++count[c];
            }
        }
        bool ok = true;
        for (int c = 0; c < kSceneClasses; ++c) ok = ok && count[c] > 0;
        if (!ok) continue;

        Tensor<float> image({1, n, n});
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                double v = cfg.class_mean[label.at(y, x)];
                v += g.slope * (static_cast<double>(x) / (n - 1) - 0.5);
                v += cfg.noise_std * rng.normal();
                image.at(0, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
        return Example<float>{std::move(image), std::move(label), ""};
    }
    throw std::runtime_error("generate_scene: geometry rejected " +
                             std::to_string(cfg.max_tries) + " times; check the config");
}

// Intensity-only distribution shift: gamma curve, optional inversion, extra
// noise. Labels are untouched. Identity parameters return the input bit for
// bit (no draws are wasted on disabled stages beyond the inversion coin).
inline Example<float> apply_shift(const Example<float>& ex, const ShiftConfig& cfg, RngStream& rng) {
    cfg.validate();
    Example<float> out{ex.image, ex.label, ex.id};
    const double gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
    const bool invert = cfg.invert_p > 0.0 && rng.bernoulli(cfg.invert_p);
    for (float& v : out.image.v) {
        double d = static_cast<double>(v);
        if (gamma != 1.0) d = std::pow(std::clamp(d, 0.0, 1.0), gamma);
        if (invert) d = 1.0 - d;
        if (cfg.extra_noise > 0.0) d += cfg.extra_noise * rng.normal();
        v = static_cast<float>(std::clamp(d, 0.0, 1.0));
    }
    return out;
}

namespace detail {

struct WarpParams {
    bool hflip = false, vflip = false;
    double angle_rad = 0.0;
};

// Inverse-map a destination pixel to source coordinates. Forward order is
// flip then rotate, both about the image center, so the inverse rotates back
// first and then un-flips.
inline std::pair<double, double> warp_source(const WarpParams& p, int w, int h, int x, int y) {
    const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
    const double c = std::cos(p.angle_rad), s = std::sin(p.angle_rad);
    double sx = cx + c * (x - cx) + s * (y - cy);
    double sy = cy - s * (x - cx) + c * (y - cy);
    if (p.hflip) sx = (w - 1) - sx;
    if (p.vflip) sy = (h - 1) - sy;
    return {sx, sy};
}

inline float bilinear(const Tensor<float>& img, int ch, double sx, double sy, float fill) {
    const int w = img.dim(2), h = img.dim(1);
    // Tolerate sub-ulp excursions past the frame so exact quarter turns stay
    // grid-exact even though cos(pi/2) is not exactly zero.
    constexpr double edge = 1e-9;
    if (sx < -edge || sy < -edge || sx > w - 1 + edge || sy > h - 1 + edge) return fill;
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
    if (x0 == w - 1) --x0;
    if (y0 == h - 1) --y0;
    if (w == 1) x0 = 0;
    if (h == 1) y0 = 0;
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = sx - x0, fy = sy - y0;
    const double v = (1 - fx) * (1 - fy) * img.at(ch, y0, x0) + fx * (1 - fy) * img.at(ch, y0, x1) +
                     (1 - fx) * fy * img.at(ch, y1, x0) + fx * fy * img.at(ch, y1, x1);
    return static_cast<float>(v);
}

}  // namespace detail

// Training-time augmentation: random flips and a small rotation applied to
// image and label together (bilinear and nearest respectively), then an
// intensity scale and additive noise on the image alone. Pixels whose source
// falls outside the frame read background: label 0 and bg_fill intensity.
inline Example<float> augment_example(const Example<float>& ex, const AugmentConfig& cfg,
                                      RngStream& rng, float bg_fill = 0.2f) {
    cfg.validate();
    if (!cfg.enabled) return ex;
    if (ex.image.rank() != 3 || ex.label.rank() != 2)
        throw std::invalid_argument("augment_example: expects [C,H,W] image and [H,W] label");

    detail::WarpParams p;
    p.hflip = cfg.hflip_p > 0.0 && rng.bernoulli(cfg.hflip_p);
    p.vflip = cfg.vflip_p > 0.0 && rng.bernoulli(cfg.vflip_p);
    if (cfg.rot_max_deg > 0.0)
        p.angle_rad = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg) * (3.14159265358979323846 / 180.0);
    const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);

    const int ch = ex.image.dim(0), h = ex.image.dim(1), w = ex.image.dim(2);
    Example<float> out;
    out.id = ex.id;
    out.image = Tensor<float>({ch, h, w});
    out.label = LabelMap({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto [sx, sy] = detail::warp_source(p, w, h, x, y);
            for (int c = 0; c < ch; ++c) out.image.at(c, y, x) = detail::bilinear(ex.image, c, sx, sy, bg_fill);
            const long nx = std::lround(sx), ny = std::lround(sy);
            out.label.at(y, x) = (nx < 0 || ny < 0 || nx >= w || ny >= h)
                                  ? std::uint8_t{0}
                                  : ex.label.at(static_cast<int>(ny), static_cast<int>(nx));
        }
    }
    if (scale != 1.0 || cfg.noise_std > 0.0) {
        for (float& v : out.image.v) {
            double d = scale * static_cast<double>(v);
            if (cfg.noise_std > 0.0) d += cfg.noise_std * rng.normal();
            v = static_cast<float>(std::clamp(d, 0.0, 1.0));
        }
    }
    return out;
}

namespace detail {

inline std::string split_id(const char* prefix, int index) {
    std::string n = std::to_string(index);
    while (n.size() < 3) n.insert(n.begin(), '0');
    return std::string(prefix) + "-" + n;
}

}  // namespace detail

// Stream index offsets keep the splits independent of each other and of the
// split sizes. The shifted split deliberately has no offset of its own: it
// reuses the in-domain test scenes and only re-renders their intensities.
inline constexpr std::uint64_t kTrainStreamOffset = 0;
inline constexpr std::uint64_t kValStreamOffset = 10000;
inline constexpr std::uint64_t kTestStreamOffset = 20000;

inline DatasetBundle generate_dataset(const SceneConfig& scene, const ShiftConfig& shift,
                                      const SplitCounts& counts, std::uint64_t seed) {
    scene.validate();
    shift.validate();
    counts.validate();

    DatasetBundle out;
    auto make = [&](Dataset<float>& dst, const char* prefix, std::uint64_t offset, int n) {
        dst.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            RngStream rng = derive_stream(seed, "scene", offset + static_cast<std::uint64_t>(i));
            Example<float> ex = generate_scene(scene, rng);
            ex.id = detail::split_id(prefix, i);
            dst.push_back(std::move(ex));
        }
    };
    make(out.train, "train", kTrainStreamOffset, counts.train);
    make(out.val, "val", kValStreamOffset, counts.val);
    make(out.test_in, "test", kTestStreamOffset, counts.test);

    out.test_shift.reserve(static_cast<std::size_t>(counts.test));
    for (int i = 0; i < counts.test; ++i) {
        RngStream srng = derive_stream(seed, "shift", static_cast<std::uint64_t>(i));
        Example<float> ex = apply_shift(out.test_in[static_cast<std::size_t>(i)], shift, srng);
        ex.id = detail::split_id("shift", i);
        out.test_shift.push_back(std::move(ex));
    }
    return out;
}

}  // namespace coldseg
