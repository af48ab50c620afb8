#pragma once

#include <filesystem>
#include <fstream>

#include "cvattn/image_io.hpp"
#include "cvattn/ops.hpp"
#include "cvattn/rng.hpp"

namespace cvattn {

/// One dataset element: grayscale image in [0,1], binary mask, isotropic
/// pixel spacing in millimetres.
template <typename S>
struct Sample {
    Tensor<S> image;  // [1,H,W]
    Tensor<S> mask;   // [1,H,W], values {0,1}
    double spacing_mm = 1.0;
};

/// Synthetic corpus: a smooth background, one elliptical target at a fixed
/// contrast, and confounder blobs at exactly the target intensity so that a
/// purely intensity-driven segmenter captures them too.
struct SynthConfig {
    Index size = 64;
    int n_samples = 200;
    double contrast = 0.35;     // target intensity above the mid background
    double noise_sigma = 0.03;
    int confounders = 3;
    std::uint64_t seed = 1;

    void validate() const {
        if (size < 16) throw ConfigError("SynthConfig: size >= 16 required");
        if (n_samples < 1) throw ConfigError("SynthConfig: n_samples >= 1 required");
        if (contrast <= 0) throw ConfigError("SynthConfig: contrast > 0 required");
        if (noise_sigma < 0) throw ConfigError("SynthConfig: noise_sigma >= 0 required");
        if (confounders < 0) throw ConfigError("SynthConfig: confounders >= 0 required");
    }
};

template <typename S>
struct SynthSample {
    Sample<S> sample;
    Tensor<S> confounder_mask;  // [1,H,W], union of confounder blobs
};

namespace detail {

struct Ellipse {
    double cy, cx, a, b, theta;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(theta), s = std::sin(theta);
        const double u = c * dx + s * dy;
        const double v = -s * dx + c * dy;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    double radius() const { return std::max(a, b); }
};

}  // namespace detail

/// Fully seeded generation; the same config reproduces the corpus bit for
/// bit. Throws ConfigError when blob placement stays infeasible after
/// bounded retries.
template <typename S>
std::vector<SynthSample<S>> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    const Index n = cfg.size;
    const double scale = static_cast<double>(n) / 64.0;
    std::vector<SynthSample<S>> out;
    out.reserve(static_cast<std::size_t>(cfg.n_samples));
    for (int idx = 0; idx < cfg.n_samples; ++idx) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(idx), 0xDA7A));

        // Smooth background: coarse 5x5 field in [0.32, 0.38], bilinear. The
        // amplitude stays well below the target contrast so the two-phase
        // energy cannot profit from splitting the background itself.
        Tensor<S> coarse = Tensor<S>::zeros({1, 1, 5, 5});
        for (Index i = 0; i < coarse.numel(); ++i) {
            coarse.raw()[i] = static_cast<S>(rng.uniform(0.32, 0.38));
        }
        Tensor<S> bg = resize_bilinear(coarse, n, n);

        // Target ellipse; retried until the mask fraction lands in [1%, 20%].
        detail::Ellipse target{};
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            target.a = rng.uniform(6.0, 14.0) * scale;
            target.b = rng.uniform(4.0, 12.0) * scale;
            target.theta = rng.uniform(0.0, kPi);
            const double margin = target.radius() + 2.0;
            if (2 * margin >= static_cast<double>(n)) continue;
            target.cy = rng.uniform(margin, static_cast<double>(n) - margin);
            target.cx = rng.uniform(margin, static_cast<double>(n) - margin);
            const double frac = kPi * target.a * target.b / static_cast<double>(n * n);
            placed = frac >= 0.01 && frac <= 0.20;
        }
        if (!placed) throw ConfigError("generate_synthetic: target placement infeasible");

        // Confounder disks: same intensity as the target, never overlapping
        // it (center gap of 4 px beyond the bounding radii).
        std::vector<detail::Ellipse> confs;
        for (int k = 0; k < cfg.confounders; ++k) {
            bool ok = false;
            for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
                const double r = rng.uniform(3.0, 5.0) * scale;
                const double margin = r + 1.0;
                const double cy = rng.uniform(margin, static_cast<double>(n) - margin);
                const double cx = rng.uniform(margin, static_cast<double>(n) - margin);
                const double dt_ = std::hypot(cy - target.cy, cx - target.cx);
                if (dt_ < target.radius() + r + 4.0) continue;
                bool clash = false;
                for (const auto& c : confs) {
                    if (std::hypot(cy - c.cy, cx - c.cx) < c.radius() + r + 2.0) clash = true;
                }
                if (clash) continue;
                confs.push_back(detail::Ellipse{cy, cx, r, r, 0.0});
                ok = true;
            }
            if (!ok) throw ConfigError("generate_synthetic: confounder placement infeasible");
        }

        SynthSample<S> s;
        s.sample.image = Tensor<S>::zeros({1, n, n});
        s.sample.mask = Tensor<S>::zeros({1, n, n});
        s.confounder_mask = Tensor<S>::zeros({1, n, n});
        const double value = 0.35 + cfg.contrast;
        for (Index y = 0; y < n; ++y) {
            for (Index x = 0; x < n; ++x) {
                const Index i = y * n + x;
                double v = static_cast<double>(bg.at(i));
                const double py = static_cast<double>(y), px = static_cast<double>(x);
                if (target.contains(py, px)) {
                    v = value;
                    s.sample.mask.raw()[i] = S(1);
                }
                for (const auto& c : confs) {
                    if (c.contains(py, px)) {
                        v = value;
                        s.confounder_mask.raw()[i] = S(1);
                    }
                }
                if (cfg.noise_sigma > 0) v += cfg.noise_sigma * rng.normal();
                s.sample.image.raw()[i] = static_cast<S>(std::min(1.0, std::max(0.0, v)));
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

template <typename S>
std::vector<Sample<S>> strip_confounders(const std::vector<SynthSample<S>>& xs) {
    std::vector<Sample<S>> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(x.sample);
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentToggles {
    bool hflip = false;
    bool vflip = false;
    bool transpose = false;
    bool rotate = false;       // k*90 degrees plus a small bilinear angle <= 15
    bool shift_scale = false;  // shift <= 10%, scale in [0.9, 1.1]
    bool normalize = false;    // per-image standardization, image only
};

namespace detail {

template <typename S>
Tensor<S> flip_w(const Tensor<S>& t) {
    const Index h = t.extent(1), w = t.extent(2);
    Tensor<S> out = Tensor<S>::zeros(t.shape());
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out.raw()[y * w + x] = t.at(y * w + (w - 1 - x));
    return out;
}

template <typename S>
Tensor<S> flip_h(const Tensor<S>& t) {
    const Index h = t.extent(1), w = t.extent(2);
    Tensor<S> out = Tensor<S>::zeros(t.shape());
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out.raw()[y * w + x] = t.at((h - 1 - y) * w + x);
    return out;
}

template <typename S>
Tensor<S> transpose_hw(const Tensor<S>& t) {
    const Index h = t.extent(1), w = t.extent(2);
    Tensor<S> out = Tensor<S>::zeros({1, w, h});
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out.raw()[x * h + y] = t.at(y * w + x);
    return out;
}

template <typename S>
Tensor<S> rot90_k(const Tensor<S>& t, int k) {
    Tensor<S> out = t;
    for (int i = 0; i < (k % 4 + 4) % 4; ++i) out = flip_w(transpose_hw(out));
    return out;
}

/// Inverse-mapped affine resample about the image center:
///   src = R(-angle) (dst - c - shift) / scale + c.
/// Pixels sampling outside the domain become 0. Bilinear for images,
/// nearest for masks (keeps them binary).
template <typename S>
Tensor<S> affine_resample(const Tensor<S>& t, double angle, double shift_y, double shift_x,
                          double scale, bool nearest) {
    const Index h = t.extent(1), w = t.extent(2);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double ca = std::cos(-angle), sa = std::sin(-angle);
    Tensor<S> out = Tensor<S>::zeros(t.shape());
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const double dy = (static_cast<double>(y) - cy - shift_y) / scale;
            const double dx = (static_cast<double>(x) - cx - shift_x) / scale;
            const double sy = ca * dy - sa * dx + cy;
            const double sx = sa * dy + ca * dx + cx;
            S v = S(0);
            if (nearest) {
                const Index iy = static_cast<Index>(std::lround(sy));
                const Index ix = static_cast<Index>(std::lround(sx));
                if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = t.at(iy * w + ix);
            } else if (sy >= 0 && sy <= static_cast<double>(h - 1) && sx >= 0 &&
                       sx <= static_cast<double>(w - 1)) {
                const Index y0 = static_cast<Index>(std::floor(sy));
                const Index x0 = static_cast<Index>(std::floor(sx));
                const Index y1 = std::min(y0 + 1, h - 1);
                const Index x1 = std::min(x0 + 1, w - 1);
                const double fy = sy - static_cast<double>(y0);
                const double fx = sx - static_cast<double>(x0);
                const double v00 = static_cast<double>(t.at(y0 * w + x0));
                const double v01 = static_cast<double>(t.at(y0 * w + x1));
                const double v10 = static_cast<double>(t.at(y1 * w + x0));
                const double v11 = static_cast<double>(t.at(y1 * w + x1));
                v = static_cast<S>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                   fy * ((1 - fx) * v10 + fx * v11));
            }
            out.raw()[y * w + x] = v;
        }
    }
    return out;
}

}  // namespace detail

/// Each enabled toggle fires with probability 1/2; geometric transforms hit
/// image and mask identically (mask resampled nearest-neighbor, stays
/// binary); normalization standardizes the image only.
template <typename S>
Sample<S> augment(const Sample<S>& s, Rng& rng, const AugmentToggles& t) {
    Sample<S> out = s;
    if (t.hflip && rng.bernoulli(0.5)) {
        out.image = detail::flip_w(out.image);
        out.mask = detail::flip_w(out.mask);
    }
    if (t.vflip && rng.bernoulli(0.5)) {
        out.image = detail::flip_h(out.image);
        out.mask = detail::flip_h(out.mask);
    }
    if (t.transpose && rng.bernoulli(0.5)) {
        out.image = detail::transpose_hw(out.image);
        out.mask = detail::transpose_hw(out.mask);
    }
    if (t.rotate && rng.bernoulli(0.5)) {
        const int k = static_cast<int>(rng.uniform_int(0, 3));
        const double angle = rng.uniform(-15.0, 15.0) * kPi / 180.0;
        out.image = detail::rot90_k(out.image, k);
        out.mask = detail::rot90_k(out.mask, k);
        out.image = detail::affine_resample(out.image, angle, 0, 0, 1.0, false);
        out.mask = detail::affine_resample(out.mask, angle, 0, 0, 1.0, true);
    }
    if (t.shift_scale && rng.bernoulli(0.5)) {
        const double lim_y = 0.10 * static_cast<double>(out.image.extent(1));
        const double lim_x = 0.10 * static_cast<double>(out.image.extent(2));
        const double sy = rng.uniform(-lim_y, lim_y);
        const double sx = rng.uniform(-lim_x, lim_x);
        const double sc = rng.uniform(0.9, 1.1);
        out.image = detail::affine_resample(out.image, 0.0, sy, sx, sc, false);
        out.mask = detail::affine_resample(out.mask, 0.0, sy, sx, sc, true);
    }
    if (t.normalize && rng.bernoulli(0.5)) {
        double mean = 0;
        for (Index i = 0; i < out.image.numel(); ++i) mean += static_cast<double>(out.image.at(i));
        mean /= static_cast<double>(out.image.numel());
        double var = 0;
        for (Index i = 0; i < out.image.numel(); ++i) {
            const double d = static_cast<double>(out.image.at(i)) - mean;
            var += d * d;
        }
        const double sd = std::max(std::sqrt(var / static_cast<double>(out.image.numel())), 1e-8);
        Tensor<S> norm = Tensor<S>::zeros(out.image.shape());
        for (Index i = 0; i < out.image.numel(); ++i) {
            norm.raw()[i] = static_cast<S>((static_cast<double>(out.image.at(i)) - mean) / sd);
        }
        out.image = norm;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset layout: root/{images,masks}/NNNN.png + manifest.csv (+ split
// manifests) + synth_config.json. Manifest schema:
// image_path,mask_path,spacing_mm with paths relative to the manifest.
// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<std::size_t> train, val, test;
};

/// Seeded 70/15/15 shuffle split.
inline DatasetSplit split_dataset(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x5917, 0));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    DatasetSplit s;
    const std::size_t n_train = (n * 70) / 100;
    const std::size_t n_val = (n * 15) / 100;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train) s.train.push_back(order[i]);
        else if (i < n_train + n_val) s.val.push_back(order[i]);
        else s.test.push_back(order[i]);
    }
    return s;
}

namespace detail {

inline std::string sample_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04zu", i);
    return buf;
}

template <typename S>
void write_manifest(const std::string& path, const std::vector<std::size_t>& indices,
                    const std::vector<Sample<S>>& samples) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "image_path,mask_path,spacing_mm\n";
    for (std::size_t i : indices) {
        const std::string n = sample_name(i);
        os << "images/" << n << ".png,masks/" << n << ".png," << samples[i].spacing_mm << "\n";
    }
}

}  // namespace detail

template <typename S>
void save_dataset(const std::string& root, const std::vector<Sample<S>>& samples,
                  const DatasetSplit* split = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string n = detail::sample_name(i);
        save_image(samples[i].image, (fs::path(root) / "images" / (n + ".png")).string());
        save_mask(samples[i].mask, (fs::path(root) / "masks" / (n + ".png")).string());
    }
    std::vector<std::size_t> all(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) all[i] = i;
    detail::write_manifest((fs::path(root) / "manifest.csv").string(), all, samples);
    if (split) {
        detail::write_manifest((fs::path(root) / "manifest_train.csv").string(), split->train, samples);
        detail::write_manifest((fs::path(root) / "manifest_val.csv").string(), split->val, samples);
        detail::write_manifest((fs::path(root) / "manifest_test.csv").string(), split->test, samples);
    }
}

template <typename S>
std::vector<Sample<S>> load_manifest(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open manifest: " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty manifest: " + manifest_path);
    if (line != "image_path,mask_path,spacing_mm") {
        throw IoError("bad manifest header in " + manifest_path + ": " + line);
    }
    std::vector<Sample<S>> samples;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
            throw IoError("bad manifest row in " + manifest_path + ": " + line);
        }
        Sample<S> s;
        s.image = load_image<S>((base / line.substr(0, c1)).string());
        Tensor<S> m = load_image<S>((base / line.substr(c1 + 1, c2 - c1 - 1)).string());
        s.mask = Tensor<S>::zeros(m.shape());
        for (Index i = 0; i < m.numel(); ++i) s.mask.raw()[i] = m.at(i) > S(0.5) ? S(1) : S(0);
        s.spacing_mm = std::stod(line.substr(c2 + 1));
        if (s.image.shape() != s.mask.shape()) {
            throw IoError("image/mask shape mismatch in " + manifest_path + ": " + line);
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace cvattn
