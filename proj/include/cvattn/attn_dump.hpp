#pragma once

#include <filesystem>

#include "cvattn/config_json.hpp"
#include "cvattn/image_io.hpp"
#include "cvattn/unet.hpp"

namespace cvattn {

/// Min-max rescaled 8-bit heatmap plus a sidecar JSON recording the mapping,
/// so maps stay comparable across epochs.
template <typename S>
void write_heatmap(const Tensor<S>& map, const std::string& png_path) {
    const int r = map.rank();
    if (r < 2 || map.numel() != map.extent(r - 2) * map.extent(r - 1)) {
        throw ShapeError("write_heatmap: single-plane map required, got " + shape_str(map.shape()));
    }
    double lo = static_cast<double>(map.at(0)), hi = lo;
    for (Index i = 1; i < map.numel(); ++i) {
        lo = std::min(lo, static_cast<double>(map.at(i)));
        hi = std::max(hi, static_cast<double>(map.at(i)));
    }
    GrayImage g;
    g.h = map.extent(r - 2);
    g.w = map.extent(r - 1);
    g.pixels.resize(static_cast<std::size_t>(map.numel()));
    const double span = hi > lo ? hi - lo : 1.0;
    for (Index i = 0; i < map.numel(); ++i) {
        const double v = (static_cast<double>(map.at(i)) - lo) / span;
        g.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    save_png(g, png_path);
    write_json_file(json{{"min", lo}, {"max", hi}}, png_path + ".json");
}

template <typename S>
Tensor<S> batch_of_one(const Tensor<S>& image) {
    if (image.rank() != 3) throw ShapeError("batch_of_one: [1,H,W] image required");
    Tensor<S> b = Tensor<S>::zeros({1, image.extent(0), image.extent(1), image.extent(2)});
    b.raw() = image.array();
    return b;
}

/// Per-gate heatmaps for one image: alpha/beta/gamma/zeta in chanvese mode,
/// alpha in classic mode. Files land in dir as
/// <tag>_gate<stage>_<map>.png (+ .json sidecars). Returns the forward
/// result for further inspection.
template <typename S>
ForwardResult<S> dump_attention(const Model<S>& model, const Tensor<S>& image,
                                const std::string& dir, const std::string& tag) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    ForwardResult<S> fwd = forward(model, batch_of_one(image));
    const int depth = model.cfg.depth;
    for (std::size_t k = 0; k < fwd.attn_maps.size(); ++k) {
        const int stage = depth - 1 - static_cast<int>(k);
        const std::string base =
            (fs::path(dir) / (tag + "_gate" + std::to_string(stage))).string();
        if (model.cfg.gate_mode == GateMode::chanvese) {
            const CvGateOutput<S>& gd = fwd.gate_diag[k];
            write_heatmap(gd.alpha, base + "_alpha.png");
            write_heatmap(gd.beta, base + "_beta.png");
            write_heatmap(gd.gamma, base + "_gamma.png");
            write_heatmap(gd.zeta, base + "_zeta.png");
        } else if (model.cfg.gate_mode == GateMode::classic) {
            write_heatmap(fwd.attn_maps[k], base + "_alpha.png");
        }
    }
    return fwd;
}

struct AttnMaskStats {
    double inside_mean = 0;
    double outside_mean = 0;
};

/// Mean attention value inside and outside a reference mask; the mask is
/// nearest-resampled when the map lives at a coarser gate resolution.
template <typename S>
AttnMaskStats attn_mask_stats(const Tensor<S>& map, const Tensor<S>& mask) {
    const int rm = map.rank();
    const Index h = map.extent(rm - 2), w = map.extent(rm - 1);
    const int rk = mask.rank();
    const Index mh = mask.extent(rk - 2), mw = mask.extent(rk - 1);
    AttnMaskStats s;
    double in_sum = 0, out_sum = 0;
    Index in_n = 0, out_n = 0;
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const Index my = std::min(mh - 1, y * mh / h);
            const Index mx = std::min(mw - 1, x * mw / w);
            const double v = static_cast<double>(map.at(y * w + x));
            if (mask.at(my * mw + mx) != S(0)) {
                in_sum += v;
                ++in_n;
            } else {
                out_sum += v;
                ++out_n;
            }
        }
    }
    if (in_n > 0) s.inside_mean = in_sum / static_cast<double>(in_n);
    if (out_n > 0) s.outside_mean = out_sum / static_cast<double>(out_n);
    return s;
}

}  // namespace cvattn
