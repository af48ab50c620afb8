#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "cvattn/tensor.hpp"

namespace cvattn {

/// 8-bit grayscale raster, row-major.
struct GrayImage {
    Index h = 0;
    Index w = 0;
    std::vector<std::uint8_t> pixels;
};

/// Loads a PGM (P5) or grayscale PNG, dispatching on magic bytes. Other
/// formats and bit depths raise IoError naming the file.
GrayImage load_gray(const std::string& path);

void save_pgm(const GrayImage& img, const std::string& path);

/// 8-bit grayscale PNG, non-interlaced, filter 0, fixed zlib level; the
/// encoding is canonical so identical rasters produce identical bytes.
void save_png(const GrayImage& img, const std::string& path);

/// Picks the container from the extension (.png default, .pgm supported).
void save_gray(const GrayImage& img, const std::string& path);

/// Image as [1,H,W] with values on the k/255 grid in [0,1].
template <typename S>
Tensor<S> load_image(const std::string& path) {
    const GrayImage g = load_gray(path);
    Tensor<S> t = Tensor<S>::zeros({1, g.h, g.w});
    for (Index i = 0; i < t.numel(); ++i) {
        t.raw()[i] = static_cast<S>(g.pixels[static_cast<std::size_t>(i)]) / S(255);
    }
    return t;
}

template <typename S>
GrayImage to_gray8(const Tensor<S>& t) {
    const int r = t.rank();
    if (r < 2) throw ShapeError("to_gray8: need at least rank 2, got " + shape_str(t.shape()));
    GrayImage g;
    g.h = t.extent(r - 2);
    g.w = t.extent(r - 1);
    if (t.numel() != g.h * g.w) {
        throw ShapeError("to_gray8: single-plane tensor required, got " + shape_str(t.shape()));
    }
    g.pixels.resize(static_cast<std::size_t>(t.numel()));
    for (Index i = 0; i < t.numel(); ++i) {
        const double v = std::min(1.0, std::max(0.0, static_cast<double>(t.at(i))));
        g.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return g;
}

/// Clamps to [0,1] and quantizes to the 1/255 grid; exact inverse of
/// load_image for values already on that grid.
template <typename S>
void save_image(const Tensor<S>& t, const std::string& path) {
    save_gray(to_gray8(t), path);
}

/// Binary mask saved as {0, 255}.
template <typename S>
void save_mask(const Tensor<S>& mask, const std::string& path) {
    GrayImage g;
    const int r = mask.rank();
    g.h = mask.extent(r - 2);
    g.w = mask.extent(r - 1);
    if (mask.numel() != g.h * g.w) {
        throw ShapeError("save_mask: single-plane tensor required, got " + shape_str(mask.shape()));
    }
    g.pixels.resize(static_cast<std::size_t>(mask.numel()));
    for (Index i = 0; i < mask.numel(); ++i) {
        g.pixels[static_cast<std::size_t>(i)] = mask.at(i) != S(0) ? 255 : 0;
    }
    save_gray(g, path);
}

}  // namespace cvattn
