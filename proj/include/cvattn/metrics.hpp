#pragma once

#include <optional>

#include "cvattn/tensor.hpp"

namespace cvattn {

namespace detail {

template <typename S>
void check_binary_pair(const Tensor<S>& pred, const Tensor<S>& target, const char* name) {
    if (pred.shape() != target.shape()) {
        throw ShapeError(std::string(name) + ": " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    for (Index i = 0; i < pred.numel(); ++i) {
        if ((pred.at(i) != S(0) && pred.at(i) != S(1)) ||
            (target.at(i) != S(0) && target.at(i) != S(1))) {
            throw ConfigError(std::string(name) + ": masks must be binary {0,1}");
        }
    }
}

struct Confusion {
    Index tp = 0, fp = 0, fn = 0, tn = 0;
};

template <typename S>
Confusion confusion(const Tensor<S>& pred, const Tensor<S>& target) {
    Confusion c;
    for (Index i = 0; i < pred.numel(); ++i) {
        const bool p = pred.at(i) != S(0);
        const bool t = target.at(i) != S(0);
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

}  // namespace detail

/// 2|P n T| / (|P| + |T|); 1 when both masks are empty.
template <typename S>
double metric_dice(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_binary_pair(pred, target, "metric_dice");
    const auto c = detail::confusion(pred, target);
    const Index den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

/// |P n T| / |P u T|; 1 when both masks are empty.
template <typename S>
double metric_iou(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_binary_pair(pred, target, "metric_iou");
    const auto c = detail::confusion(pred, target);
    const Index den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

/// |P \ T| / |Omega \ T|; 0 when the background is empty.
template <typename S>
double metric_fpr(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_binary_pair(pred, target, "metric_fpr");
    const auto c = detail::confusion(pred, target);
    const Index den = c.fp + c.tn;
    return den == 0 ? 0.0 : static_cast<double>(c.fp) / static_cast<double>(den);
}

/// |T \ P| / |T|; 0 when the target is empty.
template <typename S>
double metric_fnr(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_binary_pair(pred, target, "metric_fnr");
    const auto c = detail::confusion(pred, target);
    const Index den = c.tp + c.fn;
    return den == 0 ? 0.0 : static_cast<double>(c.fn) / static_cast<double>(den);
}

namespace detail {

template <typename S>
std::vector<std::pair<Index, Index>> foreground(const Tensor<S>& mask) {
    std::vector<std::pair<Index, Index>> pts;
    const int r = mask.rank();
    const Index h = mask.extent(r - 2), w = mask.extent(r - 1);
    const Index planes = mask.numel() / (h * w);
    if (planes != 1) throw ShapeError("hausdorff: single-plane masks required");
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            if (mask.at(y * w + x) != S(0)) pts.emplace_back(y, x);
        }
    }
    return pts;
}

// max over a of min over b of squared distance; exact integer arithmetic.
// A point whose running min drops to the current answer can no longer raise
// the max and is skipped early; the result is identical to the full scan.
inline Index directed_max_min_sq(const std::vector<std::pair<Index, Index>>& a,
                                 const std::vector<std::pair<Index, Index>>& b) {
    Index answer = 0;
    for (const auto& [ay, ax] : a) {
        Index best = std::numeric_limits<Index>::max();
        for (const auto& [by, bx] : b) {
            const Index dy = ay - by, dx = ax - bx;
            const Index d = dy * dy + dx * dx;
            if (d < best) {
                best = d;
                if (best <= answer) break;
            }
        }
        if (best > answer) answer = best;
    }
    return answer;
}

}  // namespace detail

/// Symmetric Hausdorff distance between foreground pixel-coordinate sets,
/// scaled by spacing_mm. Computed in exact integer squared distances; any
/// accelerated variant must (and does) match the O(|P||T|) scan exactly.
template <typename S>
double metric_hausdorff(const Tensor<S>& pred, const Tensor<S>& target, double spacing_mm) {
    detail::check_binary_pair(pred, target, "metric_hausdorff");
    const auto p = detail::foreground(pred);
    const auto t = detail::foreground(target);
    if (p.empty()) throw EmptyMaskError("metric_hausdorff: empty predicted mask");
    if (t.empty()) throw EmptyMaskError("metric_hausdorff: empty target mask");
    const Index sq = std::max(detail::directed_max_min_sq(p, t), detail::directed_max_min_sq(t, p));
    return spacing_mm * std::sqrt(static_cast<double>(sq));
}

struct Stat {
    double mean = 0.0;
    double sd = 0.0;
};

inline Stat stat_of(const std::vector<double>& xs) {
    Stat s;
    if (xs.empty()) return s;
    for (double v : xs) s.mean += v;
    s.mean /= static_cast<double>(xs.size());
    double acc = 0;
    for (double v : xs) acc += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(acc / static_cast<double>(xs.size()));  // population sd
    return s;
}

/// Per-sample metrics; hausdorff_mm is absent when either mask was empty.
struct SampleMetrics {
    double dice = 0, iou = 0, fpr = 0, fnr = 0;
    std::optional<double> hausdorff_mm;
};

/// Mean and (population) standard deviation over an evaluation set. Samples
/// with an undefined Hausdorff distance are excluded from that statistic and
/// counted.
struct MetricsReport {
    Stat dice, iou, hausdorff_mm, fpr, fnr;
    int n_samples = 0;
    int hausdorff_excluded = 0;
};

inline MetricsReport aggregate(const std::vector<SampleMetrics>& rows) {
    MetricsReport r;
    r.n_samples = static_cast<int>(rows.size());
    std::vector<double> d, i, h, fp, fn;
    for (const auto& m : rows) {
        d.push_back(m.dice);
        i.push_back(m.iou);
        fp.push_back(m.fpr);
        fn.push_back(m.fnr);
        if (m.hausdorff_mm) h.push_back(*m.hausdorff_mm);
        else ++r.hausdorff_excluded;
    }
    r.dice = stat_of(d);
    r.iou = stat_of(i);
    r.hausdorff_mm = stat_of(h);
    r.fpr = stat_of(fp);
    r.fnr = stat_of(fn);
    return r;
}

template <typename S>
SampleMetrics sample_metrics(const Tensor<S>& pred, const Tensor<S>& target, double spacing_mm) {
    SampleMetrics m;
    m.dice = metric_dice(pred, target);
    m.iou = metric_iou(pred, target);
    m.fpr = metric_fpr(pred, target);
    m.fnr = metric_fnr(pred, target);
    try {
        m.hausdorff_mm = metric_hausdorff(pred, target, spacing_mm);
    } catch (const EmptyMaskError&) {
        m.hausdorff_mm.reset();
    }
    return m;
}

}  // namespace cvattn
