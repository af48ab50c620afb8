#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "cvattn/parallel.hpp"
#include "cvattn/tape.hpp"

namespace cvattn {

// ---------------------------------------------------------------------------
// Activation-pattern probe
//
// Central differences are only a valid oracle where the program is smooth
// along the probe segment. Ops with discrete decisions (relu sign, pool and
// min/max argmax routing, degenerate-region fallbacks) fold their decisions
// into a thread-local hash while a probe is active; a finite-difference
// harness can then detect and discard probes that straddle a kink.
// ---------------------------------------------------------------------------

inline std::uint64_t*& activation_pattern_slot() {
    thread_local std::uint64_t* p = nullptr;
    return p;
}

inline void fold_decision(std::uint64_t v) {
    if (std::uint64_t* h = activation_pattern_slot()) {
        *h = (*h ^ (v + 0x9e3779b97f4a7c15ULL)) * 1099511628211ULL;
    }
}

class ActivationPatternProbe {
public:
    ActivationPatternProbe() : prev_(activation_pattern_slot()) { activation_pattern_slot() = &hash_; }
    ~ActivationPatternProbe() { activation_pattern_slot() = prev_; }
    ActivationPatternProbe(const ActivationPatternProbe&) = delete;
    ActivationPatternProbe& operator=(const ActivationPatternProbe&) = delete;
    std::uint64_t hash() const { return hash_; }

private:
    std::uint64_t hash_ = 1469598103934665603ULL;
    std::uint64_t* prev_;
};

// ---------------------------------------------------------------------------
// Recording helpers
// ---------------------------------------------------------------------------

template <typename S>
bool should_record(std::initializer_list<const Tensor<S>*> inputs) {
    if (!Tape<S>::active()) return false;
    for (const Tensor<S>* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Pointwise unary ops
// ---------------------------------------------------------------------------

/// Elementwise y = f(x) with backward dy/dx = df(x, y). The building block
/// for all unary primitives including the smoothed Heaviside family.
template <typename S, typename F, typename DF>
Tensor<S> pointwise_unary(const Tensor<S>& x, const char* name, F f, DF df) {
    Tensor<S> y = Tensor<S>::zeros(x.shape());
    const S* xp = x.data();
    S* yp = y.mutable_data();
    const Index n = x.numel();
    for (Index i = 0; i < n; ++i) yp[i] = f(xp[i]);
    ensure_finite(y, name);
    if (should_record<S>({&x})) {
        Tape<S>::active()->record(name, {&x}, y, [x, y, df, name](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            typename Tape<S>::GradArray gx(x.numel());
            const S* xv = x.data();
            const S* yv = y.data();
            for (Index i = 0; i < x.numel(); ++i) gx[i] = (*g)[i] * df(xv[i], yv[i]);
            t.accumulate(x, std::move(gx));
        });
    }
    return y;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    // Subgradient at 0 is 0.
    return pointwise_unary(
        x, "relu",
        [](S v) {
            const bool on = v > S(0);
            fold_decision(on);
            return on ? v : S(0);
        },
        [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
S stable_sigmoid(S z) {
    S y;
    if (z >= S(0)) {
        const S e = std::exp(-z);
        y = S(1) / (S(1) + e);
    } else {
        const S e = std::exp(z);
        y = e / (S(1) + e);
    }
    // Keep the contract sigma(z) strictly inside (0,1) even when rounding
    // would saturate.
    const S lo = std::numeric_limits<S>::denorm_min();
    const S hi = std::nextafter(S(1), S(0));
    return std::min(hi, std::max(lo, y));
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    return pointwise_unary(
        x, "sigmoid", [](S v) { return stable_sigmoid(v); },
        [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
    return pointwise_unary(
        x, "square", [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
    if (should_record<S>({&x})) {
        for (Index i = 0; i < x.numel(); ++i) {
            if (x.at(i) <= S(0)) {
                throw NumericError("sqrt: argument must be > 0 on the differentiable path, got " +
                                   std::to_string(static_cast<double>(x.at(i))) + " at flat index " +
                                   std::to_string(i));
            }
        }
    }
    return pointwise_unary(
        x, "sqrt", [](S v) { return std::sqrt(v); },
        [](S, S y) { return S(1) / (S(2) * y); });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
    for (Index i = 0; i < x.numel(); ++i) {
        if (x.at(i) <= S(0)) {
            throw NumericError("log: argument must be > 0, got " +
                               std::to_string(static_cast<double>(x.at(i))) + " at flat index " +
                               std::to_string(i));
        }
    }
    return pointwise_unary(
        x, "log", [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& x, S c) {
    return pointwise_unary(
        x, "scalar_mul", [c](S v) { return c * v; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> scalar_add(const Tensor<S>& x, S c) {
    return pointwise_unary(
        x, "scalar_add", [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops (rank <= 4, right-aligned singleton expansion)
// ---------------------------------------------------------------------------

namespace detail {

struct Bcast {
    Index e[4];            // output extents, left-padded to rank 4
    Index sa[4], sb[4];    // input strides in the padded frame (0 = broadcast)
    Shape out_shape;
    bool same_shape;
};

inline Bcast make_bcast(const Shape& a, const Shape& b, const char* name) {
    if (a.size() > 4 || b.size() > 4) {
        throw ShapeError(std::string(name) + ": broadcasting supports rank <= 4, got " +
                         shape_str(a) + " and " + shape_str(b));
    }
    Bcast bc;
    const int r = static_cast<int>(std::max(a.size(), b.size()));
    Index pa[4] = {1, 1, 1, 1}, pb[4] = {1, 1, 1, 1};
    for (int i = 0; i < static_cast<int>(a.size()); ++i) pa[4 - a.size() + i] = a[i];
    for (int i = 0; i < static_cast<int>(b.size()); ++i) pb[4 - b.size() + i] = b[i];
    for (int d = 0; d < 4; ++d) {
        if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
            throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b) + " (dim " + std::to_string(d - (4 - r)) + ")");
        }
        bc.e[d] = std::max(pa[d], pb[d]);
    }
    Index stra = 1, strb = 1;
    for (int d = 3; d >= 0; --d) {
        bc.sa[d] = (pa[d] == 1 && bc.e[d] > 1) ? 0 : stra;
        bc.sb[d] = (pb[d] == 1 && bc.e[d] > 1) ? 0 : strb;
        stra *= pa[d];
        strb *= pb[d];
    }
    bc.out_shape.assign(bc.e + (4 - r), bc.e + 4);
    bc.same_shape = (a == b);
    return bc;
}

}  // namespace detail

/// Elementwise out = f(a, b) with broadcasting; dfa/dfb give the per-element
/// partials as functions of (a_value, b_value).
template <typename S, typename F, typename DFA, typename DFB>
Tensor<S> pointwise_binary(const Tensor<S>& a, const Tensor<S>& b, const char* name, F f, DFA dfa,
                           DFB dfb) {
    const detail::Bcast bc = detail::make_bcast(a.shape(), b.shape(), name);
    Tensor<S> out = Tensor<S>::zeros(bc.out_shape);
    const S* ap = a.data();
    const S* bp = b.data();
    S* op = out.mutable_data();
    if (bc.same_shape) {
        for (Index i = 0; i < out.numel(); ++i) op[i] = f(ap[i], bp[i]);
    } else {
        Index o = 0;
        for (Index i0 = 0; i0 < bc.e[0]; ++i0)
            for (Index i1 = 0; i1 < bc.e[1]; ++i1)
                for (Index i2 = 0; i2 < bc.e[2]; ++i2) {
                    Index ia = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
                    Index ib = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
                    for (Index i3 = 0; i3 < bc.e[3]; ++i3) {
                        op[o++] = f(ap[ia], bp[ib]);
                        ia += bc.sa[3];
                        ib += bc.sb[3];
                    }
                }
    }
    ensure_finite(out, name);
    if (should_record<S>({&a, &b})) {
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        Tape<S>::active()->record(name, {&a, &b}, out,
                                  [a, b, out, bc, dfa, dfb, need_a, need_b](Tape<S>& t) {
            const auto* g = t.find_grad(out.id());
            if (!g) return;
            const S* ap = a.data();
            const S* bp = b.data();
            typename Tape<S>::GradArray ga, gb;
            if (need_a) ga = Tape<S>::GradArray::Zero(a.numel());
            if (need_b) gb = Tape<S>::GradArray::Zero(b.numel());
            Index o = 0;
            for (Index i0 = 0; i0 < bc.e[0]; ++i0)
                for (Index i1 = 0; i1 < bc.e[1]; ++i1)
                    for (Index i2 = 0; i2 < bc.e[2]; ++i2) {
                        Index ia = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
                        Index ib = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
                        for (Index i3 = 0; i3 < bc.e[3]; ++i3) {
                            const S gv = (*g)[o++];
                            if (need_a) ga[ia] += gv * dfa(ap[ia], bp[ib]);
                            if (need_b) gb[ib] += gv * dfb(ap[ia], bp[ib]);
                            ia += bc.sa[3];
                            ib += bc.sb[3];
                        }
                    }
            if (need_a) t.accumulate(a, std::move(ga));
            if (need_b) t.accumulate(b, std::move(gb));
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return pointwise_binary(
        a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
        [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return pointwise_binary(
        a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
        [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return pointwise_binary(
        a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; },
        [](S x, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return pointwise_binary(
        a, b, "div", [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
        [](S x, S y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

struct ReducePlan {
    Index e[4];          // input extents padded to rank 4
    Index os[4];         // output stride per padded input dim (0 = reduced)
    Shape out_shape;
    Index count;         // elements folded into each output cell
    Index out_numel;
};

inline ReducePlan make_reduce_plan(const Shape& in, std::vector<int> axes, bool keepdims,
                                   const char* name) {
    const int r = static_cast<int>(in.size());
    if (r > 4) throw ShapeError(std::string(name) + ": rank <= 4 required, got " + shape_str(in));
    std::vector<bool> reduced(static_cast<std::size_t>(r), false);
    if (axes.empty()) {
        std::fill(reduced.begin(), reduced.end(), true);
    } else {
        for (int a : axes) {
            if (a < 0 || a >= r) {
                throw ShapeError(std::string(name) + ": axis " + std::to_string(a) +
                                 " out of range for shape " + shape_str(in));
            }
            reduced[static_cast<std::size_t>(a)] = true;
        }
    }
    ReducePlan plan;
    plan.count = 1;
    plan.out_shape.clear();
    for (int d = 0; d < r; ++d) {
        if (reduced[static_cast<std::size_t>(d)]) {
            plan.count *= in[d];
            if (keepdims) plan.out_shape.push_back(1);
        } else {
            plan.out_shape.push_back(in[d]);
        }
    }
    plan.out_numel = numel_of(plan.out_shape);
    const int pad = 4 - r;
    for (int d = 0; d < 4; ++d) plan.e[d] = 1;
    for (int d = 0; d < r; ++d) plan.e[pad + d] = in[d];
    // Output strides in the padded frame; reduced dims contribute stride 0.
    Index stride = 1;
    for (int d = r - 1; d >= 0; --d) {
        if (reduced[static_cast<std::size_t>(d)]) {
            plan.os[pad + d] = 0;
        } else {
            plan.os[pad + d] = stride;
            stride *= in[d];
        }
    }
    for (int d = 0; d < pad; ++d) plan.os[d] = 0;
    return plan;
}

}  // namespace detail

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x, std::vector<int> axes = {}, bool keepdims = false) {
    const detail::ReducePlan plan = detail::make_reduce_plan(x.shape(), axes, keepdims, "reduce_sum");
    Tensor<S> out = Tensor<S>::zeros(plan.out_shape);
    const S* xp = x.data();
    S* op = out.mutable_data();
    Index i = 0;
    for (Index i0 = 0; i0 < plan.e[0]; ++i0)
        for (Index i1 = 0; i1 < plan.e[1]; ++i1)
            for (Index i2 = 0; i2 < plan.e[2]; ++i2) {
                Index o = i0 * plan.os[0] + i1 * plan.os[1] + i2 * plan.os[2];
                for (Index i3 = 0; i3 < plan.e[3]; ++i3) {
                    op[o] += xp[i++];
                    o += plan.os[3];
                }
            }
    ensure_finite(out, "reduce_sum");
    if (should_record<S>({&x})) {
        Tape<S>::active()->record("reduce_sum", {&x}, out, [x, out, plan](Tape<S>& t) {
            const auto* g = t.find_grad(out.id());
            if (!g) return;
            typename Tape<S>::GradArray gx(x.numel());
            Index i = 0;
            for (Index i0 = 0; i0 < plan.e[0]; ++i0)
                for (Index i1 = 0; i1 < plan.e[1]; ++i1)
                    for (Index i2 = 0; i2 < plan.e[2]; ++i2) {
                        Index o = i0 * plan.os[0] + i1 * plan.os[1] + i2 * plan.os[2];
                        for (Index i3 = 0; i3 < plan.e[3]; ++i3) {
                            gx[i++] = (*g)[o];
                            o += plan.os[3];
                        }
                    }
            t.accumulate(x, std::move(gx));
        });
    }
    return out;
}

template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& x, std::vector<int> axes = {}, bool keepdims = false) {
    const detail::ReducePlan plan = detail::make_reduce_plan(x.shape(), axes, keepdims, "reduce_mean");
    Tensor<S> s = reduce_sum(x, axes, keepdims);
    return scalar_mul(s, S(1) / static_cast<S>(plan.count));
}

namespace detail {

template <typename S, bool kMax>
Tensor<S> reduce_extreme(const Tensor<S>& x, std::vector<int> axes, bool keepdims) {
    const char* name = kMax ? "reduce_max" : "reduce_min";
    const ReducePlan plan = make_reduce_plan(x.shape(), axes, keepdims, name);
    Tensor<S> out = Tensor<S>::zeros(plan.out_shape);
    auto args = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(plan.out_numel), Index(-1));
    const S* xp = x.data();
    S* op = out.mutable_data();
    Index i = 0;
    for (Index i0 = 0; i0 < plan.e[0]; ++i0)
        for (Index i1 = 0; i1 < plan.e[1]; ++i1)
            for (Index i2 = 0; i2 < plan.e[2]; ++i2) {
                Index o = i0 * plan.os[0] + i1 * plan.os[1] + i2 * plan.os[2];
                for (Index i3 = 0; i3 < plan.e[3]; ++i3) {
                    // First occurrence in row-major order wins ties.
                    const bool better = (*args)[o] < 0 || (kMax ? xp[i] > op[o] : xp[i] < op[o]);
                    if (better) {
                        op[o] = xp[i];
                        (*args)[o] = i;
                    }
                    ++i;
                    o += plan.os[3];
                }
            }
    ensure_finite(out, name);
    if (activation_pattern_slot()) {
        for (Index a : *args) fold_decision(static_cast<std::uint64_t>(a));
    }
    if (should_record<S>({&x})) {
        Tape<S>::active()->record(name, {&x}, out, [x, out, args](Tape<S>& t) {
            const auto* g = t.find_grad(out.id());
            if (!g) return;
            typename Tape<S>::GradArray gx = Tape<S>::GradArray::Zero(x.numel());
            for (Index o = 0; o < static_cast<Index>(args->size()); ++o) {
                gx[(*args)[o]] += (*g)[o];
            }
            t.accumulate(x, std::move(gx));
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> reduce_max(const Tensor<S>& x, std::vector<int> axes = {}, bool keepdims = false) {
    return detail::reduce_extreme<S, true>(x, axes, keepdims);
}

template <typename S>
Tensor<S> reduce_min(const Tensor<S>& x, std::vector<int> axes = {}, bool keepdims = false) {
    return detail::reduce_extreme<S, false>(x, axes, keepdims);
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation convention, no kernel flip)
// ---------------------------------------------------------------------------

namespace detail {

inline Index conv_out_extent(Index in, Index k, Index stride, Index padding) {
    return (in + 2 * padding - k) / stride + 1;
}

inline Index conv_lo(Index k, Index p, Index s) {
    const Index a = p - k;
    return a <= 0 ? 0 : (a + s - 1) / s;
}

inline Index conv_hi(Index k, Index p, Index s, Index in, Index out) {
    const Index a = in - 1 - k + p;
    return a < 0 ? -1 : std::min(out - 1, a / s);
}

}  // namespace detail

/// 2-d cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw] plus an
/// optional bias b[Cout]; zero padding (possibly different per axis).
/// Output extent: H' = (H + 2*pad_h - kh)/stride + 1 (floor), likewise W'.
template <typename S>
Tensor<S> conv2d_hw(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Index stride,
                    Index pad_h, Index pad_w) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw ShapeError("conv2d: need rank-4 input and kernel, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    }
    const Index N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
    const Index Cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    if (w.extent(1) != Cin) {
        throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels but kernel expects " +
                         std::to_string(w.extent(1)));
    }
    if (kh % 2 == 0 || kw % 2 == 0) {
        throw ShapeError("conv2d: kernel extents must be odd, got " + std::to_string(kh) + "x" +
                         std::to_string(kw));
    }
    if (stride < 1 || pad_h < 0 || pad_w < 0) {
        throw ConfigError("conv2d: stride >= 1 and padding >= 0 required");
    }
    const bool has_b = b.defined() && b.numel() > 0;
    if (has_b && (b.rank() != 1 || b.extent(0) != Cout)) {
        throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " does not match Cout " +
                         std::to_string(Cout));
    }
    const Index Ho = detail::conv_out_extent(H, kh, stride, pad_h);
    const Index Wo = detail::conv_out_extent(W, kw, stride, pad_w);
    if (Ho < 1 || Wo < 1) {
        throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()) + " kernel " +
                         shape_str(w.shape()));
    }

    Tensor<S> y = Tensor<S>::zeros({N, Cout, Ho, Wo});
    const S* xp = x.data();
    const S* wp = w.data();
    const S* bp = has_b ? b.data() : nullptr;
    S* yp = y.mutable_data();
    using CMap = Eigen::Map<const typename Tensor<S>::Storage>;
    using MMap = Eigen::Map<typename Tensor<S>::Storage>;

    parallel_for(0, N * Cout, [&](Index nc) {
        const Index n = nc / Cout, co = nc % Cout;
        S* ybase = yp + ((n * Cout + co) * Ho) * Wo;
        MMap(ybase, Ho * Wo).setConstant(has_b ? bp[co] : S(0));
        for (Index ci = 0; ci < Cin; ++ci) {
            const S* xbase = xp + ((n * Cin + ci) * H) * W;
            const S* wbase = wp + ((co * Cin + ci) * kh) * kw;
            for (Index ky = 0; ky < kh; ++ky) {
                const Index oh0 = detail::conv_lo(ky, pad_h, stride);
                const Index oh1 = detail::conv_hi(ky, pad_h, stride, H, Ho);
                for (Index kx = 0; kx < kw; ++kx) {
                    const S wv = wbase[ky * kw + kx];
                    if (wv == S(0)) continue;
                    const Index ow0 = detail::conv_lo(kx, pad_w, stride);
                    const Index ow1 = detail::conv_hi(kx, pad_w, stride, W, Wo);
                    if (ow1 < ow0) continue;
                    for (Index oh = oh0; oh <= oh1; ++oh) {
                        const Index ih = oh * stride + ky - pad_h;
                        S* yrow = ybase + oh * Wo;
                        const S* xrow = xbase + ih * W;
                        if (stride == 1) {
                            const Index len = ow1 - ow0 + 1;
                            MMap(yrow + ow0, len) += wv * CMap(xrow + ow0 + kx - pad_w, len);
                        } else {
                            for (Index ow = ow0; ow <= ow1; ++ow) {
                                yrow[ow] += wv * xrow[ow * stride + kx - pad_w];
                            }
                        }
                    }
                }
            }
        }
    });
    ensure_finite(y, "conv2d");

    if (should_record<S>({&x, &w, &b})) {
        const bool need_x = x.requires_grad();
        const bool need_w = w.requires_grad();
        const bool need_b = has_b && b.requires_grad();
        Tape<S>::active()->record(
            "conv2d", {&x, &w, &b}, y,
            [x, w, b, y, stride, pad_h, pad_w, need_x, need_w, need_b](Tape<S>& t) {
                const auto* g = t.find_grad(y.id());
                if (!g) return;
                const Index N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
                const Index Cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
                const Index Ho = y.extent(2), Wo = y.extent(3);
                const S* gp = g->data();
                const S* xp = x.data();
                const S* wp = w.data();
                using CM = Eigen::Map<const typename Tensor<S>::Storage>;
                using MM = Eigen::Map<typename Tensor<S>::Storage>;
                if (need_b) {
                    typename Tape<S>::GradArray gb = Tape<S>::GradArray::Zero(Cout);
                    for (Index n = 0; n < N; ++n)
                        for (Index co = 0; co < Cout; ++co)
                            gb[co] += CM(gp + ((n * Cout + co) * Ho) * Wo, Ho * Wo).sum();
                    t.accumulate(b, std::move(gb));
                }
                if (need_w) {
                    typename Tape<S>::GradArray gw = Tape<S>::GradArray::Zero(w.numel());
                    S* gwp = gw.data();
                    parallel_for(0, Cout, [&](Index co) {
                        for (Index n = 0; n < N; ++n) {
                            const S* gbase = gp + ((n * Cout + co) * Ho) * Wo;
                            for (Index ci = 0; ci < Cin; ++ci) {
                                const S* xbase = xp + ((n * Cin + ci) * H) * W;
                                S* gwbase = gwp + ((co * Cin + ci) * kh) * kw;
                                for (Index ky = 0; ky < kh; ++ky) {
                                    const Index oh0 = detail::conv_lo(ky, pad_h, stride);
                                    const Index oh1 = detail::conv_hi(ky, pad_h, stride, H, Ho);
                                    for (Index kx = 0; kx < kw; ++kx) {
                                        const Index ow0 = detail::conv_lo(kx, pad_w, stride);
                                        const Index ow1 = detail::conv_hi(kx, pad_w, stride, W, Wo);
                                        if (ow1 < ow0) continue;
                                        S acc = S(0);
                                        for (Index oh = oh0; oh <= oh1; ++oh) {
                                            const Index ih = oh * stride + ky - pad_h;
                                            const S* grow = gbase + oh * Wo;
                                            const S* xrow = xbase + ih * W;
                                            if (stride == 1) {
                                                const Index len = ow1 - ow0 + 1;
                                                acc += (CM(grow + ow0, len) *
                                                        CM(xrow + ow0 + kx - pad_w, len))
                                                           .sum();
                                            } else {
                                                for (Index ow = ow0; ow <= ow1; ++ow) {
                                                    acc += grow[ow] * xrow[ow * stride + kx - pad_w];
                                                }
                                            }
                                        }
                                        gwbase[ky * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    });
                    t.accumulate(w, std::move(gw));
                }
                if (need_x) {
                    typename Tape<S>::GradArray gx = Tape<S>::GradArray::Zero(x.numel());
                    S* gxp = gx.data();
                    parallel_for(0, N, [&](Index n) {
                        for (Index co = 0; co < Cout; ++co) {
                            const S* gbase = gp + ((n * Cout + co) * Ho) * Wo;
                            for (Index ci = 0; ci < Cin; ++ci) {
                                S* gxbase = gxp + ((n * Cin + ci) * H) * W;
                                const S* wbase = wp + ((co * Cin + ci) * kh) * kw;
                                for (Index ky = 0; ky < kh; ++ky) {
                                    const Index oh0 = detail::conv_lo(ky, pad_h, stride);
                                    const Index oh1 = detail::conv_hi(ky, pad_h, stride, H, Ho);
                                    for (Index kx = 0; kx < kw; ++kx) {
                                        const S wv = wbase[ky * kw + kx];
                                        if (wv == S(0)) continue;
                                        const Index ow0 = detail::conv_lo(kx, pad_w, stride);
                                        const Index ow1 = detail::conv_hi(kx, pad_w, stride, W, Wo);
                                        if (ow1 < ow0) continue;
                                        for (Index oh = oh0; oh <= oh1; ++oh) {
                                            const Index ih = oh * stride + ky - pad_h;
                                            const S* grow = gbase + oh * Wo;
                                            S* gxrow = gxbase + ih * W;
                                            if (stride == 1) {
                                                const Index len = ow1 - ow0 + 1;
                                                MM(gxrow + ow0 + kx - pad_w, len) +=
                                                    wv * CM(grow + ow0, len);
                                            } else {
                                                for (Index ow = ow0; ow <= ow1; ++ow) {
                                                    gxrow[ow * stride + kx - pad_w] += wv * grow[ow];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    t.accumulate(x, std::move(gx));
                }
            });
    }
    return y;
}

/// Symmetric-padding convenience wrapper.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Index stride = 1,
                 Index padding = 0) {
    return conv2d_hw(x, w, b, stride, padding, padding);
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2x2 max pooling, stride 2; H and W must be even. The gradient routes to
/// the argmax, first element of the window in row-major order on ties.
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x) {
    if (x.rank() != 4) throw ShapeError("maxpool2d: rank-4 input required, got " + shape_str(x.shape()));
    const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("maxpool2d: spatial dims must be even, got " + std::to_string(H) + "x" +
                         std::to_string(W));
    }
    const Index Ho = H / 2, Wo = W / 2;
    Tensor<S> y = Tensor<S>::zeros({N, C, Ho, Wo});
    auto args = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.numel()));
    const S* xp = x.data();
    S* yp = y.mutable_data();
    Index o = 0;
    for (Index nc = 0; nc < N * C; ++nc) {
        const S* xbase = xp + nc * H * W;
        for (Index oh = 0; oh < Ho; ++oh) {
            for (Index ow = 0; ow < Wo; ++ow) {
                const Index i00 = (2 * oh) * W + 2 * ow;
                const Index cand[4] = {i00, i00 + 1, i00 + W, i00 + W + 1};
                Index best = cand[0];
                S bv = xbase[best];
                for (int k = 1; k < 4; ++k) {
                    if (xbase[cand[k]] > bv) {
                        bv = xbase[cand[k]];
                        best = cand[k];
                    }
                }
                yp[o] = bv;
                fold_decision(static_cast<std::uint64_t>(best));
                (*args)[o] = nc * H * W + best;
                ++o;
            }
        }
    }
    ensure_finite(y, "maxpool2d");
    if (should_record<S>({&x})) {
        Tape<S>::active()->record("maxpool2d", {&x}, y, [x, y, args](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            typename Tape<S>::GradArray gx = Tape<S>::GradArray::Zero(x.numel());
            for (Index i = 0; i < static_cast<Index>(args->size()); ++i) gx[(*args)[i]] += (*g)[i];
            t.accumulate(x, std::move(gx));
        });
    }
    return y;
}

template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x, Index factor) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest: rank-4 input required");
    const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const Index Ho = H * factor, Wo = W * factor;
    Tensor<S> y = Tensor<S>::zeros({N, C, Ho, Wo});
    const S* xp = x.data();
    S* yp = y.mutable_data();
    for (Index nc = 0; nc < N * C; ++nc) {
        const S* xbase = xp + nc * H * W;
        S* ybase = yp + nc * Ho * Wo;
        for (Index oh = 0; oh < Ho; ++oh) {
            const S* xrow = xbase + (oh / factor) * W;
            S* yrow = ybase + oh * Wo;
            for (Index ow = 0; ow < Wo; ++ow) yrow[ow] = xrow[ow / factor];
        }
    }
    if (should_record<S>({&x})) {
        Tape<S>::active()->record("upsample_nearest", {&x}, y, [x, y, factor](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
            const Index Ho = H * factor, Wo = W * factor;
            typename Tape<S>::GradArray gx = Tape<S>::GradArray::Zero(x.numel());
            const S* gp = g->data();
            for (Index nc = 0; nc < N * C; ++nc) {
                S* gxbase = gx.data() + nc * H * W;
                const S* gbase = gp + nc * Ho * Wo;
                for (Index oh = 0; oh < Ho; ++oh) {
                    S* gxrow = gxbase + (oh / factor) * W;
                    const S* grow = gbase + oh * Wo;
                    for (Index ow = 0; ow < Wo; ++ow) gxrow[ow / factor] += grow[ow];
                }
            }
            t.accumulate(x, std::move(gx));
        });
    }
    return y;
}

namespace detail {

struct LinTap {
    Index i0, i1;
    double w0, w1;
};

// align-corners-false source coordinate: src = (dst + 0.5) * (in/out) - 0.5,
// clamped to [0, in-1]; linear weights from the fractional part.
inline std::vector<LinTap> bilinear_taps(Index out, Index in) {
    std::vector<LinTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
        const Index i0 = static_cast<Index>(std::floor(src));
        const Index i1 = std::min(i0 + 1, in - 1);
        const double w1 = src - static_cast<double>(i0);
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - w1, w1};
    }
    return taps;
}

}  // namespace detail

/// Bilinear resample to (out_h, out_w), align-corners-false convention.
template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, Index out_h, Index out_w) {
    if (x.rank() != 4) throw ShapeError("resize_bilinear: rank-4 input required");
    if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output extents must be >= 1");
    const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const auto ty = detail::bilinear_taps(out_h, H);
    const auto tx = detail::bilinear_taps(out_w, W);
    Tensor<S> y = Tensor<S>::zeros({N, C, out_h, out_w});
    const S* xp = x.data();
    S* yp = y.mutable_data();
    for (Index nc = 0; nc < N * C; ++nc) {
        const S* xbase = xp + nc * H * W;
        S* ybase = yp + nc * out_h * out_w;
        for (Index oh = 0; oh < out_h; ++oh) {
            const auto& t0 = ty[static_cast<std::size_t>(oh)];
            const S* r0 = xbase + t0.i0 * W;
            const S* r1 = xbase + t0.i1 * W;
            S* yrow = ybase + oh * out_w;
            for (Index ow = 0; ow < out_w; ++ow) {
                const auto& t1 = tx[static_cast<std::size_t>(ow)];
                const double v0 = t1.w0 * r0[t1.i0] + t1.w1 * r0[t1.i1];
                const double v1 = t1.w0 * r1[t1.i0] + t1.w1 * r1[t1.i1];
                yrow[ow] = static_cast<S>(t0.w0 * v0 + t0.w1 * v1);
            }
        }
    }
    ensure_finite(y, "resize_bilinear");
    if (should_record<S>({&x})) {
        Tape<S>::active()->record("resize_bilinear", {&x}, y, [x, y, ty, tx](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
            const Index out_h = y.extent(2), out_w = y.extent(3);
            typename Tape<S>::GradArray gx = Tape<S>::GradArray::Zero(x.numel());
            const S* gp = g->data();
            for (Index nc = 0; nc < N * C; ++nc) {
                S* gxbase = gx.data() + nc * H * W;
                const S* gbase = gp + nc * out_h * out_w;
                for (Index oh = 0; oh < out_h; ++oh) {
                    const auto& t0 = ty[static_cast<std::size_t>(oh)];
                    S* g0 = gxbase + t0.i0 * W;
                    S* g1 = gxbase + t0.i1 * W;
                    const S* grow = gbase + oh * out_w;
                    for (Index ow = 0; ow < out_w; ++ow) {
                        const auto& t1 = tx[static_cast<std::size_t>(ow)];
                        const S gv = grow[ow];
                        g0[t1.i0] += static_cast<S>(t0.w0 * t1.w0) * gv;
                        g0[t1.i1] += static_cast<S>(t0.w0 * t1.w1) * gv;
                        g1[t1.i0] += static_cast<S>(t0.w1 * t1.w0) * gv;
                        g1[t1.i1] += static_cast<S>(t0.w1 * t1.w1) * gv;
                    }
                }
            }
            t.accumulate(x, std::move(gx));
        });
    }
    return y;
}

enum class ResampleMode { nearest, bilinear };

template <typename S>
Tensor<S> upsample2d(const Tensor<S>& x, Index factor, ResampleMode mode) {
    if (factor < 2) throw ConfigError("upsample2d: factor >= 2 required");
    if (mode == ResampleMode::nearest) return upsample_nearest(x, factor);
    return resize_bilinear(x, x.extent(2) * factor, x.extent(3) * factor);
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
    if (a.rank() != b.rank()) {
        throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (axis < 0 || axis >= a.rank()) throw ShapeError("concat: bad axis " + std::to_string(axis));
    for (int d = 0; d < a.rank(); ++d) {
        if (d != axis && a.extent(d) != b.extent(d)) {
            throw ShapeError("concat: extents differ off-axis: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] += b.extent(axis);
    Tensor<S> y = Tensor<S>::zeros(out_shape);
    Index outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a.extent(d);
    for (int d = axis + 1; d < a.rank(); ++d) inner *= a.extent(d);
    const Index ablk = a.extent(axis) * inner, bblk = b.extent(axis) * inner;
    S* yp = y.mutable_data();
    for (Index o = 0; o < outer; ++o) {
        std::copy(a.data() + o * ablk, a.data() + (o + 1) * ablk, yp + o * (ablk + bblk));
        std::copy(b.data() + o * bblk, b.data() + (o + 1) * bblk, yp + o * (ablk + bblk) + ablk);
    }
    if (should_record<S>({&a, &b})) {
        const bool need_a = a.requires_grad(), need_b = b.requires_grad();
        Tape<S>::active()->record("concat", {&a, &b}, y,
                                  [a, b, y, outer, ablk, bblk, need_a, need_b](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            const S* gp = g->data();
            if (need_a) {
                typename Tape<S>::GradArray ga(a.numel());
                for (Index o = 0; o < outer; ++o) {
                    std::copy(gp + o * (ablk + bblk), gp + o * (ablk + bblk) + ablk, ga.data() + o * ablk);
                }
                t.accumulate(a, std::move(ga));
            }
            if (need_b) {
                typename Tape<S>::GradArray gb(b.numel());
                for (Index o = 0; o < outer; ++o) {
                    std::copy(gp + o * (ablk + bblk) + ablk, gp + (o + 1) * (ablk + bblk),
                              gb.data() + o * bblk);
                }
                t.accumulate(b, std::move(gb));
            }
        });
    }
    return y;
}

/// Copying reshape (fresh storage so gradient identities stay unambiguous).
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor<S> y = Tensor<S>::zeros(shape);
    y.raw() = x.array();
    if (should_record<S>({&x})) {
        Tape<S>::active()->record("reshape", {&x}, y, [x, y](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            t.accumulate(x, *g);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Central differences with replicate (Neumann) boundaries, for level sets
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, bool kAlongW>
Tensor<S> central_diff(const Tensor<S>& x, const char* name) {
    if (x.rank() != 4) throw ShapeError(std::string(name) + ": rank-4 input required");
    const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    Tensor<S> y = Tensor<S>::zeros(x.shape());
    const S* xp = x.data();
    S* yp = y.mutable_data();
    const S half = S(0.5);
    for (Index nc = 0; nc < N * C; ++nc) {
        const S* xb = xp + nc * H * W;
        S* yb = yp + nc * H * W;
        for (Index h = 0; h < H; ++h) {
            for (Index w = 0; w < W; ++w) {
                Index ip, im;
                if constexpr (kAlongW) {
                    ip = h * W + std::min(w + 1, W - 1);
                    im = h * W + std::max(w - 1, Index(0));
                } else {
                    ip = std::min(h + 1, H - 1) * W + w;
                    im = std::max(h - 1, Index(0)) * W + w;
                }
                yb[h * W + w] = half * (xb[ip] - xb[im]);
            }
        }
    }
    if (should_record<S>({&x})) {
        Tape<S>::active()->record(name, {&x}, y, [x, y](Tape<S>& t) {
            const auto* g = t.find_grad(y.id());
            if (!g) return;
            const Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
            typename Tape<S>::GradArray gx = Tape<S>::GradArray::Zero(x.numel());
            const S* gp = g->data();
            const S half = S(0.5);
            for (Index nc = 0; nc < N * C; ++nc) {
                S* gxb = gx.data() + nc * H * W;
                const S* gb = gp + nc * H * W;
                for (Index h = 0; h < H; ++h) {
                    for (Index w = 0; w < W; ++w) {
                        const S gv = half * gb[h * W + w];
                        Index ip, im;
                        if constexpr (kAlongW) {
                            ip = h * W + std::min(w + 1, W - 1);
                            im = h * W + std::max(w - 1, Index(0));
                        } else {
                            ip = std::min(h + 1, H - 1) * W + w;
                            im = std::max(h - 1, Index(0)) * W + w;
                        }
                        gxb[ip] += gv;
                        gxb[im] -= gv;
                    }
                }
            }
            t.accumulate(x, std::move(gx));
        });
    }
    return y;
}

}  // namespace detail

/// d/dx (along W) by central differences, replicated edges.
template <typename S>
Tensor<S> ddx_central(const Tensor<S>& x) {
    return detail::central_diff<S, true>(x, "ddx_central");
}

/// d/dy (along H) by central differences, replicated edges.
template <typename S>
Tensor<S> ddy_central(const Tensor<S>& x) {
    return detail::central_diff<S, false>(x, "ddy_central");
}

}  // namespace cvattn
