#pragma once

#include <functional>

#include "cvattn/attention.hpp"

namespace cvattn {

enum class GateMode { none, classic, chanvese };

inline const char* to_string(GateMode m) {
    switch (m) {
        case GateMode::none: return "none";
        case GateMode::classic: return "classic";
        case GateMode::chanvese: return "chanvese";
    }
    return "?";
}

inline GateMode gate_mode_from_string(const std::string& s) {
    if (s == "none") return GateMode::none;
    if (s == "classic") return GateMode::classic;
    if (s == "chanvese") return GateMode::chanvese;
    throw ConfigError("unknown gate mode: " + s);
}

/// Hyperparameters shared by every Chan-Vese gate in a network; the learned
/// weights live in the ParamStore, one set per decoder stage.
struct GateHyper {
    DtParams dt;
    ChanVeseParams cv;
    int unroll = 5;
    double tau0 = 2.0;

    GateHyper() {
        cv.mu = 0.1;
        cv.nu = 1.0;
        cv.dt = 0.2;
        cv.iters = 1;  // superseded by unroll inside gates
    }
};

struct UNetConfig {
    int depth = 3;
    Index base_channels = 8;
    Index in_channels = 1;
    Index out_channels = 1;
    GateMode gate_mode = GateMode::none;
    GateHyper gate;
    std::uint64_t seed = 0;

    // Stage s of the contraction carries base_channels * 2^s channels.
    Index stage_channels(int s) const { return base_channels << s; }
    // Attention bottleneck width at stage s.
    Index gate_int_channels(int s) const { return std::max<Index>(stage_channels(s) / 2, 1); }

    void validate() const {
        if (depth < 1) throw ConfigError("UNetConfig: depth >= 1 required");
        if (base_channels < 1 || in_channels < 1 || out_channels < 1) {
            throw ConfigError("UNetConfig: channel counts must be >= 1");
        }
    }
};

template <typename S>
struct Model {
    UNetConfig cfg;
    ParamStore<S> params;
};

namespace detail {

/// Single source of truth for the parameter inventory: name + shape of every
/// tensor, in deterministic construction order. Backbone first, gate
/// parameters appended afterwards so all gate modes share identical
/// backbone initialization for the same seed.
inline void for_each_param(const UNetConfig& cfg,
                           const std::function<void(const std::string&, const Shape&)>& fn) {
    cfg.validate();
    auto conv = [&](const std::string& name, Index cout, Index cin, Index k) {
        fn(name + ".w", {cout, cin, k, k});
        fn(name + ".b", {cout});
    };
    Index prev = cfg.in_channels;
    for (int s = 0; s < cfg.depth; ++s) {
        const Index ch = cfg.stage_channels(s);
        conv("enc" + std::to_string(s) + ".conv1", ch, prev, 3);
        conv("enc" + std::to_string(s) + ".conv2", ch, ch, 3);
        prev = ch;
    }
    const Index bottom = cfg.stage_channels(cfg.depth);
    conv("bottom.conv1", bottom, prev, 3);
    conv("bottom.conv2", bottom, bottom, 3);
    for (int s = cfg.depth - 1; s >= 0; --s) {
        const Index ch = cfg.stage_channels(s);
        const Index up_in = cfg.stage_channels(s + 1);
        const std::string d = "dec" + std::to_string(s);
        conv(d + ".up", ch, up_in, 3);
        conv(d + ".conv1", ch, 2 * ch, 3);
        conv(d + ".conv2", ch, ch, 3);
    }
    conv("final", cfg.out_channels, cfg.stage_channels(0), 1);
    if (cfg.gate_mode == GateMode::none) return;
    for (int s = cfg.depth - 1; s >= 0; --s) {
        const Index ch = cfg.stage_channels(s);
        const Index fi = cfg.gate_int_channels(s);
        const std::string g = "gate" + std::to_string(s);
        fn(g + ".w_x", {fi, ch, 1, 1});
        fn(g + ".w_g", {fi, ch, 1, 1});
        fn(g + ".b_f", {fi});
        fn(g + ".psi", {1, fi, 1, 1});
        fn(g + ".b_psi", {1});
        if (cfg.gate_mode == GateMode::chanvese) {
            fn(g + ".w_img", {1, ch, 1, 1});
            fn(g + ".w_mix", {1, 1, 1, 1});
            fn(g + ".b_w", {1});
        }
    }
}

}  // namespace detail

/// Exact learnable-parameter count; a pure function of the config.
inline Index param_count(const UNetConfig& cfg) {
    Index total = 0;
    detail::for_each_param(cfg, [&](const std::string&, const Shape& shape) {
        total += numel_of(shape);
    });
    return total;
}

/// Builds the parameter store: weights fan-in-scaled uniform
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from one seeded stream in inventory
/// order, biases zero. Same config and seed give a bitwise-identical store.
///
/// Exception: the Chan-Vese gates' attention logit bias starts at -4 so the
/// initial attention mass is small. The log inside the distance transform
/// has gain lambda/alpha, so the small-alpha regime is where gradients into
/// the gate are strongest and the area pressure nu bites; a gate that starts
/// with saturated alpha is a frozen identity gate.
template <typename S>
Model<S> build(const UNetConfig& cfg) {
    Model<S> m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    detail::for_each_param(cfg, [&](const std::string& name, const Shape& shape) {
        if (shape.size() == 1) {
            const bool closed_attention_prior =
                cfg.gate_mode == GateMode::chanvese &&
                name.size() > 6 && name.compare(name.size() - 6, 6, ".b_psi") == 0;
            m.params.add(name, closed_attention_prior ? Tensor<S>::full(shape, S(-4))
                                                      : Tensor<S>::zeros(shape));
            return;
        }
        const Index fan_in = shape[1] * shape[2] * shape[3];
        const S a = static_cast<S>(1.0 / std::sqrt(static_cast<double>(fan_in)));
        m.params.add(name, Tensor<S>::uniform(shape, rng, -a, a));
    });
    return m;
}

template <typename S>
struct ForwardResult {
    Tensor<S> logits;
    std::vector<Tensor<S>> attn_maps;          // per gate, deepest stage first
    std::vector<CvGateOutput<S>> gate_diag;    // chanvese mode only, same order
};

/// Full forward pass. Output logits share the input spatial extent; the
/// sigmoid lives in the loss and in inference thresholding. In chanvese mode
/// the raw input batch is routed to every gate.
template <typename S>
ForwardResult<S> forward(const Model<S>& m, const Tensor<S>& batch) {
    const UNetConfig& cfg = m.cfg;
    if (batch.rank() != 4 || batch.extent(1) != cfg.in_channels) {
        throw ShapeError("forward: batch must be [N," + std::to_string(cfg.in_channels) +
                         ",H,W], got " + shape_str(batch.shape()));
    }
    const Index div = Index(1) << cfg.depth;
    if (batch.extent(2) % div != 0 || batch.extent(3) % div != 0) {
        throw ShapeError("forward: spatial dims " + std::to_string(batch.extent(2)) + "x" +
                         std::to_string(batch.extent(3)) + " not divisible by 2^depth = " +
                         std::to_string(div));
    }
    const ParamStore<S>& ps = m.params;
    auto conv_block = [&](const Tensor<S>& in, const std::string& name) {
        return relu(conv2d(in, ps.get(name + ".w"), ps.get(name + ".b"), 1,
                           ps.get(name + ".w").extent(2) / 2));
    };

    std::vector<Tensor<S>> skips;
    Tensor<S> state = batch;
    for (int s = 0; s < cfg.depth; ++s) {
        const std::string e = "enc" + std::to_string(s);
        state = conv_block(conv_block(state, e + ".conv1"), e + ".conv2");
        skips.push_back(state);
        state = maxpool2d(state);
    }
    state = conv_block(conv_block(state, "bottom.conv1"), "bottom.conv2");

    ForwardResult<S> out;
    for (int s = cfg.depth - 1; s >= 0; --s) {
        const std::string d = "dec" + std::to_string(s);
        const std::string g = "gate" + std::to_string(s);
        Tensor<S> up = conv_block(upsample_nearest(state, 2), d + ".up");
        Tensor<S> skip = skips[static_cast<std::size_t>(s)];
        Tensor<S> gated = skip;
        if (cfg.gate_mode == GateMode::classic) {
            ClassicGateParams<S> gp{ps.get(g + ".w_x"), ps.get(g + ".w_g"), ps.get(g + ".b_f"),
                                    ps.get(g + ".psi"), ps.get(g + ".b_psi")};
            ClassicGateOutput<S> go = classic_gate(skip, up, gp);
            gated = go.gated;
            out.attn_maps.push_back(go.alpha);
        } else if (cfg.gate_mode == GateMode::chanvese) {
            CvGateConfig<S> gc;
            gc.gate = ClassicGateParams<S>{ps.get(g + ".w_x"), ps.get(g + ".w_g"),
                                           ps.get(g + ".b_f"), ps.get(g + ".psi"),
                                           ps.get(g + ".b_psi")};
            gc.dt = cfg.gate.dt;
            gc.cv = cfg.gate.cv;
            gc.unroll = cfg.gate.unroll;
            gc.tau0 = cfg.gate.tau0;
            gc.w_img = ps.get(g + ".w_img");
            gc.w_mix = ps.get(g + ".w_mix");
            gc.b_w = ps.get(g + ".b_w");
            CvGateOutput<S> go = cv_attention_gate(skip, up, batch, gc);
            gated = go.gated;
            out.attn_maps.push_back(go.zeta);
            out.gate_diag.push_back(go);
        }
        state = conv_block(conv_block(concat(gated, up, 1), d + ".conv1"), d + ".conv2");
    }
    out.logits = conv2d(state, ps.get("final.w"), ps.get("final.b"), 1, 0);
    return out;
}

}  // namespace cvattn
