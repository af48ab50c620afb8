#pragma once

#include <json.hpp>

#include "cvattn/data.hpp"
#include "cvattn/unet.hpp"

namespace cvattn {

using nlohmann::json;

// nlohmann objects iterate in sorted key order, so dump() is canonical.

inline json to_json(const DtParams& p) {
    return json{{"lambda_dt", p.lambda_dt},
                {"kernel_radius", p.kernel_radius},
                {"metric", p.metric == DtMetric::euclidean ? "euclidean" : "squared-euclidean"},
                {"allow_truncation", p.allow_truncation}};
}

inline DtParams dt_params_from_json(const json& j) {
    DtParams p;
    p.lambda_dt = j.value("lambda_dt", p.lambda_dt);
    p.kernel_radius = j.value("kernel_radius", p.kernel_radius);
    if (j.contains("metric")) {
        const std::string m = j["metric"];
        if (m == "euclidean") p.metric = DtMetric::euclidean;
        else if (m == "squared-euclidean") p.metric = DtMetric::squared_euclidean;
        else throw ConfigError("unknown dt metric: " + m);
    }
    p.allow_truncation = j.value("allow_truncation", p.allow_truncation);
    return p;
}

inline json to_json(const ChanVeseParams& p) {
    return json{{"mu", p.mu},     {"nu", p.nu},   {"lambda1", p.lambda1}, {"lambda2", p.lambda2},
                {"eps", p.eps},   {"dt", p.dt},   {"iters", p.iters},     {"eta", p.eta}};
}

inline ChanVeseParams chan_vese_params_from_json(const json& j) {
    ChanVeseParams p;
    p.mu = j.value("mu", p.mu);
    p.nu = j.value("nu", p.nu);
    p.lambda1 = j.value("lambda1", p.lambda1);
    p.lambda2 = j.value("lambda2", p.lambda2);
    p.eps = j.value("eps", p.eps);
    p.dt = j.value("dt", p.dt);
    p.iters = j.value("iters", p.iters);
    p.eta = j.value("eta", p.eta);
    return p;
}

inline json to_json(const GateHyper& g) {
    return json{{"dt", to_json(g.dt)}, {"cv", to_json(g.cv)}, {"unroll", g.unroll}, {"tau0", g.tau0}};
}

inline GateHyper gate_hyper_from_json(const json& j) {
    GateHyper g;
    if (j.contains("dt")) g.dt = dt_params_from_json(j["dt"]);
    if (j.contains("cv")) g.cv = chan_vese_params_from_json(j["cv"]);
    g.unroll = j.value("unroll", g.unroll);
    g.tau0 = j.value("tau0", g.tau0);
    return g;
}

inline json to_json(const UNetConfig& c) {
    return json{{"depth", c.depth},
                {"base_channels", c.base_channels},
                {"in_channels", c.in_channels},
                {"out_channels", c.out_channels},
                {"gate_mode", to_string(c.gate_mode)},
                {"gate", to_json(c.gate)},
                {"seed", c.seed}};
}

inline UNetConfig unet_config_from_json(const json& j) {
    UNetConfig c;
    c.depth = j.value("depth", c.depth);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_channels = j.value("out_channels", c.out_channels);
    if (j.contains("gate_mode")) c.gate_mode = gate_mode_from_string(j["gate_mode"]);
    if (j.contains("gate")) c.gate = gate_hyper_from_json(j["gate"]);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline json to_json(const AugmentToggles& a) {
    return json{{"hflip", a.hflip},       {"vflip", a.vflip},
                {"transpose", a.transpose}, {"rotate", a.rotate},
                {"shift_scale", a.shift_scale}, {"normalize", a.normalize}};
}

inline AugmentToggles augment_toggles_from_json(const json& j) {
    AugmentToggles a;
    a.hflip = j.value("hflip", a.hflip);
    a.vflip = j.value("vflip", a.vflip);
    a.transpose = j.value("transpose", a.transpose);
    a.rotate = j.value("rotate", a.rotate);
    a.shift_scale = j.value("shift_scale", a.shift_scale);
    a.normalize = j.value("normalize", a.normalize);
    return a;
}

inline json to_json(const SynthConfig& c) {
    return json{{"size", c.size},
                {"n_samples", c.n_samples},
                {"contrast", c.contrast},
                {"noise_sigma", c.noise_sigma},
                {"confounders", c.confounders},
                {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const json& j) {
    SynthConfig c;
    c.size = j.value("size", c.size);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.contrast = j.value("contrast", c.contrast);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.confounders = j.value("confounders", c.confounders);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline void write_json_file(const json& j, const std::string& path) {
    atomic_write(path, [&](const std::string& tmp) {
        std::ofstream os(tmp);
        if (!os) throw IoError("cannot open for writing: " + tmp);
        os << j.dump(2) << "\n";
    });
}

inline json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw IoError("bad JSON in " + path + ": " + e.what());
    }
    return j;
}

}  // namespace cvattn
