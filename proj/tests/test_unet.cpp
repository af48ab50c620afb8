#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cvattn/checkpoint.hpp"
#include "cvattn/gradcheck_suites.hpp"
#include "cvattn/unet.hpp"

using namespace cvattn;

namespace {

UNetConfig small_cfg(GateMode mode, int depth = 1, Index base = 4) {
    UNetConfig cfg;
    cfg.depth = depth;
    cfg.base_channels = base;
    cfg.gate_mode = mode;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("param_count matches the hand count for depth 1, base 4") {
    // enc0: (4*1*9+4) + (4*4*9+4) = 40 + 148
    // bottom: (8*4*9+8) + (8*8*9+8) = 296 + 584
    // dec0: up (4*8*9+4) + conv1 (4*8*9+4) + conv2 (4*4*9+4) = 292 + 292 + 148
    // final: 1*4*1*1+1 = 5
    const Index backbone = 40 + 148 + 296 + 584 + 292 + 292 + 148 + 5;
    CHECK(param_count(small_cfg(GateMode::none)) == backbone);
    // classic gate at stage 0 (F_int = 2): 8 + 8 + 2 + 2 + 1 = 21
    CHECK(param_count(small_cfg(GateMode::classic)) == backbone + 21);
    // chanvese adds w_img (4) + w_mix (1) + b_w (1)
    CHECK(param_count(small_cfg(GateMode::chanvese)) == backbone + 21 + 6);
}

TEST_CASE("param_count regression constant for the desk-scale config") {
    // Frozen from the hand-derived per-block sums: encoder 664 + 3488 +
    // 13888, bottom 55424, decoder 46176 + 11568 + 2904, final 9; classic
    // gates add 1057 + 273 + 73, the conditioning branches another 34+18+10.
    UNetConfig cfg;  // depth 3, base 8, 1 -> 1
    CHECK(param_count(cfg) == 134121);
    cfg.gate_mode = GateMode::classic;
    CHECK(param_count(cfg) == 135524);
    cfg.gate_mode = GateMode::chanvese;
    CHECK(param_count(cfg) == 135586);
}

TEST_CASE("param_count ordering and scaling") {
    UNetConfig none = small_cfg(GateMode::none, 3, 8);
    UNetConfig classic = small_cfg(GateMode::classic, 3, 8);
    UNetConfig cv = small_cfg(GateMode::chanvese, 3, 8);
    CHECK(param_count(none) < param_count(classic));
    CHECK(param_count(classic) < param_count(cv));

    UNetConfig doubled = none;
    doubled.base_channels = 16;
    const double ratio = static_cast<double>(param_count(doubled)) /
                         static_cast<double>(param_count(none));
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("builds are deterministic and counts match the store") {
    UNetConfig cfg = small_cfg(GateMode::chanvese, 2, 4);
    Model<float> a = build<float>(cfg);
    Model<float> b = build<float>(cfg);
    CHECK(a.params.same_values(b.params));
    Index total = 0;
    for (std::size_t i = 0; i < a.params.size(); ++i) total += a.params.at(i).numel();
    CHECK(total == param_count(cfg));
}

TEST_CASE("gate modes share identical backbone parameters for one seed") {
    Model<float> none = build<float>(small_cfg(GateMode::none, 2, 4));
    Model<float> classic = build<float>(small_cfg(GateMode::classic, 2, 4));
    Model<float> cv = build<float>(small_cfg(GateMode::chanvese, 2, 4));
    REQUIRE(none.params.size() < classic.params.size());
    REQUIRE(classic.params.size() < cv.params.size());
    for (std::size_t i = 0; i < none.params.size(); ++i) {
        CHECK(none.params.name(i) == classic.params.name(i));
        CHECK(none.params.name(i) == cv.params.name(i));
        CHECK(none.params.at(i).same_values(classic.params.at(i)));
        CHECK(none.params.at(i).same_values(cv.params.at(i)));
    }
    // gate parameters appended after the backbone
    for (std::size_t i = none.params.size(); i < classic.params.size(); ++i) {
        CHECK(classic.params.name(i).rfind("gate", 0) == 0);
    }
}

TEST_CASE("zero-initialized model emits zero logits") {
    for (GateMode mode : {GateMode::none, GateMode::classic, GateMode::chanvese}) {
        UNetConfig cfg = small_cfg(mode, 2, 4);
        Model<float> m = build<float>(cfg);
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            m.params.set(i, Tensor<float>::zeros(m.params.at(i).shape()));
        }
        Rng rng(5);
        Tensor<float> batch = Tensor<float>::uniform({2, 1, 16, 16}, rng, 0, 1);
        ForwardResult<float> out = forward(m, batch);
        for (Index i = 0; i < out.logits.numel(); ++i) {
            CHECK(out.logits.at(i) == 0.0f);
            CHECK(stable_sigmoid(out.logits.at(i)) == 0.5f);
        }
    }
}

TEST_CASE("forward preserves spatial shape across depths and modes") {
    Rng rng(7);
    Tensor<float> batch = Tensor<float>::uniform({2, 1, 64, 64}, rng, 0, 1);
    for (int depth : {1, 2, 3}) {
        for (GateMode mode : {GateMode::none, GateMode::classic, GateMode::chanvese}) {
            UNetConfig cfg = small_cfg(mode, depth, 4);
            Model<float> m = build<float>(cfg);
            ForwardResult<float> out = forward(m, batch);
            CHECK(out.logits.shape() == Shape{2, 1, 64, 64});
            const std::size_t expected = mode == GateMode::none ? 0 : static_cast<std::size_t>(depth);
            CHECK(out.attn_maps.size() == expected);
            if (mode == GateMode::chanvese) CHECK(out.gate_diag.size() == expected);
        }
    }
}

TEST_CASE("forward rejects indivisible spatial extents") {
    Model<float> m = build<float>(small_cfg(GateMode::none, 3, 4));
    Tensor<float> bad = Tensor<float>::zeros({1, 1, 60, 64});  // 60 % 8 != 0
    CHECK_THROWS_AS(forward(m, bad), ShapeError);
    Tensor<float> bad_ch = Tensor<float>::zeros({1, 2, 64, 64});
    CHECK_THROWS_AS(forward(m, bad_ch), ShapeError);
}

TEST_CASE("forward is deterministic") {
    Model<float> m = build<float>(small_cfg(GateMode::chanvese, 2, 4));
    Rng rng(9);
    Tensor<float> batch = Tensor<float>::uniform({1, 1, 32, 32}, rng, 0, 1);
    ForwardResult<float> a = forward(m, batch);
    ForwardResult<float> b = forward(m, batch);
    CHECK(a.logits.same_values(b.logits));
    REQUIRE(a.attn_maps.size() == b.attn_maps.size());
    for (std::size_t i = 0; i < a.attn_maps.size(); ++i) {
        CHECK(a.attn_maps[i].same_values(b.attn_maps[i]));
    }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "cvattn_ckpt_test").string();
    fs::create_directories(dir);
    const std::string path = dir + "/model.ckpt";

    UNetConfig cfg = small_cfg(GateMode::chanvese, 2, 4);
    cfg.gate.unroll = 3;
    cfg.gate.tau0 = 1.5;
    cfg.gate.dt.lambda_dt = 0.25;
    cfg.gate.dt.kernel_radius = 4;
    Model<float> m = build<float>(cfg);
    save_checkpoint(m, path);

    Model<float> back = load_checkpoint<float>(path);
    CHECK(back.cfg.depth == cfg.depth);
    CHECK(back.cfg.gate_mode == cfg.gate_mode);
    CHECK(back.cfg.gate.unroll == 3);
    CHECK(back.cfg.gate.tau0 == 1.5);
    CHECK(back.cfg.gate.dt.lambda_dt == 0.25);
    CHECK(back.params.same_values(m.params));

    // save(load(p)) reproduces the file byte for byte
    const std::string path2 = dir + "/model2.ckpt";
    save_checkpoint(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    CHECK(checkpoint_precision(path) == "f32");
    CHECK_THROWS_AS(load_checkpoint<double>(path), IoError);  // precision mismatch
    fs::remove_all(dir);
}

TEST_CASE("chanvese network spot gradcheck") {
    for (const auto& r : gradcheck_suite_unet()) {
        INFO(r.name);
        CHECK(r.max_rel_err <= r.threshold);
    }
}
