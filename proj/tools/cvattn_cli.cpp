#include <CLI11.hpp>

#include <iostream>

#include "cvattn/attn_dump.hpp"
#include "cvattn/checkpoint.hpp"
#include "cvattn/gradcheck_suites.hpp"
#include "cvattn/train_json.hpp"

namespace {

using namespace cvattn;
namespace fs = std::filesystem;

struct GlobalOpts {
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string precision;  // "": per-subcommand default
    int threads = 1;
    std::string out_dir = "out";
};

std::string pick_precision(const GlobalOpts& g, const std::string& fallback) {
    if (g.precision.empty()) return fallback;
    if (g.precision != "f32" && g.precision != "f64") {
        throw ConfigError("precision must be f32 or f64, got " + g.precision);
    }
    return g.precision;
}

// --- segment -----------------------------------------------------------------

struct SegmentOpts {
    std::string image;
    std::string init_circle;  // "cy,cx,r"
    ChanVeseParams cv;
    bool energy_csv = true;
};

template <typename S>
int run_segment(const GlobalOpts& g, const SegmentOpts& o) {
    o.cv.validate();
    Tensor<S> img3 = load_image<S>(o.image);
    const Index h = img3.extent(1), w = img3.extent(2);
    Tensor<S> img = Tensor<S>::zeros({h, w});
    img.raw() = img3.array();

    double cy = static_cast<double>(h) / 2.0, cx = static_cast<double>(w) / 2.0;
    double r = static_cast<double>(std::min(h, w)) / 4.0;
    if (!o.init_circle.empty()) {
        if (std::sscanf(o.init_circle.c_str(), "%lf,%lf,%lf", &cx, &cy, &r) != 3) {
            throw ConfigError("--init-circle expects cx,cy,r");
        }
    }
    Tensor<S> phi0 = circle_level_set<S>(h, w, cy, cx, r);
    std::vector<double> trace;
    Tensor<S> phi = cv_evolve(img, phi0, o.cv, o.energy_csv ? &trace : nullptr);
    Tensor<S> mask = cv_segment(phi);

    fs::create_directories(g.out_dir);
    save_mask(mask, (fs::path(g.out_dir) / "mask.png").string());
    write_tnsr(phi, (fs::path(g.out_dir) / "phi.tnsr").string());
    if (o.energy_csv) {
        atomic_write((fs::path(g.out_dir) / "energy.csv").string(), [&](const std::string& tmp) {
            std::ofstream os(tmp);
            os << "iteration,energy\n";
            for (std::size_t i = 0; i < trace.size(); ++i) {
                os << i << ',' << csv_num(trace[i]) << "\n";
            }
        });
    }
    json cfg{{"image", o.image},
             {"init_circle", {{"cx", cx}, {"cy", cy}, {"r", r}}},
             {"cv", to_json(o.cv)},
             {"precision", std::is_same_v<S, float> ? "f32" : "f64"}};
    write_json_file(cfg, (fs::path(g.out_dir) / "segment_config.json").string());
    std::cout << "segment: wrote " << (fs::path(g.out_dir) / "mask.png").string() << "\n";
    return 0;
}

// --- dt ------------------------------------------------------------------------

struct DtOpts {
    std::string image;
    DtParams p;
    bool radius_given = false;
};

template <typename S>
int run_dt(const GlobalOpts& g, DtOpts o) {
    if (!o.radius_given) {
        o.p.kernel_radius = std::max<Index>(
            1, static_cast<Index>(std::ceil(-o.p.lambda_dt * std::log(1e-6))) + 1);
    }
    o.p.validate();
    Tensor<S> alpha = load_image<S>(o.image);  // [1,H,W] in [0,1]
    Tensor<S> a2 = Tensor<S>::zeros({alpha.extent(1), alpha.extent(2)});
    a2.raw() = alpha.array();
    DtDiagnostics diag;
    Tensor<S> beta = soft_distance_transform(a2, o.p, &diag);

    fs::create_directories(g.out_dir);
    write_heatmap(beta, (fs::path(g.out_dir) / "beta.png").string());
    write_tnsr(beta, (fs::path(g.out_dir) / "beta.tnsr").string());
    json cfg{{"image", o.image},
             {"dt", to_json(o.p)},
             {"floored_pixels", diag.floored_pixels},
             {"precision", std::is_same_v<S, float> ? "f32" : "f64"}};
    write_json_file(cfg, (fs::path(g.out_dir) / "dt_config.json").string());
    std::cout << "dt: wrote " << (fs::path(g.out_dir) / "beta.tnsr").string() << "\n";
    return 0;
}

// --- synth ---------------------------------------------------------------------

template <typename S>
int run_synth(const GlobalOpts& g, const SynthConfig& cfg, bool write_confounders) {
    cfg.validate();
    auto xs = generate_synthetic<S>(cfg);
    auto samples = strip_confounders(xs);
    DatasetSplit split = split_dataset(samples.size(), cfg.seed);
    fs::create_directories(g.out_dir);
    save_dataset(g.out_dir, samples, &split);
    write_json_file(to_json(cfg), (fs::path(g.out_dir) / "synth_config.json").string());
    if (write_confounders) {
        fs::create_directories(fs::path(g.out_dir) / "confounders");
        for (std::size_t i = 0; i < xs.size(); ++i) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%04zu.png", i);
            save_mask(xs[i].confounder_mask,
                      (fs::path(g.out_dir) / "confounders" / buf).string());
        }
    }
    std::cout << "synth: wrote " << samples.size() << " samples under " << g.out_dir << "\n";
    return 0;
}

// --- train ---------------------------------------------------------------------

template <typename S>
int run_train(const GlobalOpts& g, UNetConfig ucfg, TrainConfig tcfg,
              const std::string& train_manifest, const std::string& val_manifest) {
    tcfg.out_dir = g.out_dir;
    auto train_set = load_manifest<S>(train_manifest);
    auto val_set = load_manifest<S>(val_manifest);
    Model<S> model = build<S>(ucfg);
    json cfg{{"unet", to_json(ucfg)},
             {"train", to_json(tcfg)},
             {"train_manifest", train_manifest},
             {"val_manifest", val_manifest},
             {"precision", std::is_same_v<S, float> ? "f32" : "f64"}};
    fs::create_directories(g.out_dir);
    write_json_file(cfg, (fs::path(g.out_dir) / "train_config.json").string());
    TrainResult res = train(model, train_set, val_set, tcfg);
    const auto& last = res.history.back();
    std::cout << "train: " << to_string(ucfg.gate_mode) << " epoch " << last.epoch
              << " loss " << last.train_loss << " val_dice " << last.val.dice.mean
              << " sec/batch " << last.sec_per_batch << "\n";
    return 0;
}

// --- eval ----------------------------------------------------------------------

template <typename S>
int run_eval(const GlobalOpts& g, const std::string& checkpoint, const std::string& manifest,
             double threshold) {
    Model<S> model = load_checkpoint<S>(checkpoint);
    auto data = load_manifest<S>(manifest);
    auto rows = evaluate_samples(model, data, threshold);
    const MetricsReport r = aggregate(rows);
    fs::create_directories(g.out_dir);
    write_eval_csv((fs::path(g.out_dir) / "eval.csv").string(), rows);
    json cfg{{"checkpoint", checkpoint}, {"manifest", manifest}, {"threshold", threshold}};
    write_json_file(cfg, (fs::path(g.out_dir) / "eval_config.json").string());
    std::cout << "eval: dice " << r.dice.mean << " +- " << r.dice.sd << " iou " << r.iou.mean
              << " hd_mm " << r.hausdorff_mm.mean << " fpr " << r.fpr.mean << " fnr "
              << r.fnr.mean << " (n=" << r.n_samples
              << ", hausdorff_excluded=" << r.hausdorff_excluded << ")\n";
    return 0;
}

// --- attn-dump -------------------------------------------------------------------

template <typename S>
int run_attn_dump(const GlobalOpts& g, const std::string& checkpoint, const std::string& manifest,
                  int k, std::string tag) {
    Model<S> model = load_checkpoint<S>(checkpoint);
    if (model.cfg.gate_mode == GateMode::none) {
        throw ConfigError("attn-dump: checkpoint was trained without attention gates");
    }
    auto data = load_manifest<S>(manifest);
    if (tag.empty()) tag = fs::path(checkpoint).stem().string();
    fs::create_directories(g.out_dir);
    const int n = std::min<int>(k, static_cast<int>(data.size()));
    for (int i = 0; i < n; ++i) {
        dump_attention(model, data[static_cast<std::size_t>(i)].image, g.out_dir,
                       tag + "_sample" + std::to_string(i));
    }
    json cfg{{"checkpoint", checkpoint}, {"manifest", manifest}, {"samples", n}, {"tag", tag}};
    write_json_file(cfg, (fs::path(g.out_dir) / "attn_config.json").string());
    std::cout << "attn-dump: wrote maps for " << n << " sample(s) under " << g.out_dir << "\n";
    return 0;
}

// --- gradcheck ---------------------------------------------------------------------

int run_gradcheck(const std::string& suite) {
    const auto results = gradcheck_suite(suite);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass() ? "PASS " : "FAIL ") << r.name << " max_rel_err " << r.max_rel_err
                  << " (threshold " << r.threshold << ")\n";
        all_pass = all_pass && r.pass();
    }
    return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Chan-Vese attention segmentation toolkit"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "Global seed override");
    app.add_option("--precision", g.precision, "f32 or f64 (default depends on subcommand)");
    app.add_option("--threads", g.threads, "Worker thread bound");
    app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

    // segment
    SegmentOpts seg;
    auto* c_seg = app.add_subcommand("segment", "Level-set segmentation of one image");
    c_seg->add_option("--image", seg.image, "8-bit grayscale PGM or PNG")->required();
    c_seg->add_option("--init-circle", seg.init_circle, "cx,cy,r of the initial contour");
    c_seg->add_option("--mu", seg.cv.mu, "Length weight")->capture_default_str();
    c_seg->add_option("--nu", seg.cv.nu, "Area weight")->capture_default_str();
    c_seg->add_option("--lambda1", seg.cv.lambda1)->capture_default_str();
    c_seg->add_option("--lambda2", seg.cv.lambda2)->capture_default_str();
    c_seg->add_option("--eps", seg.cv.eps, "Heaviside width")->capture_default_str();
    c_seg->add_option("--dt", seg.cv.dt, "Time step")->capture_default_str();
    c_seg->add_option("--iters", seg.cv.iters)->capture_default_str();
    c_seg->add_option("--eta", seg.cv.eta)->capture_default_str();
    c_seg->add_flag("--energy,!--no-energy", seg.energy_csv, "Write the energy trace CSV");

    // dt
    DtOpts dt;
    auto* c_dt = app.add_subcommand("dt", "Soft distance transform of an image");
    c_dt->add_option("--image", dt.image, "Grayscale image as alpha in [0,1]")->required();
    c_dt->add_option("--lambda", dt.p.lambda_dt, "Temperature")->capture_default_str();
    auto* radius_opt = c_dt->add_option("--radius", dt.p.kernel_radius, "Kernel radius");
    std::string metric = "euclidean";
    c_dt->add_option("--metric", metric, "euclidean | squared-euclidean")->capture_default_str();
    c_dt->add_flag("--allow-truncation", dt.p.allow_truncation, "Lift the truncation guard");

    // synth
    std::string synth_config_path;
    SynthConfig synth_cfg;
    bool write_confounders = false;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    c_synth->add_option("--config", synth_config_path, "SynthConfig JSON");
    auto* o_size = c_synth->add_option("--size", synth_cfg.size);
    auto* o_n = c_synth->add_option("--n-samples", synth_cfg.n_samples);
    auto* o_contrast = c_synth->add_option("--contrast", synth_cfg.contrast);
    auto* o_noise = c_synth->add_option("--noise-sigma", synth_cfg.noise_sigma);
    auto* o_conf = c_synth->add_option("--confounders", synth_cfg.confounders);
    c_synth->add_flag("--write-confounders", write_confounders, "Also save confounder masks");

    // train
    std::string train_config_path, data_root, train_manifest, val_manifest, gate_mode_str;
    int tr_epochs = -1, tr_batch = -1, tr_depth = -1, tr_cadence = -1;
    double tr_lr = -1;
    Index tr_base = -1;
    auto* c_train = app.add_subcommand("train", "Train a U-Net");
    c_train->add_option("--config", train_config_path, "JSON with {unet: ..., train: ...}");
    c_train->add_option("--data", data_root, "Dataset root with manifest_{train,val}.csv");
    c_train->add_option("--train-manifest", train_manifest);
    c_train->add_option("--val-manifest", val_manifest);
    c_train->add_option("--gate-mode", gate_mode_str, "none | classic | chanvese");
    c_train->add_option("--epochs", tr_epochs);
    c_train->add_option("--batch-size", tr_batch);
    c_train->add_option("--lr", tr_lr);
    c_train->add_option("--depth", tr_depth);
    c_train->add_option("--base-channels", tr_base);
    c_train->add_option("--checkpoint-cadence", tr_cadence);

    // eval
    std::string eval_ckpt, eval_manifest;
    double eval_threshold = 0.5;
    auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    c_eval->add_option("--checkpoint", eval_ckpt)->required();
    c_eval->add_option("--manifest", eval_manifest)->required();
    c_eval->add_option("--threshold", eval_threshold)->capture_default_str();

    // gradcheck
    std::string suite;
    auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient suites (f64)");
    c_grad->add_option("--suite", suite, "ops | cv | dt | gate | unet | all")->required();

    // attn-dump
    std::string ad_ckpt, ad_manifest, ad_tag;
    int ad_samples = 1;
    auto* c_attn = app.add_subcommand("attn-dump", "Dump per-gate attention heatmaps");
    c_attn->add_option("--checkpoint", ad_ckpt)->required();
    c_attn->add_option("--manifest", ad_manifest)->required();
    c_attn->add_option("--samples", ad_samples)->capture_default_str();
    c_attn->add_option("--tag", ad_tag, "Filename prefix (default: checkpoint stem)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        g.seed_given = app.count("--seed") > 0;
        set_thread_count(g.threads);
        if (c_seg->parsed()) {
            const std::string p = pick_precision(g, "f64");
            return p == "f32" ? run_segment<float>(g, seg) : run_segment<double>(g, seg);
        }
        if (c_dt->parsed()) {
            dt.radius_given = radius_opt->count() > 0;
            if (metric == "euclidean") dt.p.metric = DtMetric::euclidean;
            else if (metric == "squared-euclidean") dt.p.metric = DtMetric::squared_euclidean;
            else throw ConfigError("unknown metric: " + metric);
            const std::string p = pick_precision(g, "f64");
            return p == "f32" ? run_dt<float>(g, dt) : run_dt<double>(g, dt);
        }
        if (c_synth->parsed()) {
            SynthConfig cfg;
            if (!synth_config_path.empty()) cfg = synth_config_from_json(read_json_file(synth_config_path));
            if (o_size->count()) cfg.size = synth_cfg.size;
            if (o_n->count()) cfg.n_samples = synth_cfg.n_samples;
            if (o_contrast->count()) cfg.contrast = synth_cfg.contrast;
            if (o_noise->count()) cfg.noise_sigma = synth_cfg.noise_sigma;
            if (o_conf->count()) cfg.confounders = synth_cfg.confounders;
            if (g.seed_given) cfg.seed = g.seed;
            const std::string p = pick_precision(g, "f32");
            return p == "f32" ? run_synth<float>(g, cfg, write_confounders)
                              : run_synth<double>(g, cfg, write_confounders);
        }
        if (c_train->parsed()) {
            UNetConfig ucfg;
            TrainConfig tcfg;
            if (!train_config_path.empty()) {
                const json j = read_json_file(train_config_path);
                if (j.contains("unet")) ucfg = unet_config_from_json(j["unet"]);
                if (j.contains("train")) tcfg = train_config_from_json(j["train"]);
            }
            if (!gate_mode_str.empty()) ucfg.gate_mode = gate_mode_from_string(gate_mode_str);
            if (tr_epochs > 0) tcfg.epochs = tr_epochs;
            if (tr_batch > 0) tcfg.batch_size = tr_batch;
            if (tr_lr > 0) tcfg.lr = tr_lr;
            if (tr_depth > 0) ucfg.depth = tr_depth;
            if (tr_base > 0) ucfg.base_channels = tr_base;
            if (tr_cadence > 0) tcfg.checkpoint_cadence = tr_cadence;
            if (g.seed_given) {
                tcfg.seed = g.seed;
                ucfg.seed = g.seed;
            }
            std::string tm = train_manifest, vm = val_manifest;
            if (!data_root.empty()) {
                tm = (fs::path(data_root) / "manifest_train.csv").string();
                vm = (fs::path(data_root) / "manifest_val.csv").string();
            }
            if (tm.empty() || vm.empty()) {
                throw ConfigError("train: provide --data or both --train-manifest and --val-manifest");
            }
            const std::string p = pick_precision(g, "f32");
            return p == "f32" ? run_train<float>(g, ucfg, tcfg, tm, vm)
                              : run_train<double>(g, ucfg, tcfg, tm, vm);
        }
        if (c_eval->parsed()) {
            const std::string p = checkpoint_precision(eval_ckpt);
            return p == "f32" ? run_eval<float>(g, eval_ckpt, eval_manifest, eval_threshold)
                              : run_eval<double>(g, eval_ckpt, eval_manifest, eval_threshold);
        }
        if (c_grad->parsed()) {
            return run_gradcheck(suite);
        }
        if (c_attn->parsed()) {
            const std::string p = checkpoint_precision(ad_ckpt);
            return p == "f32" ? run_attn_dump<float>(g, ad_ckpt, ad_manifest, ad_samples, ad_tag)
                              : run_attn_dump<double>(g, ad_ckpt, ad_manifest, ad_samples, ad_tag);
        }
    } catch (const cvattn::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
