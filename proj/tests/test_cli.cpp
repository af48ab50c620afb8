#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "cvattn/chan_vese.hpp"
#include "cvattn/distance_transform.hpp"
#include "cvattn/image_io.hpp"
#include "cvattn/metrics.hpp"

using namespace cvattn;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code;
    std::string out;
    std::string err;
};

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

CliResult run_cli(const std::string& args, const std::string& dir) {
    const std::string out = dir + "/stdout.txt";
    const std::string err = dir + "/stderr.txt";
    const std::string cmd = std::string(CVATTN_BIN) + " " + args + " > " + out + " 2> " + err;
    const int rc = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

std::string fresh_dir(const std::string& name) {
    const std::string dir = (fs::temp_directory_path() / name).string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
    const std::string dir = fresh_dir("cvattn_cli_usage");
    CHECK(run_cli("dt --image whatever.png --lambda 0", dir).exit_code == 1);
    CHECK(run_cli("bogus-subcommand", dir).exit_code == 1);
    CHECK(run_cli("segment", dir).exit_code == 1);  // missing required --image
    fs::remove_all(dir);
}

TEST_CASE("runtime errors exit with code 2 and name the path") {
    const std::string dir = fresh_dir("cvattn_cli_runtime");
    CliResult r = run_cli("segment --image " + dir + "/missing_image.png", dir);
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("missing_image.png") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("gradcheck subcommand runs the ops suite clean") {
    const std::string dir = fresh_dir("cvattn_cli_gradcheck");
    CliResult r = run_cli("gradcheck --suite ops", dir);
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("PASS conv2d/input") != std::string::npos);
    CHECK(r.out.find("FAIL") == std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("segment recovers the disk fixture") {
    const std::string dir = fresh_dir("cvattn_cli_segment");
    // fixture: binary disk image + its ground-truth mask
    Tensor<double> img = Tensor<double>::zeros({64, 64});
    for (Index y = 0; y < 64; ++y)
        for (Index x = 0; x < 64; ++x)
            img.raw()[y * 64 + x] = std::hypot(y - 32.0, x - 32.0) <= 12.0 ? 1.0 : 0.0;
    save_image(img, dir + "/disk.png");

    CliResult r = run_cli("--out-dir " + dir + "/out segment --image " + dir +
                              "/disk.png --init-circle 32,32,20 --nu 0 --iters 200",
                          dir);
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir + "/out/mask.png"));
    CHECK(fs::exists(dir + "/out/energy.csv"));
    CHECK(fs::exists(dir + "/out/phi.tnsr"));
    CHECK(fs::exists(dir + "/out/segment_config.json"));

    Tensor<double> mask = load_image<double>(dir + "/out/mask.png");
    Tensor<double> pred = Tensor<double>::zeros({64, 64});
    for (Index i = 0; i < pred.numel(); ++i) pred.raw()[i] = mask.at(i) > 0.5 ? 1.0 : 0.0;
    CHECK(metric_dice(pred, img) >= 0.99);

    // energy csv header
    std::ifstream e(dir + "/out/energy.csv");
    std::string line;
    std::getline(e, line);
    CHECK(line == "iteration,energy");
    fs::remove_all(dir);
}

TEST_CASE("segment with dt = 0 thresholds the initial circle") {
    const std::string dir = fresh_dir("cvattn_cli_dt0");
    Tensor<double> img = Tensor<double>::full({32, 32}, 0.5);
    save_image(img, dir + "/flat.png");
    CliResult r = run_cli("--out-dir " + dir + "/out segment --image " + dir +
                              "/flat.png --init-circle 16,16,8 --dt 0 --iters 1",
                          dir);
    CHECK(r.exit_code == 0);
    Tensor<double> mask = load_image<double>(dir + "/out/mask.png");
    for (Index y = 0; y < 32; ++y) {
        for (Index x = 0; x < 32; ++x) {
            const bool inside = 8.0 - std::hypot(y - 16.0, x - 16.0) > 0.0;
            CHECK((mask.at(y * 32 + x) > 0.5) == inside);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("dt subcommand matches the exact transform for one source") {
    const std::string dir = fresh_dir("cvattn_cli_dtsub");
    Tensor<double> alpha = Tensor<double>::zeros({32, 32});
    alpha.raw()[13 * 32 + 17] = 1.0;
    save_image(alpha, dir + "/pixel.png");
    CliResult r = run_cli("--out-dir " + dir + "/out dt --image " + dir +
                              "/pixel.png --lambda 0.25 --metric euclidean",
                          dir);
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir + "/out/beta.png"));
    CHECK(fs::exists(dir + "/out/beta.png.json"));
    Tensor<double> beta = read_tnsr<double>(dir + "/out/beta.tnsr");
    Tensor<double> edt = exact_edt(alpha);
    const double radius = std::ceil(-0.25 * std::log(1e-6)) + 1;
    for (Index y = 0; y < 32; ++y) {
        for (Index x = 0; x < 32; ++x) {
            if (edt(y, x) <= radius) {
                CHECK(beta(y, x) == doctest::Approx(edt(y, x)).epsilon(1e-6));
            }
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("dt on an all-white image is constant in the interior") {
    const std::string dir = fresh_dir("cvattn_cli_dtconst");
    Tensor<double> white = Tensor<double>::ones({24, 24});
    save_image(white, dir + "/white.png");
    CliResult r = run_cli("--out-dir " + dir + "/out dt --image " + dir + "/white.png --lambda 0.5",
                          dir);
    CHECK(r.exit_code == 0);
    Tensor<double> beta = read_tnsr<double>(dir + "/out/beta.tnsr");
    const Index rr = static_cast<Index>(std::ceil(-0.5 * std::log(1e-6))) + 1;
    const double center = beta(12, 12);
    CHECK(center <= 0.0);
    for (Index y = rr; y < 24 - rr; ++y)
        for (Index x = rr; x < 24 - rr; ++x)
            CHECK(beta(y, x) == doctest::Approx(center).epsilon(1e-9));
    fs::remove_all(dir);
}

TEST_CASE("reruns produce byte-identical binary outputs") {
    const std::string dir = fresh_dir("cvattn_cli_repro");
    Tensor<double> alpha = Tensor<double>::zeros({16, 16});
    alpha.raw()[5 * 16 + 5] = 1.0;
    save_image(alpha, dir + "/a.png");
    CHECK(run_cli("--out-dir " + dir + "/o1 dt --image " + dir + "/a.png --lambda 0.5", dir)
              .exit_code == 0);
    CHECK(run_cli("--out-dir " + dir + "/o2 dt --image " + dir + "/a.png --lambda 0.5", dir)
              .exit_code == 0);
    CHECK(slurp(dir + "/o1/beta.tnsr") == slurp(dir + "/o2/beta.tnsr"));
    CHECK(slurp(dir + "/o1/beta.png") == slurp(dir + "/o2/beta.png"));
    fs::remove_all(dir);
}

TEST_CASE("synth subcommand writes the documented dataset layout") {
    const std::string dir = fresh_dir("cvattn_cli_synth");
    CliResult r = run_cli("--seed 3 --out-dir " + dir + "/ds synth --n-samples 8 --size 32", dir);
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir + "/ds/images/0007.png"));
    CHECK(fs::exists(dir + "/ds/masks/0007.png"));
    CHECK(fs::exists(dir + "/ds/synth_config.json"));
    std::ifstream m(dir + "/ds/manifest.csv");
    std::string header;
    std::getline(m, header);
    CHECK(header == "image_path,mask_path,spacing_mm");
    int rows = 0;
    std::string line;
    while (std::getline(m, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 8);
    fs::remove_all(dir);
}

TEST_CASE("precision flag switches the numeric type") {
    const std::string dir = fresh_dir("cvattn_cli_precision");
    Tensor<double> alpha = Tensor<double>::zeros({8, 8});
    alpha.raw()[27] = 1.0;
    save_image(alpha, dir + "/a.png");
    CHECK(run_cli("--precision f32 --out-dir " + dir + "/o32 dt --image " + dir +
                      "/a.png --lambda 0.5",
                  dir)
              .exit_code == 0);
    std::ifstream t32(dir + "/o32/beta.tnsr", std::ios::binary);
    CHECK(tnsr_dtype(t32) == 0);
    CHECK(run_cli("--precision f64 --out-dir " + dir + "/o64 dt --image " + dir +
                      "/a.png --lambda 0.5",
                  dir)
              .exit_code == 0);
    std::ifstream t64(dir + "/o64/beta.tnsr", std::ios::binary);
    CHECK(tnsr_dtype(t64) == 1);
    fs::remove_all(dir);
}
