#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "robself/data.hpp"
#include "support/scene.hpp"

using namespace robself;
namespace fs = std::filesystem;

namespace {

fs::path work_root() {
    static const fs::path root = [] {
        auto dir = fs::temp_directory_path() / "robself_cli_tests";
        fs::remove_all(dir);
        fs::create_directories(dir);
        return dir;
    }();
    return root;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
    const fs::path log = work_root() / "last.log";
    const std::string cmd = std::string(ROBSELF_BIN) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (output) {
        std::ifstream in(log);
        output->assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return WEXITSTATUS(status);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// aligned source/guide inputs for `synth`
fs::path make_synth_inputs(int count, int size, std::uint64_t seed) {
    const auto dir = work_root() / ("inputs_" + std::to_string(seed));
    for (int i = 0; i < count; ++i) {
        auto sc = scene::render_scene({.size = size, .shapes = 6, .edge_softness = 1.0, .texture = 0.0,
                                       .seed = seed + static_cast<std::uint64_t>(i)});
        const auto pd = dir / ("pair" + std::to_string(i));
        fs::create_directories(pd);
        auto quant = [](const data::Image& img) {
            data::Image q(img.shape());
            for (std::int64_t j = 0; j < img.size(); ++j) q[j] = img[j] * 65535.0;
            return q;
        };
        data::save_pnm(pd / "source.pgm", quant(sc.gray), 65535);
        data::save_pnm(pd / "guide.ppm", quant(sc.rgb), 65535);
    }
    return dir;
}

std::string tiny_model_flags() {
    // small everything: fast CLI-level checks
    return " --preset real-depth-x2 --level-i 2 --iters 6 --m 3 --n 3";
}

}  // namespace

TEST_CASE("config subcommand lists and dumps presets") {
    std::string out;
    CHECK(run_cli("config --list", &out) == 0);
    CHECK(out.find("real-nir-x4") != std::string::npos);
    CHECK(run_cli("config --dump-preset syn-depth-x8", &out) == 0);
    CHECK(out.find("level_i=5") != std::string::npos);
    CHECK(out.find("kernel_m=13") != std::string::npos);
    CHECK(run_cli("config --dump-preset no-such-preset", &out) == 3);
}

TEST_CASE("bad arguments exit with code 2") {
    CHECK(run_cli("definitely-not-a-command") == 2);
    CHECK(run_cli("run") == 2);  // missing required --out
}

TEST_CASE("synth generates reproducible groups and honors zero misalignment") {
    const auto inputs = make_synth_inputs(2, 32, 100);
    const auto out_a = work_root() / "synth_a";
    const auto out_b = work_root() / "synth_b";
    CHECK(run_cli("synth --in " + inputs.string() + " --out " + out_a.string() +
                  " --trans 4 --rot 2 --persp 0.01 --factor 2 --seed 1") == 0);
    CHECK(run_cli("synth --in " + inputs.string() + " --out " + out_b.string() +
                  " --trans 4 --rot 2 --persp 0.01 --factor 2 --seed 1") == 0);
    for (const char* f : {"source_lr.pgm", "guide_x2.ppm", "gt_x2.pgm", "homography.txt", "meta.txt"}) {
        CAPTURE(f);
        CHECK(read_file(out_a / "pair0" / f) == read_file(out_b / "pair0" / f));
        CHECK(fs::exists(out_a / "pair1" / f));
    }

    // zero ranges keep the guide bitwise
    const auto out_zero = work_root() / "synth_zero";
    CHECK(run_cli("synth --in " + inputs.string() + " --out " + out_zero.string() +
                  " --trans 0 --rot 0 --persp 0 --factor 2 --seed 5") == 0);
    CHECK(read_file(out_zero / "pair0" / "guide_x2.ppm") == read_file(inputs / "pair0" / "guide.ppm"));

    // replaying the stored homography reproduces the stored guide bytes
    auto h = data::load_homography(out_a / "pair0" / "homography.txt");
    data::ImageInfo info;
    auto guide_in = data::load_image(inputs / "pair0" / "guide.ppm", &info);
    for (std::int64_t i = 0; i < guide_in.size(); ++i) guide_in[i] /= info.maxval;
    auto replay = data::warp_homography(guide_in, h);
    for (std::int64_t i = 0; i < replay.size(); ++i) replay[i] *= 65535.0;
    const auto replay_path = work_root() / "replay.ppm";
    data::save_pnm(replay_path, replay, 65535);
    CHECK(read_file(replay_path) == read_file(out_a / "pair0" / "guide_x2.ppm"));
}

TEST_CASE("run writes outputs, is seed-deterministic, and guards the out dir") {
    const auto inputs = make_synth_inputs(1, 32, 200);
    const auto groups = work_root() / "run_groups";
    REQUIRE(run_cli("synth --in " + inputs.string() + " --out " + groups.string() +
                    " --trans 3 --rot 2 --persp 0.01 --factor 2 --seed 2") == 0);

    const auto out1 = work_root() / "run1";
    const auto out2 = work_root() / "run2";
    const std::string base = "run --pair " + (groups / "pair0").string() + tiny_model_flags() + " --seed 7 --out ";
    std::string log;
    CHECK(run_cli(base + out1.string(), &log) == 0);
    for (const char* f : {"sr.pgm", "trans.pgm", "aligned_guide.pgm", "importance.pgm", "trace.csv", "manifest.txt"})
        CHECK(fs::exists(out1 / f));

    CHECK(run_cli(base + out2.string()) == 0);
    CHECK(read_file(out1 / "sr.pgm") == read_file(out2 / "sr.pgm"));

    // trace rows: header + 6 iterations
    std::string trace = read_file(out1 / "trace.csv");
    CHECK(std::count(trace.begin(), trace.end(), '\n') == 7);

    // manifest doubles as a config file
    std::string manifest = read_file(out1 / "manifest.txt");
    CHECK(manifest.find("seed=7") != std::string::npos);
    CHECK(manifest.find("level_i=2") != std::string::npos);

    // occupied out dir requires --force
    CHECK(run_cli(base + out1.string()) == 3);
    CHECK(run_cli(base + out1.string() + " --force") == 0);

    // the manifest alone reproduces the run bitwise
    const auto out3 = work_root() / "run3";
    CHECK(run_cli("run --pair " + (groups / "pair0").string() + " --config " + (out1 / "manifest.txt").string() +
                  " --out " + out3.string()) == 0);
    CHECK(read_file(out1 / "sr.pgm") == read_file(out3 / "sr.pgm"));
}

TEST_CASE("run rejects pairs whose channels do not match the preset") {
    // single-channel guide violates psi=3
    const auto dir = work_root() / "bad_pair";
    fs::create_directories(dir);
    auto sc = scene::render_scene({.size = 32, .shapes = 4, .edge_softness = 1.0, .texture = 0.0, .seed = 300});
    auto quant = [](const data::Image& img) {
        data::Image q(img.shape());
        for (std::int64_t j = 0; j < img.size(); ++j) q[j] = img[j] * 65535.0;
        return q;
    };
    data::save_pnm(dir / "source_lr.pgm", quant(data::degrade(sc.gray, 2)), 65535);
    data::save_pnm(dir / "guide_x2.pgm", quant(sc.gray), 65535);
    CHECK(run_cli("run --pair " + dir.string() + tiny_model_flags() + " --out " + (work_root() / "bad_out").string()) ==
          3);
    CHECK(run_cli("run --pair " + (work_root() / "no_such_dir").string() + tiny_model_flags() + " --out " +
                  (work_root() / "bad_out2").string()) == 3);
}

TEST_CASE("bench writes a report with per-pair rows and an aggregate") {
    const auto inputs = make_synth_inputs(3, 32, 400);
    const auto groups = work_root() / "bench_groups";
    REQUIRE(run_cli("synth --in " + inputs.string() + " --out " + groups.string() +
                    " --trans 3 --rot 1 --persp 0.005 --factor 2 --seed 3") == 0);

    const auto out = work_root() / "bench_out";
    std::string log;
    CHECK(run_cli("bench --pairs " + groups.string() + tiny_model_flags() + " --seed 1 --out " + out.string(),
                  &log) == 0);
    std::string report = read_file(out / "report.csv");
    CHECK(report.rfind("pair,rmse,psnr,pixels\n", 0) == 0);
    CHECK(std::count(report.begin(), report.end(), '\n') == 5);  // header + 3 rows + aggregate
    CHECK(report.find("pair0,") != std::string::npos);
    CHECK(report.find("aggregate,") != std::string::npos);
    CHECK(fs::exists(out / "pair1" / "sr.pgm"));
    CHECK(fs::exists(out / "pair2" / "trace.csv"));

    // ablation modes drive the four-column structure across invocations
    const auto out_ab = work_root() / "bench_ablate";
    CHECK(run_cli("bench --pairs " + groups.string() + tiny_model_flags() + " --seed 1 --ablate no-translator-no-filter --out " +
                  out_ab.string()) == 0);
    CHECK(fs::exists(out_ab / "report.csv"));
}

TEST_CASE("gradcheck subcommand honors tolerance and the op filter") {
    std::string out;
    CHECK(run_cli("gradcheck --op grid_sample", &out) == 0);
    CHECK(out.find("grid_sample") != std::string::npos);
    CHECK(out.find("conv2d") == std::string::npos);
    CHECK(run_cli("gradcheck --op l1_mean --tolerance 1e-12", &out) == 1);  // below the rounding floor
}
