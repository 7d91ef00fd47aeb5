// robself — self-supervised cross-modal super-resolution for misaligned
// source/guide pairs. Subcommands: run, bench, synth, gradcheck, config.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "robself/data.hpp"
#include "robself/gradcheck.hpp"
#include "robself/metrics.hpp"
#include "robself/optimize.hpp"
#include "robself/runtime.hpp"

namespace fs = std::filesystem;
using namespace robself;
using model::AblationMode;
using model::RobSelfConfig;
using model::Variant;

namespace {

constexpr const char* kVersion = "0.1.0";

constexpr int kExitBadArgs = 2;
constexpr int kExitInputContract = 3;
constexpr int kExitDivergence = 4;

struct CommonOpts {
    std::string preset;
    std::string config_file;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    bool force = false;
    int jobs = 1;
    std::string precision = "f64";
    // preset field overrides
    std::string variant;
    int iters = -1;
    int level_i = -1;
    std::string eta;
    int kernel_m = -1;
    int kernel_n = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_out = true) {
    cmd->add_option("--preset", o.preset, "task preset name");
    cmd->add_option("--config", o.config_file, "key=value config file");
    cmd->add_option("--seed", o.seed, "random seed")->each([&o](const std::string&) { o.seed_set = true; });
    if (with_out) {
        cmd->add_option("--out", o.out, "output directory")->required();
        cmd->add_flag("--force", o.force, "allow writing into an existing output directory");
    }
    cmd->add_option("--jobs", o.jobs, "parallel pair runs")->check(CLI::PositiveNumber);
    cmd->add_option("--precision", o.precision, "compute precision")->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--variant", o.variant, "alignment variant: re|de")->check(CLI::IsMember({"re", "de"}));
    cmd->add_option("--iters", o.iters, "optimization iterations");
    cmd->add_option("--level-i", o.level_i, "misalignment estimator depth");
    cmd->add_option("--eta", o.eta, "importance threshold scale (number or 'none')");
    cmd->add_option("--m", o.kernel_m, "large filter kernel size");
    cmd->add_option("--n", o.kernel_n, "small filter kernel size");
}

RobSelfConfig resolve_config(const CommonOpts& o) {
    RobSelfConfig cfg;
    if (!o.preset.empty()) cfg = model::preset(o.preset);
    if (!o.config_file.empty()) {
        std::ifstream in(o.config_file);
        if (!in) throw data::IoError("cannot open config file '" + o.config_file + "'");
        cfg = model::parse_config(in, cfg);
    }
    if (!o.variant.empty()) cfg.variant = o.variant == "de" ? Variant::De : Variant::Re;
    if (o.iters >= 0) cfg.iterations = o.iters;
    if (o.level_i >= 0) cfg.level_i = o.level_i;
    if (!o.eta.empty()) cfg.eta = o.eta == "none" ? std::nullopt : std::optional<double>(std::stod(o.eta));
    if (o.kernel_m > 0) cfg.kernel_m = o.kernel_m;
    if (o.kernel_n > 0) cfg.kernel_n = o.kernel_n;
    if (o.seed_set) cfg.seed = o.seed;
    model::validate(cfg);
    return cfg;
}

void prepare_out_dir(const fs::path& out, bool force) {
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw data::IoError("output directory '" + out.string() + "' exists; pass --force to overwrite");
    fs::create_directories(out);
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Largest centered crop whose extents are divisible by `multiple`, with the
// offset aligned to `offset_align` so the LR crop stays on integer pixels.
data::Image center_crop(const data::Image& img, int multiple, int offset_align) {
    const int H = img.dim(1), W = img.dim(2);
    const int ch = H / multiple * multiple, cw = W / multiple * multiple;
    if (ch == H && cw == W) return img;
    if (ch == 0 || cw == 0) throw diff::ContractError("image too small for the configured level");
    int oy = (H - ch) / 2, ox = (W - cw) / 2;
    oy -= oy % offset_align;
    ox -= ox % offset_align;
    data::Image out({img.dim(0), ch, cw});
    for (int c = 0; c < img.dim(0); ++c)
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) out.at(c, y, x) = img.at(c, y + oy, x + ox);
    return out;
}

// CLI-level divisibility handling: the library errors, the tool crops.
void crop_pair_for_level(data::ImagePair& pair, const RobSelfConfig& cfg) {
    const int mult = std::max(1 << cfg.level_i, cfg.sr_factor);
    const int H = pair.guide_hr.dim(1), W = pair.guide_hr.dim(2);
    if (H % mult == 0 && W % mult == 0) return;
    std::cerr << "warning: cropping " << pair.name << " from " << W << "x" << H
              << " to a multiple of " << mult << " for level_i=" << cfg.level_i << "\n";
    pair.guide_hr = center_crop(pair.guide_hr, mult, cfg.sr_factor);
    if (pair.gt_hr) *pair.gt_hr = center_crop(*pair.gt_hr, mult, cfg.sr_factor);
    pair.source_lr = center_crop(pair.source_lr, mult / cfg.sr_factor, 1);
    // re-derive the source crop from the guide crop so ratios stay exact
    const int h = pair.guide_hr.dim(1) / cfg.sr_factor, w = pair.guide_hr.dim(2) / cfg.sr_factor;
    if (pair.source_lr.dim(1) != h || pair.source_lr.dim(2) != w)
        throw diff::ContractError("crop produced inconsistent extents");
}

void check_channels(const data::ImagePair& pair, const RobSelfConfig& cfg) {
    if (pair.source_lr.dim(0) != cfg.phi || pair.guide_hr.dim(0) != cfg.psi)
        throw diff::ContractError("pair '" + pair.name + "' has " + std::to_string(pair.source_lr.dim(0)) + "/" +
                                  std::to_string(pair.guide_hr.dim(0)) + " channels, config requires " +
                                  std::to_string(cfg.phi) + "/" + std::to_string(cfg.psi));
}

void save_visualization(const fs::path& path, const data::Image& img) {
    // channel mean normalized to 8 bits; accepts {C,H,W} or {H,W}
    const bool has_channels = img.rank() == 3;
    const int H = img.dim(has_channels ? 1 : 0), W = img.dim(has_channels ? 2 : 1);
    data::Image flat({1, H, W});
    const int channels = has_channels ? img.dim(0) : 1;
    for (int c = 0; c < channels; ++c)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
            flat[i] += img[static_cast<std::int64_t>(c) * H * W + i];
    double lo = flat[0], hi = flat[0];
    for (std::int64_t i = 0; i < flat.size(); ++i) {
        lo = std::min(lo, flat[i]);
        hi = std::max(hi, flat[i]);
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    for (std::int64_t i = 0; i < flat.size(); ++i) flat[i] = (flat[i] - lo) * scale;
    data::save_pnm(path, flat, 255);
}

struct RunArtifacts {
    data::Image sr;     // stored units
    data::Image trans;  // empty when the translation branch is absent
    opt::OptimTrace trace;
    data::Image f_aligned, importance, field;
    std::int64_t parameter_count = 0;
    bool diverged = false;
    std::string message;
};

template <std::floating_point T>
RunArtifacts run_pair(const data::ImagePair& pair, const RobSelfConfig& cfg, AblationMode ablation) {
    // optimize on [0,1]-normalized data; integer containers rescale back
    const double src_norm = pair.source_maxval > 255 ? 65535.0 : 1.0;
    const double guide_norm = pair.guide_maxval > 255 ? 65535.0 : 1.0;
    data::Image src = pair.source_lr;
    for (std::int64_t i = 0; i < src.size(); ++i) src[i] /= src_norm;
    data::Image guide = pair.guide_hr;
    for (std::int64_t i = 0; i < guide.size(); ++i) guide[i] /= guide_norm;

    auto result = opt::optimize_pair(diff::tensor_cast<T>(src), diff::tensor_cast<T>(guide), cfg, ablation);

    RunArtifacts a;
    a.trace = std::move(result.trace);
    a.parameter_count = result.parameter_count;
    a.diverged = result.diverged;
    a.message = result.message;
    if (result.diverged) return a;
    a.sr = diff::tensor_cast<double>(result.sr);
    for (std::int64_t i = 0; i < a.sr.size(); ++i) a.sr[i] *= src_norm;
    if (!result.trans.empty()) {
        a.trans = diff::tensor_cast<double>(result.trans);
        for (std::int64_t i = 0; i < a.trans.size(); ++i) a.trans[i] *= src_norm;
    }
    if (!result.diag.f_aligned.empty()) a.f_aligned = diff::tensor_cast<double>(result.diag.f_aligned);
    if (!result.diag.importance.empty()) a.importance = diff::tensor_cast<double>(result.diag.importance);
    if (!result.diag.field.empty()) a.field = diff::tensor_cast<double>(result.diag.field);
    return a;
}

RunArtifacts run_pair_dispatch(const data::ImagePair& pair, const RobSelfConfig& cfg, AblationMode ablation,
                               const std::string& precision) {
    return precision == "f32" ? run_pair<float>(pair, cfg, ablation) : run_pair<double>(pair, cfg, ablation);
}

std::string prediction_extension(const data::ImagePair& pair) {
    if (pair.source_maxval == 0) return ".pfm";
    return pair.source_lr.dim(0) == 3 ? ".ppm" : ".pgm";
}

void save_prediction(const fs::path& path, const data::Image& img, int maxval) {
    if (path.extension() == ".pfm")
        data::save_pfm(path, img);
    else
        data::save_pnm(path, img, maxval == 255 ? 255 : 65535);
}

void write_manifest(const fs::path& path, const std::string& command, const RobSelfConfig& cfg,
                    const std::string& inputs, const std::string& precision, AblationMode ablation,
                    const std::string& started, const std::string& finished) {
    std::ofstream out(path);
    out << "# robself manifest\n";
    out << "# version=" << kVersion << "\n";
    out << "# command=" << command << "\n";
    out << "# inputs=" << inputs << "\n";
    out << "# precision=" << precision << "\n";
    out << "# ablation=" << model::ablation_name(ablation) << "\n";
    out << "# started=" << started << "\n";
    out << "# finished=" << finished << "\n";
    out << model::dump_config(cfg);
}

int cmd_run(const CommonOpts& o, const std::string& pair_dir, const std::string& source, const std::string& guide,
            const std::string& gt, const std::string& ablate) {
    const auto started = timestamp();
    RobSelfConfig cfg = resolve_config(o);
    const AblationMode ablation = model::parse_ablation(ablate);

    data::ImagePair pair;
    std::string inputs;
    if (!pair_dir.empty()) {
        pair = data::load_pair_realmis(pair_dir, cfg.sr_factor);
        inputs = pair_dir;
    } else {
        if (source.empty() || guide.empty())
            throw CLI::ValidationError("run", "either --pair or both --source and --guide are required");
        pair = data::load_pair_flat(source, guide,
                                    gt.empty() ? std::nullopt : std::optional<fs::path>(gt), cfg.sr_factor);
        inputs = source + "," + guide;
    }
    check_channels(pair, cfg);
    crop_pair_for_level(pair, cfg);

    prepare_out_dir(o.out, o.force);
    auto artifacts = run_pair_dispatch(pair, cfg, ablation, o.precision);
    {
        std::ofstream trace(fs::path(o.out) / "trace.csv");
        artifacts.trace.write_csv(trace);
    }
    if (artifacts.diverged) {
        std::cerr << "error: optimization diverged: " << artifacts.message << "\n";
        write_manifest(fs::path(o.out) / "manifest.txt", "run", cfg, inputs, o.precision, ablation, started,
                       timestamp());
        return kExitDivergence;
    }

    const std::string ext = prediction_extension(pair);
    save_prediction(fs::path(o.out) / ("sr" + ext), artifacts.sr, pair.source_maxval);
    if (!artifacts.trans.empty())
        save_prediction(fs::path(o.out) / ("trans" + ext), artifacts.trans, pair.source_maxval);
    if (!artifacts.f_aligned.empty())
        save_visualization(fs::path(o.out) / "aligned_guide.pgm", artifacts.f_aligned);
    if (!artifacts.importance.empty())
        save_visualization(fs::path(o.out) / "importance.pgm", artifacts.importance);
    write_manifest(fs::path(o.out) / "manifest.txt", "run", cfg, inputs, o.precision, ablation, started,
                   timestamp());

    std::cout << "pair " << pair.name << ": " << cfg.iterations << " iterations, " << artifacts.parameter_count
              << " parameters";
    if (pair.gt_hr) {
        const double r = metrics::rmse(artifacts.sr, *pair.gt_hr, pair.value_scale);
        std::cout << ", rmse " << r;
    }
    std::cout << "\n";
    return 0;
}

int cmd_bench(const CommonOpts& o, const std::string& pairs_dir, const std::string& ablate) {
    RobSelfConfig base = resolve_config(o);
    const AblationMode ablation = model::parse_ablation(ablate);
    prepare_out_dir(o.out, o.force);

    std::vector<fs::path> groups;
    for (const auto& entry : fs::directory_iterator(pairs_dir))
        if (entry.is_directory()) groups.push_back(entry.path());
    std::sort(groups.begin(), groups.end());
    if (groups.empty()) throw data::IoError("no pair groups under '" + pairs_dir + "'");

    const int jobs = std::max(1, o.jobs);
    if (jobs > 1) robself::set_max_threads(std::max(1, robself::max_threads() / jobs));

    metrics::EvalReport report;
    report.rows.resize(groups.size());
    std::vector<std::string> failures(groups.size());
    std::atomic<size_t> next{0};
    std::mutex io_mutex;

    auto worker = [&] {
        for (size_t gi; (gi = next.fetch_add(1)) < groups.size();) {
            const auto& dir = groups[gi];
            metrics::EvalRow row;
            row.pair = dir.filename().string();
            try {
                auto pair = data::load_pair_realmis(dir, base.sr_factor);
                check_channels(pair, base);
                crop_pair_for_level(pair, base);
                RobSelfConfig cfg = base;
                cfg.seed = base.seed + gi;  // stable per-pair seed in listing order
                auto artifacts = run_pair_dispatch(pair, cfg, ablation, o.precision);
                if (artifacts.diverged) throw opt::DivergenceError(artifacts.message);

                const fs::path gout = fs::path(o.out) / row.pair;
                fs::create_directories(gout);
                const std::string ext = prediction_extension(pair);
                save_prediction(gout / ("sr" + ext), artifacts.sr, pair.source_maxval);
                std::ofstream trace(gout / "trace.csv");
                artifacts.trace.write_csv(trace);

                row.pixels = artifacts.sr.size();
                if (pair.gt_hr) {
                    row.has_gt = true;
                    row.rmse = metrics::rmse(artifacts.sr, *pair.gt_hr, pair.value_scale);
                    const double src_norm = pair.source_maxval > 255 ? 65535.0 : 1.0;
                    data::Image pred_norm = artifacts.sr, gt_norm = *pair.gt_hr;
                    for (std::int64_t i = 0; i < pred_norm.size(); ++i) {
                        pred_norm[i] /= src_norm;
                        gt_norm[i] /= src_norm;
                    }
                    row.psnr = metrics::psnr(pred_norm, gt_norm);
                }
            } catch (const std::exception& e) {
                failures[gi] = e.what();
                std::lock_guard lock(io_mutex);
                std::cerr << "pair " << row.pair << " failed: " << e.what() << "\n";
            }
            report.rows[gi] = std::move(row);
        }
    };
    std::vector<std::thread> pool;
    for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::ofstream csv(fs::path(o.out) / "report.csv");
    report.write_csv(csv);
    report.write_csv(std::cout);

    const size_t failed = static_cast<size_t>(std::count_if(failures.begin(), failures.end(),
                                                            [](const std::string& s) { return !s.empty(); }));
    return failed == groups.size() ? kExitInputContract : 0;
}

int cmd_synth(const CommonOpts& o, const std::string& in_dir, double trans, double rot, double persp, int factor) {
    prepare_out_dir(o.out, o.force);
    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(in_dir))
        if (entry.is_directory()) inputs.push_back(entry.path());
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw data::IoError("no input pair directories under '" + in_dir + "'");

    auto load_unit = [](const fs::path& dir, const std::string& stem) {
        for (const char* ext : {".pgm", ".ppm", ".pfm"}) {
            const auto p = dir / (stem + ext);
            if (!fs::exists(p)) continue;
            data::ImageInfo info;
            auto img = data::load_image(p, &info);
            if (info.maxval > 0)
                for (std::int64_t i = 0; i < img.size(); ++i) img[i] /= info.maxval;
            return img;
        }
        throw data::IoError("missing '" + stem + ".{pgm,ppm,pfm}' in '" + dir.string() + "'");
    };

    for (size_t i = 0; i < inputs.size(); ++i) {
        auto source = load_unit(inputs[i], "source");
        auto guide = load_unit(inputs[i], "guide");
        source = center_crop(source, factor, 1);
        guide = center_crop(guide, factor, 1);
        data::MisalignSpec spec{trans, rot, persp, o.seed + i};
        auto sp = data::make_synthetic_pair(source, guide, spec, factor);
        sp.pair.name = inputs[i].filename().string();
        data::save_group(fs::path(o.out) / sp.pair.name, sp, factor);
        std::cout << "group " << sp.pair.name << " written\n";
    }
    return 0;
}

int cmd_config(const std::string& dump_preset, bool list) {
    if (list) {
        for (const auto& n : model::preset_names()) std::cout << n << "\n";
        return 0;
    }
    if (!dump_preset.empty()) {
        std::cout << model::dump_config(model::preset(dump_preset));
        return 0;
    }
    std::cout << model::dump_config(RobSelfConfig{});
    return 0;
}

}  // namespace

int cmd_gradcheck(double tolerance, const std::string& only_op);  // gradcheck_suite.cpp

int main(int argc, char** argv) {
    CLI::App app{"self-supervised cross-modal super-resolution for misaligned pairs"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    CommonOpts run_o, bench_o, synth_o;
    std::string pair_dir, source, guide, gt, run_ablate = "none", bench_ablate = "none";
    auto* run_cmd = app.add_subcommand("run", "optimize one source/guide pair");
    add_common(run_cmd, run_o);
    run_cmd->add_option("--pair", pair_dir, "realmis group directory");
    run_cmd->add_option("--source", source, "LR source image (flat layout)");
    run_cmd->add_option("--guide", guide, "HR guide image (flat layout)");
    run_cmd->add_option("--gt", gt, "ground-truth image (flat layout)");
    run_cmd->add_option("--ablate", run_ablate, "ablation mode")
        ->check(CLI::IsMember({"none", "no-translator", "no-filter", "no-translator-no-filter"}));

    std::string pairs_dir;
    auto* bench_cmd = app.add_subcommand("bench", "optimize and evaluate a directory of pair groups");
    add_common(bench_cmd, bench_o);
    bench_cmd->add_option("--pairs", pairs_dir, "directory of realmis groups")->required();
    bench_cmd->add_option("--ablate", bench_ablate, "ablation mode")
        ->check(CLI::IsMember({"none", "no-translator", "no-filter", "no-translator-no-filter"}));

    std::string synth_in;
    double synth_trans = 8.0, synth_rot = 4.0, synth_persp = 0.02;
    int synth_factor = 4;
    auto* synth_cmd = app.add_subcommand("synth", "generate misaligned groups from aligned pairs");
    add_common(synth_cmd, synth_o);
    synth_cmd->add_option("--in", synth_in, "directory of aligned source/guide pair directories")->required();
    synth_cmd->add_option("--trans", synth_trans, "translation range in pixels");
    synth_cmd->add_option("--rot", synth_rot, "rotation range in degrees");
    synth_cmd->add_option("--persp", synth_persp, "perspective corner jitter fraction");
    synth_cmd->add_option("--factor", synth_factor, "super-resolution factor")->check(CLI::IsMember({2, 4, 8}));

    double gc_tolerance = 1e-3;
    std::string gc_op;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification suite");
    gc_cmd->add_option("--tolerance", gc_tolerance, "max relative error");
    gc_cmd->add_option("--op", gc_op, "restrict to one operator or 'model'");

    std::string dump_preset;
    bool list_presets = false;
    auto* config_cmd = app.add_subcommand("config", "print configurations");
    config_cmd->add_option("--dump-preset", dump_preset, "print a named preset as key=value");
    config_cmd->add_flag("--list", list_presets, "list preset names");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitBadArgs;
    }

    try {
        if (run_cmd->parsed()) return cmd_run(run_o, pair_dir, source, guide, gt, run_ablate);
        if (bench_cmd->parsed()) return cmd_bench(bench_o, pairs_dir, bench_ablate);
        if (synth_cmd->parsed())
            return cmd_synth(synth_o, synth_in, synth_trans, synth_rot, synth_persp, synth_factor);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_tolerance, gc_op);
        if (config_cmd->parsed()) return cmd_config(dump_preset, list_presets);
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitBadArgs;
    } catch (const opt::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputContract;
    }
    return kExitBadArgs;
}
