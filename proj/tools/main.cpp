// culm: command-line front end for the simulation, training, inference,
// evaluation and benchmarking entry points. Every command reads a JSON
// config (fields optional, defaults as in the library), applies any flag
// overrides, and leaves a run.json with the resolved config and its hash in
// the output directory so a run can be reproduced exactly.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "culm/checkpoint.hpp"
#include "culm/core.hpp"
#include "culm/errors.hpp"
#include "culm/io.hpp"
#include "culm/metrics.hpp"
#include "culm/pipeline.hpp"
#include "culm/png.hpp"
#include "culm/psf.hpp"
#include "culm/synth.hpp"
#include "culm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct GlobalOpts {
    std::string config_path;
    fs::path out_dir;
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
};

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    fs::path p = path;
    if (p.is_relative()) {
        if (const char* root = std::getenv("CULM_CONFIG_ROOT")) p = fs::path(root) / p;
    }
    std::ifstream in(p);
    if (!in) throw culm::IoError("cannot open config " + p.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw culm::ArgumentError("config " + p.string() + " is not valid JSON");
    if (!j.is_object()) throw culm::ArgumentError("config " + p.string() + " must be an object");
    return j;
}

void check_keys(const json& j, const std::string& ctx, std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known)
            throw culm::ArgumentError("config: unknown field '" + key + "' in " + ctx);
    }
}

const json& section(const json& j, const char* name) {
    static const json empty = json::object();
    if (!j.contains(name)) return empty;
    if (!j.at(name).is_object())
        throw culm::ArgumentError(std::string("config: ") + name + " must be an object");
    return j.at(name);
}

double num_field(const json& j, const std::string& ctx, const char* name, double fallback) {
    if (!j.contains(name)) return fallback;
    if (!j.at(name).is_number())
        throw culm::ArgumentError("config: " + ctx + "." + name + " must be a number");
    return j.at(name).get<double>();
}

std::int64_t int_field(const json& j, const std::string& ctx, const char* name,
                       std::int64_t fallback) {
    if (!j.contains(name)) return fallback;
    if (!j.at(name).is_number_integer())
        throw culm::ArgumentError("config: " + ctx + "." + name + " must be an integer");
    return j.at(name).get<std::int64_t>();
}

bool bool_field(const json& j, const std::string& ctx, const char* name, bool fallback) {
    if (!j.contains(name)) return fallback;
    if (!j.at(name).is_boolean())
        throw culm::ArgumentError("config: " + ctx + "." + name + " must be a boolean");
    return j.at(name).get<bool>();
}

std::string str_field(const json& j, const std::string& ctx, const char* name,
                      const std::string& fallback) {
    if (!j.contains(name)) return fallback;
    if (!j.at(name).is_string())
        throw culm::ArgumentError("config: " + ctx + "." + name + " must be a string");
    return j.at(name).get<std::string>();
}

std::string require_str(const json& j, const std::string& ctx, const char* name) {
    if (!j.contains(name))
        throw culm::ArgumentError("config: missing required field " + ctx + "." + name);
    return str_field(j, ctx, name, "");
}

culm::SynthConfig parse_synth(const json& j) {
    check_keys(j, "synth",
               {"patch_h", "patch_w", "m_max", "i_min", "i_max", "v_max", "sigma_v",
                "sigma_theta", "n_frames", "seed"});
    culm::SynthConfig c;
    c.patch_h = int_field(j, "synth", "patch_h", c.patch_h);
    c.patch_w = int_field(j, "synth", "patch_w", c.patch_w);
    c.m_max = int_field(j, "synth", "m_max", c.m_max);
    c.i_min = num_field(j, "synth", "i_min", c.i_min);
    c.i_max = num_field(j, "synth", "i_max", c.i_max);
    c.v_max = num_field(j, "synth", "v_max", c.v_max);
    c.sigma_v = num_field(j, "synth", "sigma_v", c.sigma_v);
    c.sigma_theta = num_field(j, "synth", "sigma_theta", c.sigma_theta);
    c.n_frames = int_field(j, "synth", "n_frames", c.n_frames);
    c.seed = static_cast<std::uint64_t>(int_field(j, "synth", "seed", 0));
    c.validate();
    return c;
}

culm::DegradeConfig parse_degrade(const json& j) {
    check_keys(j, "degrade",
               {"speckle_level", "speckle_sigma_px", "speckle_rho", "background_level",
                "background_sigma_px", "background_rho", "noise_std"});
    culm::DegradeConfig c;
    c.speckle_level = num_field(j, "degrade", "speckle_level", c.speckle_level);
    c.speckle_sigma_px = num_field(j, "degrade", "speckle_sigma_px", c.speckle_sigma_px);
    c.speckle_rho = num_field(j, "degrade", "speckle_rho", c.speckle_rho);
    c.background_level = num_field(j, "degrade", "background_level", c.background_level);
    c.background_sigma_px = num_field(j, "degrade", "background_sigma_px", c.background_sigma_px);
    c.background_rho = num_field(j, "degrade", "background_rho", c.background_rho);
    c.noise_std = num_field(j, "degrade", "noise_std", c.noise_std);
    c.validate();
    return c;
}

culm::GaussianPSF parse_psf(const json& j) {
    check_keys(j, "psf", {"sigma_x", "sigma_y", "amplitude"});
    culm::GaussianPSF p;
    p.sigma_x = num_field(j, "psf", "sigma_x", p.sigma_x);
    p.sigma_y = num_field(j, "psf", "sigma_y", p.sigma_y);
    p.amplitude = num_field(j, "psf", "amplitude", p.amplitude);
    p.validate();
    return p;
}

culm::TrainConfig parse_train(const json& j, std::optional<std::uint64_t> seed_override) {
    check_keys(j, "train",
               {"patch_size", "batch_size", "steps", "base_width", "lr_generator",
                "lr_discriminator", "lr_supervised", "beta1_adversarial", "beta1_supervised",
                "beta2", "seed", "checkpoint_every", "log_every", "roi_retry_limit", "weights",
                "fake_history", "history_size"});
    culm::TrainConfig c;
    c.patch_size = int_field(j, "train", "patch_size", c.patch_size);
    c.batch_size = int_field(j, "train", "batch_size", c.batch_size);
    c.steps = int_field(j, "train", "steps", c.steps);
    c.base_width = int_field(j, "train", "base_width", c.base_width);
    c.lr_generator = num_field(j, "train", "lr_generator", c.lr_generator);
    c.lr_discriminator = num_field(j, "train", "lr_discriminator", c.lr_discriminator);
    c.lr_supervised = num_field(j, "train", "lr_supervised", c.lr_supervised);
    c.beta1_adversarial = num_field(j, "train", "beta1_adversarial", c.beta1_adversarial);
    c.beta1_supervised = num_field(j, "train", "beta1_supervised", c.beta1_supervised);
    c.beta2 = num_field(j, "train", "beta2", c.beta2);
    c.seed = static_cast<std::uint64_t>(int_field(j, "train", "seed", 0));
    c.checkpoint_every = int_field(j, "train", "checkpoint_every", c.checkpoint_every);
    c.log_every = int_field(j, "train", "log_every", c.log_every);
    c.roi_retry_limit = int_field(j, "train", "roi_retry_limit", c.roi_retry_limit);
    c.fake_history = bool_field(j, "train", "fake_history", c.fake_history);
    c.history_size = int_field(j, "train", "history_size", c.history_size);
    const json& w = section(j, "weights");
    check_keys(w, "train.weights", {"lambda1", "lambda2", "lambda3"});
    c.weights.lambda1 = num_field(w, "train.weights", "lambda1", c.weights.lambda1);
    c.weights.lambda2 = num_field(w, "train.weights", "lambda2", c.weights.lambda2);
    c.weights.lambda3 = num_field(w, "train.weights", "lambda3", c.weights.lambda3);
    if (seed_override) c.seed = *seed_override;
    return c;
}

culm::PipelineConfig parse_pipeline(const json& j) {
    check_keys(j, "pipeline",
               {"detection_threshold", "max_link_distance", "max_frame_gap", "min_track_length",
                "upsample_factor", "deconv_iterations", "denoise_window", "denoise_sensitivity",
                "tau_t", "e2e_stride", "interpolate_tracks", "greedy_linking"});
    culm::PipelineConfig c;
    c.detection_threshold = num_field(j, "pipeline", "detection_threshold", c.detection_threshold);
    c.max_link_distance = num_field(j, "pipeline", "max_link_distance", c.max_link_distance);
    c.max_frame_gap = int_field(j, "pipeline", "max_frame_gap", c.max_frame_gap);
    c.min_track_length = int_field(j, "pipeline", "min_track_length", c.min_track_length);
    c.upsample_factor = int_field(j, "pipeline", "upsample_factor", c.upsample_factor);
    c.deconv_iterations = int_field(j, "pipeline", "deconv_iterations", c.deconv_iterations);
    c.denoise_window = int_field(j, "pipeline", "denoise_window", c.denoise_window);
    c.denoise_sensitivity = num_field(j, "pipeline", "denoise_sensitivity", c.denoise_sensitivity);
    c.tau_t = num_field(j, "pipeline", "tau_t", c.tau_t);
    c.e2e_stride = int_field(j, "pipeline", "e2e_stride", c.e2e_stride);
    c.interpolate_tracks = bool_field(j, "pipeline", "interpolate_tracks", c.interpolate_tracks);
    c.greedy_linking = bool_field(j, "pipeline", "greedy_linking", c.greedy_linking);
    return c;
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw culm::IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void write_run_record(const GlobalOpts& g, const std::string& command, const json& resolved) {
    fs::create_directories(g.out_dir);
    json rec = {{"command", command},
                {"config", resolved},
                {"config_hash", culm::config_hash(resolved)},
                {"deterministic", g.deterministic},
                {"source_rev", CULM_GIT_REV}};
    if (g.seed) rec["seed"] = *g.seed;
    write_json_file(g.out_dir / "run.json", rec);
}

culm::FrameStack load_stack(const std::string& path) {
    culm::Tensor<float> arr = culm::load_array(path);
    if (arr.ndim() != 3)
        throw culm::ArgumentError("frame array " + path + " must be [frames, height, width]");
    return culm::FrameStack(std::move(arr), culm::Geometry{});
}

std::vector<std::vector<culm::Localisation>> split_by_frame(
    const std::vector<culm::Localisation>& locs, std::int64_t n_frames) {
    std::vector<std::vector<culm::Localisation>> out(static_cast<std::size_t>(n_frames));
    for (const auto& l : locs)
        if (l.frame >= 0 && l.frame < n_frames)
            out[static_cast<std::size_t>(l.frame)].push_back(l);
    return out;
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const GlobalOpts& g, const json& cfg) {
    check_keys(cfg, "config", {"synth", "degrade", "psf", "seed", "save_fine_maps"});
    culm::SynthConfig synth = parse_synth(section(cfg, "synth"));
    culm::DegradeConfig degrade = parse_degrade(section(cfg, "degrade"));
    culm::GaussianPSF psf = parse_psf(section(cfg, "psf"));
    const bool fine = bool_field(cfg, "config", "save_fine_maps", false);
    std::uint64_t seed = static_cast<std::uint64_t>(int_field(cfg, "config", "seed", 0));
    if (g.seed) seed = *g.seed;

    json resolved = {{"synth",
                      {{"patch_h", synth.patch_h},
                       {"patch_w", synth.patch_w},
                       {"m_max", synth.m_max},
                       {"i_min", synth.i_min},
                       {"i_max", synth.i_max},
                       {"v_max", synth.v_max},
                       {"sigma_v", synth.sigma_v},
                       {"sigma_theta", synth.sigma_theta},
                       {"n_frames", synth.n_frames}}},
                     {"degrade",
                      {{"speckle_level", degrade.speckle_level},
                       {"speckle_sigma_px", degrade.speckle_sigma_px},
                       {"speckle_rho", degrade.speckle_rho},
                       {"background_level", degrade.background_level},
                       {"background_sigma_px", degrade.background_sigma_px},
                       {"background_rho", degrade.background_rho},
                       {"noise_std", degrade.noise_std}}},
                     {"psf",
                      {{"sigma_x", psf.sigma_x}, {"sigma_y", psf.sigma_y},
                       {"amplitude", psf.amplitude}}},
                     {"seed", seed},
                     {"save_fine_maps", fine}};
    write_run_record(g, "simulate", resolved);

    culm::Rng rng(seed);
    culm::SequenceData seq = culm::render_sequence(synth, psf, rng);
    culm::FrameStack ceus = culm::make_pseudo_ceus(seq.frames, degrade, rng);

    const std::int64_t nt = synth.n_frames, h = synth.patch_h, w = synth.patch_w;
    culm::save_array((g.out_dir / "mb.culm").string(), seq.frames.data);
    culm::save_array((g.out_dir / "ceus.culm").string(), ceus.data);
    culm::write_tracks_csv((g.out_dir / "gt_tracks.csv").string(), seq.tracks);

    auto stack_maps = [&](auto pick, std::int64_t mh, std::int64_t mw) {
        culm::Tensor<float> out({nt, mh, mw});
        for (std::int64_t t = 0; t < nt; ++t) {
            const culm::Tensor<float>& m = pick(seq.maps[static_cast<std::size_t>(t)]);
            std::copy(m.data(), m.data() + mh * mw, out.data() + t * mh * mw);
        }
        return out;
    };
    culm::save_array((g.out_dir / "gt_presence.culm").string(),
                     stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                         return m.presence;
                     }, h, w));
    culm::save_array((g.out_dir / "gt_intensity.culm").string(),
                     stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                         return m.intensity;
                     }, h, w));
    culm::save_array((g.out_dir / "gt_offset_x.culm").string(),
                     stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                         return m.offset_x;
                     }, h, w));
    culm::save_array((g.out_dir / "gt_offset_y.culm").string(),
                     stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                         return m.offset_y;
                     }, h, w));
    if (fine) {
        culm::save_array((g.out_dir / "gt_trajectory.culm").string(),
                         stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                             return m.trajectory;
                         }, 4 * h, 4 * w));
        culm::save_array((g.out_dir / "gt_velocity_x.culm").string(),
                         stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                             return m.velocity_x;
                         }, 4 * h, 4 * w));
        culm::save_array((g.out_dir / "gt_velocity_y.culm").string(),
                         stack_maps([](const auto& m) -> const culm::Tensor<float>& {
                             return m.velocity_y;
                         }, 4 * h, 4 * w));
    }

    json manifest = {{"format", "culm-dataset"},
                     {"version", 1},
                     {"n_frames", nt},
                     {"height", h},
                     {"width", w},
                     {"n_tracks", seq.tracks.size()},
                     {"m_max", synth.m_max},
                     {"intensity_bounds", {synth.i_min, synth.i_max}},
                     {"velocity",
                      {{"v_max", synth.v_max}, {"sigma_v", synth.sigma_v},
                       {"sigma_theta", synth.sigma_theta}}},
                     {"seed", seed},
                     {"fine_maps", fine}};
    write_json_file(g.out_dir / "manifest.json", manifest);
    std::cout << "wrote " << nt << "-frame dataset to " << g.out_dir.string() << '\n';
    return 0;
}

// ------------------------------------------------------------------- train

int cmd_train_mbdt(const GlobalOpts& g, const json& cfg, std::int64_t steps_flag) {
    check_keys(cfg, "config",
               {"data", "synth", "psf", "psf_shrink", "train", "roi_mask", "resume_from"});
    const std::string data_path = require_str(cfg, "config", "data");
    culm::SynthConfig synth = parse_synth(section(cfg, "synth"));
    culm::GaussianPSF psf = parse_psf(section(cfg, "psf"));
    const double shrink = num_field(cfg, "config", "psf_shrink", 0.5);
    culm::TrainConfig train = parse_train(section(cfg, "train"), g.seed);
    if (steps_flag > 0) train.steps = steps_flag;
    const std::string mask_path = str_field(cfg, "config", "roi_mask", "");
    if (!mask_path.empty()) train.roi_mask = culm::load_array(mask_path);
    const std::string resume = str_field(cfg, "config", "resume_from", "");

    json resolved = {{"data", data_path},       {"psf_shrink", shrink},
                     {"train", train.to_json()}, {"roi_mask", mask_path},
                     {"resume_from", resume}};
    write_run_record(g, "train-mbdt", resolved);

    culm::FrameStack ceus = load_stack(data_path);
    culm::SynthSampler sampler{synth, culm::shrink_psf(psf, shrink)};
    culm::MbdtResult res = culm::train_mbdt(ceus, sampler, train, g.out_dir,
                                            resume.empty() ? fs::path{} : fs::path(resume));
    std::cout << (res.aborted ? "aborted after " : "finished ") << res.steps_done
              << " steps, checkpoint " << res.checkpoint_dir.string() << '\n';
    return res.aborted ? kExitNumeric : 0;
}

template <typename TrainFn>
int run_supervised_train(const GlobalOpts& g, const json& cfg, std::int64_t steps_flag,
                         const char* command, double default_shrink, TrainFn&& train_fn) {
    check_keys(cfg, "config", {"synth", "psf", "psf_shrink", "train", "resume_from"});
    culm::SynthConfig synth = parse_synth(section(cfg, "synth"));
    culm::GaussianPSF psf = parse_psf(section(cfg, "psf"));
    const double shrink = num_field(cfg, "config", "psf_shrink", default_shrink);
    culm::TrainConfig train = parse_train(section(cfg, "train"), g.seed);
    if (steps_flag > 0) train.steps = steps_flag;
    const std::string resume = str_field(cfg, "config", "resume_from", "");

    json resolved = {{"psf_shrink", shrink}, {"train", train.to_json()}, {"resume_from", resume}};
    write_run_record(g, command, resolved);

    culm::SynthSampler sampler{synth, culm::shrink_psf(psf, shrink)};
    auto res = train_fn(sampler, train, g.out_dir, resume.empty() ? fs::path{} : fs::path(resume));
    std::cout << (res.aborted ? "aborted after " : "finished ") << res.steps_done
              << " steps, checkpoint " << res.checkpoint_dir.string() << '\n';
    return res.aborted ? kExitNumeric : 0;
}

// --------------------------------------------------------------- inference

int cmd_translate(const GlobalOpts& g, const json& cfg) {
    check_keys(cfg, "config", {"input", "checkpoint"});
    const std::string input = require_str(cfg, "config", "input");
    const std::string ckpt = require_str(cfg, "config", "checkpoint");
    write_run_record(g, "translate", {{"input", input}, {"checkpoint", ckpt}});

    culm::FrameStack mb = culm::mbdt_translate(load_stack(input), fs::path(ckpt));
    culm::save_array((g.out_dir / "translated.culm").string(), mb.data);
    std::cout << "translated " << mb.n_frames() << " frames\n";
    return 0;
}

int cmd_localise(const GlobalOpts& g, const json& cfg) {
    check_keys(cfg, "config",
               {"method", "input", "psf", "checkpoint", "threshold", "iterations"});
    const std::string method = str_field(cfg, "config", "method", "ncc");
    const std::string input = require_str(cfg, "config", "input");
    const double threshold = num_field(cfg, "config", "threshold", 0.5);
    const std::int64_t iterations = int_field(cfg, "config", "iterations", 20);
    if (method != "ncc" && method != "decon" && method != "mbl")
        throw culm::ArgumentError("config: method must be ncc, decon or mbl");

    json resolved = {{"method", method}, {"input", input}, {"threshold", threshold}};
    culm::FrameStack frames = load_stack(input);
    const std::int64_t nt = frames.n_frames(), h = frames.height(), w = frames.width();
    std::vector<culm::Localisation> all;

    if (method == "mbl") {
        const std::string ckpt = require_str(cfg, "config", "checkpoint");
        resolved["checkpoint"] = ckpt;
        write_run_record(g, "localise", resolved);
        culm::MblNet<float> net = culm::load_mbl(ckpt);
        for (std::int64_t t = 0; t < nt; ++t) {
            culm::Tensor<float> fr({1, h, w});
            std::copy(frames.data.data() + t * h * w, frames.data.data() + (t + 1) * h * w,
                      fr.data());
            auto locs = culm::decode_localisations(net.infer(fr), threshold, t);
            all.insert(all.end(), locs.begin(), locs.end());
        }
    } else {
        culm::GaussianPSF psf = parse_psf(section(cfg, "psf"));
        resolved["psf"] = {{"sigma_x", psf.sigma_x}, {"sigma_y", psf.sigma_y},
                           {"amplitude", psf.amplitude}};
        if (method == "decon") resolved["iterations"] = iterations;
        write_run_record(g, "localise", resolved);
        for (std::int64_t t = 0; t < nt; ++t) {
            culm::Tensor<float> fr({h, w});
            std::copy(frames.data.data() + t * h * w, frames.data.data() + (t + 1) * h * w,
                      fr.data());
            auto locs = method == "ncc"
                            ? culm::ncc_localise(fr, psf, threshold, t)
                            : culm::deconv_localise(fr, psf, iterations, threshold, t);
            all.insert(all.end(), locs.begin(), locs.end());
        }
    }
    culm::write_localisations_csv((g.out_dir / "localisations.csv").string(), all);
    std::cout << all.size() << " localisations across " << nt << " frames\n";
    return 0;
}

int cmd_track(const GlobalOpts& g, const json& cfg) {
    check_keys(cfg, "config", {"input", "pipeline"});
    const std::string input = require_str(cfg, "config", "input");
    culm::PipelineConfig pipe = parse_pipeline(section(cfg, "pipeline"));
    write_run_record(g, "track", {{"input", input}, {"pipeline", pipe.to_json()}});

    auto locs = culm::read_localisations_csv(input);
    auto tracks = culm::link_tracks(locs, pipe);
    culm::write_tracks_csv((g.out_dir / "tracks.csv").string(), tracks);
    std::cout << tracks.size() << " tracks from " << locs.size() << " localisations\n";
    return 0;
}

// ------------------------------------------------------------- reconstruct

culm::PipelineCheckpoints parse_checkpoints(const json& j) {
    check_keys(j, "checkpoints", {"mbdt", "mbl", "mbt"});
    culm::PipelineCheckpoints c;
    c.mbdt = str_field(j, "checkpoints", "mbdt", "");
    c.mbl = str_field(j, "checkpoints", "mbl", "");
    c.mbt = str_field(j, "checkpoints", "mbt", "");
    return c;
}

json timing_to_json(const culm::VariantResult& res, const std::string& variant) {
    json stages = json::array();
    for (std::size_t i = 0; i < res.timing.stages.size(); ++i)
        stages.push_back({{"name", res.timing.stages[i].name},
                          {"seconds", res.timing.stages[i].seconds},
                          {"fps", res.timing.stage_fps[i]}});
    return {{"variant", variant},
            {"n_frames", res.timing.n_frames},
            {"stages", stages},
            {"total_seconds", res.timing.total_seconds},
            {"total_fps", res.timing.total_fps},
            {"threshold_used", res.threshold_used},
            {"count_matched", res.count_matched},
            {"n_localisations", res.localisations.size()},
            {"n_tracks", res.tracks.size()}};
}

void write_variant_outputs(const fs::path& dir, const culm::VariantResult& res,
                           const std::string& variant) {
    culm::save_array((dir / "sr_density.culm").string(), res.sr.density);
    culm::save_array((dir / "sr_velocity_x.culm").string(), res.sr.velocity_x);
    culm::save_array((dir / "sr_velocity_y.culm").string(), res.sr.velocity_y);
    culm::write_png(dir / "sr_density.png", culm::render_density(res.sr.density));
    culm::write_png(dir / "sr_velocity.png",
                    culm::render_velocity(res.sr.velocity_x, res.sr.velocity_y, res.sr.density));
    culm::write_localisations_csv((dir / "localisations.csv").string(), res.localisations);
    culm::write_tracks_csv((dir / "tracks.csv").string(), res.tracks);
    write_json_file(dir / "timing.json", timing_to_json(res, variant));
}

int cmd_reconstruct(const GlobalOpts& g, const json& cfg, const std::string& variant_flag,
                    std::int64_t target_flag) {
    check_keys(cfg, "config",
               {"input", "psf", "checkpoints", "pipeline", "variant", "target_mb_count"});
    const std::string input = require_str(cfg, "config", "input");
    culm::GaussianPSF psf = parse_psf(section(cfg, "psf"));
    culm::PipelineCheckpoints ckpts = parse_checkpoints(section(cfg, "checkpoints"));
    culm::PipelineConfig pipe = parse_pipeline(section(cfg, "pipeline"));
    pipe.variant = str_field(cfg, "config", "variant", pipe.variant);
    pipe.target_mb_count = int_field(cfg, "config", "target_mb_count", pipe.target_mb_count);
    if (!variant_flag.empty()) pipe.variant = variant_flag;
    if (target_flag > 0) pipe.target_mb_count = target_flag;
    pipe.validate();

    write_run_record(g, "reconstruct",
                     {{"input", input},
                      {"psf",
                       {{"sigma_x", psf.sigma_x}, {"sigma_y", psf.sigma_y},
                        {"amplitude", psf.amplitude}}},
                      {"checkpoints",
                       {{"mbdt", ckpts.mbdt.string()}, {"mbl", ckpts.mbl.string()},
                        {"mbt", ckpts.mbt.string()}}},
                      {"pipeline", pipe.to_json()}});

    culm::FrameStack data = load_stack(input);
    culm::VariantResult res = culm::run_variant(pipe, data, psf, ckpts);
    write_variant_outputs(g.out_dir, res, pipe.variant);
    std::cout << pipe.variant << ": " << res.localisations.size() << " localisations, "
              << res.tracks.size() << " tracks, " << res.timing.total_seconds << " s ("
              << res.timing.total_fps << " fps)\n";
    if (pipe.target_mb_count > 0 && !res.count_matched)
        std::cout << "warning: target count " << pipe.target_mb_count
                  << " not reachable, closest " << res.localisations.size() << '\n';
    return 0;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const GlobalOpts& g, const json& cfg) {
    check_keys(cfg, "config",
               {"localisations", "gt_tracks", "radius", "thresholds", "sr_density", "gt_density",
                "ssim_window"});
    json metrics = json::object();
    json resolved = json::object();
    fs::create_directories(g.out_dir);

    const std::string loc_path = str_field(cfg, "config", "localisations", "");
    if (!loc_path.empty()) {
        const std::string gt_path = require_str(cfg, "config", "gt_tracks");
        if (!cfg.contains("radius"))
            throw culm::ArgumentError("config: missing required field config.radius");
        const double radius = num_field(cfg, "config", "radius", 0.0);

        std::vector<double> thresholds;
        if (cfg.contains("thresholds") && cfg.at("thresholds").is_array()) {
            for (const auto& v : cfg.at("thresholds")) thresholds.push_back(v.get<double>());
        } else {
            const json& t = section(cfg, "thresholds");
            check_keys(t, "thresholds", {"lo", "hi", "count"});
            const double lo = num_field(t, "thresholds", "lo", 0.05);
            const double hi = num_field(t, "thresholds", "hi", 0.95);
            const std::int64_t n = int_field(t, "thresholds", "count", 20);
            if (n < 2) throw culm::ArgumentError("config: thresholds.count must be at least 2");
            for (std::int64_t i = 0; i < n; ++i)
                thresholds.push_back(lo + (hi - lo) * static_cast<double>(i) /
                                              static_cast<double>(n - 1));
        }
        resolved["localisations"] = loc_path;
        resolved["gt_tracks"] = gt_path;
        resolved["radius"] = radius;
        resolved["thresholds"] = thresholds;

        auto detections = culm::read_localisations_csv(loc_path);
        auto gt_tracks = culm::read_tracks_csv(gt_path);
        std::vector<culm::Localisation> gt_points;
        std::int64_t n_frames = 0;
        for (const auto& tr : gt_tracks)
            for (const auto& p : tr.points) {
                gt_points.push_back(p);
                n_frames = std::max(n_frames, p.frame + 1);
            }
        for (const auto& l : detections) n_frames = std::max(n_frames, l.frame + 1);
        auto gt_by_frame = split_by_frame(gt_points, n_frames);
        auto det_by_frame = split_by_frame(detections, n_frames);

        auto curve = culm::pr_sweep(
            [&](double thr) {
                std::vector<std::vector<culm::Localisation>> kept(det_by_frame.size());
                for (std::size_t f = 0; f < det_by_frame.size(); ++f)
                    for (const auto& l : det_by_frame[f])
                        if (l.score >= thr) kept[f].push_back(l);
                return kept;
            },
            gt_by_frame, thresholds, radius);

        std::ofstream csv(g.out_dir / "pr_curve.csv");
        if (!csv) throw culm::IoError("cannot write pr_curve.csv");
        csv << "threshold,recall,precision,f1,mean_error,tp,fp,fn\n";
        auto cell = [](const std::optional<double>& v) {
            return v ? culm::detail::fmt_g9(*v) : std::string();
        };
        const culm::PrPoint* best = nullptr;
        for (const auto& pt : curve) {
            csv << culm::detail::fmt_g9(pt.threshold) << ',' << cell(pt.recall) << ','
                << cell(pt.precision) << ',' << cell(pt.f1) << ',' << cell(pt.mean_error) << ','
                << pt.tp << ',' << pt.fp << ',' << pt.fn << '\n';
            if (pt.f1 && (!best || !best->f1 || *pt.f1 > *best->f1)) best = &pt;
        }
        csv.flush();

        culm::PlotSeries pr;
        pr.label = "precision vs recall";
        culm::PlotSeries err;
        err.label = "error vs recall";
        for (const auto& pt : curve) {
            if (pt.recall && pt.precision) {
                pr.x.push_back(*pt.recall);
                pr.y.push_back(*pt.precision);
            }
            if (pt.recall && pt.mean_error) {
                err.x.push_back(*pt.recall);
                err.y.push_back(*pt.mean_error);
            }
        }
        if (!pr.x.empty()) culm::write_png(g.out_dir / "pr_curve.png", culm::render_plot({pr}));
        if (!err.x.empty())
            culm::write_png(g.out_dir / "error_recall.png", culm::render_plot({err}));

        json det = {{"radius", radius},
                    {"n_thresholds", thresholds.size()},
                    {"n_detections", detections.size()},
                    {"n_gt_points", gt_points.size()},
                    {"curve_csv", "pr_curve.csv"}};
        if (best) {
            det["best_f1"] = {{"threshold", best->threshold},
                              {"recall", best->recall ? json(*best->recall) : json()},
                              {"precision", best->precision ? json(*best->precision) : json()},
                              {"f1", *best->f1},
                              {"mean_error",
                               best->mean_error ? json(*best->mean_error) : json()},
                              {"tp", best->tp},
                              {"fp", best->fp},
                              {"fn", best->fn}};
        }
        metrics["detection"] = det;
    }

    const std::string sr_path = str_field(cfg, "config", "sr_density", "");
    if (!sr_path.empty()) {
        const std::string gt_map_path = require_str(cfg, "config", "gt_density");
        const bool windowed = bool_field(cfg, "config", "ssim_window", false);
        resolved["sr_density"] = sr_path;
        resolved["gt_density"] = gt_map_path;
        culm::Tensor<float> sr = culm::load_array(sr_path);
        culm::Tensor<float> gt = culm::load_array(gt_map_path);
        json maps = {{"rmse", culm::rmse(sr, gt)}, {"ssim", culm::ssim_global(sr, gt)}};
        if (windowed) maps["ssim_windowed"] = culm::ssim_windowed(sr, gt);
        metrics["maps"] = maps;
    }
    if (metrics.empty())
        throw culm::ArgumentError(
            "config: nothing to evaluate (need localisations and/or sr_density)");

    write_run_record(g, "evaluate", resolved);
    write_json_file(g.out_dir / "metrics.json", metrics);
    std::cout << "wrote metrics.json\n";
    return 0;
}

// ------------------------------------------------------------------- bench

int cmd_bench(const GlobalOpts& g, const json& cfg) {
    check_keys(cfg, "config",
               {"input", "psf", "checkpoints", "pipeline", "variants", "target_mb_count"});
    const std::string input = require_str(cfg, "config", "input");
    culm::GaussianPSF psf = parse_psf(section(cfg, "psf"));
    culm::PipelineCheckpoints ckpts = parse_checkpoints(section(cfg, "checkpoints"));
    culm::PipelineConfig base = parse_pipeline(section(cfg, "pipeline"));
    base.target_mb_count = int_field(cfg, "config", "target_mb_count", base.target_mb_count);

    std::vector<std::string> variants = {"baseline1",      "baseline2",    "cycleulm-ncc",
                                         "cycleulm-decon", "cycleulm-loc", "cycleulm-e2e"};
    if (cfg.contains("variants")) {
        if (!cfg.at("variants").is_array())
            throw culm::ArgumentError("config: variants must be an array");
        variants.clear();
        for (const auto& v : cfg.at("variants")) variants.push_back(v.get<std::string>());
    }

    write_run_record(g, "bench",
                     {{"input", input},
                      {"variants", variants},
                      {"pipeline", base.to_json()},
                      {"target_mb_count", base.target_mb_count}});

    culm::FrameStack data = load_stack(input);
    static const char* kStageCols[] = {"denoise", "translate", "localise",
                                       "track",   "mbt",       "accumulate"};

    struct Row {
        std::string variant;
        std::string status = "ok";
        std::map<std::string, double> stage_s;
        double total_s = 0.0;
        double fps = 0.0;
    };
    std::vector<Row> rows;
    json report = json::array();
    for (const std::string& variant : variants) {
        culm::PipelineConfig pipe = base;
        pipe.variant = variant;
        pipe.validate();
        Row row;
        row.variant = variant;
        try {
            culm::VariantResult res = culm::run_variant(pipe, data, psf, ckpts);
            for (std::size_t i = 0; i < res.timing.stages.size(); ++i)
                row.stage_s[res.timing.stages[i].name] = res.timing.stages[i].seconds;
            row.total_s = res.timing.total_seconds;
            row.fps = res.timing.total_fps;
            fs::path vdir = g.out_dir / variant;
            fs::create_directories(vdir);
            write_variant_outputs(vdir, res, variant);
            report.push_back(timing_to_json(res, variant));
        } catch (const culm::IoError& e) {
            row.status = "unavailable";
            report.push_back({{"variant", variant}, {"status", "unavailable"},
                              {"error", e.what()}});
        }
        rows.push_back(std::move(row));
    }

    std::ofstream csv(g.out_dir / "bench.csv");
    if (!csv) throw culm::IoError("cannot write bench.csv");
    csv << "variant,status";
    for (const char* s : kStageCols) csv << ',' << s << "_s";
    csv << ",total_s,fps\n";
    for (const Row& row : rows) {
        csv << row.variant << ',' << row.status;
        for (const char* s : kStageCols) {
            csv << ',';
            auto it = row.stage_s.find(s);
            if (it != row.stage_s.end()) csv << culm::detail::fmt_g9(it->second);
        }
        if (row.status == "ok")
            csv << ',' << culm::detail::fmt_g9(row.total_s) << ','
                << culm::detail::fmt_g9(row.fps) << '\n';
        else
            csv << ",,\n";
    }
    csv.flush();
    write_json_file(g.out_dir / "bench.json", report);

    std::ostringstream table;
    table << std::left << std::setw(16) << "variant";
    for (const char* s : kStageCols) table << std::right << std::setw(12) << s;
    table << std::setw(12) << "total s" << std::setw(10) << "fps" << '\n';
    for (const Row& row : rows) {
        table << std::left << std::setw(16) << row.variant << std::right;
        for (const char* s : kStageCols) {
            auto it = row.stage_s.find(s);
            if (it != row.stage_s.end())
                table << std::setw(12) << std::fixed << std::setprecision(3) << it->second;
            else
                table << std::setw(12) << '-';
        }
        if (row.status == "ok")
            table << std::setw(12) << std::fixed << std::setprecision(3) << row.total_s
                  << std::setw(10) << std::setprecision(2) << row.fps << '\n';
        else
            table << std::setw(12) << "n/a" << std::setw(10) << '-' << '\n';
    }
    std::cout << table.str();
    std::ofstream txt(g.out_dir / "bench.txt");
    txt << table.str();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cycle-consistent microbubble localisation toolkit"};
    app.require_subcommand(1);

    GlobalOpts g;
    std::string variant_flag;
    std::int64_t target_flag = 0, steps_flag = 0;

    auto add_common = [&](CLI::App* sub, bool out_required = true) {
        sub->add_option("--config", g.config_path, "JSON config file");
        auto* out = sub->add_option("--out", g.out_dir, "output directory");
        if (out_required) out->required();
        sub->add_option("--seed", g.seed, "override the config seed");
        sub->add_flag("--deterministic", g.deterministic,
                      "record that the run must be bit-reproducible");
        return sub;
    };

    auto* sim = add_common(app.add_subcommand("simulate", "render a synthetic dataset"));
    auto* tdt = add_common(app.add_subcommand("train-mbdt", "train the domain translator"));
    auto* tbl = add_common(app.add_subcommand("train-mbl", "train the localisation network"));
    auto* tbt = add_common(app.add_subcommand("train-mbt", "train the trajectory network"));
    for (CLI::App* t : {tdt, tbl, tbt})
        t->add_option("--steps", steps_flag, "override the training step count");
    auto* tra = add_common(app.add_subcommand("translate", "CEUS frames to MB-only frames"));
    auto* loc = add_common(app.add_subcommand("localise", "detect microbubbles per frame"));
    auto* trk = add_common(app.add_subcommand("track", "link localisations into tracks"));
    auto* rec = add_common(app.add_subcommand("reconstruct", "run one pipeline variant"));
    rec->add_option("--variant", variant_flag, "pipeline variant to run");
    rec->add_option("--target-mb-count", target_flag, "match this total localisation count");
    auto* eva = add_common(app.add_subcommand("evaluate", "score outputs against ground truth"));
    auto* ben = add_common(app.add_subcommand("bench", "time every variant on one dataset"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return kExitConfig;
    }

    try {
        const json cfg = load_config(g.config_path);
        if (sim->parsed()) return cmd_simulate(g, cfg);
        if (tdt->parsed()) return cmd_train_mbdt(g, cfg, steps_flag);
        if (tbl->parsed())
            return run_supervised_train(g, cfg, steps_flag, "train-mbl", 0.5,
                                        [](const culm::SynthSampler& s, const culm::TrainConfig& c,
                                           const fs::path& out, const fs::path& resume) {
                                            return culm::train_mbl(s, c, out, resume);
                                        });
        if (tbt->parsed())
            return run_supervised_train(g, cfg, steps_flag, "train-mbt", 0.5,
                                        [](const culm::SynthSampler& s, const culm::TrainConfig& c,
                                           const fs::path& out, const fs::path& resume) {
                                            return culm::train_mbt(s, c, out, resume);
                                        });
        if (tra->parsed()) return cmd_translate(g, cfg);
        if (loc->parsed()) return cmd_localise(g, cfg);
        if (trk->parsed()) return cmd_track(g, cfg);
        if (rec->parsed()) return cmd_reconstruct(g, cfg, variant_flag, target_flag);
        if (eva->parsed()) return cmd_evaluate(g, cfg);
        if (ben->parsed()) return cmd_bench(g, cfg);
    } catch (const culm::ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const culm::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const culm::IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const culm::NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
