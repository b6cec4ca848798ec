#pragma once

// Training for the three networks. Everything is driven by split RNG streams
// (stream 0 initialises weights, stream 1 feeds data) so a fixed seed gives a
// bit-identical run, and a resumed run continues the data stream exactly
// where the checkpoint left it.
//
// Input frames are expected normalised to [0, 1]; the generators end in a
// sigmoid and produce the same range.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "culm/checkpoint.hpp"
#include "culm/core.hpp"
#include "culm/errors.hpp"
#include "culm/losses.hpp"
#include "culm/nets.hpp"
#include "culm/nn.hpp"
#include "culm/psf.hpp"
#include "culm/random.hpp"
#include "culm/synth.hpp"
#include "culm/tensor.hpp"

namespace culm {

// Synthetic domain-B source: patch geometry and the (already shrunk) PSF to
// render with.
struct SynthSampler {
    SynthConfig config;
    GaussianPSF psf;
};

struct TrainConfig {
    std::int64_t patch_size = 40;
    std::int64_t batch_size = 4;
    std::int64_t steps = 100;
    std::int64_t base_width = 16;
    double lr_generator = 2e-4;
    double lr_discriminator = 2e-4;
    double lr_supervised = 1e-3;
    double beta1_adversarial = 0.5;
    double beta1_supervised = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 0; // 0: final checkpoint only
    std::int64_t log_every = 1;
    std::int64_t roi_retry_limit = 10000;
    LossWeights weights;
    bool fake_history = false; // discriminators see a pool of past fakes
    std::int64_t history_size = 50;
    Tensor<float> roi_mask; // optional [H, W] acceptance mask, empty = off

    void validate() const {
        if (patch_size < 8 || patch_size % 4 != 0)
            throw ArgumentError("TrainConfig: patch_size must be a multiple of 4, >= 8");
        if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be positive");
        if (steps < 1) throw ArgumentError("TrainConfig: steps must be positive");
        if (base_width < 4) throw ArgumentError("TrainConfig: base_width too small");
        if (lr_generator <= 0.0 || lr_discriminator <= 0.0 || lr_supervised <= 0.0)
            throw ArgumentError("TrainConfig: learning rates must be positive");
        if (checkpoint_every < 0) throw ArgumentError("TrainConfig: bad checkpoint interval");
        if (log_every < 1) throw ArgumentError("TrainConfig: bad log interval");
        if (roi_retry_limit < 1) throw ArgumentError("TrainConfig: bad retry limit");
        if (history_size < 1) throw ArgumentError("TrainConfig: bad history size");
        if (roi_mask.numel() > 0 && roi_mask.ndim() != 2)
            throw ArgumentError("TrainConfig: roi mask must be 2-d");
        weights.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["patch_size"] = patch_size;
        j["batch_size"] = batch_size;
        j["steps"] = steps;
        j["base_width"] = base_width;
        j["lr_generator"] = lr_generator;
        j["lr_discriminator"] = lr_discriminator;
        j["lr_supervised"] = lr_supervised;
        j["beta1_adversarial"] = beta1_adversarial;
        j["beta1_supervised"] = beta1_supervised;
        j["beta2"] = beta2;
        j["seed"] = seed;
        j["checkpoint_every"] = checkpoint_every;
        j["log_every"] = log_every;
        j["roi_retry_limit"] = roi_retry_limit;
        j["weights"] = {{"lambda1", weights.lambda1},
                        {"lambda2", weights.lambda2},
                        {"lambda3", weights.lambda3}};
        j["fake_history"] = fake_history;
        j["history_size"] = history_size;
        if (roi_mask.numel() > 0) {
            j["roi_mask"] = {
                {"shape", roi_mask.shape()},
                {"digest",
                 fnv1a(std::string_view(reinterpret_cast<const char*>(roi_mask.data()),
                                        static_cast<std::size_t>(roi_mask.numel()) *
                                            sizeof(float)))}};
        }
        return j;
    }
};

// Uniform (frame, row, col) crops of {t-1, t, t+1} windows. With an ROI mask,
// a candidate is kept only when at least half its pixels are inside.
inline std::vector<Tensor<float>> sample_ceus_patches(const FrameStack& frames,
                                                      const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::int64_t nt = frames.n_frames(), h = frames.height(), w = frames.width();
    const std::int64_t ps = cfg.patch_size;
    if (nt < 3) throw ArgumentError("sample_ceus_patches: need at least 3 frames");
    if (h < ps || w < ps) throw ArgumentError("sample_ceus_patches: frames smaller than patch");
    const bool masked = cfg.roi_mask.numel() > 0;
    if (masked && (cfg.roi_mask.dim(0) != h || cfg.roi_mask.dim(1) != w))
        throw ArgumentError("sample_ceus_patches: roi mask shape mismatch");
    std::vector<Tensor<float>> out;
    out.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (std::int64_t n = 0; n < cfg.batch_size; ++n) {
        for (std::int64_t tries = 0;; ++tries) {
            if (tries >= cfg.roi_retry_limit)
                throw NumericError("sample_ceus_patches: roi mask rejected every candidate");
            const std::int64_t t = rng.uniform_int(1, nt - 2);
            const std::int64_t r0 = rng.uniform_int(0, h - ps);
            const std::int64_t c0 = rng.uniform_int(0, w - ps);
            if (masked) {
                std::int64_t inside = 0;
                for (std::int64_t r = 0; r < ps; ++r)
                    for (std::int64_t c = 0; c < ps; ++c)
                        if (cfg.roi_mask(r0 + r, c0 + c) != 0.0f) ++inside;
                if (2 * inside < ps * ps) continue;
            }
            Tensor<float> patch({3, ps, ps});
            for (std::int64_t k = 0; k < 3; ++k)
                for (std::int64_t r = 0; r < ps; ++r)
                    for (std::int64_t c = 0; c < ps; ++c)
                        patch(k, r, c) = frames.data(t - 1 + k, r0 + r, c0 + c);
            out.push_back(std::move(patch));
            break;
        }
    }
    return out;
}

inline Tensor<float> render_domain_b_patch(const SynthSampler& sampler, Rng& rng) {
    SynthConfig c = sampler.config;
    c.n_frames = 1;
    SequenceData seq = render_sequence(c, sampler.psf, rng);
    Tensor<float> out({1, c.patch_h, c.patch_w});
    std::copy(seq.frames.data.data(), seq.frames.data.data() + c.patch_h * c.patch_w,
              out.data());
    return out;
}

struct MblSample {
    Tensor<float> frame;       // [1, h, w]
    Tensor<float> gt_presence; // [h, w]
    std::vector<GmmTarget> targets;
};

inline MblSample render_mbl_sample(const SynthSampler& sampler, Rng& rng) {
    SynthConfig c = sampler.config;
    c.n_frames = 1;
    SequenceData seq = render_sequence(c, sampler.psf, rng);
    MblSample out;
    out.frame = Tensor<float>({1, c.patch_h, c.patch_w});
    std::copy(seq.frames.data.data(), seq.frames.data.data() + c.patch_h * c.patch_w,
              out.frame.data());
    out.gt_presence = seq.maps[0].presence;
    for (const Track& t : seq.tracks)
        if (t.points.front().frame == 0)
            out.targets.push_back(
                {t.points.front().intensity, t.points.front().x, t.points.front().y});
    return out;
}

struct MbtSample {
    std::vector<Tensor<float>> frames; // kMbtWindow of [1, h, w]
    Tensor<float> gt_trajectory, gt_velocity_x, gt_velocity_y; // [4h, 4w]
};

// Window targets: the union of the per-step trajectory maps; where steps
// overlap, the most recent one supplies the velocity.
inline MbtSample render_mbt_sample(const SynthSampler& sampler, Rng& rng) {
    SynthConfig c = sampler.config;
    c.n_frames = kMbtWindow;
    SequenceData seq = render_sequence(c, sampler.psf, rng);
    const std::int64_t h = c.patch_h, w = c.patch_w;
    MbtSample out;
    out.frames.resize(static_cast<std::size_t>(kMbtWindow));
    for (std::int64_t t = 0; t < kMbtWindow; ++t) {
        out.frames[static_cast<std::size_t>(t)] = Tensor<float>({1, h, w});
        std::copy(seq.frames.data.data() + t * h * w, seq.frames.data.data() + (t + 1) * h * w,
                  out.frames[static_cast<std::size_t>(t)].data());
    }
    out.gt_trajectory = Tensor<float>({4 * h, 4 * w});
    out.gt_velocity_x = Tensor<float>({4 * h, 4 * w});
    out.gt_velocity_y = Tensor<float>({4 * h, 4 * w});
    for (std::int64_t k = 1; k < kMbtWindow; ++k) {
        const GroundTruthMaps& m = seq.maps[static_cast<std::size_t>(k)];
        for (std::int64_t i = 0; i < m.trajectory.numel(); ++i) {
            if (m.trajectory[i] <= 0.0f) continue;
            out.gt_trajectory[i] = 1.0f;
            out.gt_velocity_x[i] = m.velocity_x[i];
            out.gt_velocity_y[i] = m.velocity_y[i];
        }
    }
    return out;
}

struct MbdtNets {
    std::int64_t base_width;
    Generator<float> g_ab, g_ba;
    Discriminator<float> d_a, d_b;

    MbdtNets(std::int64_t bw, Rng& rng)
        : base_width(bw),
          g_ab(generator_spec(3, 1, bw), rng),
          g_ba(generator_spec(1, 3, bw), rng),
          d_a(3, bw, rng),
          d_b(1, bw, rng) {}

    std::vector<nn::ParamRef<float>> params_g() {
        auto out = g_ab.params();
        auto more = g_ba.params();
        out.insert(out.end(), more.begin(), more.end());
        return out;
    }
    std::vector<nn::ParamRef<float>> params_d() {
        auto out = d_a.params();
        auto more = d_b.params();
        out.insert(out.end(), more.begin(), more.end());
        return out;
    }
};

// One generator update worth of gradients. For each pair (a, b):
//   f1 = G_ab(a), f2 = G_ba(f1), f3 = G_ba(b), f4 = G_ab(f3)
// scored by the frozen discriminators, with cycle terms on (f2, a) and
// (f4, b) and the centre-frame similarity on f1. Backward pops the shared
// generators' caches newest-first; the discriminators only relay gradients
// (accum = false leaves their parameter gradients untouched).
inline GenLossParts mbdt_generator_phase(MbdtNets& nets, const std::vector<Tensor<float>>& batch_a,
                                         const std::vector<Tensor<float>>& batch_b,
                                         const LossWeights& w,
                                         std::vector<Tensor<float>>* fakes_a = nullptr,
                                         std::vector<Tensor<float>>* fakes_b = nullptr) {
    if (batch_a.empty() || batch_a.size() != batch_b.size())
        throw ArgumentError("mbdt_generator_phase: batches must be non-empty, equal length");
    w.validate();
    nets.g_ab.zero_grad();
    nets.g_ba.zero_grad();
    if (fakes_a) fakes_a->clear();
    if (fakes_b) fakes_b->clear();
    const float inv_b = 1.0f / static_cast<float>(batch_a.size());
    GenLossParts avg;
    for (std::size_t i = 0; i < batch_a.size(); ++i) {
        const Tensor<float>& a = batch_a[i];
        const Tensor<float>& b = batch_b[i];
        Tensor<float> f1 = nets.g_ab.forward(a, true);
        Tensor<float> f2 = nets.g_ba.forward(f1, true);
        Tensor<float> f3 = nets.g_ba.forward(b, true);
        Tensor<float> f4 = nets.g_ab.forward(f3, true);
        Tensor<float> s1 = nets.d_b.forward(f1, true);
        Tensor<float> s2 = nets.d_a.forward(f3, true);

        Tensor<float> ds1, ds2, df2, df4, dsim;
        GenLossParts parts;
        parts.adv_ab = lsgan_gen_loss(s1, &ds1);
        parts.adv_ba = lsgan_gen_loss(s2, &ds2);
        parts.cyc1 = cycle_loss(f2, a, &df2);
        parts.cyc2 = cycle_loss(f4, b, &df4);
        parts.sim = similarity_loss(f1, a, &dsim);

        df4 *= static_cast<float>(w.lambda2) * inv_b;
        Tensor<float> df3 = nets.g_ab.backward(df4, true);
        ds2 *= inv_b;
        df3 += nets.d_a.backward(ds2, false);
        nets.g_ba.backward(df3, true);

        df2 *= static_cast<float>(w.lambda1) * inv_b;
        Tensor<float> df1 = nets.g_ba.backward(df2, true);
        ds1 *= inv_b;
        df1 += nets.d_b.backward(ds1, false);
        dsim *= static_cast<float>(w.lambda3) * inv_b;
        df1 += dsim;
        nets.g_ab.backward(df1, true);

        avg.adv_ab += parts.adv_ab;
        avg.adv_ba += parts.adv_ba;
        avg.cyc1 += parts.cyc1;
        avg.cyc2 += parts.cyc2;
        avg.sim += parts.sim;
        if (fakes_b) fakes_b->push_back(std::move(f1));
        if (fakes_a) fakes_a->push_back(std::move(f3));
    }
    const double ib = 1.0 / static_cast<double>(batch_a.size());
    avg.adv_ab *= ib;
    avg.adv_ba *= ib;
    avg.cyc1 *= ib;
    avg.cyc2 *= ib;
    avg.sim *= ib;
    return avg;
}

struct DiscLosses {
    double d_a = 0.0;
    double d_b = 0.0;
};

// One discriminator update worth of gradients: real patches against detached
// fakes from the generator phase (or the history pool).
inline DiscLosses mbdt_discriminator_phase(MbdtNets& nets,
                                           const std::vector<Tensor<float>>& batch_a,
                                           const std::vector<Tensor<float>>& batch_b,
                                           const std::vector<Tensor<float>>& fakes_a,
                                           const std::vector<Tensor<float>>& fakes_b) {
    if (batch_a.empty() || batch_a.size() != batch_b.size() ||
        batch_a.size() != fakes_a.size() || batch_a.size() != fakes_b.size())
        throw ArgumentError("mbdt_discriminator_phase: batches must be non-empty, equal length");
    nets.d_a.zero_grad();
    nets.d_b.zero_grad();
    const float inv_b = 1.0f / static_cast<float>(batch_a.size());
    DiscLosses out;
    for (std::size_t i = 0; i < batch_a.size(); ++i) {
        Tensor<float> ra = nets.d_a.forward(batch_a[i], true);
        Tensor<float> fa = nets.d_a.forward(fakes_a[i], true);
        Tensor<float> dra, dfa;
        out.d_a += lsgan_disc_loss(ra, fa, &dra, &dfa);
        dfa *= inv_b;
        dra *= inv_b;
        nets.d_a.backward(dfa, true);
        nets.d_a.backward(dra, true);

        Tensor<float> rb = nets.d_b.forward(batch_b[i], true);
        Tensor<float> fb = nets.d_b.forward(fakes_b[i], true);
        Tensor<float> drb, dfb;
        out.d_b += lsgan_disc_loss(rb, fb, &drb, &dfb);
        dfb *= inv_b;
        drb *= inv_b;
        nets.d_b.backward(dfb, true);
        nets.d_b.backward(drb, true);
    }
    out.d_a /= static_cast<double>(batch_a.size());
    out.d_b /= static_cast<double>(batch_a.size());
    return out;
}

namespace train_detail {

// Classic image pool: below capacity the fake goes in and is also used; at
// capacity a coin decides between the fresh fake and swapping it against a
// stored one.
inline Tensor<float> pool_swap(std::vector<Tensor<float>>& pool, Tensor<float> fake,
                               std::int64_t capacity, Rng& rng) {
    if (static_cast<std::int64_t>(pool.size()) < capacity) {
        pool.push_back(fake);
        return fake;
    }
    if (rng.uniform() < 0.5) return fake;
    const std::int64_t k = rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1);
    Tensor<float> out = std::move(pool[static_cast<std::size_t>(k)]);
    pool[static_cast<std::size_t>(k)] = std::move(fake);
    return out;
}

inline void save_pool(const std::filesystem::path& dir, const std::string& stem,
                      const std::vector<Tensor<float>>& pool) {
    for (std::size_t i = 0; i < pool.size(); ++i)
        save_array((dir / (stem + "_" + std::to_string(i) + ".culm")).string(), pool[i]);
}

inline std::vector<Tensor<float>> load_pool(const std::filesystem::path& dir,
                                            const std::string& stem, std::int64_t n) {
    std::vector<Tensor<float>> pool;
    pool.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        pool.push_back(load_array((dir / (stem + "_" + std::to_string(i) + ".culm")).string()));
    return pool;
}

inline std::ofstream open_csv(const std::filesystem::path& path, bool append,
                              const char* header) {
    std::ofstream csv(path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + path.string());
    if (!append) csv << header << "\n";
    return csv;
}

inline nlohmann::json base_state(const char* kind, std::int64_t step, const TrainConfig& cfg,
                                 const Rng& data_rng) {
    nlohmann::json st;
    st["format"] = "culm-train-state";
    st["version"] = 1;
    st["kind"] = kind;
    st["step"] = step;
    st["seed"] = cfg.seed;
    st["config_hash"] = config_hash(cfg.to_json());
    st["data_rng"] = data_rng.state();
    return st;
}

inline nlohmann::json check_resume(const std::filesystem::path& dir, const char* kind,
                                   const TrainConfig& cfg) {
    nlohmann::json st = ckpt::read_json(dir / "state.json");
    if (st.value("format", "") != "culm-train-state" || st.value("kind", "") != kind)
        throw FormatError("not a " + std::string(kind) + " checkpoint: " + dir.string(), 0);
    if (st.value("config_hash", "") != config_hash(cfg.to_json()))
        throw ArgumentError("resume config does not match the checkpoint");
    return st;
}

} // namespace train_detail

struct MbdtLossRow {
    std::int64_t step = 0;
    GenLossParts parts;
    double total_g = 0.0;
    double loss_d_a = 0.0;
    double loss_d_b = 0.0;
};

struct MbdtResult {
    std::filesystem::path checkpoint_dir; // final, or last good one on abort
    std::int64_t steps_done = 0;
    bool aborted = false;
    std::vector<MbdtLossRow> curve;
};

inline void save_mbdt_checkpoint(const std::filesystem::path& dir, MbdtNets& nets,
                                 nn::Adam<float>& opt_g, nn::Adam<float>& opt_d,
                                 nlohmann::json state,
                                 const std::vector<Tensor<float>>& pool_a = {},
                                 const std::vector<Tensor<float>>& pool_b = {}) {
    std::filesystem::create_directories(dir);
    save_generator(dir / "g_ab", nets.g_ab);
    save_generator(dir / "g_ba", nets.g_ba);
    save_discriminator(dir / "d_a", nets.d_a, 3, nets.base_width);
    save_discriminator(dir / "d_b", nets.d_b, 1, nets.base_width);
    ckpt::save_adam(dir / "opt_g", opt_g);
    ckpt::save_adam(dir / "opt_d", opt_d);
    if (!pool_a.empty() || !pool_b.empty()) {
        std::filesystem::create_directories(dir / "pool");
        train_detail::save_pool(dir / "pool", "a", pool_a);
        train_detail::save_pool(dir / "pool", "b", pool_b);
        state["pool_a"] = pool_a.size();
        state["pool_b"] = pool_b.size();
    }
    ckpt::write_json(dir / "state.json", state);
}

inline MbdtResult train_mbdt(const FrameStack& domain_a, const SynthSampler& domain_b,
                             const TrainConfig& cfg, const std::filesystem::path& run_dir,
                             const std::filesystem::path& resume_from = {}) {
    cfg.validate();
    if (domain_b.config.patch_h != cfg.patch_size || domain_b.config.patch_w != cfg.patch_size)
        throw ArgumentError("train_mbdt: synth patch geometry must match patch_size");
    std::filesystem::create_directories(run_dir);

    Rng init_rng = Rng::stream(cfg.seed, 0);
    MbdtNets nets(cfg.base_width, init_rng);
    nn::Adam<float> opt_g(cfg.lr_generator, cfg.beta1_adversarial, cfg.beta2);
    nn::Adam<float> opt_d(cfg.lr_discriminator, cfg.beta1_adversarial, cfg.beta2);
    Rng data_rng = Rng::stream(cfg.seed, 1);
    std::vector<Tensor<float>> pool_a, pool_b;

    std::int64_t start_step = 0;
    if (!resume_from.empty()) {
        nlohmann::json st = train_detail::check_resume(resume_from, "mbdt", cfg);
        ckpt::load_net(resume_from / "g_ab", nets.g_ab.params());
        ckpt::load_net(resume_from / "g_ba", nets.g_ba.params());
        ckpt::load_net(resume_from / "d_a", nets.d_a.params());
        ckpt::load_net(resume_from / "d_b", nets.d_b.params());
        ckpt::load_adam(resume_from / "opt_g", opt_g);
        ckpt::load_adam(resume_from / "opt_d", opt_d);
        data_rng.set_state(st.at("data_rng").get<std::string>());
        start_step = st.at("step").get<std::int64_t>();
        if (st.contains("pool_a"))
            pool_a = train_detail::load_pool(resume_from / "pool", "a",
                                             st.at("pool_a").get<std::int64_t>());
        if (st.contains("pool_b"))
            pool_b = train_detail::load_pool(resume_from / "pool", "b",
                                             st.at("pool_b").get<std::int64_t>());
    }

    std::ofstream csv = train_detail::open_csv(run_dir / "losses.csv", start_step > 0,
                                               "step,total_g,adv_ab,adv_ba,cyc1,cyc2,sim,d_a,d_b");
    auto gparams = nets.params_g();
    auto dparams = nets.params_d();

    MbdtResult res;
    std::filesystem::path last_ckpt = resume_from;
    for (std::int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        std::vector<Tensor<float>> batch_a = sample_ceus_patches(domain_a, cfg, data_rng);
        std::vector<Tensor<float>> batch_b;
        batch_b.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (std::int64_t i = 0; i < cfg.batch_size; ++i)
            batch_b.push_back(render_domain_b_patch(domain_b, data_rng));

        std::vector<Tensor<float>> fakes_a, fakes_b;
        GenLossParts parts =
            mbdt_generator_phase(nets, batch_a, batch_b, cfg.weights, &fakes_a, &fakes_b);
        const double total_g = total_gen_loss(parts, cfg.weights);
        opt_g.step(gparams);

        if (cfg.fake_history) {
            for (auto& f : fakes_a)
                f = train_detail::pool_swap(pool_a, std::move(f), cfg.history_size, data_rng);
            for (auto& f : fakes_b)
                f = train_detail::pool_swap(pool_b, std::move(f), cfg.history_size, data_rng);
        }
        DiscLosses dl = mbdt_discriminator_phase(nets, batch_a, batch_b, fakes_a, fakes_b);
        opt_d.step(dparams);

        res.curve.push_back({step, parts, total_g, dl.d_a, dl.d_b});
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            csv << step << ',' << detail::fmt_g9(total_g) << ',' << detail::fmt_g9(parts.adv_ab)
                << ',' << detail::fmt_g9(parts.adv_ba) << ',' << detail::fmt_g9(parts.cyc1)
                << ',' << detail::fmt_g9(parts.cyc2) << ',' << detail::fmt_g9(parts.sim) << ','
                << detail::fmt_g9(dl.d_a) << ',' << detail::fmt_g9(dl.d_b) << '\n';
            csv.flush();
        }
        if (!(std::isfinite(total_g) && std::isfinite(dl.d_a) && std::isfinite(dl.d_b))) {
            res.aborted = true;
            res.steps_done = step;
            res.checkpoint_dir = last_ckpt;
            return res;
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps) {
            last_ckpt = run_dir / ("step_" + std::to_string(step));
            save_mbdt_checkpoint(last_ckpt, nets, opt_g, opt_d,
                                 train_detail::base_state("mbdt", step, cfg, data_rng), pool_a,
                                 pool_b);
        }
    }
    last_ckpt = run_dir / ("step_" + std::to_string(cfg.steps));
    save_mbdt_checkpoint(last_ckpt, nets, opt_g, opt_d,
                         train_detail::base_state("mbdt", cfg.steps, cfg, data_rng), pool_a,
                         pool_b);
    res.steps_done = cfg.steps;
    res.checkpoint_dir = last_ckpt;
    return res;
}

struct MblLossRow {
    std::int64_t step = 0;
    double total = 0.0;
    double presence = 0.0;
    double localisation = 0.0;
};

struct MblResult {
    std::filesystem::path checkpoint_dir;
    std::int64_t steps_done = 0;
    bool aborted = false;
    std::vector<MblLossRow> curve;
};

inline void save_mbl_checkpoint(const std::filesystem::path& dir, MblNet<float>& net,
                                nn::Adam<float>& opt, const nlohmann::json& state) {
    std::filesystem::create_directories(dir);
    save_mbl(dir / "mbl", net);
    ckpt::save_adam(dir / "opt", opt);
    ckpt::write_json(dir / "state.json", state);
}

inline MblResult train_mbl(const SynthSampler& sampler, const TrainConfig& cfg,
                           const std::filesystem::path& run_dir,
                           const std::filesystem::path& resume_from = {}) {
    cfg.validate();
    if (sampler.config.patch_h != cfg.patch_size || sampler.config.patch_w != cfg.patch_size)
        throw ArgumentError("train_mbl: synth patch geometry must match patch_size");
    std::filesystem::create_directories(run_dir);

    Rng init_rng = Rng::stream(cfg.seed, 0);
    MblNet<float> net(mbl_spec(cfg.base_width), init_rng);
    nn::Adam<float> opt(cfg.lr_supervised, cfg.beta1_supervised, cfg.beta2);
    Rng data_rng = Rng::stream(cfg.seed, 1);

    std::int64_t start_step = 0;
    if (!resume_from.empty()) {
        nlohmann::json st = train_detail::check_resume(resume_from, "mbl", cfg);
        ckpt::load_net(resume_from / "mbl", net.params());
        ckpt::load_adam(resume_from / "opt", opt);
        data_rng.set_state(st.at("data_rng").get<std::string>());
        start_step = st.at("step").get<std::int64_t>();
    }

    std::ofstream csv = train_detail::open_csv(run_dir / "losses.csv", start_step > 0,
                                               "step,total,presence,localisation");
    auto params = net.params();
    const float inv_b = 1.0f / static_cast<float>(cfg.batch_size);

    MblResult res;
    std::filesystem::path last_ckpt = resume_from;
    for (std::int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        net.zero_grad();
        double lp = 0.0, ll = 0.0;
        for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
            MblSample s = render_mbl_sample(sampler, data_rng);
            MblMaps<float> pred = net.forward(s.frame, true);
            Tensor<float> gp;
            lp += presence_bce(pred.p, s.gt_presence, &gp);
            GmmGrads<float> gg;
            bool skipped = false;
            ll += gmm_localisation_nll(pred.p, pred.intensity, pred.offset_x, pred.offset_y,
                                       pred.sigma_i, pred.sigma_x, pred.sigma_y, s.targets, &gg,
                                       &skipped);
            MblMaps<float> d;
            d.p = std::move(gg.p);
            d.p += gp;
            d.intensity = std::move(gg.intensity);
            d.offset_x = std::move(gg.offset_x);
            d.offset_y = std::move(gg.offset_y);
            d.sigma_i = std::move(gg.sigma_i);
            d.sigma_x = std::move(gg.sigma_x);
            d.sigma_y = std::move(gg.sigma_y);
            d.p *= inv_b;
            d.intensity *= inv_b;
            d.offset_x *= inv_b;
            d.offset_y *= inv_b;
            d.sigma_i *= inv_b;
            d.sigma_x *= inv_b;
            d.sigma_y *= inv_b;
            net.backward(d, true);
        }
        opt.step(params);
        lp /= static_cast<double>(cfg.batch_size);
        ll /= static_cast<double>(cfg.batch_size);
        const double total = lp + ll;

        res.curve.push_back({step, total, lp, ll});
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            csv << step << ',' << detail::fmt_g9(total) << ',' << detail::fmt_g9(lp) << ','
                << detail::fmt_g9(ll) << '\n';
            csv.flush();
        }
        if (!std::isfinite(total)) {
            res.aborted = true;
            res.steps_done = step;
            res.checkpoint_dir = last_ckpt;
            return res;
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps) {
            last_ckpt = run_dir / ("step_" + std::to_string(step));
            save_mbl_checkpoint(last_ckpt, net, opt,
                                train_detail::base_state("mbl", step, cfg, data_rng));
        }
    }
    last_ckpt = run_dir / ("step_" + std::to_string(cfg.steps));
    save_mbl_checkpoint(last_ckpt, net, opt,
                        train_detail::base_state("mbl", cfg.steps, cfg, data_rng));
    res.steps_done = cfg.steps;
    res.checkpoint_dir = last_ckpt;
    return res;
}

struct MbtLossRow {
    std::int64_t step = 0;
    double total = 0.0;
    double trajectory = 0.0;
    double velocity = 0.0;
};

struct MbtResult {
    std::filesystem::path checkpoint_dir;
    std::int64_t steps_done = 0;
    bool aborted = false;
    std::vector<MbtLossRow> curve;
};

inline void save_mbt_checkpoint(const std::filesystem::path& dir, MbtNet<float>& net,
                                nn::Adam<float>& opt, const nlohmann::json& state) {
    std::filesystem::create_directories(dir);
    save_mbt(dir / "mbt", net);
    ckpt::save_adam(dir / "opt", opt);
    ckpt::write_json(dir / "state.json", state);
}

inline MbtResult train_mbt(const SynthSampler& sampler, const TrainConfig& cfg,
                           const std::filesystem::path& run_dir,
                           const std::filesystem::path& resume_from = {}) {
    cfg.validate();
    if (sampler.config.patch_h != cfg.patch_size || sampler.config.patch_w != cfg.patch_size)
        throw ArgumentError("train_mbt: synth patch geometry must match patch_size");
    std::filesystem::create_directories(run_dir);

    Rng init_rng = Rng::stream(cfg.seed, 0);
    MbtNet<float> net(mbt_spec(cfg.base_width), init_rng);
    nn::Adam<float> opt(cfg.lr_supervised, cfg.beta1_supervised, cfg.beta2);
    Rng data_rng = Rng::stream(cfg.seed, 1);

    std::int64_t start_step = 0;
    if (!resume_from.empty()) {
        nlohmann::json st = train_detail::check_resume(resume_from, "mbt", cfg);
        ckpt::load_net(resume_from / "mbt", net.params());
        ckpt::load_adam(resume_from / "opt", opt);
        data_rng.set_state(st.at("data_rng").get<std::string>());
        start_step = st.at("step").get<std::int64_t>();
    }

    std::ofstream csv = train_detail::open_csv(run_dir / "losses.csv", start_step > 0,
                                               "step,total,trajectory,velocity");
    auto params = net.params();
    const float inv_b = 1.0f / static_cast<float>(cfg.batch_size);

    MbtResult res;
    std::filesystem::path last_ckpt = resume_from;
    for (std::int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        net.zero_grad();
        double lt = 0.0, lv = 0.0;
        for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
            MbtSample s = render_mbt_sample(sampler, data_rng);
            MbtMaps<float> pred = net.forward(s.frames, true);
            Tensor<float> gt;
            lt += trajectory_bce(pred.trajectory, s.gt_trajectory, &gt);
            Tensor<float> gvx, gvy, gw;
            bool skipped = false;
            lv += weighted_velocity_mse(pred.velocity_x, pred.velocity_y, s.gt_velocity_x,
                                        s.gt_velocity_y, pred.trajectory, &gvx, &gvy, &gw,
                                        &skipped);
            MbtMaps<float> d;
            d.trajectory = std::move(gt);
            d.trajectory += gw;
            d.velocity_x = std::move(gvx);
            d.velocity_y = std::move(gvy);
            d.trajectory *= inv_b;
            d.velocity_x *= inv_b;
            d.velocity_y *= inv_b;
            net.backward(d, true);
        }
        opt.step(params);
        lt /= static_cast<double>(cfg.batch_size);
        lv /= static_cast<double>(cfg.batch_size);
        const double total = lt + lv;

        res.curve.push_back({step, total, lt, lv});
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            csv << step << ',' << detail::fmt_g9(total) << ',' << detail::fmt_g9(lt) << ','
                << detail::fmt_g9(lv) << '\n';
            csv.flush();
        }
        if (!std::isfinite(total)) {
            res.aborted = true;
            res.steps_done = step;
            res.checkpoint_dir = last_ckpt;
            return res;
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps) {
            last_ckpt = run_dir / ("step_" + std::to_string(step));
            save_mbt_checkpoint(last_ckpt, net, opt,
                                train_detail::base_state("mbt", step, cfg, data_rng));
        }
    }
    last_ckpt = run_dir / ("step_" + std::to_string(cfg.steps));
    save_mbt_checkpoint(last_ckpt, net, opt,
                        train_detail::base_state("mbt", cfg.steps, cfg, data_rng));
    res.steps_done = cfg.steps;
    res.checkpoint_dir = last_ckpt;
    return res;
}

} // namespace culm
