#pragma once

// Checkpoint plumbing: each network saves into its own directory as one CULM
// array per parameter plus a manifest.json describing the architecture, so a
// file can be rebuilt without the code that trained it. Optimiser state gets
// the same treatment; training state (step, RNG strings) lives in a small
// state.json at the run level, written by the training loops.

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "culm/errors.hpp"
#include "culm/io.hpp"
#include "culm/nets.hpp"
#include "culm/nn.hpp"

namespace culm {

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string config_hash(const nlohmann::json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

namespace ckpt {

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError("invalid json in " + path.string(), 0);
    return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

inline void save_net(const std::filesystem::path& dir,
                     const std::vector<nn::ParamRef<float>>& params,
                     const nlohmann::json& arch) {
    std::filesystem::create_directories(dir);
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& p : params) {
        save_array((dir / (p.name + ".culm")).string(), *p.value);
        plist.push_back({{"name", p.name}, {"shape", p.value->shape()}});
    }
    nlohmann::json manifest;
    manifest["format"] = "culm-checkpoint";
    manifest["version"] = 1;
    manifest["arch"] = arch;
    manifest["params"] = plist;
    write_json(dir / "manifest.json", manifest);
}

inline nlohmann::json load_net(const std::filesystem::path& dir,
                               const std::vector<nn::ParamRef<float>>& params) {
    nlohmann::json manifest = read_json(dir / "manifest.json");
    if (manifest.value("format", "") != "culm-checkpoint")
        throw FormatError("not a checkpoint: " + dir.string(), 0);
    const auto& plist = manifest.at("params");
    if (plist.size() != params.size())
        throw FormatError("checkpoint/architecture mismatch: parameter count differs", 0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (plist[i].at("name").get<std::string>() != params[i].name)
            throw FormatError("checkpoint/architecture mismatch at " + params[i].name, 0);
        Tensor<float> arr = load_array((dir / (params[i].name + ".culm")).string());
        if (arr.shape() != params[i].value->shape())
            throw FormatError("checkpoint/architecture mismatch: shape of " + params[i].name, 0);
        *params[i].value = std::move(arr);
    }
    return manifest.at("arch");
}

inline void save_adam(const std::filesystem::path& dir, nn::Adam<float>& opt) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["step_count"] = opt.step_count();
    meta["slots"] = opt.moment1().size();
    for (std::size_t i = 0; i < opt.moment1().size(); ++i) {
        save_array((dir / ("m" + std::to_string(i) + ".culm")).string(), opt.moment1()[i]);
        save_array((dir / ("v" + std::to_string(i) + ".culm")).string(), opt.moment2()[i]);
    }
    write_json(dir / "optimizer.json", meta);
}

inline void load_adam(const std::filesystem::path& dir, nn::Adam<float>& opt) {
    nlohmann::json meta = read_json(dir / "optimizer.json");
    opt.set_step_count(meta.at("step_count").get<std::int64_t>());
    const std::size_t slots = meta.at("slots").get<std::size_t>();
    opt.moment1().clear();
    opt.moment2().clear();
    for (std::size_t i = 0; i < slots; ++i) {
        opt.moment1().push_back(load_array((dir / ("m" + std::to_string(i) + ".culm")).string()));
        opt.moment2().push_back(load_array((dir / ("v" + std::to_string(i) + ".culm")).string()));
    }
}

inline nlohmann::json unet_arch(const UNetSpec& s, const std::string& kind) {
    return {{"kind", kind},
            {"in_channels", s.in_channels},
            {"out_channels", s.out_channels},
            {"base_width", s.base_width},
            {"depth", s.depth},
            {"pool_window", s.pool_window},
            {"pool_stride", s.pool_stride},
            {"residual_bottleneck", s.residual_bottleneck},
            {"use_norm", s.use_norm}};
}

inline UNetSpec unet_from_arch(const nlohmann::json& a) {
    UNetSpec s;
    s.in_channels = a.at("in_channels").get<std::int64_t>();
    s.out_channels = a.at("out_channels").get<std::int64_t>();
    s.base_width = a.at("base_width").get<std::int64_t>();
    s.depth = a.at("depth").get<std::int64_t>();
    s.pool_window = a.at("pool_window").get<std::int64_t>();
    s.pool_stride = a.at("pool_stride").get<std::int64_t>();
    s.residual_bottleneck = a.at("residual_bottleneck").get<bool>();
    s.use_norm = a.at("use_norm").get<bool>();
    s.validate();
    return s;
}

} // namespace ckpt

inline void save_generator(const std::filesystem::path& dir, Generator<float>& net) {
    ckpt::save_net(dir, net.params(), ckpt::unet_arch(net.spec(), "generator"));
}

inline Generator<float> load_generator(const std::filesystem::path& dir) {
    nlohmann::json manifest = ckpt::read_json(dir / "manifest.json");
    const auto& arch = manifest.at("arch");
    if (arch.at("kind").get<std::string>() != "generator")
        throw FormatError("checkpoint at " + dir.string() + " is not a generator", 0);
    Rng rng(0);
    Generator<float> net(ckpt::unet_from_arch(arch), rng);
    ckpt::load_net(dir, net.params());
    return net;
}

inline void save_discriminator(const std::filesystem::path& dir, Discriminator<float>& net,
                               std::int64_t in_channels, std::int64_t base_width) {
    ckpt::save_net(dir, net.params(),
                   {{"kind", "discriminator"},
                    {"in_channels", in_channels},
                    {"base_width", base_width}});
}

inline Discriminator<float> load_discriminator(const std::filesystem::path& dir) {
    nlohmann::json manifest = ckpt::read_json(dir / "manifest.json");
    const auto& arch = manifest.at("arch");
    if (arch.at("kind").get<std::string>() != "discriminator")
        throw FormatError("checkpoint at " + dir.string() + " is not a discriminator", 0);
    Rng rng(0);
    Discriminator<float> net(arch.at("in_channels").get<std::int64_t>(),
                             arch.at("base_width").get<std::int64_t>(), rng);
    ckpt::load_net(dir, net.params());
    return net;
}

inline void save_mbl(const std::filesystem::path& dir, MblNet<float>& net) {
    ckpt::save_net(dir, net.params(), ckpt::unet_arch(net.spec(), "mbl"));
}

inline MblNet<float> load_mbl(const std::filesystem::path& dir) {
    nlohmann::json manifest = ckpt::read_json(dir / "manifest.json");
    const auto& arch = manifest.at("arch");
    if (arch.at("kind").get<std::string>() != "mbl")
        throw FormatError("checkpoint at " + dir.string() + " is not a localisation net", 0);
    Rng rng(0);
    MblNet<float> net(ckpt::unet_from_arch(arch), rng);
    ckpt::load_net(dir, net.params());
    return net;
}

inline void save_mbt(const std::filesystem::path& dir, MbtNet<float>& net) {
    ckpt::save_net(dir, net.params(), ckpt::unet_arch(net.spec(), "mbt"));
}

inline MbtNet<float> load_mbt(const std::filesystem::path& dir) {
    nlohmann::json manifest = ckpt::read_json(dir / "manifest.json");
    const auto& arch = manifest.at("arch");
    if (arch.at("kind").get<std::string>() != "mbt")
        throw FormatError("checkpoint at " + dir.string() + " is not a trajectory net", 0);
    Rng rng(0);
    MbtNet<float> net(ckpt::unet_from_arch(arch), rng);
    ckpt::load_net(dir, net.params());
    return net;
}

} // namespace culm
