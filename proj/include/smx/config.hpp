#pragma once

#include <array>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "smx/network.hpp"

namespace smx {

/// Everything a run needs beyond the model itself. Defaults are the desk
/// preset: 32-cube volumes, four of them, full-batch Adam at 5e-4.
struct RunConfig {
    std::string task = "binary-sphere";  // or "multi-blob"
    int64_t side = 32;
    int64_t batch = 4;
    int64_t steps = 300;
    int64_t volumes = 4;
    int classes = 2;
    double lr = 5e-4;
    uint64_t seed = 1;
    int64_t log_every = 25;
    std::string precision = "f32";  // f32 | f64
    std::string out_dir = "runs/out";

    AsesMode ases = AsesMode::On;
    SkipKind skip = SkipKind::CrossMerge;
    BlockAblation ablate = BlockAblation::None;

    std::array<int64_t, 4> channels = {16, 32, 64, 128};
    std::array<int64_t, 4> heads = {2, 4, 8, 16};
    std::array<int64_t, 4> blocks = {1, 1, 2, 1};
    int window = 4;
};

inline AsesMode parse_ases(const std::string& s) {
    if (s == "on") return AsesMode::On;
    if (s == "off") return AsesMode::Off;
    if (s == "spatial-only") return AsesMode::SpatialOnly;
    if (s == "channel-only") return AsesMode::ChannelOnly;
    throw ConfigError("ases must be one of on|off|spatial-only|channel-only, got '" + s + "'");
}

inline SkipKind parse_skip(const std::string& s) {
    if (s == "crossmerge") return SkipKind::CrossMerge;
    if (s == "catlinear") return SkipKind::CatLinear;
    if (s == "catskip") return SkipKind::CatSkip;
    if (s == "crossskip") return SkipKind::CrossSkip;
    if (s == "catcrossskip") return SkipKind::CatCrossSkip;
    throw ConfigError("skip must be one of crossmerge|catlinear|catskip|crossskip|catcrossskip, got '" +
                      s + "'");
}

inline BlockAblation parse_ablation(const std::string& s) {
    if (s == "none") return BlockAblation::None;
    if (s == "no-shuffle") return BlockAblation::NoShuffle;
    if (s == "single-view") return BlockAblation::SingleView;
    if (s == "no-mixing") return BlockAblation::NoMixing;
    if (s == "dense-mlp") return BlockAblation::DenseMlp;
    if (s == "mixer-first") return BlockAblation::MixerFirst;
    if (s == "no-ape-s") return BlockAblation::NoApeS;
    if (s == "no-ape-v") return BlockAblation::NoApeV;
    throw ConfigError(
        "ablate must be one of none|no-shuffle|single-view|no-mixing|dense-mlp|mixer-first|"
        "no-ape-s|no-ape-v, got '" + s + "'");
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const int64_t x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' needs an integer, got '" + v + "'");
    }
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
    }
}

inline std::array<int64_t, 4> parse_int4(const std::string& key, const std::string& v) {
    std::array<int64_t, 4> out{};
    std::stringstream ss(v);
    std::string part;
    size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i >= 4) throw ConfigError("config key '" + key + "' needs 4 comma-separated values");
        out[i++] = parse_int(key, trim(part));
    }
    if (i != 4) throw ConfigError("config key '" + key + "' needs 4 comma-separated values");
    return out;
}

}  // namespace detail

/// key = value lines; '#' starts a comment; unknown or repeated keys are
/// rejected outright.
inline RunConfig parse_config_text(const std::string& text) {
    RunConfig rc;
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " is not key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw ConfigError("config line " + std::to_string(lineno) + " has an empty key or value");
        if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' repeated");

        if (key == "task") {
            if (val != "binary-sphere" && val != "multi-blob")
                throw ConfigError("task must be binary-sphere or multi-blob, got '" + val + "'");
            rc.task = val;
        } else if (key == "side") {
            rc.side = detail::parse_int(key, val);
        } else if (key == "batch") {
            rc.batch = detail::parse_int(key, val);
        } else if (key == "steps") {
            rc.steps = detail::parse_int(key, val);
        } else if (key == "volumes") {
            rc.volumes = detail::parse_int(key, val);
        } else if (key == "classes") {
            rc.classes = static_cast<int>(detail::parse_int(key, val));
        } else if (key == "lr") {
            rc.lr = detail::parse_real(key, val);
        } else if (key == "seed") {
            rc.seed = static_cast<uint64_t>(detail::parse_int(key, val));
        } else if (key == "log_every") {
            rc.log_every = detail::parse_int(key, val);
        } else if (key == "precision") {
            if (val != "f32" && val != "f64")
                throw ConfigError("precision must be f32 or f64, got '" + val + "'");
            rc.precision = val;
        } else if (key == "out") {
            rc.out_dir = val;
        } else if (key == "ases") {
            rc.ases = parse_ases(val);
        } else if (key == "skip") {
            rc.skip = parse_skip(val);
        } else if (key == "ablate") {
            rc.ablate = parse_ablation(val);
        } else if (key == "channels") {
            rc.channels = detail::parse_int4(key, val);
        } else if (key == "heads") {
            rc.heads = detail::parse_int4(key, val);
        } else if (key == "blocks") {
            rc.blocks = detail::parse_int4(key, val);
        } else if (key == "window") {
            rc.window = static_cast<int>(detail::parse_int(key, val));
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    if (rc.batch < 1 || rc.steps < 0 || rc.volumes < 1 || rc.classes < 2 || rc.log_every < 1 ||
        rc.lr <= 0)
        throw ConfigError("config values out of range (batch/steps/volumes/classes/log_every/lr)");
    return rc;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

/// The four-stage model implied by a run configuration; validation of the
/// side/divisor/head constraints happens in validate_config.
inline PyramidConfig pyramid_of(const RunConfig& rc) {
    PyramidConfig cfg;
    cfg.side = rc.side;
    cfg.in_channels = 1;
    cfg.out_channels = rc.task == "multi-blob" ? rc.classes : 2;
    for (int s = 0; s < 4; ++s) {
        auto& st = cfg.stages[static_cast<size_t>(s)];
        st.divisor = int64_t(4) << s;
        st.channels = rc.channels[static_cast<size_t>(s)];
        st.heads = rc.heads[static_cast<size_t>(s)];
        st.blocks = rc.blocks[static_cast<size_t>(s)];
        st.window = rc.window;
        st.ratio = 4;
    }
    cfg.ases = rc.ases;
    cfg.ablate = rc.ablate;
    cfg.skip = rc.skip;
    validate_config(cfg);
    return cfg;
}

}  // namespace smx
