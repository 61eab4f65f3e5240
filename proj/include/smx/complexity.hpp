#pragma once

#include "smx/network.hpp"

namespace smx {

/// Geometry point for the closed-form cost evaluators. h,w span one slice,
/// d counts slices, m is the attention window, alpha the MLP expansion.
struct CostModel {
    int64_t h = 1, w = 1, d = 1, c = 1;
    int64_t m = 1;
    int64_t alpha = 1;
};

inline void validate_cost_model(const CostModel& cm) {
    if (cm.h < 1 || cm.w < 1 || cm.d < 1 || cm.c < 1 || cm.m < 1 || cm.alpha < 1)
        throw ConfigError("cost model fields must be positive");
    if (cm.m > std::min(cm.h, cm.w))
        throw ConfigError("cost model window " + std::to_string(cm.m) + " exceeds slice extent");
}

enum class AttentionCost { Windowed, Global };
enum class MixingCost { Axial, Dense, SliceAttention };

/// Multiply-accumulate counted as 2 FLOPs; projections cost 4HWC^2 either
/// way, the score/value products cost 2M^2 per token windowed vs 2HW global.
inline int64_t flops_attention(const CostModel& cm, AttentionCost kind) {
    validate_cost_model(cm);
    const int64_t hw = cm.h * cm.w;
    const int64_t base = 4 * hw * cm.c * cm.c;
    switch (kind) {
        case AttentionCost::Windowed: return base + 2 * cm.m * cm.m * hw * cm.c;
        case AttentionCost::Global: return base + 2 * hw * hw * cm.c;
    }
    throw std::logic_error("flops_attention: unknown kind");
}

/// Axial pairs a slice-axis map (D+...) with a channel map (...+C); the dense
/// variant mixes the flattened slice-channel plane (DC). Both end in the
/// three-way concat projector, 2*(3C*C) multiply-accumulates per position.
inline int64_t flops_mixing(const CostModel& cm, MixingCost kind) {
    validate_cost_model(cm);
    const int64_t hwd = cm.h * cm.w * cm.d;
    const int64_t projector = 6 * hwd * cm.c * cm.c;
    switch (kind) {
        case MixingCost::Axial:
            return 2 * cm.alpha * hwd * cm.c * (cm.d + cm.c) + projector;
        case MixingCost::Dense:
            return 2 * cm.alpha * hwd * cm.c * (cm.d * cm.c) + projector;
        case MixingCost::SliceAttention:
            return 8 * hwd * cm.c * cm.c + 2 * hwd * hwd * cm.c + 2 * cm.alpha * hwd * cm.c * cm.c;
    }
    throw std::logic_error("flops_mixing: unknown kind");
}

/// One shuffle-mixer block: windowed attention plus axial mixing. The view
/// aggregator's cost is deliberately excluded as negligible.
inline int64_t flops_block(const CostModel& cm) {
    return flops_attention(cm, AttentionCost::Windowed) + flops_mixing(cm, MixingCost::Axial);
}

// ---------------------------------------------------------------------------
// Analytic parameter counting. Mirrors model construction exactly: every
// learnable scalar appears in exactly one term below.

inline int64_t linear_params(int64_t cin, int64_t cout) { return cin * cout + cout; }
inline int64_t norm_params(int64_t c) { return 2 * c; }

inline int64_t rpe_params(int window, int64_t heads) {
    const int64_t span = 2 * window - 1;
    return span * span * heads;
}

inline int64_t attention_params(int64_t c, int64_t heads, int window) {
    return linear_params(c, 3 * c) + linear_params(c, c) + rpe_params(window, heads);
}

inline int64_t gate_params(int64_t c, AsesMode mode) {
    int64_t n = 0;
    if (mode == AsesMode::On || mode == AsesMode::SpatialOnly) n += linear_params(3 * 3 * 2, 1);
    if (mode == AsesMode::On || mode == AsesMode::ChannelOnly) {
        const int64_t hidden = std::max<int64_t>(1, c / 4);
        n += linear_params(c, hidden) + linear_params(hidden, c);
    }
    return n;
}

inline int64_t mixing_params(int64_t slices, int64_t c, BlockAblation ablate) {
    if (ablate == BlockAblation::NoMixing) return 0;
    int64_t n = (ablate == BlockAblation::NoApeS) ? 0 : slices * c;  // slice embedding
    if (ablate == BlockAblation::DenseMlp)
        n += linear_params(slices * c, slices * c) + linear_params(2 * c, c);
    else
        n += linear_params(slices, slices) + linear_params(c, c) + linear_params(3 * c, c);
    return n;
}

inline int64_t aggregator_params(int64_t c, BlockAblation ablate) {
    if (ablate == BlockAblation::SingleView) return 0;
    int64_t n = (ablate == BlockAblation::NoApeV) ? 0 : 3 * c;
    return n + norm_params(3 * c) + linear_params(3 * c, c);
}

inline int64_t block_param_count(int64_t side, int64_t c, int64_t heads, int window, int ratio,
                                 AsesMode ases, BlockAblation ablate) {
    const int m_eff = static_cast<int>(std::min<int64_t>(side, window));
    int64_t n = 2 * attention_params(c, heads, m_eff);
    n += 2 * (25 * c + c);  // depthwise 5x5 pairs
    n += 2 * (linear_params(c, ratio * c) + linear_params(ratio * c, c));
    n += 4 * norm_params(c);
    n += gate_params(c, ases);
    n += mixing_params(side, c, ablate);
    n += aggregator_params(c, ablate);
    return n;
}

inline int64_t stem_param_count(int64_t cin, int64_t c1) {
    const int64_t mid = c1;
    return linear_params(27 * cin, mid) + norm_params(mid) + linear_params(27 * mid, c1) +
           norm_params(c1);
}

inline int64_t head_param_count(int64_t c1, int64_t cout) {
    const int64_t h1 = c1, h2 = c1 / 2;
    // Transposed convs carry one bias per output channel, not per sub-voxel.
    return (c1 * 8 * h1 + h1) + norm_params(h1) + (h1 * 8 * h2 + h2) + norm_params(h2) +
           linear_params(h2, cout);
}

inline int64_t skip_param_count(SkipKind kind, int64_t c, int64_t heads, int window_eff) {
    const int64_t core = linear_params(c, c) + rpe_params(window_eff, heads);
    switch (kind) {
        case SkipKind::CrossMerge: return linear_params(c, 2 * c) + linear_params(c, 3 * c) + core;
        case SkipKind::CatLinear: return linear_params(2 * c, c);
        case SkipKind::CatSkip: return linear_params(2 * c, 3 * c) + core;
        case SkipKind::CrossSkip: return linear_params(c, c) + linear_params(c, 2 * c) + core;
        case SkipKind::CatCrossSkip: return linear_params(c, c) + linear_params(2 * c, 2 * c) + core;
    }
    throw std::logic_error("skip_param_count: unknown kind");
}

/// Component-granular expected counts, in construction order; prefixes match
/// the registry's dotted paths.
struct ComponentCount {
    std::string prefix;
    int64_t count = 0;
};

inline std::vector<ComponentCount> analytic_components(const PyramidConfig& cfg) {
    validate_config(cfg);
    const auto sides = stage_sides(cfg);
    std::vector<ComponentCount> out;
    auto block_of = [&](int s) {
        const auto& st = cfg.stages[static_cast<size_t>(s)];
        return block_param_count(sides[static_cast<size_t>(s)], st.channels, st.heads, st.window,
                                 st.ratio, cfg.ases, cfg.ablate);
    };
    out.push_back({"stem.", stem_param_count(cfg.in_channels, cfg.stages[0].channels)});
    for (int s = 0; s < 4; ++s) {
        for (int64_t b = 0; b < cfg.stages[static_cast<size_t>(s)].blocks; ++b)
            out.push_back({"enc" + std::to_string(s + 1) + ".b" + std::to_string(b) + ".", block_of(s)});
        if (s < 3)
            out.push_back({"down" + std::to_string(s + 1) + ".",
                           linear_params(27 * cfg.stages[static_cast<size_t>(s)].channels,
                                         cfg.stages[static_cast<size_t>(s + 1)].channels)});
    }
    for (int s = 2; s >= 0; --s) {
        const auto& st = cfg.stages[static_cast<size_t>(s)];
        const int64_t side = sides[static_cast<size_t>(s)];
        const int64_t up_rows = cfg.stages[static_cast<size_t>(s + 1)].channels;
        out.push_back({"up" + std::to_string(s + 1) + ".",
                       side == 1 ? linear_params(up_rows, st.channels)
                                 : up_rows * 8 * st.channels + st.channels});
        const int m_eff = static_cast<int>(std::min<int64_t>(side, st.window));
        out.push_back({"dec" + std::to_string(s + 1) + ".skip.",
                       skip_param_count(cfg.skip, st.channels, st.heads, m_eff)});
        for (int64_t b = 0; b < st.blocks; ++b)
            out.push_back({"dec" + std::to_string(s + 1) + ".b" + std::to_string(b) + ".", block_of(s)});
    }
    out.push_back({"head.", head_param_count(cfg.stages[0].channels, cfg.out_channels)});
    return out;
}

inline int64_t count_params(const PyramidConfig& cfg) {
    int64_t total = 0;
    for (const auto& comp : analytic_components(cfg)) total += comp.count;
    return total;
}

/// Cross-check of the analytic count against a built model, component by
/// component. Any disagreement is listed with its parameter path prefix.
struct ParamAudit {
    bool passed = false;
    int64_t analytic = 0;
    int64_t instantiated = 0;
    std::vector<std::string> mismatches;
};

template <typename T>
ParamAudit audit_params(const Model<T>& m) {
    ParamAudit audit;
    const auto components = analytic_components(m.cfg);
    std::vector<bool> claimed(m.reg.entries.size(), false);
    for (const auto& comp : components) {
        int64_t got = 0;
        for (size_t i = 0; i < m.reg.entries.size(); ++i) {
            const auto& e = m.reg.entries[i];
            if (!e.learnable || e.name.rfind(comp.prefix, 0) != 0) continue;
            claimed[i] = true;
            got += e.tensor->numel();
        }
        audit.analytic += comp.count;
        audit.instantiated += got;
        if (got != comp.count)
            audit.mismatches.push_back(comp.prefix + " expected " + std::to_string(comp.count) +
                                       " got " + std::to_string(got));
    }
    for (size_t i = 0; i < m.reg.entries.size(); ++i)
        if (m.reg.entries[i].learnable && !claimed[i])
            audit.mismatches.push_back("unclaimed parameter " + m.reg.entries[i].name);
    audit.passed = audit.mismatches.empty() && audit.analytic == audit.instantiated &&
                   audit.instantiated == m.reg.learnable_scalars();
    return audit;
}

// ---------------------------------------------------------------------------
// Whole-config cost report

struct StageCost {
    int64_t side = 0;
    int64_t blocks = 0;  // encoder plus decoder instances at this stage
    int64_t windowed_attention = 0, global_attention = 0;  // per block
    int64_t axial_mixing = 0, dense_mixing = 0;            // per block
    int64_t block_flops = 0;                               // per block
    int64_t stage_flops = 0;                               // blocks * block_flops
    int64_t stage_params = 0;
};

struct CostReport {
    std::array<StageCost, 4> stages{};
    int64_t plumbing_params = 0;  // stem, links, skips, head: outside the block formulas
    int64_t total_flops = 0;
    int64_t total_params = 0;
};

inline CostReport build_cost_report(const PyramidConfig& cfg) {
    validate_config(cfg);
    const auto sides = stage_sides(cfg);
    const auto components = analytic_components(cfg);
    CostReport rep;
    for (int s = 0; s < 4; ++s) {
        const auto& st = cfg.stages[static_cast<size_t>(s)];
        const int64_t side = sides[static_cast<size_t>(s)];
        CostModel cm;
        cm.h = cm.w = cm.d = side;
        cm.c = st.channels;
        cm.m = std::min<int64_t>(side, st.window);
        cm.alpha = st.ratio;
        auto& row = rep.stages[static_cast<size_t>(s)];
        row.side = side;
        row.blocks = st.blocks * (s < 3 ? 2 : 1);
        row.windowed_attention = flops_attention(cm, AttentionCost::Windowed);
        row.global_attention = flops_attention(cm, AttentionCost::Global);
        row.axial_mixing = flops_mixing(cm, MixingCost::Axial);
        row.dense_mixing = flops_mixing(cm, MixingCost::Dense);
        row.block_flops = flops_block(cm);
        row.stage_flops = row.blocks * row.block_flops;
        rep.total_flops += row.stage_flops;
    }
    for (const auto& comp : components) {
        // Stage components carry encN/decN prefixes; everything else is plumbing.
        int stage = 0;
        if ((comp.prefix.rfind("enc", 0) == 0 || comp.prefix.rfind("dec", 0) == 0) &&
            comp.prefix.find(".skip.") == std::string::npos)
            stage = comp.prefix[3] - '0';
        if (stage >= 1 && stage <= 4)
            rep.stages[static_cast<size_t>(stage - 1)].stage_params += comp.count;
        else
            rep.plumbing_params += comp.count;
    }
    for (const auto& row : rep.stages) rep.total_params += row.stage_params;
    rep.total_params += rep.plumbing_params;
    return rep;
}

}  // namespace smx
