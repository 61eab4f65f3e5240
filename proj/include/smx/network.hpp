#pragma once

#include <utility>

#include "smx/block.hpp"

namespace smx {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class SkipKind { CrossMerge, CatLinear, CatSkip, CrossSkip, CatCrossSkip };

struct StageSpec {
    int64_t divisor = 4;  // token extent = input side / divisor
    int64_t channels = 0;
    int64_t blocks = 1;
    int64_t heads = 1;
    int window = 4;
    int ratio = 4;
};

struct PyramidConfig {
    int64_t side = 128;
    int64_t in_channels = 1;
    int64_t out_channels = 2;
    std::array<StageSpec, 4> stages{};
    AsesMode ases = AsesMode::On;
    BlockAblation ablate = BlockAblation::None;
    SkipKind skip = SkipKind::CrossMerge;
};

inline PyramidConfig default_config() {
    PyramidConfig cfg;
    cfg.side = 128;
    cfg.stages = {StageSpec{4, 96, 1, 3}, StageSpec{8, 192, 2, 6}, StageSpec{16, 384, 8, 12},
                  StageSpec{32, 768, 1, 24}};
    return cfg;
}

inline PyramidConfig desk_config() {
    PyramidConfig cfg;
    cfg.side = 32;
    cfg.stages = {StageSpec{4, 16, 1, 2}, StageSpec{8, 32, 1, 4}, StageSpec{16, 64, 2, 8},
                  StageSpec{32, 128, 1, 16}};
    return cfg;
}

/// Token extent per stage. The stem divides the input by 4 and every stage
/// link halves, except that a stage already at extent 1 stays there (its link
/// switches to a stride-1 form so the deepest stages still exist for small
/// inputs).
inline std::array<int64_t, 4> stage_sides(const PyramidConfig& cfg) {
    if (cfg.side < 4 || cfg.side % 4 != 0)
        throw ConfigError("input side " + std::to_string(cfg.side) + " not divisible by the stem's 4");
    std::array<int64_t, 4> sides{};
    int64_t r = cfg.side / 4;
    for (int s = 0; s < 4; ++s) {
        sides[static_cast<size_t>(s)] = r;
        if (r > 1) {
            if (r % 2 != 0)
                throw ConfigError("stage " + std::to_string(s + 1) + " extent " + std::to_string(r) +
                                  " cannot be halved");
            r /= 2;
        }
    }
    return sides;
}

inline void validate_config(const PyramidConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.out_channels < 1)
        throw ConfigError("channel counts must be positive");
    const auto sides = stage_sides(cfg);
    for (int s = 0; s < 4; ++s) {
        const auto& st = cfg.stages[static_cast<size_t>(s)];
        const std::string at = "stage " + std::to_string(s + 1);
        if (st.divisor != (int64_t{4} << s))
            throw ConfigError(at + ": divisor " + std::to_string(st.divisor) +
                              " breaks the 4/8/16/32 ladder");
        if (st.channels < 1 || st.blocks < 1 || st.heads < 1 || st.window < 1 || st.ratio < 1)
            throw ConfigError(at + ": nonpositive hyperparameter");
        if (st.channels % st.heads != 0)
            throw ConfigError(at + ": channels " + std::to_string(st.channels) +
                              " not divisible by heads " + std::to_string(st.heads));
        const int64_t side = sides[static_cast<size_t>(s)];
        const int64_t m = std::min<int64_t>(side, st.window);
        if (side % m != 0)
            throw ConfigError(at + ": extent " + std::to_string(side) + " not tiled by window " +
                              std::to_string(st.window));
    }
    if (cfg.stages[0].channels % 4 != 0)
        throw ConfigError("stage 1 channels must be divisible by 4 (the head halves them twice)");
}

// ---------------------------------------------------------------------------
// Stem, stage links, head

template <typename T>
struct StemParams {
    TensorPtr<T> w1, b1, w2, b2;
    BnParams<T> bn1, bn2;
};

template <typename T>
StemParams<T> make_stem(ParamRegistry<T>& reg, int64_t cin, int64_t c1, std::mt19937_64& rng) {
    StemParams<T> p;
    const int64_t mid = c1;
    p.w1 = reg.param("stem.w1", {27 * cin, mid});
    p.b1 = reg.param("stem.b1", {mid});
    fill_fan_in<T>(rng, p.w1->data, 27 * cin);
    p.bn1 = make_bn(reg, "stem.bn1", mid);
    p.w2 = reg.param("stem.w2", {27 * mid, c1});
    p.b2 = reg.param("stem.b2", {c1});
    fill_fan_in<T>(rng, p.w2->data, 27 * mid);
    p.bn2 = make_bn(reg, "stem.bn2", c1);
    return p;
}

template <typename T>
TensorPtr<T> patch_embed(Graph<T>& g, const TensorPtr<T>& x, const StemParams<T>& p, bool training) {
    auto y = gelu(g, bn_forward(g, conv3d(g, x, p.w1, p.b1, 3, 2, 1), p.bn1, training));
    return gelu(g, bn_forward(g, conv3d(g, y, p.w2, p.b2, 3, 2, 1), p.bn2, training));
}

/// One resolution change between adjacent stages. The degenerate flag marks
/// links whose source already sits at extent 1: down keeps stride 1 and up
/// becomes a pointwise projection, so only channels change.
template <typename T>
struct LinkParams {
    bool degenerate = false;
    TensorPtr<T> w, b;
};

template <typename T>
LinkParams<T> make_down(ParamRegistry<T>& reg, const std::string& prefix, int64_t cin, int64_t cout,
                        bool degenerate, std::mt19937_64& rng) {
    LinkParams<T> p;
    p.degenerate = degenerate;
    p.w = reg.param(prefix + ".w", {27 * cin, cout});
    p.b = reg.param(prefix + ".b", {cout});
    fill_fan_in<T>(rng, p.w->data, 27 * cin);
    return p;
}

template <typename T>
LinkParams<T> make_up(ParamRegistry<T>& reg, const std::string& prefix, int64_t cin, int64_t cout,
                      bool degenerate, std::mt19937_64& rng) {
    LinkParams<T> p;
    p.degenerate = degenerate;
    p.w = reg.param(prefix + ".w", degenerate ? Shape{cin, cout} : Shape{cin, 8 * cout});
    p.b = reg.param(prefix + ".b", {cout});
    fill_fan_in<T>(rng, p.w->data, cin);  // transposed: one tap feeds each output voxel
    return p;
}

template <typename T>
TensorPtr<T> downsample(Graph<T>& g, const TensorPtr<T>& x, const LinkParams<T>& p) {
    return conv3d(g, x, p.w, p.b, 3, p.degenerate ? 1 : 2, 1);
}

template <typename T>
TensorPtr<T> upsample(Graph<T>& g, const TensorPtr<T>& x, const LinkParams<T>& p) {
    if (p.degenerate) return pointwise(g, x, p.w, p.b);
    return conv3d_transpose2x(g, x, p.w, p.b);
}

template <typename T>
struct HeadParams {
    TensorPtr<T> up1_w, up1_b, up2_w, up2_b;
    BnParams<T> bn1, bn2;
    TensorPtr<T> proj_w, proj_b;
};

template <typename T>
HeadParams<T> make_head(ParamRegistry<T>& reg, int64_t c1, int64_t cout, std::mt19937_64& rng) {
    HeadParams<T> p;
    const int64_t h1 = c1, h2 = c1 / 2;
    p.up1_w = reg.param("head.up1_w", {c1, 8 * h1});
    p.up1_b = reg.param("head.up1_b", {h1});
    fill_fan_in<T>(rng, p.up1_w->data, c1);
    p.bn1 = make_bn(reg, "head.bn1", h1);
    p.up2_w = reg.param("head.up2_w", {h1, 8 * h2});
    p.up2_b = reg.param("head.up2_b", {h2});
    fill_fan_in<T>(rng, p.up2_w->data, h1);
    p.bn2 = make_bn(reg, "head.bn2", h2);
    p.proj_w = reg.param("head.proj_w", {h2, cout});
    p.proj_b = reg.param("head.proj_b", {cout});
    fill_fan_in<T>(rng, p.proj_w->data, h2);
    return p;
}

/// Undoes the stem's /4 with two transposed convs, then projects to the
/// output classes with a 1x1x1 conv. The fixed gain on the logits buys the
/// classifier faster travel per optimizer step and steeper class boundaries;
/// the weights behind it can absorb the constant, so the function family is
/// unchanged.
template <typename T>
TensorPtr<T> project_head(Graph<T>& g, const TensorPtr<T>& x, const HeadParams<T>& p, bool training) {
    auto y = gelu(g, bn_forward(g, conv3d_transpose2x(g, x, p.up1_w, p.up1_b), p.bn1, training));
    y = gelu(g, bn_forward(g, conv3d_transpose2x(g, y, p.up2_w, p.up2_b), p.bn2, training));
    return scale(g, pointwise(g, y, p.proj_w, p.proj_b), T(4));
}

// ---------------------------------------------------------------------------
// Skip connections

template <typename T>
struct SkipParams {
    SkipKind kind = SkipKind::CrossMerge;
    TensorPtr<T> enc_w, enc_b;  // CrossMerge: encoder side C -> 2C (K,V)
    TensorPtr<T> dec_w, dec_b;  // CrossMerge: decoder side C -> 3C (Q,K,V)
    TensorPtr<T> lin_w, lin_b;  // CatLinear: 2C -> C
    TensorPtr<T> qkv_w, qkv_b;  // CatSkip: 2C -> 3C
    TensorPtr<T> q_w, q_b;      // Cross*Skip: C -> C
    TensorPtr<T> kv_w, kv_b;    // CrossSkip: C -> 2C; CatCrossSkip: 2C -> 2C
    bool has_core = false;
    AttnCore<T> core;
};

template <typename T>
SkipParams<T> make_skip(ParamRegistry<T>& reg, const std::string& prefix, SkipKind kind, int64_t c,
                        int heads, int window, std::mt19937_64& rng) {
    SkipParams<T> p;
    p.kind = kind;
    auto lin = [&](TensorPtr<T>& w, TensorPtr<T>& b, const char* name, int64_t rows, int64_t cols) {
        w = reg.param(prefix + "." + name + "_w", {rows, cols});
        b = reg.param(prefix + "." + name + "_b", {cols});
        fill_trunc_normal<T>(rng, w->data, T(0.02));
    };
    switch (kind) {
        case SkipKind::CrossMerge:
            lin(p.enc_w, p.enc_b, "enc", c, 2 * c);
            lin(p.dec_w, p.dec_b, "dec", c, 3 * c);
            break;
        case SkipKind::CatLinear:
            lin(p.lin_w, p.lin_b, "lin", 2 * c, c);
            break;
        case SkipKind::CatSkip:
            lin(p.qkv_w, p.qkv_b, "qkv", 2 * c, 3 * c);
            break;
        case SkipKind::CrossSkip:
            lin(p.q_w, p.q_b, "q", c, c);
            lin(p.kv_w, p.kv_b, "kv", c, 2 * c);
            break;
        case SkipKind::CatCrossSkip:
            lin(p.q_w, p.q_b, "q", c, c);
            lin(p.kv_w, p.kv_b, "kv", 2 * c, 2 * c);
            break;
    }
    if (kind != SkipKind::CatLinear) {
        p.has_core = true;
        p.core = make_attn_core(reg, prefix, c, heads, window, rng);
    }
    return p;
}

namespace detail {

template <typename T>
void check_skip_pair(const TensorPtr<T>& e, const TensorPtr<T>& d) {
    if (e->shape != d->shape)
        throw ShapeError("skip: encoder feature " + shape_str(e->shape) +
                         " does not match decoder feature " + shape_str(d->shape));
}

}  // namespace detail

/// Merged-attention skip: K and V from both sides are summed, the decoder
/// supplies Q, and windowed attention runs on the merged pair.
template <typename T>
TensorPtr<T> cross_merge(Graph<T>& g, const TensorPtr<T>& e, const TensorPtr<T>& d,
                         const SkipParams<T>& p) {
    detail::check_skip_pair(e, d);
    const int64_t c = d->dim(3);
    const WindowGrid grid = make_grid(d->dim(1), d->dim(2), p.core.window);
    auto ev = split(g, pointwise(g, e, p.enc_w, p.enc_b), -1, {c, c});
    auto dv = split(g, pointwise(g, d, p.dec_w, p.dec_b), -1, {c, c, c});
    auto k = add(g, ev[0], dv[1]);
    auto v = add(g, ev[1], dv[2]);
    return attention_core(g, dv[0], k, v, p.core, grid);
}

/// All skip variants accept the cached encoder view feature E and the
/// upsampled decoder view feature D (same shape) and yield the feature that
/// enters the decoder block's pipeline.
template <typename T>
TensorPtr<T> skip_apply(Graph<T>& g, const SkipParams<T>& p, const TensorPtr<T>& e,
                        const TensorPtr<T>& d) {
    detail::check_skip_pair(e, d);
    const int64_t c = d->dim(3);
    switch (p.kind) {
        case SkipKind::CrossMerge:
            return cross_merge(g, e, d, p);
        case SkipKind::CatLinear:
            return pointwise(g, concat(g, std::vector<TensorPtr<T>>{e, d}, -1), p.lin_w, p.lin_b);
        case SkipKind::CatSkip: {
            const WindowGrid grid = make_grid(d->dim(1), d->dim(2), p.core.window);
            auto cat = concat(g, std::vector<TensorPtr<T>>{e, d}, -1);
            auto qkv = split(g, pointwise(g, cat, p.qkv_w, p.qkv_b), -1, {c, c, c});
            return attention_core(g, qkv[0], qkv[1], qkv[2], p.core, grid);
        }
        case SkipKind::CrossSkip: {
            const WindowGrid grid = make_grid(d->dim(1), d->dim(2), p.core.window);
            auto q = pointwise(g, d, p.q_w, p.q_b);
            auto kv = split(g, pointwise(g, e, p.kv_w, p.kv_b), -1, {c, c});
            return attention_core(g, q, kv[0], kv[1], p.core, grid);
        }
        case SkipKind::CatCrossSkip: {
            const WindowGrid grid = make_grid(d->dim(1), d->dim(2), p.core.window);
            auto q = pointwise(g, d, p.q_w, p.q_b);
            auto cat = concat(g, std::vector<TensorPtr<T>>{e, d}, -1);
            auto kv = split(g, pointwise(g, cat, p.kv_w, p.kv_b), -1, {c, c});
            return attention_core(g, q, kv[0], kv[1], p.core, grid);
        }
    }
    throw std::logic_error("skip_apply: unknown kind");
}

// ---------------------------------------------------------------------------
// Skip cache

/// Per (encoder stage, view) feature store. Each slot must be written exactly
/// once by the encoder and consumed exactly once by the decoder; any other
/// access pattern is a wiring bug and throws.
template <typename T>
class SkipCache {
public:
    void store(int stage, int view, TensorPtr<T> t) {
        auto& s = slot(stage, view);
        if (s.written) throw std::logic_error(tag("second write", stage, view));
        s.value = std::move(t);
        s.written = true;
    }
    TensorPtr<T> take(int stage, int view) {
        auto& s = slot(stage, view);
        if (!s.written) throw std::logic_error(tag("read before write", stage, view));
        if (!s.value) throw std::logic_error(tag("second read", stage, view));
        return std::exchange(s.value, nullptr);
    }
    /// Every written slot must have been taken.
    void check_drained() const {
        for (int st = 0; st < 3; ++st)
            for (int v = 0; v < 3; ++v) {
                const auto& s = slots_[static_cast<size_t>(st * 3 + v)];
                if (s.written && s.value) throw std::logic_error(tag("never consumed", st + 1, v));
            }
    }

private:
    struct Slot {
        TensorPtr<T> value;
        bool written = false;
    };
    Slot& slot(int stage, int view) {
        if (stage < 1 || stage > 3 || view < 0 || view > 2)
            throw std::logic_error(tag("slot out of range", stage, view));
        return slots_[static_cast<size_t>((stage - 1) * 3 + view)];
    }
    static std::string tag(const char* what, int stage, int view) {
        return std::string("skip cache: ") + what + " at stage " + std::to_string(stage) + " view " +
               std::to_string(view);
    }
    std::array<Slot, 9> slots_{};
};

// ---------------------------------------------------------------------------
// The pyramid

template <typename T>
struct Model {
    PyramidConfig cfg;
    std::array<int64_t, 4> sides{};
    ParamRegistry<T> reg;
    StemParams<T> stem;
    std::array<std::vector<BlockParams<T>>, 4> enc;
    std::array<LinkParams<T>, 3> down;  // stage s+1 -> s+2
    std::array<LinkParams<T>, 3> up;    // stage s+2 -> s+1
    std::array<SkipParams<T>, 3> skip;  // decoder stages 1..3
    std::array<std::vector<BlockParams<T>>, 3> dec;
    HeadParams<T> head;
};

template <typename T>
Model<T> build_model(const PyramidConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    Model<T> m;
    m.cfg = cfg;
    m.sides = stage_sides(cfg);
    std::mt19937_64 rng(seed);

    auto stage_blocks = [&](const std::string& prefix, int s) {
        const auto& st = cfg.stages[static_cast<size_t>(s)];
        std::vector<BlockParams<T>> blocks;
        for (int64_t b = 0; b < st.blocks; ++b)
            blocks.push_back(make_block_params(m.reg, prefix + ".b" + std::to_string(b),
                                               m.sides[static_cast<size_t>(s)], st.channels,
                                               static_cast<int>(st.heads), st.window, st.ratio,
                                               cfg.ases, cfg.ablate, rng));
        return blocks;
    };

    m.stem = make_stem(m.reg, cfg.in_channels, cfg.stages[0].channels, rng);
    for (int s = 0; s < 4; ++s) {
        m.enc[static_cast<size_t>(s)] = stage_blocks("enc" + std::to_string(s + 1), s);
        if (s < 3)
            m.down[static_cast<size_t>(s)] = make_down(
                m.reg, "down" + std::to_string(s + 1), cfg.stages[static_cast<size_t>(s)].channels,
                cfg.stages[static_cast<size_t>(s + 1)].channels,
                m.sides[static_cast<size_t>(s)] == 1, rng);
    }
    for (int s = 2; s >= 0; --s) {
        const auto& st = cfg.stages[static_cast<size_t>(s)];
        const int64_t side = m.sides[static_cast<size_t>(s)];
        m.up[static_cast<size_t>(s)] = make_up(
            m.reg, "up" + std::to_string(s + 1), cfg.stages[static_cast<size_t>(s + 1)].channels,
            st.channels, side == 1, rng);
        const int m_eff = static_cast<int>(std::min<int64_t>(side, st.window));
        m.skip[static_cast<size_t>(s)] =
            make_skip(m.reg, "dec" + std::to_string(s + 1) + ".skip", cfg.skip, st.channels,
                      static_cast<int>(st.heads), m_eff, rng);
        m.dec[static_cast<size_t>(s)] = stage_blocks("dec" + std::to_string(s + 1), s);
    }
    m.head = make_head(m.reg, cfg.stages[0].channels, cfg.out_channels, rng);
    return m;
}

template <typename T>
TensorPtr<T> network_forward(Graph<T>& g, const TensorPtr<T>& x, const Model<T>& m, bool training) {
    const auto& cfg = m.cfg;
    if (x->rank() != 5 || x->dim(1) != cfg.side || x->dim(2) != cfg.side || x->dim(3) != cfg.side ||
        x->dim(4) != cfg.in_channels)
        throw ShapeError("network_forward: input " + shape_str(x->shape) + " does not match side " +
                         std::to_string(cfg.side) + ", channels " + std::to_string(cfg.in_channels));

    SkipCache<T> cache;
    auto z = patch_embed(g, x, m.stem, training);
    for (int s = 0; s < 4; ++s) {
        const auto& blocks = m.enc[static_cast<size_t>(s)];
        for (size_t b = 0; b < blocks.size(); ++b) {
            const bool tap = (s < 3) && (b + 1 == blocks.size());
            if (tap) {
                std::array<TensorPtr<T>, 3> cap{};
                z = block_forward(g, z, blocks[b], training, ViewHook<T>{}, &cap);
                const int nv = (cfg.ablate == BlockAblation::SingleView) ? 1 : 3;
                for (int v = 0; v < nv; ++v) cache.store(s + 1, v, cap[static_cast<size_t>(v)]);
            } else {
                z = block_forward(g, z, blocks[b], training);
            }
        }
        if (s < 3) z = downsample(g, z, m.down[static_cast<size_t>(s)]);
    }
    for (int s = 2; s >= 0; --s) {
        z = upsample(g, z, m.up[static_cast<size_t>(s)]);
        const auto& blocks = m.dec[static_cast<size_t>(s)];
        for (size_t b = 0; b < blocks.size(); ++b) {
            if (b == 0) {
                ViewHook<T> fuse = [&g, &m, &cache, s](int view, const TensorPtr<T>& d) {
                    return skip_apply(g, m.skip[static_cast<size_t>(s)], cache.take(s + 1, view), d);
                };
                z = block_forward(g, z, blocks[b], training, fuse);
            } else {
                z = block_forward(g, z, blocks[b], training);
            }
        }
    }
    cache.check_drained();
    return project_head(g, z, m.head, training);
}

}  // namespace smx
