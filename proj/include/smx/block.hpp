#pragma once

#include <array>
#include <functional>

#include "smx/attention.hpp"

namespace smx {

enum class AsesMode { On, Off, SpatialOnly, ChannelOnly };

enum class BlockAblation {
    None,
    NoShuffle,    // skip the T/R permutation around the second attention
    SingleView,   // run only the first view, no aggregator
    NoMixing,     // drop slice mixing entirely
    DenseMlp,     // replace the axial pair with one dense (S*C)->(S*C) map
    MixerFirst,   // run mixing before the shuffle pipeline
    NoApeS,       // no slice position embedding
    NoApeV,       // no view position embeddings
};

template <typename T>
struct BnParams {
    TensorPtr<T> gamma, beta, run_mean, run_var;
};

template <typename T>
BnParams<T> make_bn(ParamRegistry<T>& reg, const std::string& prefix, int64_t c) {
    BnParams<T> p;
    p.gamma = reg.param(prefix + ".gamma", {c});
    p.beta = reg.param(prefix + ".beta", {c});
    p.run_mean = reg.buffer(prefix + ".run_mean", {c});
    p.run_var = reg.buffer(prefix + ".run_var", {c});
    std::fill(p.gamma->data.begin(), p.gamma->data.end(), T(1));
    std::fill(p.run_var->data.begin(), p.run_var->data.end(), T(1));
    return p;
}

template <typename T>
TensorPtr<T> bn_forward(Graph<T>& g, const TensorPtr<T>& x, const BnParams<T>& p, bool training) {
    return batch_norm(g, x, p.gamma, p.beta, p.run_mean, p.run_var, training);
}

template <typename T>
struct MlpParams {
    TensorPtr<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
MlpParams<T> make_mlp(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, int ratio,
                      std::mt19937_64& rng) {
    MlpParams<T> p;
    p.fc1_w = reg.param(prefix + ".fc1_w", {c, ratio * c});
    p.fc1_b = reg.param(prefix + ".fc1_b", {ratio * c});
    p.fc2_w = reg.param(prefix + ".fc2_w", {ratio * c, c});
    p.fc2_b = reg.param(prefix + ".fc2_b", {c});
    fill_trunc_normal<T>(rng, p.fc1_w->data, T(0.02));
    fill_trunc_normal<T>(rng, p.fc2_w->data, T(0.02));
    return p;
}

template <typename T>
TensorPtr<T> mlp_forward(Graph<T>& g, const TensorPtr<T>& x, const MlpParams<T>& p) {
    return pointwise(g, gelu(g, pointwise(g, x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
}

// ---------------------------------------------------------------------------
// ASES gates

template <typename T>
struct AsesParams {
    bool spatial = false, channel = false;
    TensorPtr<T> sp_w, sp_b;                  // 3x3 conv, 2 channels in, 1 out
    TensorPtr<T> ch_w1, ch_b1, ch_w2, ch_b2;  // C -> C/r -> C bottleneck
};

template <typename T>
AsesParams<T> make_ases(ParamRegistry<T>& reg, const std::string& prefix, int64_t c,
                        AsesMode mode, std::mt19937_64& rng, int reduction = 4) {
    AsesParams<T> p;
    p.spatial = (mode == AsesMode::On || mode == AsesMode::SpatialOnly);
    p.channel = (mode == AsesMode::On || mode == AsesMode::ChannelOnly);
    if (p.spatial) {
        p.sp_w = reg.param(prefix + ".spatial_w", {3 * 3 * 2, 1});
        p.sp_b = reg.param(prefix + ".spatial_b", {1});
        fill_trunc_normal<T>(rng, p.sp_w->data, T(0.02));
    }
    if (p.channel) {
        const int64_t hidden = std::max<int64_t>(1, c / reduction);
        p.ch_w1 = reg.param(prefix + ".channel_w1", {c, hidden});
        p.ch_b1 = reg.param(prefix + ".channel_b1", {hidden});
        p.ch_w2 = reg.param(prefix + ".channel_w2", {hidden, c});
        p.ch_b2 = reg.param(prefix + ".channel_b2", {c});
        fill_trunc_normal<T>(rng, p.ch_w1->data, T(0.02));
        fill_trunc_normal<T>(rng, p.ch_w2->data, T(0.02));
    }
    return p;
}

/// Per-position gate from pooled channel statistics: (N,H,W,C) -> (N,H,W,1).
template <typename T>
TensorPtr<T> ases_spatial_gate(Graph<T>& g, const TensorPtr<T>& z, const AsesParams<T>& p) {
    auto pooled = concat(g, std::vector<TensorPtr<T>>{channel_mean(g, z), channel_max(g, z)}, -1);
    return sigmoid(g, conv2d(g, pooled, p.sp_w, p.sp_b, 3, 3, 1, 1));
}

/// One gate per channel for a whole slice stack, pooled over every slice and
/// position: (S,H,W,C) -> (1,1,1,C).
template <typename T>
TensorPtr<T> ases_channel_gate(Graph<T>& g, const TensorPtr<T>& y, const AsesParams<T>& p) {
    const int64_t c = y->dim(y->rank() - 1);
    auto flat = reshape(g, y, {1, y->numel() / c, c});
    auto bottleneck = [&](const TensorPtr<T>& t) {
        return pointwise(g, pointwise(g, t, p.ch_w1, p.ch_b1), p.ch_w2, p.ch_b2);
    };
    auto pre = add(g, bottleneck(global_avg_pool(g, flat)), bottleneck(global_max_pool(g, flat)));
    return reshape(g, sigmoid(g, pre), {1, 1, 1, c});
}

// ---------------------------------------------------------------------------
// Slice mixing and view aggregation

template <typename T>
struct MixParams {
    bool dense = false;
    TensorPtr<T> ape_s;            // (S, C); null when disabled
    TensorPtr<T> st_w, st_b;       // along the slice axis, (S,S)
    TensorPtr<T> sc_w, sc_b;       // along channels, (C,C)
    TensorPtr<T> dense_w, dense_b; // (S*C, S*C), dense variant only
    TensorPtr<T> cp_w, cp_b;       // channel projector back to C
};

template <typename T>
MixParams<T> make_mix(ParamRegistry<T>& reg, const std::string& prefix, int64_t s, int64_t c,
                      bool dense, bool with_ape, std::mt19937_64& rng) {
    MixParams<T> p;
    p.dense = dense;
    if (with_ape) {
        p.ape_s = reg.param(prefix + ".ape_s", {s, c});
        fill_trunc_normal<T>(rng, p.ape_s->data, T(0.02));
    }
    if (dense) {
        p.dense_w = reg.param(prefix + ".dense_w", {s * c, s * c});
        p.dense_b = reg.param(prefix + ".dense_b", {s * c});
        fill_trunc_normal<T>(rng, p.dense_w->data, T(0.02));
        p.cp_w = reg.param(prefix + ".cp_w", {2 * c, c});
    } else {
        p.st_w = reg.param(prefix + ".st_w", {s, s});
        p.st_b = reg.param(prefix + ".st_b", {s});
        p.sc_w = reg.param(prefix + ".sc_w", {c, c});
        p.sc_b = reg.param(prefix + ".sc_b", {c});
        fill_trunc_normal<T>(rng, p.st_w->data, T(0.02));
        fill_trunc_normal<T>(rng, p.sc_w->data, T(0.02));
        p.cp_w = reg.param(prefix + ".cp_w", {3 * c, c});
    }
    p.cp_b = reg.param(prefix + ".cp_b", {c});
    fill_trunc_normal<T>(rng, p.cp_w->data, T(0.02));
    return p;
}

/// (B,S,H,W,C) -> same. Slice-aware context: position-embedded input feeds a
/// slice-axis map and a channel map (or one dense map), concatenated with the
/// untouched residual and projected back down.
template <typename T>
TensorPtr<T> slice_mixing_forward(Graph<T>& g, const TensorPtr<T>& z, const MixParams<T>& p) {
    const int64_t b = z->dim(0), s = z->dim(1), h = z->dim(2), w = z->dim(3), c = z->dim(4);
    if (p.ape_s && p.ape_s->dim(0) != s)
        throw ShapeError("slice_mixing_forward: stack has " + std::to_string(s) +
                         " slices, APE rows " + std::to_string(p.ape_s->dim(0)));
    auto a = p.ape_s ? broadcast_add(g, z, reshape(g, p.ape_s, {s, 1, 1, c})) : z;
    TensorPtr<T> cat;
    if (p.dense) {
        auto grouped = reshape(g, permute(g, a, {0, 2, 3, 1, 4}), {b * h * w, s * c});
        auto mixed = broadcast_add(g, matmul(g, grouped, p.dense_w), p.dense_b);
        auto back = permute(g, reshape(g, mixed, {b, h, w, s, c}), {0, 3, 1, 2, 4});
        cat = concat(g, std::vector<TensorPtr<T>>{back, z}, -1);
    } else {
        auto along_s = reshape(g, permute(g, a, {0, 2, 3, 4, 1}), {b * h * w * c, s});
        auto st = broadcast_add(g, matmul(g, along_s, p.st_w), p.st_b);
        auto st_back = permute(g, reshape(g, st, {b, h, w, c, s}), {0, 4, 1, 2, 3});
        auto sc = pointwise(g, a, p.sc_w, p.sc_b);
        cat = concat(g, std::vector<TensorPtr<T>>{st_back, sc, z}, -1);
    }
    return pointwise(g, cat, p.cp_w, p.cp_b);
}

template <typename T>
struct AggParams {
    std::array<TensorPtr<T>, 3> ape_v{};  // (C,) each; null when disabled
    TensorPtr<T> ln_g, ln_b;              // over the 3C concatenation
    TensorPtr<T> va_w, va_b;              // 3C -> C
};

template <typename T>
AggParams<T> make_agg(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, bool with_ape,
                      std::mt19937_64& rng) {
    AggParams<T> p;
    if (with_ape)
        for (int v = 0; v < 3; ++v) {
            p.ape_v[static_cast<size_t>(v)] = reg.param(prefix + ".ape_v" + std::to_string(v), {c});
            fill_trunc_normal<T>(rng, p.ape_v[static_cast<size_t>(v)]->data, T(0.02));
        }
    p.ln_g = reg.param(prefix + ".ln_g", {3 * c});
    p.ln_b = reg.param(prefix + ".ln_b", {3 * c});
    std::fill(p.ln_g->data.begin(), p.ln_g->data.end(), T(1));
    p.va_w = reg.param(prefix + ".va_w", {3 * c, c});
    p.va_b = reg.param(prefix + ".va_b", {c});
    fill_trunc_normal<T>(rng, p.va_w->data, T(0.02));
    return p;
}

template <typename T>
TensorPtr<T> view_aggregate(Graph<T>& g, std::array<TensorPtr<T>, 3> views, const AggParams<T>& p) {
    for (int v = 0; v < 3; ++v) {
        if (views[static_cast<size_t>(v)]->shape != views[0]->shape)
            throw ShapeError("view_aggregate: view shapes differ");
        if (p.ape_v[static_cast<size_t>(v)])
            views[static_cast<size_t>(v)] =
                broadcast_add(g, views[static_cast<size_t>(v)], p.ape_v[static_cast<size_t>(v)]);
    }
    auto cat = concat(g, std::vector<TensorPtr<T>>{views[0], views[1], views[2]}, -1);
    return pointwise(g, layer_norm(g, cat, p.ln_g, p.ln_b), p.va_w, p.va_b);
}

// ---------------------------------------------------------------------------
// View rearrangement. Volumes are (B,H,W,D,C); each view is a stack of 2D
// slices (B*S, h, w, C) cut along one axis:
//   view 0: S=D slices of (H,W), view 1: S=W slices of (H,D), view 2: S=H slices of (W,D).

template <typename T>
TensorPtr<T> rearrange_view(Graph<T>& g, const TensorPtr<T>& vol, int view) {
    const int64_t b = vol->dim(0), h = vol->dim(1), w = vol->dim(2), d = vol->dim(3), c = vol->dim(4);
    switch (view) {
        case 0: return reshape(g, permute(g, vol, {0, 3, 1, 2, 4}), {b * d, h, w, c});
        case 1: return reshape(g, permute(g, vol, {0, 2, 1, 3, 4}), {b * w, h, d, c});
        case 2: return reshape(g, vol, {b * h, w, d, c});
        default: throw ShapeError("rearrange_view: view out of range");
    }
}

template <typename T>
TensorPtr<T> restore_view(Graph<T>& g, const TensorPtr<T>& stack, int view, int64_t b, int64_t h,
                          int64_t w, int64_t d) {
    const int64_t c = stack->dim(3);
    switch (view) {
        case 0: return permute(g, reshape(g, stack, {b, d, h, w, c}), {0, 2, 3, 1, 4});
        case 1: return permute(g, reshape(g, stack, {b, w, h, d, c}), {0, 2, 1, 3, 4});
        case 2: return reshape(g, stack, {b, h, w, d, c});
        default: throw ShapeError("restore_view: view out of range");
    }
}

// ---------------------------------------------------------------------------
// The block

template <typename T>
struct BlockParams {
    int64_t channels = 0;
    int window = 0;  // already clamped to the stage side
    BlockAblation ablate = BlockAblation::None;
    AttentionParams<T> attn1, attn2;
    TensorPtr<T> dw1_w, dw1_b, dw2_w, dw2_b;
    MlpParams<T> mlp1, mlp2;
    BnParams<T> bn1, bn2, bn3, bn4;
    AsesParams<T> ases;
    bool has_mix = true;
    MixParams<T> mix;
    bool has_agg = true;
    AggParams<T> agg;
};

template <typename T>
BlockParams<T> make_block_params(ParamRegistry<T>& reg, const std::string& prefix, int64_t side,
                                 int64_t c, int heads, int window, int ratio, AsesMode ases,
                                 BlockAblation ablate, std::mt19937_64& rng) {
    const WindowGrid grid = make_grid(side, side, window);
    BlockParams<T> p;
    p.channels = c;
    p.window = grid.m;
    p.ablate = ablate;
    p.attn1 = make_attention_params(reg, prefix + ".attn1", c, heads, grid.m, rng);
    p.dw1_w = reg.param(prefix + ".dw1_w", {25, c});
    p.dw1_b = reg.param(prefix + ".dw1_b", {c});
    fill_fan_in<T>(rng, p.dw1_w->data, 25);
    p.mlp1 = make_mlp(reg, prefix + ".mlp1", c, ratio, rng);
    p.attn2 = make_attention_params(reg, prefix + ".attn2", c, heads, grid.m, rng);
    p.dw2_w = reg.param(prefix + ".dw2_w", {25, c});
    p.dw2_b = reg.param(prefix + ".dw2_b", {c});
    fill_fan_in<T>(rng, p.dw2_w->data, 25);
    p.mlp2 = make_mlp(reg, prefix + ".mlp2", c, ratio, rng);
    p.bn1 = make_bn(reg, prefix + ".bn1", c);
    p.bn2 = make_bn(reg, prefix + ".bn2", c);
    p.bn3 = make_bn(reg, prefix + ".bn3", c);
    p.bn4 = make_bn(reg, prefix + ".bn4", c);
    p.ases = make_ases(reg, prefix + ".ases", c, ases, rng);
    p.has_mix = (ablate != BlockAblation::NoMixing);
    if (p.has_mix)
        p.mix = make_mix(reg, prefix + ".mix", side, c, ablate == BlockAblation::DenseMlp,
                         ablate != BlockAblation::NoApeS, rng);
    p.has_agg = (ablate != BlockAblation::SingleView);
    if (p.has_agg) p.agg = make_agg(reg, prefix + ".agg", c, ablate != BlockAblation::NoApeV, rng);
    return p;
}

namespace detail {

/// Channel gate over a batched stack: pools each volume's slices jointly.
template <typename T>
TensorPtr<T> gate_channels(Graph<T>& g, const TensorPtr<T>& branch, const TensorPtr<T>& norm,
                           const AsesParams<T>& p, int64_t batch) {
    const int64_t ns = norm->dim(0), h = norm->dim(1), w = norm->dim(2), c = norm->dim(3);
    auto flat = reshape(g, norm, {batch, (ns / batch) * h * w, c});
    auto bottleneck = [&](const TensorPtr<T>& t) {
        return pointwise(g, pointwise(g, t, p.ch_w1, p.ch_b1), p.ch_w2, p.ch_b2);
    };
    auto gate = sigmoid(g, add(g, bottleneck(global_avg_pool(g, flat)),
                               bottleneck(global_max_pool(g, flat))));   // (B, C)
    auto shaped = reshape(g, gate, {batch, 1, 1, 1, c});
    auto five = reshape(g, branch, {batch, ns / batch, h, w, c});
    return reshape(g, broadcast_mul(g, five, shaped), {ns, h, w, c});
}

}  // namespace detail

/// The six-stage residual pipeline over one view's slice stack:
/// BN+attention, depthwise conv, BN+MLP, BN+shuffled attention, depthwise
/// conv, BN+MLP; spatial gates scale both attention branches and channel
/// gates both MLP branches when enabled.
template <typename T>
TensorPtr<T> shuffle_block_forward(Graph<T>& g, const TensorPtr<T>& z, const BlockParams<T>& p,
                                   bool training, int64_t batch) {
    const WindowGrid grid = make_grid(z->dim(1), z->dim(2), p.window);
    const bool shuffled = (p.ablate != BlockAblation::NoShuffle);

    auto attention_site = [&](const TensorPtr<T>& input, const AttentionParams<T>& attn,
                              const BnParams<T>& bn, bool with_shuffle) {
        auto zn = bn_forward(g, input, bn, training);
        TensorPtr<T> branch;
        if (with_shuffle) {
            auto t = transpose_shuffle(g, zn, grid.m);
            branch = rotation_restore(g, w_msa(g, t, attn, grid), grid.m);
        } else {
            branch = w_msa(g, zn, attn, grid);
        }
        if (p.ases.spatial) branch = broadcast_mul(g, branch, ases_spatial_gate(g, zn, p.ases));
        return add(g, branch, input);
    };
    auto conv_site = [&](const TensorPtr<T>& input, const TensorPtr<T>& w, const TensorPtr<T>& b) {
        return add(g, depthwise2d(g, input, w, b, 5, 1, 2), input);
    };
    auto mlp_site = [&](const TensorPtr<T>& input, const MlpParams<T>& mlp, const BnParams<T>& bn) {
        auto yn = bn_forward(g, input, bn, training);
        auto branch = mlp_forward(g, yn, mlp);
        if (p.ases.channel) branch = detail::gate_channels(g, branch, yn, p.ases, batch);
        return add(g, branch, input);
    };

    auto x1 = attention_site(z, p.attn1, p.bn1, false);
    auto x2 = conv_site(x1, p.dw1_w, p.dw1_b);
    auto x3 = mlp_site(x2, p.mlp1, p.bn2);
    auto x4 = attention_site(x3, p.attn2, p.bn3, shuffled);
    auto x5 = conv_site(x4, p.dw2_w, p.dw2_b);
    return mlp_site(x5, p.mlp2, p.bn4);
}

/// Hook invoked per view on the slice stack entering the pipeline (used by
/// decoder skip fusion); capture receives each view's pipeline output (the
/// encoder feature handed to skips).
template <typename T>
using ViewHook = std::function<TensorPtr<T>(int view, const TensorPtr<T>&)>;

template <typename T>
TensorPtr<T> block_forward(Graph<T>& g, const TensorPtr<T>& vol, const BlockParams<T>& p,
                           bool training, const ViewHook<T>& hook = nullptr,
                           std::array<TensorPtr<T>, 3>* capture = nullptr) {
    if (vol->rank() != 5) throw ShapeError("block_forward: expected (B,H,W,D,C)");
    const int64_t b = vol->dim(0), h = vol->dim(1), w = vol->dim(2), d = vol->dim(3);
    const bool single = (p.ablate == BlockAblation::SingleView);
    const bool mixer_first = (p.ablate == BlockAblation::MixerFirst);
    const int nviews = single ? 1 : 3;

    std::array<TensorPtr<T>, 3> restored;
    for (int v = 0; v < nviews; ++v) {
        auto s = rearrange_view(g, vol, v);
        if (hook) s = hook(v, s);
        const int64_t slices = s->dim(0) / b;
        auto run_mixing = [&](const TensorPtr<T>& t) {
            auto five = reshape(g, t, {b, slices, t->dim(1), t->dim(2), t->dim(3)});
            auto mixed = slice_mixing_forward(g, five, p.mix);
            return reshape(g, mixed, t->shape);
        };
        if (mixer_first && p.has_mix) s = run_mixing(s);
        s = shuffle_block_forward(g, s, p, training, b);
        if (capture) (*capture)[static_cast<size_t>(v)] = s;
        if (!mixer_first && p.has_mix) s = run_mixing(s);
        restored[static_cast<size_t>(v)] = restore_view(g, s, v, b, h, w, d);
    }
    if (single) return restored[0];
    return view_aggregate(g, restored, p.agg);
}

}  // namespace smx
