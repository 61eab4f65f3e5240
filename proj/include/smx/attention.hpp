#pragma once

#include "smx/adam.hpp"
#include "smx/nn.hpp"

namespace smx {

/// Geometry of one windowed slice: M must divide both sides after clamping.
struct WindowGrid {
    int64_t hs = 0, ws = 0;
    int m = 0;
    int64_t windows() const { return (hs / m) * (ws / m); }
};

/// Clamps the window to the whole slice when the side is smaller than the
/// requested window, so shallow stages of small volumes remain valid.
inline WindowGrid make_grid(int64_t hs, int64_t ws, int m_requested) {
    WindowGrid grid;
    grid.hs = hs;
    grid.ws = ws;
    const int64_t side = std::min(hs, ws);
    grid.m = (side < m_requested) ? static_cast<int>(side) : m_requested;
    if (grid.m <= 0 || hs % grid.m != 0 || ws % grid.m != 0)
        throw ShapeError("window " + std::to_string(grid.m) + " does not tile slice " +
                         std::to_string(hs) + "x" + std::to_string(ws));
    return grid;
}

/// Row index into the (2M-1)^2 bias table for every (query, key) pair of an
/// M^2-token window, keyed by the relative offset (dr, dc) = query - key.
inline std::shared_ptr<std::vector<int64_t>> relative_position_index(int m) {
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(m) * m * m * m);
    const int span = 2 * m - 1;
    for (int qi = 0; qi < m; ++qi)
        for (int qj = 0; qj < m; ++qj)
            for (int ki = 0; ki < m; ++ki)
                for (int kj = 0; kj < m; ++kj)
                    idx->push_back(static_cast<int64_t>(qi - ki + m - 1) * span + (qj - kj + m - 1));
    return idx;
}

/// Post-projection attention machinery: output projection, bias table with its
/// index map, head count. Callers that form Q/K/V themselves use this alone.
template <typename T>
struct AttnCore {
    TensorPtr<T> proj_w, proj_b;
    TensorPtr<T> rpe;  // ((2M-1)^2, heads)
    std::shared_ptr<std::vector<int64_t>> rel_index;
    int heads = 1;
    int window = 1;
};

template <typename T>
struct AttentionParams {
    TensorPtr<T> qkv_w, qkv_b;  // fused C -> 3C
    AttnCore<T> core;
};

template <typename T>
AttnCore<T> make_attn_core(ParamRegistry<T>& reg, const std::string& prefix, int64_t c,
                           int heads, int m, std::mt19937_64& rng) {
    if (heads <= 0 || c % heads != 0)
        throw ShapeError(prefix + ": channels " + std::to_string(c) + " not divisible by heads " +
                         std::to_string(heads));
    AttnCore<T> core;
    core.proj_w = reg.param(prefix + ".proj_w", {c, c});
    core.proj_b = reg.param(prefix + ".proj_b", {c});
    const int64_t span = 2 * m - 1;
    core.rpe = reg.param(prefix + ".rpe", {span * span, heads});
    core.rel_index = relative_position_index(m);
    core.heads = heads;
    core.window = m;
    fill_trunc_normal<T>(rng, core.proj_w->data, T(0.02));
    fill_trunc_normal<T>(rng, core.rpe->data, T(0.02));
    return core;
}

template <typename T>
AttentionParams<T> make_attention_params(ParamRegistry<T>& reg, const std::string& prefix,
                                         int64_t c, int heads, int m, std::mt19937_64& rng) {
    AttentionParams<T> p;
    p.qkv_w = reg.param(prefix + ".qkv_w", {c, 3 * c});
    p.qkv_b = reg.param(prefix + ".qkv_b", {3 * c});
    fill_trunc_normal<T>(rng, p.qkv_w->data, T(0.02));
    p.core = make_attn_core(reg, prefix, c, heads, m, rng);
    return p;
}

/// (S, H_s, W_s, C) -> (S*N, M^2, C); windows in raster order, tokens in
/// raster order within each window.
template <typename T>
TensorPtr<T> window_partition(Graph<T>& g, const TensorPtr<T>& x, const WindowGrid& grid) {
    const int64_t s = x->dim(0), c = x->dim(3), m = grid.m;
    if (x->dim(1) != grid.hs || x->dim(2) != grid.ws)
        throw ShapeError("window_partition: input does not match grid");
    const int64_t gh = grid.hs / m, gw = grid.ws / m;
    auto blocks = reshape(g, x, {s, gh, m, gw, m, c});
    auto grouped = permute(g, blocks, {0, 1, 3, 2, 4, 5});
    return reshape(g, grouped, {s * gh * gw, m * m, c});
}

template <typename T>
TensorPtr<T> window_reverse(Graph<T>& g, const TensorPtr<T>& w, const WindowGrid& grid) {
    const int64_t m = grid.m;
    const int64_t gh = grid.hs / m, gw = grid.ws / m;
    const int64_t s = w->dim(0) / (gh * gw);
    if (w->rank() != 3 || w->dim(0) != s * gh * gw || w->dim(1) != m * m)
        throw ShapeError("window_reverse: input does not match grid");
    const int64_t c = w->dim(2);
    auto grouped = reshape(g, w, {s, gh, gw, m, m, c});
    auto blocks = permute(g, grouped, {0, 1, 3, 2, 4, 5});
    return reshape(g, blocks, {s, grid.hs, grid.ws, c});
}

/// Scaled dot-product attention per window and head over caller-supplied
/// Q, K, V slice stacks, with the relative-position bias added pre-softmax.
template <typename T>
TensorPtr<T> attention_core(Graph<T>& g, const TensorPtr<T>& q, const TensorPtr<T>& k,
                            const TensorPtr<T>& v, const AttnCore<T>& core, const WindowGrid& grid) {
    const int64_t c = q->dim(3);
    const int64_t heads = core.heads;
    if (c % heads != 0) throw ShapeError("attention_core: channels not divisible by heads");
    const int64_t dk = c / heads;
    const int64_t m2 = static_cast<int64_t>(grid.m) * grid.m;
    if (static_cast<int64_t>(core.rel_index->size()) != m2 * m2)
        throw ShapeError("attention_core: params built for a different window size");

    auto to_heads = [&](const TensorPtr<T>& t) {
        auto wp = window_partition(g, t, grid);                  // (B, M^2, C)
        const int64_t b = wp->dim(0);
        auto split_heads = reshape(g, wp, {b, m2, heads, dk});
        auto ordered = permute(g, split_heads, {0, 2, 1, 3});    // (B, heads, M^2, dk)
        return reshape(g, ordered, {b * heads, m2, dk});
    };
    auto qh = to_heads(q), kh = to_heads(k), vh = to_heads(v);
    const int64_t b = qh->dim(0) / heads;

    auto scores = matmul(g, qh, permute(g, kh, {0, 2, 1}));
    scores = scale(g, scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));

    auto bias_rows = gather_rows(g, core.rpe, core.rel_index);   // (M^4, heads)
    auto bias = permute(g, reshape(g, bias_rows, {m2, m2, heads}), {2, 0, 1});
    auto scores4 = reshape(g, scores, {b, heads, m2, m2});
    scores = reshape(g, broadcast_add(g, scores4, bias), {b * heads, m2, m2});

    auto attn = softmax(g, scores);
    auto mixed = matmul(g, attn, vh);                            // (B*heads, M^2, dk)
    auto merged = permute(g, reshape(g, mixed, {b, heads, m2, dk}), {0, 2, 1, 3});
    auto out = window_reverse(g, reshape(g, merged, {b, m2, c}), grid);
    return pointwise(g, out, core.proj_w, core.proj_b);
}

/// Window multi-head self-attention with the fused QKV projection.
template <typename T>
TensorPtr<T> w_msa(Graph<T>& g, const TensorPtr<T>& x, const AttentionParams<T>& params,
                   const WindowGrid& grid) {
    const int64_t c = x->dim(3);
    if (params.qkv_w->dim(0) != c)
        throw ShapeError("w_msa: params expect " + std::to_string(params.qkv_w->dim(0)) +
                         " channels, input has " + std::to_string(c));
    auto qkv = pointwise(g, x, params.qkv_w, params.qkv_b);
    auto parts = split(g, qkv, -1, {c, c, c});
    return attention_core(g, parts[0], parts[1], parts[2], params.core, grid);
}

/// Per-axis block transpose: position i*M + a moves to a*G + i on both spatial
/// axes (G windows of size M per side). Each shuffled window then mixes tokens
/// drawn across the original windows; G = 1 makes this the identity.
template <typename T>
TensorPtr<T> transpose_shuffle(Graph<T>& g, const TensorPtr<T>& x, int m) {
    if (x->rank() != 4) throw ShapeError("transpose_shuffle: expected (S,H,W,C)");
    const int64_t s = x->dim(0), h = x->dim(1), w = x->dim(2), c = x->dim(3);
    if (h != w) throw ShapeError("transpose_shuffle: window grid must be square");
    if (h % m != 0) throw ShapeError("transpose_shuffle: window does not tile the slice");
    const int64_t gside = h / m;
    auto blocks = reshape(g, x, {s, gside, m, gside, m, c});
    auto swapped = permute(g, blocks, {0, 2, 1, 4, 3, 5});
    return reshape(g, swapped, {s, h, w, c});
}

template <typename T>
TensorPtr<T> rotation_restore(Graph<T>& g, const TensorPtr<T>& x, int m) {
    if (x->rank() != 4) throw ShapeError("rotation_restore: expected (S,H,W,C)");
    const int64_t s = x->dim(0), h = x->dim(1), w = x->dim(2), c = x->dim(3);
    if (h != w) throw ShapeError("rotation_restore: window grid must be square");
    if (h % m != 0) throw ShapeError("rotation_restore: window does not tile the slice");
    const int64_t gside = h / m;
    auto blocks = reshape(g, x, {s, m, gside, m, gside, c});
    auto swapped = permute(g, blocks, {0, 2, 1, 4, 3, 5});
    return reshape(g, swapped, {s, h, w, c});
}

}  // namespace smx
