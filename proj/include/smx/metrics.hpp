#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "smx/tensor.hpp"

namespace smx {

/// Binary voxel grid with isotropic spacing in mm. Any nonzero byte counts as
/// foreground.
struct MaskVolume {
    std::array<int64_t, 3> dims{0, 0, 0};
    double spacing = 1.0;
    std::vector<uint8_t> v;

    int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
    uint8_t at(int64_t i, int64_t j, int64_t k) const {
        return v[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
    }
    uint8_t& at(int64_t i, int64_t j, int64_t k) {
        return v[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
    }
};

inline MaskVolume make_mask(std::array<int64_t, 3> dims, double spacing = 1.0) {
    for (int64_t d : dims)
        if (d < 1) throw ShapeError("mask dims must be positive");
    MaskVolume m;
    m.dims = dims;
    m.spacing = spacing;
    m.v.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), 0);
    return m;
}

struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth) {
    if (pred.size() != truth.size())
        throw ShapeError("confusion: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
    Confusion c;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        if (p && t)
            ++c.tp;
        else if (p)
            ++c.fp;
        else if (t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

inline Confusion confusion(const MaskVolume& pred, const MaskVolume& truth) {
    if (pred.dims != truth.dims) throw ShapeError("confusion: mask shapes differ");
    return confusion(pred.v, truth.v);
}

// Both-empty comparisons score 1 by convention; the formulas already yield 0
// when exactly one side is empty.
inline double dice(const Confusion& c) {
    const int64_t den = c.fp + 2 * c.tp + c.fn;
    return den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double jaccard(const Confusion& c) {
    const int64_t den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double precision(const Confusion& c) {
    if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

inline double recall(const Confusion& c) {
    if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

template <typename M>
double dice(const M& pred, const M& truth) {
    return dice(confusion(pred, truth));
}
template <typename M>
double jaccard(const M& pred, const M& truth) {
    return jaccard(confusion(pred, truth));
}
template <typename M>
double precision(const M& pred, const M& truth) {
    return precision(confusion(pred, truth));
}
template <typename M>
double recall(const M& pred, const M& truth) {
    return recall(confusion(pred, truth));
}

/// Overlap of the predicted change region with the true change region,
/// everything measured relative to the initial mask m1: voxels already set in
/// m1 can never contribute. Equal empty change regions score 1.
inline double doc(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& m1,
                  const std::vector<uint8_t>& m2) {
    if (pred.size() != m1.size() || pred.size() != m2.size())
        throw ShapeError("doc: mask sizes differ");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (m1[i] != 0) continue;
        const bool p = pred[i] != 0, t = m2[i] != 0;
        if (p && t) ++inter;
        if (p || t) ++uni;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double doc(const MaskVolume& pred, const MaskVolume& m1, const MaskVolume& m2) {
    if (pred.dims != m1.dims || pred.dims != m2.dims) throw ShapeError("doc: mask shapes differ");
    return doc(pred.v, m1.v, m2.v);
}

/// Foreground voxels with at least one six-connected background neighbor;
/// the volume boundary counts as background.
inline std::vector<std::array<int64_t, 3>> surface_voxels(const MaskVolume& m) {
    std::vector<std::array<int64_t, 3>> out;
    auto bg = [&](int64_t i, int64_t j, int64_t k) {
        if (i < 0 || j < 0 || k < 0 || i >= m.dims[0] || j >= m.dims[1] || k >= m.dims[2])
            return true;
        return m.at(i, j, k) == 0;
    };
    for (int64_t i = 0; i < m.dims[0]; ++i)
        for (int64_t j = 0; j < m.dims[1]; ++j)
            for (int64_t k = 0; k < m.dims[2]; ++k) {
                if (m.at(i, j, k) == 0) continue;
                if (bg(i - 1, j, k) || bg(i + 1, j, k) || bg(i, j - 1, k) || bg(i, j + 1, k) ||
                    bg(i, j, k - 1) || bg(i, j, k + 1))
                    out.push_back({i, j, k});
            }
    return out;
}

/// q-th quantile of a sample via linear interpolation between order statistics.
inline double percentile_linear(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("percentile of empty sample");
    std::sort(v.begin(), v.end());
    const double rank = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

namespace detail {

inline void nn_distances(const std::vector<std::array<int64_t, 3>>& from,
                         const std::vector<std::array<int64_t, 3>>& to,
                         std::vector<double>& out) {
    for (const auto& a : from) {
        int64_t best = std::numeric_limits<int64_t>::max();
        for (const auto& b : to) {
            const int64_t di = a[0] - b[0], dj = a[1] - b[1], dk = a[2] - b[2];
            best = std::min(best, di * di + dj * dj + dk * dk);
        }
        out.push_back(std::sqrt(static_cast<double>(best)));
    }
}

}  // namespace detail

/// 95th percentile of the pooled two-way surface nearest-neighbor distances,
/// in mm. Undefined for an empty mask.
inline double hd95(const MaskVolume& pred, const MaskVolume& truth) {
    if (pred.dims != truth.dims) throw ShapeError("hd95: mask shapes differ");
    if (pred.spacing != truth.spacing)
        throw std::invalid_argument("hd95: masks carry different spacings");
    const auto sp = surface_voxels(pred);
    const auto st = surface_voxels(truth);
    if (sp.empty() || st.empty()) throw std::invalid_argument("hd95: empty mask has no surface");
    std::vector<double> d;
    d.reserve(sp.size() + st.size());
    detail::nn_distances(sp, st, d);
    detail::nn_distances(st, sp, d);
    // Isotropic spacing factors out of every Euclidean distance.
    return pred.spacing * percentile_linear(std::move(d), 0.95);
}

}  // namespace smx
