#pragma once

#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "smx/tensor.hpp"

namespace smx {

struct SynthSpec {
    int64_t side = 32;
    int64_t count = 4;
    int classes = 2;          // label values 0..classes-1
    bool multi_blob = false;  // false: one soft-edged sphere, binary labels
};

struct Sample {
    std::vector<float> vol;    // side^3 intensities in [0,1]
    std::vector<uint8_t> mask; // side^3 labels
};

struct Dataset {
    int64_t side = 0;
    int classes = 2;
    std::vector<Sample> items;
};

namespace detail {

/// Logistic falloff around the radius: ~1 deep inside, 0.5 on the boundary.
inline double soft_ball(double dist, double radius, double edge) {
    return 1.0 / (1.0 + std::exp((dist - radius) / edge));
}

}  // namespace detail

/// One sphere with a soft intensity edge plus additive noise; the label mask
/// thresholds the clean field, so it is exactly the rasterized ball.
inline Sample sphere_sample(int64_t side, std::array<double, 3> center, double radius,
                            std::mt19937_64& rng, double edge = 1.0, double noise = 0.03) {
    Sample s;
    const auto n = static_cast<size_t>(side * side * side);
    s.vol.resize(n);
    s.mask.resize(n);
    std::uniform_real_distribution<double> jitter(-noise, noise);
    size_t idx = 0;
    for (int64_t i = 0; i < side; ++i)
        for (int64_t j = 0; j < side; ++j)
            for (int64_t k = 0; k < side; ++k, ++idx) {
                const double di = static_cast<double>(i) - center[0];
                const double dj = static_cast<double>(j) - center[1];
                const double dk = static_cast<double>(k) - center[2];
                const double dist = std::sqrt(di * di + dj * dj + dk * dk);
                const double field = detail::soft_ball(dist, radius, edge);
                const double v = field + jitter(rng);
                s.vol[idx] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                s.mask[idx] = field > 0.5 ? 1 : 0;
            }
    return s;
}

/// classes-1 foreground balls, one per label; each voxel takes the label of
/// the strongest field when any field crosses 0.5.
inline Sample blob_sample(int64_t side, int classes, std::mt19937_64& rng, double edge = 1.0,
                          double noise = 0.03) {
    std::uniform_real_distribution<double> cpos(0.25 * static_cast<double>(side),
                                                0.75 * static_cast<double>(side));
    std::uniform_real_distribution<double> crad(0.10 * static_cast<double>(side),
                                                0.20 * static_cast<double>(side));
    std::uniform_real_distribution<double> jitter(-noise, noise);
    struct Ball {
        std::array<double, 3> c;
        double r;
    };
    std::vector<Ball> balls;
    for (int c = 1; c < classes; ++c)
        balls.push_back({{cpos(rng), cpos(rng), cpos(rng)}, crad(rng)});

    Sample s;
    const auto n = static_cast<size_t>(side * side * side);
    s.vol.resize(n);
    s.mask.resize(n);
    size_t idx = 0;
    for (int64_t i = 0; i < side; ++i)
        for (int64_t j = 0; j < side; ++j)
            for (int64_t k = 0; k < side; ++k, ++idx) {
                double best = 0.0;
                int label = 0;
                for (size_t b = 0; b < balls.size(); ++b) {
                    const double di = static_cast<double>(i) - balls[b].c[0];
                    const double dj = static_cast<double>(j) - balls[b].c[1];
                    const double dk = static_cast<double>(k) - balls[b].c[2];
                    const double field = detail::soft_ball(std::sqrt(di * di + dj * dj + dk * dk),
                                                           balls[b].r, edge);
                    if (field > best) {
                        best = field;
                        label = static_cast<int>(b) + 1;
                    }
                }
                const double v = best + jitter(rng);
                s.vol[idx] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                s.mask[idx] = best > 0.5 ? static_cast<uint8_t>(label) : 0;
            }
    return s;
}

/// Deterministic in (spec, seed). Samples whose mask misses a class are
/// regenerated a bounded number of times, then rejected outright.
inline Dataset synth_dataset(const SynthSpec& spec, uint64_t seed) {
    if (spec.side < 1 || spec.count < 1 || spec.classes < 2)
        throw std::invalid_argument("synth: side/count/classes out of range");
    std::mt19937_64 rng(seed);
    Dataset ds;
    ds.side = spec.side;
    ds.classes = spec.multi_blob ? spec.classes : 2;

    auto complete = [&](const Sample& s) {
        std::vector<uint8_t> seen(static_cast<size_t>(ds.classes), 0);
        for (uint8_t v : s.mask) seen[v] = 1;
        for (int c = 1; c < ds.classes; ++c)
            if (!seen[static_cast<size_t>(c)]) return false;
        return true;
    };

    std::uniform_real_distribution<double> cpos(0.3 * static_cast<double>(spec.side),
                                                0.7 * static_cast<double>(spec.side));
    // Radius floor at 0.2*side: far smaller balls turn into a few dozen voxels
    // at coarse sides, where one boundary shell dominates the overlap scores.
    std::uniform_real_distribution<double> crad(0.20 * static_cast<double>(spec.side),
                                                0.30 * static_cast<double>(spec.side));
    for (int64_t i = 0; i < spec.count; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 8 && !placed; ++attempt) {
            Sample s;
            if (spec.multi_blob) {
                s = blob_sample(spec.side, ds.classes, rng);
            } else {
                std::array<double, 3> c;
                for (auto& x : c) x = cpos(rng);  // fixed draw order: center, then radius
                const double r = crad(rng);
                s = sphere_sample(spec.side, c, r, rng);
            }
            if (complete(s)) {
                ds.items.push_back(std::move(s));
                placed = true;
            }
        }
        if (!placed)
            throw std::runtime_error("synth: sample " + std::to_string(i) +
                                     " kept an empty class after 8 attempts");
    }
    return ds;
}

}  // namespace smx
