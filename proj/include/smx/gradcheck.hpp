#pragma once

#include <functional>
#include <numeric>

#include "smx/adam.hpp"
#include "smx/nn.hpp"

namespace smx {

/// Relative error of a central finite difference against the analytic value,
/// with the denominator floored to keep tiny gradients meaningful.
template <typename T>
double fd_rel_err(const std::function<T()>& loss_fn, const TensorPtr<T>& leaf, int64_t idx,
                  T analytic, T step) {
    const T v = leaf->data[idx];
    leaf->data[idx] = v + step;
    const T lp = loss_fn();
    leaf->data[idx] = v - step;
    const T lm = loss_fn();
    leaf->data[idx] = v;
    const double fd = (static_cast<double>(lp) - static_cast<double>(lm)) / (2.0 * static_cast<double>(step));
    const double an = static_cast<double>(analytic);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    return std::abs(fd - an) / denom;
}

/// One forward/backward pass plus exhaustive finite differencing of every
/// element of every differentiable leaf. `fwd` must be a pure function of the
/// leaves' data.
template <typename T>
class PrimHarness {
public:
    PrimHarness(std::vector<TensorPtr<T>> leaves, std::function<TensorPtr<T>(Graph<T>&)> fwd,
                uint64_t weight_seed = 0x5eedULL)
        : leaves_(std::move(leaves)), fwd_(std::move(fwd)), weight_seed_(weight_seed) {}

    double max_rel_err(T step) {
        for (auto& l : leaves_)
            if (!l->grad.empty()) l->zero_grad();
        std::vector<std::vector<T>> analytic(leaves_.size());
        {
            Graph<T> g(true);
            auto out = fwd_(g);
            ensure_weights(out->numel());
            auto w = from_values<T>(out->shape, weights_);
            auto loss = sum_all(g, mul(g, out, w));
            g.backward(loss);
            for (size_t i = 0; i < leaves_.size(); ++i)
                analytic[i] = leaves_[i]->grad;
        }
        std::function<T()> loss_fn = [this]() -> T {
            Graph<T> g(false);
            auto out = fwd_(g);
            T acc = T(0);
            for (int64_t i = 0; i < out->numel(); ++i) acc += out->data[i] * weights_[static_cast<size_t>(i)];
            return acc;
        };
        double worst = 0.0;
        for (size_t li = 0; li < leaves_.size(); ++li) {
            if (!leaves_[li]->requires_grad) continue;
            const T* grads = analytic[li].empty() ? nullptr : analytic[li].data();
            for (int64_t i = 0; i < leaves_[li]->numel(); ++i) {
                const T an = grads ? grads[i] : T(0);
                worst = std::max(worst, fd_rel_err<T>(loss_fn, leaves_[li], i, an, step));
            }
        }
        return worst;
    }

private:
    void ensure_weights(int64_t n) {
        if (static_cast<int64_t>(weights_.size()) == n) return;
        weights_.resize(static_cast<size_t>(n));
        std::mt19937_64 rng(weight_seed_);
        fill_uniform<T>(rng, weights_, T(-1), T(1));
    }
    std::vector<TensorPtr<T>> leaves_;
    std::function<TensorPtr<T>(Graph<T>&)> fwd_;
    std::vector<T> weights_;
    uint64_t weight_seed_;
};

/// One probed coordinate of a model-level finite-difference audit.
struct FdSite {
    std::string tensor;
    int64_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

/// Audit outcome: worst relative error plus every probed site.
struct FdReport {
    double worst = 0.0;
    std::string worst_site;
    int64_t probes = 0;
    std::vector<FdSite> sites;
};

struct FdOptions {
    double step = 1e-4;
    /// Escalation threshold: coordinates whose plain central difference misses
    /// this bound are re-estimated with higher-order stencils before judgment.
    double tol = 1e-5;
    /// 0 probes every element; otherwise a deterministic subsample per tensor.
    int64_t max_probes_per_tensor = 0;
    uint64_t sample_seed = 0x9d5ULL;
};

/// Finite-difference audit of every learnable registry entry against gradients
/// already stored on the tensors. `loss` must be a deterministic scalar
/// function of the entries' data (the same scalar whose backward filled the
/// gradients).
///
/// A plain central difference is trusted only when it already lands inside the
/// escalation threshold. Otherwise the coordinate is re-estimated with
/// five-point stencils at three step sizes and the best estimate wins: a wrong
/// analytic gradient disagrees with every stencil, while estimator artifacts
/// (roundoff at small steps, a max-selection switch caught inside one bracket)
/// affect only some of them.
template <typename T>
FdReport fd_audit(const ParamRegistry<T>& reg, const std::function<double()>& loss,
                  const FdOptions& opt = {}) {
    auto eval_shifted = [&loss](T* slot, T base, double delta) {
        *slot = base + static_cast<T>(delta);
        const double v = loss();
        *slot = base;
        return v;
    };
    auto central2 = [&](T* slot, T base, double h) {
        return (eval_shifted(slot, base, h) - eval_shifted(slot, base, -h)) / (2.0 * h);
    };
    auto central4 = [&](T* slot, T base, double h) {
        return (eval_shifted(slot, base, -2 * h) - 8.0 * eval_shifted(slot, base, -h) +
                8.0 * eval_shifted(slot, base, h) - eval_shifted(slot, base, 2 * h)) /
               (12.0 * h);
    };
    auto rel = [](double fd, double an) {
        return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    };

    FdReport rep;
    size_t ord = 0;
    for (const auto& e : reg.entries) {
        ++ord;
        if (!e.learnable) continue;
        const int64_t n = e.tensor->numel();
        std::vector<int64_t> idx;
        if (opt.max_probes_per_tensor > 0 && n > opt.max_probes_per_tensor) {
            std::vector<int64_t> all(static_cast<size_t>(n));
            std::iota(all.begin(), all.end(), int64_t{0});
            idx.resize(static_cast<size_t>(opt.max_probes_per_tensor));
            std::mt19937_64 rng(opt.sample_seed + ord);
            std::sample(all.begin(), all.end(), idx.begin(), idx.size(), rng);
        } else {
            idx.resize(static_cast<size_t>(n));
            std::iota(idx.begin(), idx.end(), int64_t{0});
        }
        const bool has_grad = !e.tensor->grad.empty();
        for (int64_t i : idx) {
            const double an = has_grad ? static_cast<double>(e.tensor->grad[i]) : 0.0;
            T* slot = &e.tensor->data[i];
            const T base = *slot;
            double fd = central2(slot, base, opt.step);
            double err = rel(fd, an);
            if (err >= opt.tol) {
                for (double h : {8.0 * opt.step, opt.step, opt.step / 8.0}) {
                    const double fd4 = central4(slot, base, h);
                    const double err4 = rel(fd4, an);
                    if (err4 < err) { err = err4; fd = fd4; }
                }
            }
            rep.sites.push_back(FdSite{e.name, i, an, fd, err});
            ++rep.probes;
            if (err > rep.worst) {
                rep.worst = err;
                rep.worst_site = e.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

/// Named finite-difference case over one primitive (or a tight composition).
template <typename T>
struct PrimCheck {
    std::string name;
    std::function<double(T step)> max_rel_err;
};

/// The standard per-primitive audit table. Every backward rule in the op set
/// appears at least once; each case differences every input element.
template <typename T>
std::vector<PrimCheck<T>> primitive_audit_table() {
    std::vector<PrimCheck<T>> table;

    auto leaf = [](Shape s, uint64_t seed, T lo = T(-1), T hi = T(1)) {
        auto t = make_param<T>(std::move(s));
        std::mt19937_64 rng(seed);
        fill_uniform<T>(rng, t->data, lo, hi);
        return t;
    };
    auto fixed = [](Shape s, uint64_t seed, T lo, T hi) {
        auto t = make_tensor<T>(std::move(s));
        std::mt19937_64 rng(seed);
        fill_uniform<T>(rng, t->data, lo, hi);
        return t;
    };
    auto push = [&table](const std::string& name, std::vector<TensorPtr<T>> leaves,
                         std::function<TensorPtr<T>(Graph<T>&)> fwd) {
        table.push_back(PrimCheck<T>{
            name, [leaves = std::move(leaves), fwd = std::move(fwd)](T step) mutable {
                PrimHarness<T> h(leaves, fwd);
                return h.max_rel_err(step);
            }});
    };

    {
        auto a = leaf({2, 3}, 11), b = leaf({2, 3}, 12);
        push("add", {a, b}, [a, b](Graph<T>& g) { return add(g, a, b); });
    }
    {
        auto a = leaf({2, 3}, 13), b = leaf({2, 3}, 14);
        push("sub", {a, b}, [a, b](Graph<T>& g) { return sub(g, a, b); });
    }
    {
        auto a = leaf({2, 3}, 15), b = leaf({2, 3}, 16);
        push("mul", {a, b}, [a, b](Graph<T>& g) { return mul(g, a, b); });
    }
    {
        auto a = leaf({2, 3}, 17), b = leaf({2, 3}, 18, T(0.5), T(1.5));
        push("div", {a, b}, [a, b](Graph<T>& g) { return div(g, a, b); });
    }
    {
        auto a = leaf({3, 4}, 19);
        push("scale", {a}, [a](Graph<T>& g) { return scale(g, a, T(1.7)); });
    }
    {
        auto a = leaf({3, 4}, 20);
        push("add_const", {a}, [a](Graph<T>& g) { return add_const(g, a, T(-0.3)); });
    }
    {
        auto x = leaf({2, 3, 4}, 21), b = leaf({3, 1}, 22);
        push("broadcast_add", {x, b}, [x, b](Graph<T>& g) { return broadcast_add(g, x, b); });
    }
    {
        auto x = leaf({2, 3, 4}, 23), b = leaf({4}, 24);
        push("broadcast_mul", {x, b}, [x, b](Graph<T>& g) { return broadcast_mul(g, x, b); });
    }
    {
        auto a = leaf({3, 4}, 25), b = leaf({4, 5}, 26);
        push("matmul_rank2", {a, b}, [a, b](Graph<T>& g) { return matmul(g, a, b); });
    }
    {
        auto a = leaf({2, 3, 4}, 27), b = leaf({2, 4, 5}, 28);
        push("matmul_rank3", {a, b}, [a, b](Graph<T>& g) { return matmul(g, a, b); });
    }
    {
        auto a = leaf({2, 6}, 29);
        push("reshape", {a}, [a](Graph<T>& g) { return reshape(g, a, {3, 4}); });
    }
    {
        auto a = leaf({2, 3, 4}, 30);
        push("permute", {a}, [a](Graph<T>& g) { return permute(g, a, {2, 0, 1}); });
    }
    {
        auto a = leaf({2, 3}, 31), b = leaf({2, 2}, 32);
        push("concat", {a, b}, [a, b](Graph<T>& g) { return concat(g, std::vector<TensorPtr<T>>{a, b}, 1); });
    }
    {
        auto a = leaf({2, 5}, 33);
        push("split", {a}, [a](Graph<T>& g) {
            auto parts = split(g, a, 1, {2, 3});
            return concat(g, std::vector<TensorPtr<T>>{parts[1], parts[0]}, 1);
        });
    }
    {
        auto a = leaf({3, 5}, 34);
        push("softmax", {a}, [a](Graph<T>& g) { return softmax(g, a); });
    }
    {
        auto a = leaf({3, 5}, 35);
        push("log_softmax", {a}, [a](Graph<T>& g) { return log_softmax(g, a); });
    }
    {
        auto a = leaf({2, 7}, 36);
        push("sigmoid", {a}, [a](Graph<T>& g) { return sigmoid(g, a); });
    }
    {
        auto a = leaf({2, 7}, 37);
        push("gelu", {a}, [a](Graph<T>& g) { return gelu(g, a); });
    }
    {
        auto a = leaf({2, 3, 4}, 38);
        push("sum_axis", {a}, [a](Graph<T>& g) { return sum_axis(g, a, 1); });
    }
    {
        auto a = leaf({3, 4}, 39);
        push("sum_all", {a}, [a](Graph<T>& g) { return sum_all(g, a); });
    }
    {
        auto a = leaf({3, 4}, 40);
        push("mean_all", {a}, [a](Graph<T>& g) { return mean_all(g, a); });
    }
    {
        auto a = leaf({2, 3, 5}, 41);
        push("channel_mean", {a}, [a](Graph<T>& g) { return channel_mean(g, a); });
    }
    {
        auto a = leaf({2, 3, 5}, 42);
        push("channel_max", {a}, [a](Graph<T>& g) { return channel_max(g, a); });
    }
    {
        auto a = leaf({2, 4, 3}, 43);
        push("global_avg_pool", {a}, [a](Graph<T>& g) { return global_avg_pool(g, a); });
    }
    {
        auto a = leaf({2, 4, 3}, 44);
        push("global_max_pool", {a}, [a](Graph<T>& g) { return global_max_pool(g, a); });
    }
    {
        auto t = leaf({6, 3}, 45);
        auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 2, 2, 5});
        push("gather_rows", {t}, [t, idx](Graph<T>& g) { return gather_rows(g, t, idx); });
    }
    {
        auto x = leaf({4, 3}, 46);
        auto gm = leaf({3}, 47, T(0.5), T(1.5));
        auto bt = leaf({3}, 48);
        auto rm = fixed({3}, 49, T(-0.2), T(0.2));
        auto rv = fixed({3}, 50, T(0.5), T(1.5));
        push("batch_norm_train", {x, gm, bt}, [x, gm, bt, rm, rv](Graph<T>& g) {
            return batch_norm(g, x, gm, bt, rm, rv, true);
        });
    }
    {
        auto x = leaf({4, 3}, 51);
        auto gm = leaf({3}, 52, T(0.5), T(1.5));
        auto bt = leaf({3}, 53);
        auto rm = fixed({3}, 54, T(-0.2), T(0.2));
        auto rv = fixed({3}, 55, T(0.5), T(1.5));
        push("batch_norm_eval", {x, gm, bt}, [x, gm, bt, rm, rv](Graph<T>& g) {
            return batch_norm(g, x, gm, bt, rm, rv, false);
        });
    }
    {
        auto x = leaf({4, 5}, 56);
        auto gm = leaf({5}, 57, T(0.5), T(1.5));
        auto bt = leaf({5}, 58);
        push("layer_norm", {x, gm, bt}, [x, gm, bt](Graph<T>& g) { return layer_norm(g, x, gm, bt); });
    }
    {
        auto x = leaf({1, 4, 4, 2}, 59);
        push("im2col2d", {x}, [x](Graph<T>& g) { return im2col2d(g, x, 3, 3, 1, 1); });
    }
    {
        auto x = leaf({1, 3, 3, 3, 2}, 60);
        push("im2col3d", {x}, [x](Graph<T>& g) { return im2col3d(g, x, 2, 1, 0); });
    }
    {
        auto x = leaf({1, 5, 5, 2}, 61);
        auto w = leaf({18, 3}, 62);
        auto b = leaf({3}, 63);
        push("conv2d", {x, w, b}, [x, w, b](Graph<T>& g) { return conv2d(g, x, w, b, 3, 3, 1, 1); });
    }
    {
        auto x = leaf({1, 6, 6, 2}, 64);
        auto w = leaf({18, 3}, 65);
        auto b = leaf({3}, 66);
        push("conv2d_stride2", {x, w, b}, [x, w, b](Graph<T>& g) { return conv2d(g, x, w, b, 3, 3, 2, 1); });
    }
    {
        auto x = leaf({1, 6, 6, 3}, 67);
        auto w = leaf({25, 3}, 68);
        auto b = leaf({3}, 69);
        push("depthwise2d", {x, w, b}, [x, w, b](Graph<T>& g) { return depthwise2d(g, x, w, b, 5, 1, 2); });
    }
    {
        auto x = leaf({2, 3, 4}, 70);
        auto w = leaf({4, 6}, 71);
        auto b = leaf({6}, 72);
        push("pointwise", {x, w, b}, [x, w, b](Graph<T>& g) { return pointwise(g, x, w, b); });
    }
    {
        auto x = leaf({1, 4, 4, 4, 2}, 73);
        auto w = leaf({54, 3}, 74);
        auto b = leaf({3}, 75);
        push("conv3d", {x, w, b}, [x, w, b](Graph<T>& g) { return conv3d(g, x, w, b, 3, 1, 1); });
    }
    {
        auto x = leaf({1, 4, 4, 4, 2}, 76);
        auto w = leaf({54, 3}, 77);
        auto b = leaf({3}, 78);
        push("conv3d_stride2", {x, w, b}, [x, w, b](Graph<T>& g) { return conv3d(g, x, w, b, 3, 2, 1); });
    }
    {
        auto x = leaf({1, 2, 2, 2, 3}, 79);
        auto w = leaf({3, 16}, 80);
        auto b = leaf({2}, 81);
        push("conv3d_transpose2x", {x, w, b}, [x, w, b](Graph<T>& g) { return conv3d_transpose2x(g, x, w, b); });
    }
    return table;
}

}  // namespace smx
