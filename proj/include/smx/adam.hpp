#pragma once

#include <unordered_map>

#include "smx/tensor.hpp"

namespace smx {

/// Named parameter store. Construction order is fixed by the model builder, so
/// optimizer state, checkpoints, and audits all see the same stable ordering.
template <typename T>
struct ParamRegistry {
    struct Entry {
        std::string name;
        TensorPtr<T> tensor;
        bool learnable;
    };
    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> by_name;

    TensorPtr<T> param(const std::string& name, Shape shape) {
        return insert(name, make_param<T>(std::move(shape)), true);
    }
    TensorPtr<T> buffer(const std::string& name, Shape shape) {
        return insert(name, make_tensor<T>(std::move(shape)), false);
    }

    TensorPtr<T> find(const std::string& name) const {
        auto it = by_name.find(name);
        return it == by_name.end() ? nullptr : entries[it->second].tensor;
    }

    std::vector<TensorPtr<T>> learnable() const {
        std::vector<TensorPtr<T>> out;
        for (const auto& e : entries)
            if (e.learnable) out.push_back(e.tensor);
        return out;
    }

    int64_t learnable_scalars() const {
        int64_t n = 0;
        for (const auto& e : entries)
            if (e.learnable) n += e.tensor->numel();
        return n;
    }

private:
    TensorPtr<T> insert(const std::string& name, TensorPtr<T> t, bool learnable) {
        if (by_name.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        by_name[name] = entries.size();
        entries.push_back(Entry{name, t, learnable});
        return entries.back().tensor;
    }
};

/// Adam with bias correction. One moment pair per parameter tensor; step()
/// consumes and clears the accumulated gradients.
template <typename T>
struct AdamState {
    T lr = T(5e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    int64_t t = 0;

    struct Slot {
        std::vector<T> m, v;
    };
    std::vector<Slot> slots;

    void init(const std::vector<TensorPtr<T>>& params) {
        slots.clear();
        slots.reserve(params.size());
        for (const auto& p : params)
            slots.push_back(Slot{std::vector<T>(p->data.size(), T(0)),
                                 std::vector<T>(p->data.size(), T(0))});
        t = 0;
    }

    void step(const std::vector<TensorPtr<T>>& params) {
        if (params.size() != slots.size())
            throw std::logic_error("adam: parameter list does not match optimizer state");
        ++t;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = *params[pi];
            if (p.grad.size() != p.data.size())
                throw std::logic_error("adam: parameter has no gradient (was backward run?)");
            auto& slot = slots[pi];
            for (size_t i = 0; i < p.data.size(); ++i) {
                const T gr = p.grad[i];
                slot.m[i] = beta1 * slot.m[i] + (T(1) - beta1) * gr;
                slot.v[i] = beta2 * slot.v[i] + (T(1) - beta2) * gr * gr;
                const T mhat = slot.m[i] / bc1;
                const T vhat = slot.v[i] / bc2;
                p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                if (!std::isfinite(static_cast<double>(p.data[i]))) throw NumericError("adam_step");
            }
            p.zero_grad();
        }
    }
};

}  // namespace smx
