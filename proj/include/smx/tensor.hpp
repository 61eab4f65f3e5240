#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smx {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised when a primitive produces a non-finite value; carries the op kind.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& op)
        : std::runtime_error("non-finite value produced by op '" + op + "'"), op_kind(op) {}
    std::string op_kind;
};

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;   // allocated lazily; same length as data when present
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), T(0)) {}

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape s) {
    return std::make_shared<Tensor<T>>(std::move(s));
}

/// Leaf tensor participating in gradient computation (model weights and the like).
template <typename T>
TensorPtr<T> make_param(Shape s) {
    auto t = make_tensor<T>(std::move(s));
    t->requires_grad = true;
    t->ensure_grad();
    return t;
}

template <typename T>
TensorPtr<T> from_values(Shape s, std::vector<T> v) {
    if (numel_of(s) != static_cast<int64_t>(v.size()))
        throw ShapeError("from_values: " + shape_str(s) + " does not hold " + std::to_string(v.size()) + " values");
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(s);
    t->data = std::move(v);
    return t;
}

template <typename T>
TensorPtr<T> full(Shape s, T value) {
    auto t = make_tensor<T>(std::move(s));
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

/// Records primitive applications in execution order (a valid topological order)
/// and replays their backward rules in reverse. Gradients from multiple uses of a
/// tensor accumulate by summation into its grad buffer.
template <typename T>
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    size_t steps() const { return tape_.size(); }

    static void check_finite(const char* kind, const Tensor<T>& t) {
        for (const T v : t.data) {
            if (!std::isfinite(static_cast<double>(v))) throw NumericError(kind);
        }
    }

    /// Finalize a primitive whose inputs' requires_grad disjunction is already
    /// known: finite-check outputs, mark them differentiable, push the backward
    /// rule onto the tape.
    TensorPtr<T> finish_n(const char* kind, TensorPtr<T> out, bool any_input_grad,
                          std::function<void()> backward) {
        check_finite(kind, *out);
        if (grad_enabled_ && any_input_grad) {
            out->requires_grad = true;
            out->ensure_grad();
            tape_.push_back(Step{kind, std::move(backward)});
        }
        return out;
    }

    /// Finalize a single-output primitive with a fixed input list.
    TensorPtr<T> finish(const char* kind, TensorPtr<T> out,
                        std::initializer_list<const TensorPtr<T>*> inputs,
                        std::function<void()> backward) {
        bool need = false;
        for (const TensorPtr<T>* in : inputs) {
            if ((*in)->requires_grad) { need = true; break; }
        }
        return finish_n(kind, std::move(out), need, std::move(backward));
    }

    /// Finalize a multi-output primitive (split and friends); one shared backward.
    void finish_multi(const char* kind, const std::vector<TensorPtr<T>>& outs,
                      bool any_input_grad, std::function<void()> backward) {
        for (const auto& o : outs) check_finite(kind, *o);
        if (!grad_enabled_ || !any_input_grad) return;
        for (const auto& o : outs) {
            o->requires_grad = true;
            o->ensure_grad();
        }
        tape_.push_back(Step{kind, std::move(backward)});
    }

    void backward(const TensorPtr<T>& loss) {
        if (loss->numel() != 1) throw ShapeError("backward: loss must be a scalar tensor");
        if (!loss->requires_grad)
            throw ShapeError("backward: loss is not connected to any differentiable input");
        if (ran_backward_) throw std::logic_error("backward: already run on this graph");
        ran_backward_ = true;
        loss->ensure_grad();
        loss->grad[0] = T(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->bw();
    }

private:
    struct Step {
        const char* kind;
        std::function<void()> bw;
    };
    std::vector<Step> tape_;
    bool grad_enabled_;
    bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// RNG / initialization

/// Normal(0, std) truncated to two standard deviations by rejection.
template <typename T>
void fill_trunc_normal(std::mt19937_64& rng, std::vector<T>& out, T stddev) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : out) {
        double x;
        do {
            x = dist(rng);
        } while (std::abs(x) > 2.0 * static_cast<double>(stddev));
        v = static_cast<T>(x);
    }
}

template <typename T>
void fill_uniform(std::mt19937_64& rng, std::vector<T>& out, T lo, T hi) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : out) v = static_cast<T>(dist(rng));
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)): the stock convolution/classifier
/// default. Keeps early outputs and backpropagated signal at unit order, which
/// matters for layers whose scale is not absorbed by a following norm.
template <typename T>
void fill_fan_in(std::mt19937_64& rng, std::vector<T>& out, int64_t fan_in) {
    const T b = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    fill_uniform<T>(rng, out, -b, b);
}

}  // namespace smx
