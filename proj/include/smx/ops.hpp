#pragma once

#include "smx/tensor.hpp"

namespace smx {

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> str(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        str[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return str;
}

// O[n x m] += A[n x k] * B[k x m]
template <typename T>
void gemm_nn_acc(const T* A, const T* B, T* O, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        T* orow = O + i * m;
        const T* arow = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T a = arow[p];
            const T* brow = B + p * m;
            for (int64_t j = 0; j < m; ++j) orow[j] += a * brow[j];
        }
    }
}

// dA[n x k] += dO[n x m] * B^T   (dA[i,p] += sum_j dO[i,j] * B[p,j])
template <typename T>
void gemm_nt_acc(const T* dO, const T* B, T* dA, int64_t n, int64_t m, int64_t k) {
    for (int64_t i = 0; i < n; ++i) {
        const T* drow = dO + i * m;
        T* arow = dA + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T* brow = B + p * m;
            T acc = T(0);
            for (int64_t j = 0; j < m; ++j) acc += drow[j] * brow[j];
            arow[p] += acc;
        }
    }
}

// dB[k x m] += A^T * dO   (dB[p,j] += sum_i A[i,p] * dO[i,j])
template <typename T>
void gemm_tn_acc(const T* A, const T* dO, T* dB, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const T* arow = A + i * k;
        const T* drow = dO + i * m;
        for (int64_t p = 0; p < k; ++p) {
            const T a = arow[p];
            if (a == T(0)) continue;
            T* brow = dB + p * m;
            for (int64_t j = 0; j < m; ++j) brow[j] += a * drow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
TensorPtr<T> add(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("add", *a, *b);
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    return g.finish("add", out, {&a, &b}, [a, b, out, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
        }
    });
}

template <typename T>
TensorPtr<T> sub(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("sub", *a, *b);
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
    return g.finish("sub", out, {&a, &b}, [a, b, out, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i) b->grad[i] -= out->grad[i];
        }
    });
}

template <typename T>
TensorPtr<T> mul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("mul", *a, *b);
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    return g.finish("mul", out, {&a, &b}, [a, b, out, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
        }
    });
}

template <typename T>
TensorPtr<T> div(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("div", *a, *b);
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] / b->data[i];
    return g.finish("div", out, {&a, &b}, [a, b, out, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] / b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                b->grad[i] -= out->grad[i] * a->data[i] / (b->data[i] * b->data[i]);
        }
    });
}

template <typename T>
TensorPtr<T> scale(Graph<T>& g, const TensorPtr<T>& a, T c) {
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
    return g.finish("scale", out, {&a}, [a, out, n, c] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * c;
    });
}

template <typename T>
TensorPtr<T> add_const(Graph<T>& g, const TensorPtr<T>& a, T c) {
    auto out = make_tensor<T>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + c;
    return g.finish("add_const", out, {&a}, [a, out, n] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
    });
}

// ---------------------------------------------------------------------------
// Broadcasting binaries. The right operand's shape is aligned to the left
// operand's trailing axes; every aligned axis must match or be 1 on the right.

namespace detail {

struct BroadcastPlan {
    std::vector<int64_t> dims;      // shape of the full (left) operand
    std::vector<int64_t> bstrides;  // stride into the small operand, 0 on broadcast axes
};

template <typename T>
BroadcastPlan make_broadcast_plan(const char* op, const Tensor<T>& x, const Tensor<T>& b) {
    const int rx = x.rank(), rb = b.rank();
    if (rb > rx)
        throw ShapeError(std::string(op) + ": operand rank " + std::to_string(rb) +
                         " exceeds target rank " + std::to_string(rx));
    BroadcastPlan plan;
    plan.dims = x.shape;
    plan.bstrides.assign(static_cast<size_t>(rx), 0);
    auto bstr = row_major_strides(b.shape);
    for (int i = 0; i < rb; ++i) {
        const int xi = rx - rb + i;
        const int64_t bd = b.shape[static_cast<size_t>(i)];
        if (bd != 1 && bd != x.shape[static_cast<size_t>(xi)])
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape) +
                             " against " + shape_str(x.shape));
        plan.bstrides[static_cast<size_t>(xi)] = (bd == 1) ? 0 : bstr[static_cast<size_t>(i)];
    }
    return plan;
}

// Walks the full operand in row-major order invoking fn(xi, bi).
template <typename Fn>
void broadcast_walk(const BroadcastPlan& plan, Fn&& fn) {
    const int r = static_cast<int>(plan.dims.size());
    if (r == 0) {
        fn(0, 0);
        return;
    }
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t total = 1;
    for (int64_t d : plan.dims) total *= d;
    int64_t boff = 0;
    for (int64_t xi = 0; xi < total; ++xi) {
        fn(xi, boff);
        for (int ax = r - 1; ax >= 0; --ax) {
            boff += plan.bstrides[static_cast<size_t>(ax)];
            if (++idx[static_cast<size_t>(ax)] < plan.dims[static_cast<size_t>(ax)]) break;
            idx[static_cast<size_t>(ax)] = 0;
            boff -= plan.bstrides[static_cast<size_t>(ax)] * plan.dims[static_cast<size_t>(ax)];
        }
    }
}

}  // namespace detail

template <typename T>
TensorPtr<T> broadcast_add(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& b) {
    auto plan = detail::make_broadcast_plan("broadcast_add", *x, *b);
    auto out = make_tensor<T>(x->shape);
    detail::broadcast_walk(plan, [&](int64_t xi, int64_t bi) {
        out->data[xi] = x->data[xi] + b->data[bi];
    });
    return g.finish("broadcast_add", out, {&x, &b}, [x, b, out, plan] {
        if (x->requires_grad) {
            x->ensure_grad();
            const int64_t n = x->numel();
            for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            detail::broadcast_walk(plan, [&](int64_t xi, int64_t bi) {
                b->grad[bi] += out->grad[xi];
            });
        }
    });
}

template <typename T>
TensorPtr<T> broadcast_mul(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& b) {
    auto plan = detail::make_broadcast_plan("broadcast_mul", *x, *b);
    auto out = make_tensor<T>(x->shape);
    detail::broadcast_walk(plan, [&](int64_t xi, int64_t bi) {
        out->data[xi] = x->data[xi] * b->data[bi];
    });
    return g.finish("broadcast_mul", out, {&x, &b}, [x, b, out, plan] {
        if (x->requires_grad) {
            x->ensure_grad();
            detail::broadcast_walk(plan, [&](int64_t xi, int64_t bi) {
                x->grad[xi] += out->grad[xi] * b->data[bi];
            });
        }
        if (b->requires_grad) {
            b->ensure_grad();
            detail::broadcast_walk(plan, [&](int64_t xi, int64_t bi) {
                b->grad[bi] += out->grad[xi] * x->data[xi];
            });
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix multiply: rank-2 (n,k)x(k,m) or batched rank-3 (B,n,k)x(B,k,m).

template <typename T>
TensorPtr<T> matmul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    const int ra = a->rank(), rb = b->rank();
    if (!((ra == 2 && rb == 2) || (ra == 3 && rb == 3)))
        throw ShapeError("matmul: expected both rank 2 or both rank 3, got " +
                         shape_str(a->shape) + " x " + shape_str(b->shape));
    const int64_t batch = (ra == 3) ? a->dim(0) : 1;
    const int64_t n = a->dim(ra - 2), k = a->dim(ra - 1);
    const int64_t kb = b->dim(rb - 2), m = b->dim(rb - 1);
    if (k != kb || (ra == 3 && b->dim(0) != batch))
        throw ShapeError("matmul: incompatible " + shape_str(a->shape) + " x " + shape_str(b->shape));

    Shape os = (ra == 3) ? Shape{batch, n, m} : Shape{n, m};
    auto out = make_tensor<T>(os);
    for (int64_t bt = 0; bt < batch; ++bt)
        detail::gemm_nn_acc(a->data.data() + bt * n * k, b->data.data() + bt * k * m,
                            out->data.data() + bt * n * m, n, k, m);
    return g.finish("matmul", out, {&a, &b}, [a, b, out, batch, n, k, m] {
        for (int64_t bt = 0; bt < batch; ++bt) {
            const T* dO = out->grad.data() + bt * n * m;
            if (a->requires_grad) {
                a->ensure_grad();
                detail::gemm_nt_acc(dO, b->data.data() + bt * k * m, a->grad.data() + bt * n * k, n, m, k);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::gemm_tn_acc(a->data.data() + bt * n * k, dO, b->grad.data() + bt * k * m, n, k, m);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
TensorPtr<T> reshape(Graph<T>& g, const TensorPtr<T>& x, Shape s) {
    if (numel_of(s) != x->numel())
        throw ShapeError("reshape: " + shape_str(x->shape) + " -> " + shape_str(s) + " changes element count");
    auto out = make_tensor<T>(std::move(s));
    out->data = x->data;
    return g.finish("reshape", out, {&x}, [x, out] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const int64_t n = x->numel();
        for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
    });
}

template <typename T>
TensorPtr<T> permute(Graph<T>& g, const TensorPtr<T>& x, const std::vector<int>& perm) {
    const int r = x->rank();
    if (static_cast<int>(perm.size()) != r)
        throw ShapeError("permute: order has " + std::to_string(perm.size()) + " axes for rank " + std::to_string(r));
    std::vector<char> seen(static_cast<size_t>(r), 0);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
            throw ShapeError("permute: invalid axis order");
        seen[static_cast<size_t>(p)] = 1;
    }
    Shape os(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = x->dim(perm[static_cast<size_t>(i)]);
    auto out = make_tensor<T>(os);

    // in_stride[i]: stride in x for output axis i
    auto xstr = detail::row_major_strides(x->shape);
    std::vector<int64_t> in_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) in_stride[static_cast<size_t>(i)] = xstr[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    const int64_t total = out->numel();
    auto walk = [r, total, os, in_stride](auto&& fn) {
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t xoff = 0;
        for (int64_t oi = 0; oi < total; ++oi) {
            fn(oi, xoff);
            for (int ax = r - 1; ax >= 0; --ax) {
                xoff += in_stride[static_cast<size_t>(ax)];
                if (++idx[static_cast<size_t>(ax)] < os[static_cast<size_t>(ax)]) break;
                idx[static_cast<size_t>(ax)] = 0;
                xoff -= in_stride[static_cast<size_t>(ax)] * os[static_cast<size_t>(ax)];
            }
        }
    };
    walk([&](int64_t oi, int64_t xi) { out->data[oi] = x->data[xi]; });
    return g.finish("permute", out, {&x}, [x, out, walk] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        walk([&](int64_t oi, int64_t xi) { x->grad[xi] += out->grad[oi]; });
    });
}

template <typename T>
TensorPtr<T> concat(Graph<T>& g, const std::vector<TensorPtr<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const int r = xs[0]->rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
    int64_t axis_total = 0;
    for (const auto& x : xs) {
        if (x->rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && x->dim(i) != xs[0]->dim(i))
                throw ShapeError("concat: shape mismatch " + shape_str(x->shape) + " vs " + shape_str(xs[0]->shape));
        axis_total += x->dim(axis);
    }
    Shape os = xs[0]->shape;
    os[static_cast<size_t>(axis)] = axis_total;
    auto out = make_tensor<T>(os);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];

    const int64_t orow = axis_total * inner;
    int64_t off = 0;
    for (const auto& x : xs) {
        const int64_t xrow = x->dim(axis) * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x->data.data() + o * xrow, xrow, out->data.data() + o * orow + off);
        off += xrow;
    }
    bool need = false;
    for (const auto& x : xs)
        if (x->requires_grad) { need = true; break; }
    auto xs_copy = xs;
    return g.finish_n("concat", out, need, [xs_copy, out, axis, outer, inner, orow] {
        int64_t off2 = 0;
        for (const auto& x : xs_copy) {
            const int64_t xrow = x->dim(axis) * inner;
            if (x->requires_grad) {
                x->ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = out->grad.data() + o * orow + off2;
                    T* dst = x->grad.data() + o * xrow;
                    for (int64_t i = 0; i < xrow; ++i) dst[i] += src[i];
                }
            }
            off2 += xrow;
        }
    });
}

/// Splits the given axis into parts of the listed sizes.
template <typename T>
std::vector<TensorPtr<T>> split(Graph<T>& g, const TensorPtr<T>& x, int axis,
                                const std::vector<int64_t>& sizes) {
    const int r = x->rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("split: axis out of range");
    int64_t total = 0;
    for (int64_t s : sizes) {
        if (s <= 0) throw ShapeError("split: non-positive part size");
        total += s;
    }
    if (total != x->dim(axis))
        throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                         std::to_string(x->dim(axis)));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x->dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x->dim(i);
    const int64_t xrow = x->dim(axis) * inner;

    std::vector<TensorPtr<T>> outs;
    int64_t off = 0;
    for (int64_t s : sizes) {
        Shape os = x->shape;
        os[static_cast<size_t>(axis)] = s;
        auto out = make_tensor<T>(os);
        const int64_t orow = s * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x->data.data() + o * xrow + off, orow, out->data.data() + o * orow);
        outs.push_back(std::move(out));
        off += orow;
    }
    g.finish_multi("split", outs, x->requires_grad, [x, outs, outer, inner, xrow] {
        x->ensure_grad();
        int64_t off2 = 0;
        for (const auto& out : outs) {
            const int64_t orow = out->grad.size() / static_cast<size_t>(outer);
            for (int64_t o = 0; o < outer; ++o) {
                const T* src = out->grad.data() + o * orow;
                T* dst = x->grad.data() + o * xrow + off2;
                for (int64_t i = 0; i < orow; ++i) dst[i] += src[i];
            }
            off2 += orow;
        }
    });
    return outs;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
TensorPtr<T> sum_axis(Graph<T>& g, const TensorPtr<T>& x, int axis) {
    const int r = x->rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("sum_axis: axis out of range");
    int64_t outer = 1, inner = 1;
    const int64_t na = x->dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x->dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x->dim(i);
    Shape os;
    for (int i = 0; i < r; ++i)
        if (i != axis) os.push_back(x->dim(i));
    if (os.empty()) os.push_back(1);
    auto out = make_tensor<T>(os);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < na; ++a) {
            const T* src = x->data.data() + (o * na + a) * inner;
            T* dst = out->data.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return g.finish("sum_axis", out, {&x}, [x, out, outer, inner, na] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t a = 0; a < na; ++a) {
                T* dst = x->grad.data() + (o * na + a) * inner;
                const T* src = out->grad.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

template <typename T>
TensorPtr<T> sum_all(Graph<T>& g, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(Shape{1});
    T acc = T(0);
    for (const T v : x->data) acc += v;
    out->data[0] = acc;
    return g.finish("sum_all", out, {&x}, [x, out] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const T go = out->grad[0];
        for (auto& v : x->grad) v += go;
    });
}

template <typename T>
TensorPtr<T> mean_all(Graph<T>& g, const TensorPtr<T>& x) {
    const T inv = T(1) / static_cast<T>(x->numel());
    return scale(g, sum_all(g, x), inv);
}

/// Mean over the last axis, kept as a singleton axis.
template <typename T>
TensorPtr<T> channel_mean(Graph<T>& g, const TensorPtr<T>& x) {
    const int r = x->rank();
    if (r < 1) throw ShapeError("channel_mean: rank-0 input");
    const int64_t c = x->dim(r - 1);
    const int64_t rows = x->numel() / c;
    Shape os = x->shape;
    os.back() = 1;
    auto out = make_tensor<T>(os);
    const T inv = T(1) / static_cast<T>(c);
    for (int64_t p = 0; p < rows; ++p) {
        T acc = T(0);
        const T* src = x->data.data() + p * c;
        for (int64_t i = 0; i < c; ++i) acc += src[i];
        out->data[p] = acc * inv;
    }
    return g.finish("channel_mean", out, {&x}, [x, out, rows, c, inv] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t p = 0; p < rows; ++p) {
            const T go = out->grad[p] * inv;
            T* dst = x->grad.data() + p * c;
            for (int64_t i = 0; i < c; ++i) dst[i] += go;
        }
    });
}

/// Max over the last axis, kept as a singleton axis. Gradient flows to the
/// first maximal element of each row, keeping reruns bit-identical.
template <typename T>
TensorPtr<T> channel_max(Graph<T>& g, const TensorPtr<T>& x) {
    const int r = x->rank();
    if (r < 1) throw ShapeError("channel_max: rank-0 input");
    const int64_t c = x->dim(r - 1);
    const int64_t rows = x->numel() / c;
    Shape os = x->shape;
    os.back() = 1;
    auto out = make_tensor<T>(os);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(rows));
    for (int64_t p = 0; p < rows; ++p) {
        const T* src = x->data.data() + p * c;
        int64_t best = 0;
        for (int64_t i = 1; i < c; ++i)
            if (src[i] > src[best]) best = i;
        (*argmax)[static_cast<size_t>(p)] = best;
        out->data[p] = src[best];
    }
    return g.finish("channel_max", out, {&x}, [x, out, rows, c, argmax] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t p = 0; p < rows; ++p)
            x->grad[p * c + (*argmax)[static_cast<size_t>(p)]] += out->grad[p];
    });
}

/// (N, ..., C) -> (N, C), averaging over all interior axes.
template <typename T>
TensorPtr<T> global_avg_pool(Graph<T>& g, const TensorPtr<T>& x) {
    const int r = x->rank();
    if (r < 3) throw ShapeError("global_avg_pool: need rank >= 3");
    const int64_t n = x->dim(0), c = x->dim(r - 1);
    const int64_t p = x->numel() / (n * c);
    auto out = make_tensor<T>(Shape{n, c});
    const T inv = T(1) / static_cast<T>(p);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t q = 0; q < p; ++q) {
            const T* src = x->data.data() + (b * p + q) * c;
            T* dst = out->data.data() + b * c;
            for (int64_t i = 0; i < c; ++i) dst[i] += src[i] * inv;
        }
    return g.finish("global_avg_pool", out, {&x}, [x, out, n, p, c, inv] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t q = 0; q < p; ++q) {
                T* dst = x->grad.data() + (b * p + q) * c;
                const T* src = out->grad.data() + b * c;
                for (int64_t i = 0; i < c; ++i) dst[i] += src[i] * inv;
            }
    });
}

/// (N, ..., C) -> (N, C), max over all interior axes; first-max gradient routing.
template <typename T>
TensorPtr<T> global_max_pool(Graph<T>& g, const TensorPtr<T>& x) {
    const int r = x->rank();
    if (r < 3) throw ShapeError("global_max_pool: need rank >= 3");
    const int64_t n = x->dim(0), c = x->dim(r - 1);
    const int64_t p = x->numel() / (n * c);
    auto out = make_tensor<T>(Shape{n, c});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c), 0);
    for (int64_t b = 0; b < n; ++b) {
        T* dst = out->data.data() + b * c;
        for (int64_t i = 0; i < c; ++i) dst[i] = x->data[(b * p) * c + i];
        for (int64_t q = 1; q < p; ++q) {
            const T* src = x->data.data() + (b * p + q) * c;
            for (int64_t i = 0; i < c; ++i)
                if (src[i] > dst[i]) {
                    dst[i] = src[i];
                    (*argmax)[static_cast<size_t>(b * c + i)] = q;
                }
        }
    }
    return g.finish("global_max_pool", out, {&x}, [x, out, n, p, c, argmax] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t i = 0; i < c; ++i) {
                const int64_t q = (*argmax)[static_cast<size_t>(b * c + i)];
                x->grad[(b * p + q) * c + i] += out->grad[b * c + i];
            }
    });
}

// ---------------------------------------------------------------------------
// Activations and row-wise normalizers

template <typename T>
TensorPtr<T> sigmoid(Graph<T>& g, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = x->data[i];
        out->data[i] = (v >= T(0)) ? T(1) / (T(1) + std::exp(-v))
                                   : std::exp(v) / (T(1) + std::exp(v));
    }
    return g.finish("sigmoid", out, {&x}, [x, out, n] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const T s = out->data[i];
            x->grad[i] += out->grad[i] * s * (T(1) - s);
        }
    });
}

/// Exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2))).
template <typename T>
TensorPtr<T> gelu(Graph<T>& g, const TensorPtr<T>& x) {
    static const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
    static const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
    auto out = make_tensor<T>(x->shape);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = x->data[i];
        out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    return g.finish("gelu", out, {&x}, [x, out, n] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const T v = x->data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            x->grad[i] += out->grad[i] * (cdf + v * pdf);
        }
    });
}

/// Softmax over the last axis with max-subtraction.
template <typename T>
TensorPtr<T> softmax(Graph<T>& g, const TensorPtr<T>& x) {
    const int64_t c = x->dim(x->rank() - 1);
    const int64_t rows = x->numel() / c;
    auto out = make_tensor<T>(x->shape);
    for (int64_t p = 0; p < rows; ++p) {
        const T* src = x->data.data() + p * c;
        T* dst = out->data.data() + p * c;
        T mx = src[0];
        for (int64_t i = 1; i < c; ++i) mx = std::max(mx, src[i]);
        T z = T(0);
        for (int64_t i = 0; i < c; ++i) {
            dst[i] = std::exp(src[i] - mx);
            z += dst[i];
        }
        const T inv = T(1) / z;
        for (int64_t i = 0; i < c; ++i) dst[i] *= inv;
    }
    return g.finish("softmax", out, {&x}, [x, out, rows, c] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t p = 0; p < rows; ++p) {
            const T* y = out->data.data() + p * c;
            const T* dy = out->grad.data() + p * c;
            T dot = T(0);
            for (int64_t i = 0; i < c; ++i) dot += y[i] * dy[i];
            T* dx = x->grad.data() + p * c;
            for (int64_t i = 0; i < c; ++i) dx[i] += y[i] * (dy[i] - dot);
        }
    });
}

/// Log-softmax over the last axis (stable log-sum-exp).
template <typename T>
TensorPtr<T> log_softmax(Graph<T>& g, const TensorPtr<T>& x) {
    const int64_t c = x->dim(x->rank() - 1);
    const int64_t rows = x->numel() / c;
    auto out = make_tensor<T>(x->shape);
    for (int64_t p = 0; p < rows; ++p) {
        const T* src = x->data.data() + p * c;
        T* dst = out->data.data() + p * c;
        T mx = src[0];
        for (int64_t i = 1; i < c; ++i) mx = std::max(mx, src[i]);
        T z = T(0);
        for (int64_t i = 0; i < c; ++i) z += std::exp(src[i] - mx);
        const T lse = mx + std::log(z);
        for (int64_t i = 0; i < c; ++i) dst[i] = src[i] - lse;
    }
    return g.finish("log_softmax", out, {&x}, [x, out, rows, c] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t p = 0; p < rows; ++p) {
            const T* y = out->data.data() + p * c;
            const T* dy = out->grad.data() + p * c;
            T tot = T(0);
            for (int64_t i = 0; i < c; ++i) tot += dy[i];
            T* dx = x->grad.data() + p * c;
            for (int64_t i = 0; i < c; ++i) dx[i] += dy[i] - std::exp(y[i]) * tot;
        }
    });
}

// ---------------------------------------------------------------------------
// Row gather (embedding-table lookup)

template <typename T>
TensorPtr<T> gather_rows(Graph<T>& g, const TensorPtr<T>& table,
                         const std::shared_ptr<std::vector<int64_t>>& idx) {
    if (table->rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
    const int64_t rows = table->dim(0), width = table->dim(1);
    for (int64_t i : *idx)
        if (i < 0 || i >= rows) throw ShapeError("gather_rows: index out of range");
    auto out = make_tensor<T>(Shape{static_cast<int64_t>(idx->size()), width});
    for (size_t p = 0; p < idx->size(); ++p)
        std::copy_n(table->data.data() + (*idx)[p] * width, width,
                    out->data.data() + static_cast<int64_t>(p) * width);
    return g.finish("gather_rows", out, {&table}, [table, out, idx, width] {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (size_t p = 0; p < idx->size(); ++p) {
            const T* src = out->grad.data() + static_cast<int64_t>(p) * width;
            T* dst = table->grad.data() + (*idx)[p] * width;
            for (int64_t i = 0; i < width; ++i) dst[i] += src[i];
        }
    });
}

}  // namespace smx
