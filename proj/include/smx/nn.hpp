#pragma once

#include "smx/ops.hpp"

namespace smx {

// ---------------------------------------------------------------------------
// Normalization. Both norms use channels-last layout: the normalized axis is
// the trailing one.

/// Batch normalization over all leading axes per trailing channel. Training
/// mode normalizes with biased batch statistics and folds them into the
/// running buffers; eval mode is a pure affine map from the running buffers.
template <typename T>
TensorPtr<T> batch_norm(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, const TensorPtr<T>& run_mean,
                        const TensorPtr<T>& run_var, bool training,
                        T momentum = T(0.1), T eps = T(1e-5)) {
    const int64_t c = x->dim(x->rank() - 1);
    if (gamma->numel() != c || beta->numel() != c || run_mean->numel() != c || run_var->numel() != c)
        throw ShapeError("batch_norm: parameter length != channel count " + std::to_string(c));
    const int64_t rows = x->numel() / c;
    auto out = make_tensor<T>(x->shape);

    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(c), T(0));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(c), T(0));
    if (training) {
        std::vector<T> var(static_cast<size_t>(c), T(0));
        for (int64_t p = 0; p < rows; ++p) {
            const T* src = x->data.data() + p * c;
            for (int64_t i = 0; i < c; ++i) (*mean)[static_cast<size_t>(i)] += src[i];
        }
        const T inv_n = T(1) / static_cast<T>(rows);
        for (int64_t i = 0; i < c; ++i) (*mean)[static_cast<size_t>(i)] *= inv_n;
        for (int64_t p = 0; p < rows; ++p) {
            const T* src = x->data.data() + p * c;
            for (int64_t i = 0; i < c; ++i) {
                const T d = src[i] - (*mean)[static_cast<size_t>(i)];
                var[static_cast<size_t>(i)] += d * d;
            }
        }
        for (int64_t i = 0; i < c; ++i) var[static_cast<size_t>(i)] *= inv_n;
        for (int64_t i = 0; i < c; ++i)
            (*inv_std)[static_cast<size_t>(i)] = T(1) / std::sqrt(var[static_cast<size_t>(i)] + eps);
        for (int64_t i = 0; i < c; ++i) {
            run_mean->data[i] = (T(1) - momentum) * run_mean->data[i] + momentum * (*mean)[static_cast<size_t>(i)];
            run_var->data[i] = (T(1) - momentum) * run_var->data[i] + momentum * var[static_cast<size_t>(i)];
        }
    } else {
        for (int64_t i = 0; i < c; ++i) {
            (*mean)[static_cast<size_t>(i)] = run_mean->data[i];
            (*inv_std)[static_cast<size_t>(i)] = T(1) / std::sqrt(run_var->data[i] + eps);
        }
    }
    for (int64_t p = 0; p < rows; ++p) {
        const T* src = x->data.data() + p * c;
        T* dst = out->data.data() + p * c;
        for (int64_t i = 0; i < c; ++i)
            dst[i] = ((src[i] - (*mean)[static_cast<size_t>(i)]) * (*inv_std)[static_cast<size_t>(i)]) *
                         gamma->data[i] + beta->data[i];
    }
    return g.finish("batch_norm", out, {&x, &gamma, &beta},
                    [x, gamma, beta, out, mean, inv_std, rows, c, training] {
        std::vector<T> sum_dy(static_cast<size_t>(c), T(0));
        std::vector<T> sum_dy_xhat(static_cast<size_t>(c), T(0));
        for (int64_t p = 0; p < rows; ++p) {
            const T* src = x->data.data() + p * c;
            const T* dy = out->grad.data() + p * c;
            for (int64_t i = 0; i < c; ++i) {
                const T xh = (src[i] - (*mean)[static_cast<size_t>(i)]) * (*inv_std)[static_cast<size_t>(i)];
                sum_dy[static_cast<size_t>(i)] += dy[i];
                sum_dy_xhat[static_cast<size_t>(i)] += dy[i] * xh;
            }
        }
        if (gamma->requires_grad) {
            gamma->ensure_grad();
            for (int64_t i = 0; i < c; ++i) gamma->grad[i] += sum_dy_xhat[static_cast<size_t>(i)];
        }
        if (beta->requires_grad) {
            beta->ensure_grad();
            for (int64_t i = 0; i < c; ++i) beta->grad[i] += sum_dy[static_cast<size_t>(i)];
        }
        if (!x->requires_grad) return;
        x->ensure_grad();
        const T inv_n = T(1) / static_cast<T>(rows);
        for (int64_t p = 0; p < rows; ++p) {
            const T* src = x->data.data() + p * c;
            const T* dy = out->grad.data() + p * c;
            T* dx = x->grad.data() + p * c;
            for (int64_t i = 0; i < c; ++i) {
                const size_t ci = static_cast<size_t>(i);
                const T gs = gamma->data[i] * (*inv_std)[ci];
                if (training) {
                    const T xh = (src[i] - (*mean)[ci]) * (*inv_std)[ci];
                    dx[i] += gs * (dy[i] - inv_n * sum_dy[ci] - xh * inv_n * sum_dy_xhat[ci]);
                } else {
                    dx[i] += gs * dy[i];
                }
            }
        }
    });
}

/// Layer normalization over the trailing axis.
template <typename T>
TensorPtr<T> layer_norm(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, T eps = T(1e-5)) {
    const int64_t c = x->dim(x->rank() - 1);
    if (gamma->numel() != c || beta->numel() != c)
        throw ShapeError("layer_norm: parameter length != trailing axis " + std::to_string(c));
    const int64_t rows = x->numel() / c;
    auto out = make_tensor<T>(x->shape);
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T inv_c = T(1) / static_cast<T>(c);
    for (int64_t p = 0; p < rows; ++p) {
        const T* src = x->data.data() + p * c;
        T m = T(0);
        for (int64_t i = 0; i < c; ++i) m += src[i];
        m *= inv_c;
        T v = T(0);
        for (int64_t i = 0; i < c; ++i) {
            const T d = src[i] - m;
            v += d * d;
        }
        v *= inv_c;
        const T is = T(1) / std::sqrt(v + eps);
        (*mean)[static_cast<size_t>(p)] = m;
        (*inv_std)[static_cast<size_t>(p)] = is;
        T* dst = out->data.data() + p * c;
        for (int64_t i = 0; i < c; ++i) dst[i] = (src[i] - m) * is * gamma->data[i] + beta->data[i];
    }
    return g.finish("layer_norm", out, {&x, &gamma, &beta},
                    [x, gamma, beta, out, mean, inv_std, rows, c, inv_c] {
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int64_t p = 0; p < rows; ++p) {
            const T* src = x->data.data() + p * c;
            const T* dy = out->grad.data() + p * c;
            const T m = (*mean)[static_cast<size_t>(p)];
            const T is = (*inv_std)[static_cast<size_t>(p)];
            T sum_dyg = T(0), sum_dyg_xhat = T(0);
            for (int64_t i = 0; i < c; ++i) {
                const T xh = (src[i] - m) * is;
                const T dg = dy[i] * gamma->data[i];
                sum_dyg += dg;
                sum_dyg_xhat += dg * xh;
                if (gamma->requires_grad) gamma->grad[i] += dy[i] * xh;
                if (beta->requires_grad) beta->grad[i] += dy[i];
            }
            if (!x->requires_grad) continue;
            T* dx = x->grad.data() + p * c;
            for (int64_t i = 0; i < c; ++i) {
                const T xh = (src[i] - m) * is;
                const T dg = dy[i] * gamma->data[i];
                dx[i] += is * (dg - inv_c * sum_dyg - xh * inv_c * sum_dyg_xhat);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution via patch gathering plus matmul. Inputs are channels-last:
// 2D (N, H, W, C), 3D (N, H, W, D, C). Padding is zero-fill.

/// (N, H, W, C) -> (N*Ho*Wo, kh*kw*C)
template <typename T>
TensorPtr<T> im2col2d(Graph<T>& g, const TensorPtr<T>& x, int kh, int kw, int stride, int pad) {
    if (x->rank() != 4) throw ShapeError("im2col2d: expected (N,H,W,C)");
    const int64_t n = x->dim(0), h = x->dim(1), w = x->dim(2), c = x->dim(3);
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (w + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("im2col2d: kernel larger than padded input");
    auto out = make_tensor<T>(Shape{n * ho * wo, static_cast<int64_t>(kh) * kw * c});
    T* dst = out->data.data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox)
                for (int ky = 0; ky < kh; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                            std::copy_n(x->data.data() + ((b * h + iy) * w + ix) * c, c, dst);
                        else
                            std::fill_n(dst, c, T(0));
                        dst += c;
                    }
                }
    return g.finish("im2col2d", out, {&x}, [x, out, n, h, w, c, ho, wo, kh, kw, stride, pad] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const T* src = out->grad.data();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int64_t iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                                T* dx = x->grad.data() + ((b * h + iy) * w + ix) * c;
                                for (int64_t i = 0; i < c; ++i) dx[i] += src[i];
                            }
                            src += c;
                        }
                    }
    });
}

/// (N, H, W, D, C) -> (N*Ho*Wo*Do, k^3*C) for a cubic kernel.
template <typename T>
TensorPtr<T> im2col3d(Graph<T>& g, const TensorPtr<T>& x, int k, int stride, int pad) {
    if (x->rank() != 5) throw ShapeError("im2col3d: expected (N,H,W,D,C)");
    const int64_t n = x->dim(0), h = x->dim(1), w = x->dim(2), d = x->dim(3), c = x->dim(4);
    const int64_t ho = (h + 2 * pad - k) / stride + 1;
    const int64_t wo = (w + 2 * pad - k) / stride + 1;
    const int64_t dout = (d + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0 || dout <= 0) throw ShapeError("im2col3d: kernel larger than padded input");
    auto out = make_tensor<T>(Shape{n * ho * wo * dout, static_cast<int64_t>(k) * k * k * c});
    T* dst = out->data.data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox)
                for (int64_t oz = 0; oz < dout; ++oz)
                    for (int ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < k; ++kx) {
                            const int64_t ix = ox * stride - pad + kx;
                            for (int kz = 0; kz < k; ++kz) {
                                const int64_t iz = oz * stride - pad + kz;
                                if (iy >= 0 && iy < h && ix >= 0 && ix < w && iz >= 0 && iz < d)
                                    std::copy_n(x->data.data() + (((b * h + iy) * w + ix) * d + iz) * c, c, dst);
                                else
                                    std::fill_n(dst, c, T(0));
                                dst += c;
                            }
                        }
                    }
    return g.finish("im2col3d", out, {&x}, [x, out, n, h, w, d, c, ho, wo, dout, k, stride, pad] {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const T* src = out->grad.data();
        for (int64_t b = 0; b < n; ++b)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox)
                    for (int64_t oz = 0; oz < dout; ++oz)
                        for (int ky = 0; ky < k; ++ky) {
                            const int64_t iy = oy * stride - pad + ky;
                            for (int kx = 0; kx < k; ++kx) {
                                const int64_t ix = ox * stride - pad + kx;
                                for (int kz = 0; kz < k; ++kz) {
                                    const int64_t iz = oz * stride - pad + kz;
                                    if (iy >= 0 && iy < h && ix >= 0 && ix < w && iz >= 0 && iz < d) {
                                        T* dx = x->grad.data() + (((b * h + iy) * w + ix) * d + iz) * c;
                                        for (int64_t i = 0; i < c; ++i) dx[i] += src[i];
                                    }
                                    src += c;
                                }
                            }
                        }
    });
}

/// Linear map over the trailing axis: w is (Cin, Cout), bias optional.
template <typename T>
TensorPtr<T> pointwise(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& w,
                       const TensorPtr<T>& b = nullptr) {
    const int64_t cin = x->dim(x->rank() - 1);
    if (w->rank() != 2 || w->dim(0) != cin)
        throw ShapeError("pointwise: weight " + shape_str(w->shape) + " does not accept " +
                         std::to_string(cin) + " channels");
    Shape os = x->shape;
    os.back() = w->dim(1);
    auto flat = reshape(g, x, Shape{x->numel() / cin, cin});
    auto y = matmul(g, flat, w);
    if (b) y = broadcast_add(g, y, b);
    return reshape(g, y, os);
}

/// Full 2D convolution: w is (kh*kw*Cin, Cout) with rows ordered (ky, kx, cin).
template <typename T>
TensorPtr<T> conv2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& w,
                    const TensorPtr<T>& b, int kh, int kw, int stride, int pad) {
    const int64_t n = x->dim(0), c = x->dim(3);
    if (w->rank() != 2 || w->dim(0) != static_cast<int64_t>(kh) * kw * c)
        throw ShapeError("conv2d: weight rows != kh*kw*Cin");
    const int64_t ho = (x->dim(1) + 2 * pad - kh) / stride + 1;
    const int64_t wo = (x->dim(2) + 2 * pad - kw) / stride + 1;
    auto cols = im2col2d(g, x, kh, kw, stride, pad);
    auto y = matmul(g, cols, w);
    if (b) y = broadcast_add(g, y, b);
    return reshape(g, y, Shape{n, ho, wo, w->dim(1)});
}

/// Depthwise 2D convolution: w is (k*k, C); each channel is filtered alone.
template <typename T>
TensorPtr<T> depthwise2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& w,
                         const TensorPtr<T>& b, int k, int stride, int pad) {
    const int64_t n = x->dim(0), c = x->dim(3);
    if (w->rank() != 2 || w->dim(0) != static_cast<int64_t>(k) * k || w->dim(1) != c)
        throw ShapeError("depthwise2d: weight must be (k*k, C)");
    const int64_t ho = (x->dim(1) + 2 * pad - k) / stride + 1;
    const int64_t wo = (x->dim(2) + 2 * pad - k) / stride + 1;
    auto cols = im2col2d(g, x, k, k, stride, pad);                       // (P, k*k*C)
    auto tiles = reshape(g, cols, Shape{n * ho * wo, static_cast<int64_t>(k) * k, c});
    auto prod = broadcast_mul(g, tiles, w);                              // w aligns to (k*k, C)
    auto summed = sum_axis(g, prod, 1);                                  // (P, C)
    auto y = b ? broadcast_add(g, summed, b) : summed;
    return reshape(g, y, Shape{n, ho, wo, c});
}

/// Full 3D convolution with cubic kernel: w is (k^3*Cin, Cout).
template <typename T>
TensorPtr<T> conv3d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& w,
                    const TensorPtr<T>& b, int k, int stride, int pad) {
    const int64_t n = x->dim(0), c = x->dim(4);
    if (w->rank() != 2 || w->dim(0) != static_cast<int64_t>(k) * k * k * c)
        throw ShapeError("conv3d: weight rows != k^3*Cin");
    const int64_t ho = (x->dim(1) + 2 * pad - k) / stride + 1;
    const int64_t wo = (x->dim(2) + 2 * pad - k) / stride + 1;
    const int64_t dout = (x->dim(3) + 2 * pad - k) / stride + 1;
    auto cols = im2col3d(g, x, k, stride, pad);
    auto y = matmul(g, cols, w);
    if (b) y = broadcast_add(g, y, b);
    return reshape(g, y, Shape{n, ho, wo, dout, w->dim(1)});
}

/// Transposed 3D convolution, kernel 2, stride 2 (exact side doubling).
/// w is (Cin, 8*Cout) with columns ordered (ky, kx, kz, cout); each input
/// voxel expands into its own 2x2x2 output cell, so this is a pointwise map
/// followed by depth-to-space.
template <typename T>
TensorPtr<T> conv3d_transpose2x(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& w,
                                const TensorPtr<T>& b) {
    if (x->rank() != 5) throw ShapeError("conv3d_transpose2x: expected (N,H,W,D,C)");
    const int64_t n = x->dim(0), h = x->dim(1), ww = x->dim(2), d = x->dim(3), c = x->dim(4);
    if (w->rank() != 2 || w->dim(0) != c || w->dim(1) % 8 != 0)
        throw ShapeError("conv3d_transpose2x: weight must be (Cin, 8*Cout)");
    const int64_t cout = w->dim(1) / 8;
    auto y = pointwise(g, x, w);                                          // (N,H,W,D,8*Cout)
    auto cell = reshape(g, y, Shape{n, h, ww, d, 2, 2, 2, cout});
    auto moved = permute(g, cell, {0, 1, 4, 2, 5, 3, 6, 7});              // (N,H,2,W,2,D,2,Cout)
    auto out = reshape(g, moved, Shape{n, 2 * h, 2 * ww, 2 * d, cout});
    if (b) out = broadcast_add(g, out, b);
    return out;
}

}  // namespace smx
