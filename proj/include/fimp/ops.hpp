#pragma once

// Differentiable primitives over Tensor<T>. Every op computes its forward
// result and, when a tape is active and any input requires grad, records a
// closure that accumulates into the inputs' gradient buffers. All reductions
// run in a fixed index order so repeated runs are bitwise identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "fimp/tensor.hpp"

namespace fimp {

namespace detail {

template <class T>
inline bool track(Tensor<T>& out, bool any_input_grad) {
    if (Tape<T>::current() != nullptr && any_input_grad) {
        out.set_requires_grad(true);
        return true;
    }
    return false;
}

template <class T>
inline void require_2d(const Tensor<T>& t, const char* op) {
    if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_str(t.shape()));
}

}  // namespace detail

template <class T>
inline bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ---------------------------------------------------------------- matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out({m, n});
    {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        T* po = out.data().data();
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = pa + i * k;
            T* orow = po + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                if (av == T(0)) continue;
                const T* brow = pb + kk * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    if (detail::track(out, a.requires_grad() || b.requires_grad())) {
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::current()->record([ac, bc, oc]() mutable {
            const std::size_t m = ac.rows(), k = ac.cols(), n = bc.cols();
            const T* go = oc.grad().data();
            if (ac.requires_grad()) {
                T* ga = ac.grad().data();
                const T* pb = bc.data().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T* grow = go + i * n;
                        const T* brow = pb + kk * n;
                        T s = T(0);
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + kk] += s;
                    }
            }
            if (bc.requires_grad()) {
                T* gb = bc.grad().data();
                const T* pa = ac.data().data();
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i) {
                        const T av = pa[i * k + kk];
                        if (av == T(0)) continue;
                        const T* grow = go + i * n;
                        T* brow = gb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- transpose

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    detail::require_2d(x, "transpose");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            const std::size_t m = xc.rows(), n = xc.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xc.grad()[i * n + j] += oc.grad()[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------- add / sub / mul

namespace detail {

enum class Broadcast { same, row, scalar };

template <class T>
inline Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (b.size() == 1) return Broadcast::scalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
    throw ShapeError(std::string(op) + ": shapes not broadcast-compatible, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Elementwise combine with gradient closure; F/GA/GB are scalar functors.
template <class T, class F, class GA, class GB>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, GA ga_of, GB gb_of) {
    require_2d(a, op);
    require_2d(b, op);
    const Broadcast kind = broadcast_kind(a, b, op);
    const std::size_t rows = a.rows(), cols = a.cols();
    Tensor<T> out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const T bv = kind == Broadcast::same ? b.at(i, j) : (kind == Broadcast::row ? b.at(0, j) : b.at(0));
            out.at(i, j) = f(a.at(i, j), bv);
        }
    if (track(out, a.requires_grad() || b.requires_grad())) {
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::current()->record([ac, bc, oc, kind, ga_of, gb_of]() mutable {
            const std::size_t rows = ac.rows(), cols = ac.cols();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) {
                    const std::size_t bi = kind == Broadcast::same ? i * cols + j : (kind == Broadcast::row ? j : 0);
                    const T g = oc.grad()[i * cols + j];
                    const T av = ac.data()[i * cols + j];
                    const T bv = bc.data()[bi];
                    if (ac.requires_grad()) ac.grad()[i * cols + j] += g * ga_of(av, bv);
                    if (bc.requires_grad()) bc.grad()[bi] += g * gb_of(av, bv);
                }
        });
    }
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

// ---------------------------------------------------------------- unary elementwise

namespace detail {

template <class T, class F, class G>
Tensor<T> unary(const Tensor<T>& x, F f, G df) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = f(x.at(i));
    if (track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc, df]() mutable {
            if (!xc.requires_grad()) return;
            for (std::size_t i = 0; i < xc.size(); ++i) xc.grad()[i] += oc.grad()[i] * df(xc.data()[i]);
        });
    }
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary(
        x, [c](T v) { return c * v; }, [c](T) { return c; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return detail::unary(
        x, [slope](T v) { return v > T(0) ? v : slope * v; }, [slope](T v) { return v > T(0) ? T(1) : slope; });
}

// Exact erf formulation, not the tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary(
        x,
        [](T v) {
            const double z = static_cast<double>(v);
            return static_cast<T>(0.5 * z * (1.0 + std::erf(z * inv_sqrt2)));
        },
        [](T v) {
            const double z = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(z * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * z * z);
            return static_cast<T>(cdf + z * pdf);
        });
}

// ---------------------------------------------------------------- softmax

// Row-wise softmax with max-subtraction. The reduction order is the row's
// storage order; callers that need storage-order invariance canonicalize
// their rows first (see cross_attend).
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    detail::require_2d(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        T mx = x.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        T denom = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            denom += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= denom;
    }
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            const std::size_t m = xc.rows(), n = xc.cols();
            for (std::size_t i = 0; i < m; ++i) {
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j) dot += oc.grad()[i * n + j] * oc.data()[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    xc.grad()[i * n + j] += oc.data()[i * n + j] * (oc.grad()[i * n + j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- layer norm

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    detail::require_2d(x, "layer_norm");
    const std::size_t m = x.rows(), d = x.cols();
    if (gain.size() != d || bias.size() != d)
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries, got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
    Tensor<T> out({m, d});
    Tensor<T> xhat({m, d});
    std::vector<T> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        T mean = T(0);
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (x.at(i, j) - mean) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = xh * gain.at(j) + bias.at(j);
        }
    }
    if (detail::track(out, x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        Tensor<T> xc = x, gc = gain, bc = bias, oc = out;
        Tape<T>::current()->record([xc, gc, bc, oc, xhat, inv_std]() mutable {
            const std::size_t m = xc.rows(), d = xc.cols();
            for (std::size_t i = 0; i < m; ++i) {
                if (gc.requires_grad())
                    for (std::size_t j = 0; j < d; ++j) gc.grad()[j] += oc.grad()[i * d + j] * xhat.at(i, j);
                if (bc.requires_grad())
                    for (std::size_t j = 0; j < d; ++j) bc.grad()[j] += oc.grad()[i * d + j];
                if (xc.requires_grad()) {
                    // dxhat = dy * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * inv_std
                    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = oc.grad()[i * d + j] * gc.data()[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat.at(i, j);
                    }
                    mean_dxhat /= static_cast<T>(d);
                    mean_dxhat_xhat /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = oc.grad()[i * d + j] * gc.data()[j];
                        xc.grad()[i * d + j] += (dxh - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat) * inv_std[i];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "concat_cols");
    detail::require_2d(b, "concat_cols");
    if (a.rows() != b.rows())
        throw ShapeError("concat_cols: row counts differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
    Tensor<T> out({m, p + q});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) out.at(i, j) = a.at(i, j);
        for (std::size_t j = 0; j < q; ++j) out.at(i, p + j) = b.at(i, j);
    }
    if (detail::track(out, a.requires_grad() || b.requires_grad())) {
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::current()->record([ac, bc, oc]() mutable {
            const std::size_t m = ac.rows(), p = ac.cols(), q = bc.cols();
            for (std::size_t i = 0; i < m; ++i) {
                if (ac.requires_grad())
                    for (std::size_t j = 0; j < p; ++j) ac.grad()[i * p + j] += oc.grad()[i * (p + q) + j];
                if (bc.requires_grad())
                    for (std::size_t j = 0; j < q; ++j) bc.grad()[i * q + j] += oc.grad()[i * (p + q) + p + j];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty part list");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.cols() != n)
            throw ShapeError("concat_rows: column counts differ, " + shape_str(parts.front().shape()) + " vs " +
                             shape_str(p.shape()));
        m += p.rows();
        any_grad = any_grad || p.requires_grad();
    }
    Tensor<T> out({m, n});
    std::size_t r = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + r * n);
        r += p.rows();
    }
    if (detail::track(out, any_grad)) {
        std::vector<Tensor<T>> pc = parts;
        Tensor<T> oc = out;
        Tape<T>::current()->record([pc, oc]() mutable {
            const std::size_t n = oc.cols();
            std::size_t r = 0;
            for (auto& p : pc) {
                if (p.requires_grad())
                    for (std::size_t i = 0; i < p.size(); ++i) p.grad()[i] += oc.grad()[r * n + i];
                r += p.rows();
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
    detail::require_2d(x, "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (start + len > n)
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for " + shape_str(x.shape()));
    Tensor<T> out({m, len});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) out.at(i, j) = x.at(i, start + j);
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc, start, len]() mutable {
            if (!xc.requires_grad()) return;
            const std::size_t m = xc.rows(), n = xc.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < len; ++j) xc.grad()[i * n + start + j] += oc.grad()[i * len + j];
        });
    }
    return out;
}

// Row gather; doubles as embedding lookup (table f_max x d, ids -> rows).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& ids) {
    detail::require_2d(x, "gather_rows");
    const std::size_t n = x.cols();
    for (std::size_t id : ids)
        if (id >= x.rows())
            throw ShapeError("gather_rows: row id " + std::to_string(id) + " out of range for " +
                             shape_str(x.shape()));
    Tensor<T> out({ids.size(), n});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy(x.data().begin() + ids[r] * n, x.data().begin() + (ids[r] + 1) * n, out.data().begin() + r * n);
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc, ids]() mutable {
            if (!xc.requires_grad()) return;
            const std::size_t n = xc.cols();
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) xc.grad()[ids[r] * n + j] += oc.grad()[r * n + j];
        });
    }
    return out;
}

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
    return gather_rows(table, ids);
}

// Broadcast a 1 x d row to m rows.
template <class T>
Tensor<T> tile_rows(const Tensor<T>& v, std::size_t m) {
    detail::require_2d(v, "tile_rows");
    if (v.rows() != 1) throw ShapeError("tile_rows: expected a single row, got " + shape_str(v.shape()));
    const std::size_t d = v.cols();
    Tensor<T> out({m, d});
    for (std::size_t i = 0; i < m; ++i) std::copy(v.data().begin(), v.data().end(), out.data().begin() + i * d);
    if (detail::track(out, v.requires_grad())) {
        Tensor<T> vc = v, oc = out;
        Tape<T>::current()->record([vc, oc, m]() mutable {
            if (!vc.requires_grad()) return;
            const std::size_t d = vc.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) vc.grad()[j] += oc.grad()[i * d + j];
        });
    }
    return out;
}

// Per-row scaling by constant coefficients (no gradient path into coeffs).
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, const std::vector<T>& coeffs) {
    detail::require_2d(x, "scale_rows");
    if (coeffs.size() != x.rows())
        throw ShapeError("scale_rows: " + std::to_string(coeffs.size()) + " coefficients for " +
                         shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = coeffs[i] * x.at(i, j);
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc, coeffs]() mutable {
            if (!xc.requires_grad()) return;
            const std::size_t m = xc.rows(), n = xc.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xc.grad()[i * n + j] += coeffs[i] * oc.grad()[i * n + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    detail::require_2d(x, "mean_axis");
    if (axis > 1) throw ShapeError("mean_axis: axis must be 0 or 1");
    const std::size_t m = x.rows(), n = x.cols();
    const std::size_t out_rows = axis == 0 ? 1 : m;
    const std::size_t out_cols = axis == 0 ? n : 1;
    const T denom = static_cast<T>(axis == 0 ? m : n);
    Tensor<T> out({out_rows, out_cols});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(axis == 0 ? j : i) += x.at(i, j);
    for (auto& v : out.data()) v /= denom;
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc, axis, denom]() mutable {
            if (!xc.requires_grad()) return;
            const std::size_t m = xc.rows(), n = xc.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    xc.grad()[i * n + j] += oc.grad()[axis == 0 ? j : i] / denom;
        });
    }
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            for (std::size_t i = 0; i < xc.size(); ++i) xc.grad()[i] += oc.grad()[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------- dropout

// Inverted dropout with a stored mask; identity when not training or rate 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x.size());
    for (auto& m : mask) m = rng.uniform() >= rate ? keep_scale : T(0);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = x.at(i) * mask[i];
    if (detail::track(out, x.requires_grad())) {
        Tensor<T> xc = x, oc = out;
        Tape<T>::current()->record([xc, oc, mask]() mutable {
            if (!xc.requires_grad()) return;
            for (std::size_t i = 0; i < xc.size(); ++i) xc.grad()[i] += oc.grad()[i] * mask[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------- losses

// Mean squared error over the rows flagged in row_mask only (all columns of a
// flagged row count). No flagged rows -> constant 0 with no gradient.
template <class T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<std::uint8_t>& row_mask) {
    detail::require_2d(pred, "masked_mse");
    if (pred.shape() != target.shape())
        throw ShapeError("masked_mse: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
    if (row_mask.size() != pred.rows())
        throw ShapeError("masked_mse: mask has " + std::to_string(row_mask.size()) + " rows for " +
                         shape_str(pred.shape()));
    const std::size_t m = pred.rows(), c = pred.cols();
    std::size_t masked = 0;
    for (auto b : row_mask) masked += b ? 1 : 0;
    if (masked == 0) return Tensor<T>::scalar(T(0));
    const T denom = static_cast<T>(masked * c);
    T s = T(0);
    for (std::size_t i = 0; i < m; ++i) {
        if (!row_mask[i]) continue;
        for (std::size_t j = 0; j < c; ++j) {
            const T dlt = pred.at(i, j) - target.at(i, j);
            s += dlt * dlt;
        }
    }
    Tensor<T> out = Tensor<T>::scalar(s / denom);
    if (detail::track(out, pred.requires_grad())) {
        Tensor<T> pc = pred, tc = target, oc = out;
        Tape<T>::current()->record([pc, tc, oc, row_mask, denom]() mutable {
            if (!pc.requires_grad()) return;
            const std::size_t m = pc.rows(), c = pc.cols();
            const T g = oc.grad()[0];
            for (std::size_t i = 0; i < m; ++i) {
                if (!row_mask[i]) continue;
                for (std::size_t j = 0; j < c; ++j)
                    pc.grad()[i * c + j] += g * T(2) * (pc.data()[i * c + j] - tc.data()[i * c + j]) / denom;
            }
        });
    }
    return out;
}

// Mean cross entropy from logits; labels index classes per row.
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
    detail::require_2d(logits, "cross_entropy_logits");
    const std::size_t n = logits.rows(), nc = logits.cols();
    if (labels.size() != n)
        throw ShapeError("cross_entropy_logits: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
    for (std::size_t l : labels)
        if (l >= nc) throw ConfigError("cross_entropy_logits: label " + std::to_string(l) + " >= " + std::to_string(nc));
    Tensor<T> probs({n, nc});
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        T mx = logits.at(i, 0);
        for (std::size_t j = 1; j < nc; ++j) mx = std::max(mx, logits.at(i, j));
        T denom = T(0);
        for (std::size_t j = 0; j < nc; ++j) {
            const T e = std::exp(logits.at(i, j) - mx);
            probs.at(i, j) = e;
            denom += e;
        }
        for (std::size_t j = 0; j < nc; ++j) probs.at(i, j) /= denom;
        loss -= std::log(std::max(probs.at(i, labels[i]), std::numeric_limits<T>::min()));
    }
    Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(n));
    if (detail::track(out, logits.requires_grad())) {
        Tensor<T> lc = logits, oc = out;
        Tape<T>::current()->record([lc, oc, probs, labels]() mutable {
            if (!lc.requires_grad()) return;
            const std::size_t n = lc.rows(), nc = lc.cols();
            const T g = oc.grad()[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < nc; ++j) {
                    const T onehot = (j == labels[i]) ? T(1) : T(0);
                    lc.grad()[i * nc + j] += g * (probs.at(i, j) - onehot);
                }
        });
    }
    return out;
}

}  // namespace fimp
