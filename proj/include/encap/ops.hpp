// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_OPS_HPP_
#define ENCAP_OPS_HPP_

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "encap/errors.hpp"
#include "encap/linalg.hpp"
#include "encap/tape.hpp"
#include "encap/tensor.hpp"

namespace encap
{

inline constexpr double layer_norm_eps = 1e-5;

namespace detail
{

inline Tape& same_tape(Var a, Var b)
{
    if (a.tape == nullptr || a.tape != b.tape)
        throw Error("operands recorded on different tapes");
    return *a.tape;
}

inline void require_rank2(const Tensor& t, const char* what)
{
    if (t.rank() != 2)
        throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void axpy(std::vector<double>& dst, std::span<const double> src, double s = 1.0)
{
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] += s * src[i];
}

inline constexpr double gelu_c = 0.7978845608028654; // sqrt(2 / pi)
inline constexpr double gelu_k = 0.044715;

inline double gelu(double x)
{
    return 0.5 * x * (1.0 + std::tanh(gelu_c * (x + gelu_k * x * x * x)));
}

inline double gelu_grad(double x)
{
    const double u = gelu_c * (x + gelu_k * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * gelu_c * (1.0 + 3.0 * gelu_k * x * x);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b)
{
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require_same_shape(x, y, "add");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += y[i];
    return t.record(OpKind::add, {a.id, b.id}, std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        for (std::size_t in : n.inputs)
            if (tp.requires_grad(in))
                detail::axpy(tp.grad_buffer(in), n.grad);
    });
}

inline Var sub(Var a, Var b)
{
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require_same_shape(x, y, "sub");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] -= y[i];
    return t.record(OpKind::sub, {a.id, b.id}, std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        if (tp.requires_grad(n.inputs[0]))
            detail::axpy(tp.grad_buffer(n.inputs[0]), n.grad);
        if (tp.requires_grad(n.inputs[1]))
            detail::axpy(tp.grad_buffer(n.inputs[1]), n.grad, -1.0);
    });
}

inline Var multiply(Var a, Var b)
{
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require_same_shape(x, y, "multiply");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] *= y[i];
    return t.record(OpKind::multiply, {a.id, b.id}, std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        const Tensor& xa = tp.node(n.inputs[0]).value;
        const Tensor& xb = tp.node(n.inputs[1]).value;
        if (tp.requires_grad(n.inputs[0])) {
            auto& g = tp.grad_buffer(n.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += n.grad[i] * xb[i];
        }
        if (tp.requires_grad(n.inputs[1])) {
            auto& g = tp.grad_buffer(n.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += n.grad[i] * xa[i];
        }
    });
}

inline Var scale(Var a, double s)
{
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.storage())
        v *= s;
    return t.record(OpKind::scale, {a.id}, std::move(out), {}, [s](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        detail::axpy(tp.grad_buffer(n.inputs[0]), n.grad, s);
    });
}

/// x + c for a scalar constant c; gradient passes through unchanged.
inline Var add_scalar(Var a, double c)
{
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.storage())
        v += c;
    return t.record(OpKind::add_scalar, {a.id}, std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        detail::axpy(tp.grad_buffer(n.inputs[0]), n.grad);
    });
}

inline Var gelu(Var a)
{
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.storage())
        v = detail::gelu(v);
    return t.record(OpKind::gelu, {a.id}, std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        const Tensor& x = tp.node(n.inputs[0]).value;
        auto& g = tp.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += n.grad[i] * detail::gelu_grad(x[i]);
    });
}

// ---------------------------------------------------------------------------
// Row-wise broadcasting (the only broadcasting supported)

/// x[r x c] + bias[c] added to every row.
inline Var add_row_bias(Var x, Var bias)
{
    Tape& t = detail::same_tape(x, bias);
    const Tensor& xv = t.value(x);
    const Tensor& bv = t.value(bias);
    if (bv.size() != xv.cols())
        throw ShapeError("add_row_bias: bias of shape " + shape_str(bv.shape()) +
                         " does not match row width " + std::to_string(xv.cols()));
    Tensor out = xv;
    const std::size_t c = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j)
            out[r * c + j] += bv[j];
    return t.record(OpKind::add_row_bias, {x.id, bias.id}, std::move(out), {},
                    [c](Tape& tp, std::size_t self) {
                        const auto& n = tp.node(self);
                        if (tp.requires_grad(n.inputs[0]))
                            detail::axpy(tp.grad_buffer(n.inputs[0]), n.grad);
                        if (tp.requires_grad(n.inputs[1])) {
                            auto& gb = tp.grad_buffer(n.inputs[1]);
                            const std::size_t rows = n.grad.size() / c;
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < c; ++j)
                                    gb[j] += n.grad[r * c + j];
                        }
                    });
}

/// x * gain + bias, both broadcast across rows (layer-norm affine).
inline Var scale_shift_rows(Var x, Var gain, Var bias)
{
    Tape& t = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const Tensor& bv = t.value(bias);
    const std::size_t c = xv.cols();
    if (gv.size() != c || bv.size() != c)
        throw ShapeError("scale_shift_rows: gain/bias width does not match row width " +
                         std::to_string(c));
    Tensor out = xv;
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j)
            out[r * c + j] = xv[r * c + j] * gv[j] + bv[j];
    return t.record(
        OpKind::scale_shift_rows, {x.id, gain.id, bias.id}, std::move(out), {},
        [c](Tape& tp, std::size_t self) {
            const auto& n = tp.node(self);
            const Tensor& xs = tp.node(n.inputs[0]).value;
            const Tensor& gs = tp.node(n.inputs[1]).value;
            const std::size_t rows = n.grad.size() / c;
            if (tp.requires_grad(n.inputs[0])) {
                auto& gx = tp.grad_buffer(n.inputs[0]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j)
                        gx[r * c + j] += n.grad[r * c + j] * gs[j];
            }
            if (tp.requires_grad(n.inputs[1])) {
                auto& gg = tp.grad_buffer(n.inputs[1]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j)
                        gg[j] += n.grad[r * c + j] * xs[r * c + j];
            }
            if (tp.requires_grad(n.inputs[2])) {
                auto& gb = tp.grad_buffer(n.inputs[2]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j)
                        gb[j] += n.grad[r * c + j];
            }
        });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

inline Var matmul(Var a, Var b)
{
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    detail::require_rank2(x, "matmul");
    detail::require_rank2(y, "matmul");
    const std::size_t p = x.shape()[0], q = x.shape()[1], r = y.shape()[1];
    if (y.shape()[0] != q)
        throw ShapeError("matmul: inner extents differ, " + shape_str(x.shape()) + " x " +
                         shape_str(y.shape()));
    Tensor out({p, r});
    linalg::gemm_nn(x.data().data(), y.data().data(), out.data().data(), p, q, r);
    return t.record(OpKind::matmul, {a.id, b.id}, std::move(out), {},
                    [p, q, r](Tape& tp, std::size_t self) {
                        const auto& n = tp.node(self);
                        const Tensor& xa = tp.node(n.inputs[0]).value;
                        const Tensor& xb = tp.node(n.inputs[1]).value;
                        if (tp.requires_grad(n.inputs[0]))
                            linalg::gemm_nt(n.grad.data(), xb.data().data(),
                                            tp.grad_buffer(n.inputs[0]).data(), p, r, q);
                        if (tp.requires_grad(n.inputs[1]))
                            linalg::gemm_tn(xa.data().data(), n.grad.data(),
                                            tp.grad_buffer(n.inputs[1]).data(), p, q, r);
                    });
}

/// Sum of every element, as a 1x1 tensor.
inline Var sum_all(Var a)
{
    Tape& t = *a.tape;
    double s = 0.0;
    for (double v : t.value(a).data())
        s += v;
    return t.record(OpKind::sum_all, {a.id}, Tensor::scalar(s), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        auto& g = tp.grad_buffer(n.inputs[0]);
        for (double& v : g)
            v += n.grad[0];
    });
}

/// Squared Frobenius norm, as a 1x1 tensor.
inline Var sum_squares(Var a)
{
    Tape& t = *a.tape;
    const double s = t.value(a).squared_norm();
    return t.record(OpKind::sum_squares, {a.id}, Tensor::scalar(s), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        const Tensor& x = tp.node(n.inputs[0]).value;
        auto& g = tp.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += 2.0 * n.grad[0] * x[i];
    });
}

inline Var reshape(Var a, Shape shape)
{
    Tape& t = *a.tape;
    Tensor out = t.value(a).reshaped(std::move(shape));
    return t.record(OpKind::reshape, {a.id}, std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        detail::axpy(tp.grad_buffer(n.inputs[0]), n.grad);
    });
}

// ---------------------------------------------------------------------------
// Normalisation and probabilities

/// Per-row standardisation (x - mean) / sqrt(var + 1e-5), without affine.
inline Var layer_norm(Var a)
{
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    const std::size_t rows = x.rows(), c = x.cols();
    Tensor out(x.shape());
    Tensor inv_std({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        auto xr = x.row(r);
        double mean = 0.0;
        for (double v : xr)
            mean += v;
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (double v : xr)
            var += (v - mean) * (v - mean);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + layer_norm_eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < c; ++j)
            out[r * c + j] = (xr[j] - mean) * is;
    }
    return t.record(OpKind::layer_norm, {a.id}, std::move(out), {std::move(inv_std)},
                    [rows, c](Tape& tp, std::size_t self) {
                        const auto& n = tp.node(self);
                        const Tensor& y = n.value;
                        const Tensor& is = n.saved[0];
                        auto& g = tp.grad_buffer(n.inputs[0]);
                        const double inv_c = 1.0 / static_cast<double>(c);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double* gr = n.grad.data() + r * c;
                            const double* yr = y.data().data() + r * c;
                            double mg = 0.0, mgy = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                                mg += gr[j];
                                mgy += gr[j] * yr[j];
                            }
                            mg *= inv_c;
                            mgy *= inv_c;
                            for (std::size_t j = 0; j < c; ++j)
                                g[r * c + j] += is[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    });
}

namespace detail
{

inline void softmax_inplace(std::span<double> row)
{
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row)
        mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : row) {
        v = std::exp(v - mx);
        s += v;
    }
    for (double& v : row)
        v /= s;
}

} // namespace detail

inline Var softmax_rows(Var a)
{
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (!x.all_finite())
        throw NumericError("softmax_rows: non-finite input");
    Tensor out = x;
    for (std::size_t r = 0; r < out.rows(); ++r)
        detail::softmax_inplace(out.row(r));
    const std::size_t c = x.cols();
    return t.record(OpKind::softmax_rows, {a.id}, std::move(out), {}, [c](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        const Tensor& y = n.value;
        auto& g = tp.grad_buffer(n.inputs[0]);
        const std::size_t rows = y.size() / c;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                dot += n.grad[r * c + j] * y[r * c + j];
            for (std::size_t j = 0; j < c; ++j)
                g[r * c + j] += y[r * c + j] * (n.grad[r * c + j] - dot);
        }
    });
}

/// Mean over rows of -log softmax(logits)[target].
inline Var cross_entropy_mean(Var logits, std::span<const std::size_t> targets)
{
    Tape& t = *logits.tape;
    const Tensor& x = t.value(logits);
    const std::size_t n = x.rows(), v = x.cols();
    if (targets.empty())
        throw ShapeError("cross_entropy_mean: empty batch");
    if (targets.size() != n)
        throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    for (std::size_t tg : targets)
        if (tg >= v)
            throw IndexError("cross_entropy_mean: target " + std::to_string(tg) +
                             " outside [0, " + std::to_string(v) + ")");
    Tensor probs({n, v});
    std::copy(x.data().begin(), x.data().end(), probs.data().begin());
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        auto row = probs.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (double e : row)
            mx = std::max(mx, e);
        double s = 0.0;
        for (double e : row)
            s += std::exp(e - mx);
        const double log_z = mx + std::log(s);
        loss += log_z - row[targets[r]];
        for (double& e : row)
            e = std::exp(e - log_z);
    }
    loss /= static_cast<double>(n);
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return t.record(OpKind::cross_entropy_mean, {logits.id}, Tensor::scalar(loss), {std::move(probs)},
                    [tg = std::move(tg), v](Tape& tp, std::size_t self) {
                        const auto& nd = tp.node(self);
                        const Tensor& p = nd.saved[0];
                        auto& g = tp.grad_buffer(nd.inputs[0]);
                        const double s = nd.grad[0] / static_cast<double>(tg.size());
                        for (std::size_t r = 0; r < tg.size(); ++r) {
                            for (std::size_t j = 0; j < v; ++j)
                                g[r * v + j] += s * p[r * v + j];
                            g[r * v + tg[r]] -= s;
                        }
                    });
}

// ---------------------------------------------------------------------------
// Indexing and stacking

/// Gathers rows of table[V x d] for each id.
inline Var embedding_lookup(Var table, std::span<const std::size_t> ids)
{
    Tape& t = *table.tape;
    const Tensor& tb = t.value(table);
    detail::require_rank2(tb, "embedding_lookup");
    const std::size_t vocab = tb.shape()[0], d = tb.shape()[1];
    if (ids.empty())
        throw ShapeError("embedding_lookup: no ids");
    for (std::size_t id : ids)
        if (id >= vocab)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(vocab));
    Tensor out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        auto src = tb.row(ids[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    return t.record(OpKind::embedding_lookup, {table.id}, std::move(out), {},
                    [idv = std::move(idv), d](Tape& tp, std::size_t self) {
                        const auto& n = tp.node(self);
                        auto& g = tp.grad_buffer(n.inputs[0]);
                        for (std::size_t r = 0; r < idv.size(); ++r)
                            for (std::size_t j = 0; j < d; ++j)
                                g[idv[r] * d + j] += n.grad[r * d + j];
                    });
}

/// Stacks matrices with equal column count vertically.
inline Var concat_rows(std::span<const Var> parts)
{
    if (parts.empty())
        throw ShapeError("concat_rows: no inputs");
    Tape& t = *parts[0].tape;
    const std::size_t c = t.value(parts[0]).cols();
    std::size_t rows = 0;
    std::vector<std::size_t> ids;
    for (Var p : parts) {
        detail::same_tape(parts[0], p);
        const Tensor& v = t.value(p);
        if (v.cols() != c)
            throw ShapeError("concat_rows: column mismatch " + std::to_string(v.cols()) + " vs " +
                             std::to_string(c));
        rows += v.rows();
        ids.push_back(p.id);
    }
    Tensor out({rows, c});
    std::size_t off = 0;
    for (Var p : parts) {
        auto d = t.value(p).data();
        std::copy(d.begin(), d.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
        off += d.size();
    }
    return t.record(OpKind::concat_rows, std::move(ids), std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        std::size_t offset = 0;
        for (std::size_t in : n.inputs) {
            const std::size_t len = tp.node(in).value.size();
            if (tp.requires_grad(in)) {
                auto& g = tp.grad_buffer(in);
                for (std::size_t i = 0; i < len; ++i)
                    g[i] += n.grad[offset + i];
            }
            offset += len;
        }
    });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count)
{
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (count == 0 || begin + count > x.rows())
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(x.shape()));
    const std::size_t c = x.cols();
    Tensor out({count, c});
    std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
              x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c), out.data().begin());
    return t.record(OpKind::slice_rows, {a.id}, std::move(out), {},
                    [begin, c](Tape& tp, std::size_t self) {
                        const auto& n = tp.node(self);
                        auto& g = tp.grad_buffer(n.inputs[0]);
                        for (std::size_t i = 0; i < n.grad.size(); ++i)
                            g[begin * c + i] += n.grad[i];
                    });
}

// ---------------------------------------------------------------------------
// Mixture and attention

/// sum_m alpha[m] * parts[m]; differentiable in both alpha and every part.
inline Var weighted_sum(Var alpha, std::span<const Var> parts)
{
    Tape& t = *alpha.tape;
    const Tensor& a = t.value(alpha);
    if (parts.empty() || a.size() != parts.size())
        throw ShapeError("weighted_sum: " + std::to_string(a.size()) + " weights for " +
                         std::to_string(parts.size()) + " inputs");
    const Shape& shape = t.value(parts[0]).shape();
    std::vector<std::size_t> ids{alpha.id};
    for (Var p : parts) {
        detail::same_tape(alpha, p);
        if (t.value(p).shape() != shape)
            throw ShapeError("weighted_sum: inputs differ in shape, " + shape_str(shape) + " vs " +
                             shape_str(t.value(p).shape()));
        ids.push_back(p.id);
    }
    Tensor out(shape);
    {
        const Tensor& h0 = t.value(parts[0]);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = a[0] * h0[i];
    }
    for (std::size_t m = 1; m < parts.size(); ++m) {
        const Tensor& hm = t.value(parts[m]);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] += a[m] * hm[i];
    }
    return t.record(OpKind::weighted_sum, std::move(ids), std::move(out), {}, [](Tape& tp, std::size_t self) {
        const auto& n = tp.node(self);
        const Tensor& w = tp.node(n.inputs[0]).value;
        const bool alpha_rg = tp.requires_grad(n.inputs[0]);
        for (std::size_t m = 0; m + 1 < n.inputs.size(); ++m) {
            const std::size_t in = n.inputs[m + 1];
            const Tensor& hm = tp.node(in).value;
            if (alpha_rg) {
                double dot = 0.0;
                for (std::size_t i = 0; i < hm.size(); ++i)
                    dot += n.grad[i] * hm[i];
                tp.grad_buffer(n.inputs[0])[m] += dot;
            }
            if (tp.requires_grad(in))
                detail::axpy(tp.grad_buffer(in), n.grad, w[m]);
        }
    });
}

/// Multi-head causal self-attention over packed projections.
///
/// qkv is [batch*seq x 3*width] holding Q | K | V column blocks; heads split
/// each block evenly. Position t attends to positions <= t only. The
/// attention probabilities are kept as saved[0] with shape
/// [batch x heads x seq x seq] so callers can trace them.
inline Var causal_attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads)
{
    Tape& t = *qkv.tape;
    const Tensor& x = t.value(qkv);
    detail::require_rank2(x, "causal_attention");
    if (heads == 0 || x.cols() % (3 * heads) != 0 || x.rows() != batch * seq)
        throw ShapeError("causal_attention: input " + shape_str(x.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                         std::to_string(heads));
    const std::size_t width = x.cols() / 3;
    const std::size_t hd = width / heads;
    const std::size_t stride = 3 * width;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor out({batch * seq, width});
    Tensor probs({batch, heads, seq, seq});
    const double* xp = x.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* pbh = probs.data().data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const double* qi = xp + (b * seq + i) * stride + h * hd;
                double* prow = pbh + i * seq;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = xp + (b * seq + j) * stride + width + h * hd;
                    double s = 0.0;
                    for (std::size_t k = 0; k < hd; ++k)
                        s += qi[k] * kj[k];
                    prow[j] = s * sc;
                    mx = std::max(mx, prow[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    prow[j] = std::exp(prow[j] - mx);
                    z += prow[j];
                }
                double* oi = out.data().data() + (b * seq + i) * width + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    prow[j] /= z;
                    const double* vj = xp + (b * seq + j) * stride + 2 * width + h * hd;
                    for (std::size_t k = 0; k < hd; ++k)
                        oi[k] += prow[j] * vj[k];
                }
            }
        }
    }
    return t.record(
        OpKind::causal_attention, {qkv.id}, std::move(out), {std::move(probs)},
        [batch, seq, heads, width, hd, stride, sc](Tape& tp, std::size_t self) {
            const auto& n = tp.node(self);
            const double* xv = tp.node(n.inputs[0]).value.data().data();
            const double* pr = n.saved[0].data().data();
            double* gx = tp.grad_buffer(n.inputs[0]).data();
            std::vector<double> dp(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* pbh = pr + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* go = n.grad.data() + (b * seq + i) * width + h * hd;
                        const double* prow = pbh + i * seq;
                        // dP = dO V^T, dV += P^T dO
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double* vj = xv + (b * seq + j) * stride + 2 * width + h * hd;
                            double* gvj = gx + (b * seq + j) * stride + 2 * width + h * hd;
                            double s = 0.0;
                            for (std::size_t k = 0; k < hd; ++k) {
                                s += go[k] * vj[k];
                                gvj[k] += prow[j] * go[k];
                            }
                            dp[j] = s;
                            dot += s * prow[j];
                        }
                        const double* qi = xv + (b * seq + i) * stride + h * hd;
                        double* gqi = gx + (b * seq + i) * stride + h * hd;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double ds = prow[j] * (dp[j] - dot) * sc;
                            if (ds == 0.0)
                                continue;
                            const double* kj = xv + (b * seq + j) * stride + width + h * hd;
                            double* gkj = gx + (b * seq + j) * stride + width + h * hd;
                            for (std::size_t k = 0; k < hd; ++k) {
                                gqi[k] += ds * kj[k];
                                gkj[k] += ds * qi[k];
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------

/// Uniform entry point over the elementwise/structural primitives.
///
/// Arity: add, multiply take two equal-shape inputs; scale takes one input and
/// `factor`; gelu and layer_norm take one; embedding_lookup takes the table and
/// `ids`; concat_rows takes one or more matrices of equal width.
inline Var apply_primitive(OpKind kind, std::span<const Var> inputs, double factor = 1.0,
                           std::span<const std::size_t> ids = {})
{
    auto need = [&](std::size_t k) {
        if (inputs.size() != k)
            throw ShapeError(std::string(op_name(kind)) + " takes " + std::to_string(k) +
                             " inputs, got " + std::to_string(inputs.size()));
    };
    switch (kind) {
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::multiply: need(2); return multiply(inputs[0], inputs[1]);
    case OpKind::scale: need(1); return scale(inputs[0], factor);
    case OpKind::gelu: need(1); return gelu(inputs[0]);
    case OpKind::layer_norm: need(1); return layer_norm(inputs[0]);
    case OpKind::embedding_lookup: need(1); return embedding_lookup(inputs[0], ids);
    case OpKind::concat_rows: return concat_rows(inputs);
    default: throw Error(std::string("apply_primitive does not dispatch ") + op_name(kind));
    }
}

} // namespace encap

#endif // ENCAP_OPS_HPP_
