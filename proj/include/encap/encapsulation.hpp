// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_ENCAPSULATION_HPP_
#define ENCAP_ENCAPSULATION_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "encap/errors.hpp"
#include "encap/grad.hpp"
#include "encap/ops.hpp"
#include "encap/rng.hpp"
#include "encap/tape.hpp"
#include "encap/tensor.hpp"

namespace encap
{

/// Tolerance on sum(alpha) = 1 accepted by aggregate() and layer validation.
inline constexpr double simplex_tolerance = 1e-9;

/// Step of the central differences in the Laplacian penalty.
inline constexpr double laplacian_step = 1e-3;

/// Builds one module's output f_m(X) on the given tape. Whether parameters are
/// trainable leaves or constants is decided by whoever made the closure.
using ModuleFn = std::function<Var(Tape&, Var)>;

using ParamVars = std::map<std::string, Var>;

/// One encapsulated unit: parameters plus the function that maps a batch
/// X[n x d] to H_m[n x d_out].
struct ModuleUnit
{
    std::string name;
    std::size_t input_width{0};
    std::size_t output_width{0};
    std::map<std::string, Tensor> params;
    std::function<Var(Tape&, Var, const ParamVars&)> body;
};

inline ModuleUnit identity_module(std::size_t width)
{
    return {"identity", width, width, {}, [](Tape&, Var x, const ParamVars&) { return x; }};
}

/// X W + b; pass an empty bias for a purely linear map.
inline ModuleUnit affine_module(Tensor weight, std::vector<double> bias = {})
{
    if (weight.rank() != 2)
        throw ShapeError("affine_module: weight must be a matrix");
    ModuleUnit u;
    u.name = bias.empty() ? "linear" : "affine";
    u.input_width = weight.shape()[0];
    u.output_width = weight.shape()[1];
    if (!bias.empty() && bias.size() != u.output_width)
        throw ShapeError("affine_module: bias width differs from output width");
    u.params.emplace("w", std::move(weight));
    const bool has_bias = !bias.empty();
    if (has_bias)
        u.params.emplace("b", Tensor({u.output_width}, std::move(bias)));
    u.body = [has_bias](Tape&, Var x, const ParamVars& p) {
        Var y = matmul(x, p.at("w"));
        return has_bias ? add_row_bias(y, p.at("b")) : y;
    };
    return u;
}

inline ModuleUnit linear_module(Tensor weight) { return affine_module(std::move(weight)); }

/// Row-wise 0.5 x^T A x, one output column.
inline ModuleUnit quadratic_module(Tensor a)
{
    if (a.rank() != 2 || a.shape()[0] != a.shape()[1])
        throw ShapeError("quadratic_module: A must be square");
    const std::size_t d = a.shape()[0];
    ModuleUnit u;
    u.name = "quadratic";
    u.input_width = d;
    u.output_width = 1;
    u.params.emplace("a", std::move(a));
    u.body = [d](Tape& t, Var x, const ParamVars& p) {
        Var xa = matmul(x, p.at("a"));
        Var ones = t.constant(Tensor({d, 1}, 1.0));
        return scale(matmul(multiply(xa, x), ones), 0.5);
    };
    return u;
}

/// gelu(X W1 + b1) W2.
inline ModuleUnit mlp_module(Tensor w1, std::vector<double> b1, Tensor w2)
{
    if (w1.rank() != 2 || w2.rank() != 2 || w1.shape()[1] != w2.shape()[0] || b1.size() != w1.shape()[1])
        throw ShapeError("mlp_module: inconsistent layer shapes");
    ModuleUnit u;
    u.name = "mlp";
    u.input_width = w1.shape()[0];
    u.output_width = w2.shape()[1];
    const std::size_t hidden = w1.shape()[1];
    u.params.emplace("w1", std::move(w1));
    u.params.emplace("b1", Tensor({hidden}, std::move(b1)));
    u.params.emplace("w2", std::move(w2));
    u.body = [](Tape&, Var x, const ParamVars& p) {
        return matmul(gelu(add_row_bias(matmul(x, p.at("w1")), p.at("b1"))), p.at("w2"));
    };
    return u;
}

/// M module units combined with simplex weights alpha.
struct EncapsulationLayer
{
    std::vector<ModuleUnit> modules;
    std::vector<double> alpha;
    double beta{1.0};
    std::vector<double> lambda_laplacian;

    std::size_t size() const noexcept { return modules.size(); }

    static EncapsulationLayer uniform(std::vector<ModuleUnit> units, double beta = 1.0, double lambda = 0.0)
    {
        EncapsulationLayer l;
        const std::size_t m = units.size();
        l.modules = std::move(units);
        l.alpha.assign(m, m ? 1.0 / static_cast<double>(m) : 0.0);
        l.beta = beta;
        l.lambda_laplacian.assign(m, lambda);
        return l;
    }

    void validate() const
    {
        if (modules.empty())
            throw ConfigError("encapsulation layer needs at least one module");
        if (alpha.size() != modules.size() || lambda_laplacian.size() != modules.size())
            throw ConfigError("alpha and lambda_laplacian must have one entry per module");
        double s = 0.0;
        for (double a : alpha) {
            if (!std::isfinite(a) || a < 0.0)
                throw ConfigError("alpha entries must be finite and nonnegative");
            s += a;
        }
        if (std::abs(s - 1.0) > simplex_tolerance)
            throw ConfigError("alpha is off the simplex (sum = " + std::to_string(s) + ")");
        if (!(beta >= 0.0) || !std::isfinite(beta))
            throw ConfigError("beta must be finite and nonnegative");
        for (double l : lambda_laplacian)
            if (!(l >= 0.0))
                throw ConfigError("lambda_laplacian entries must be nonnegative");
        for (const auto& m : modules)
            if (m.output_width != modules[0].output_width)
                throw ShapeError("modules disagree on output width");
    }
};

/// Layer parameters bound to a tape.
struct BoundLayer
{
    const EncapsulationLayer* layer{nullptr};
    std::vector<ParamVars> params;
    Var alpha;

    ModuleFn module(std::size_t m) const
    {
        const ModuleUnit& unit = layer->modules.at(m);
        const ParamVars& p = params.at(m);
        return [&unit, &p](Tape& t, Var x) { return unit.body(t, x, p); };
    }
};

/// Binds every module parameter and alpha to the tape, as trainable leaves or
/// as constants.
inline BoundLayer bind(Tape& tape, const EncapsulationLayer& layer, bool trainable)
{
    layer.validate();
    BoundLayer b;
    b.layer = &layer;
    for (const auto& unit : layer.modules) {
        ParamVars p;
        for (const auto& [k, v] : unit.params)
            p.emplace(k, tape.leaf(v, trainable));
        b.params.push_back(std::move(p));
    }
    b.alpha = tape.leaf(Tensor({layer.size()}, layer.alpha), trainable);
    return b;
}

/// Module closures that bind their parameters as constants on any tape.
inline std::vector<ModuleFn> frozen_modules(const EncapsulationLayer& layer)
{
    std::vector<ModuleFn> out;
    for (const auto& unit : layer.modules) {
        out.push_back([&unit](Tape& t, Var x) {
            ParamVars p;
            for (const auto& [k, v] : unit.params)
                p.emplace(k, t.constant(v));
            return unit.body(t, x, p);
        });
    }
    return out;
}

inline Var module_forward(const BoundLayer& bound, std::size_t m, Var x)
{
    if (m >= bound.layer->size())
        throw IndexError("module index " + std::to_string(m) + " out of range for " +
                         std::to_string(bound.layer->size()) + " modules");
    const ModuleUnit& unit = bound.layer->modules[m];
    const Tensor& xv = x.tape->value(x);
    if (xv.cols() != unit.input_width)
        throw ShapeError("module " + std::to_string(m) + " expects input width " +
                         std::to_string(unit.input_width) + ", got " + std::to_string(xv.cols()));
    Var h = unit.body(*x.tape, x, bound.params[m]);
    if (x.tape->value(h).rows() != xv.rows())
        throw ShapeError("module " + std::to_string(m) + " changed the batch extent");
    return h;
}

inline Tensor module_forward(const EncapsulationLayer& layer, std::size_t m, const Tensor& x)
{
    Tape tape;
    BoundLayer b = bind(tape, layer, false);
    return tape.value(module_forward(b, m, tape.constant(x)));
}

inline void require_simplex(std::span<const double> alpha, const char* what)
{
    double s = 0.0;
    for (double a : alpha) {
        if (!(a >= -simplex_tolerance))
            throw ConfigError(std::string(what) + ": negative or non-finite weight");
        s += a;
    }
    if (std::abs(s - 1.0) > simplex_tolerance)
        throw ConfigError(std::string(what) + ": weights sum to " + std::to_string(s) + ", not 1");
}

/// H = sum_m alpha_m H_m, differentiable w.r.t. alpha and each H_m.
inline Var aggregate(Var alpha, std::span<const Var> outputs)
{
    require_simplex(alpha.tape->value(alpha).data(), "aggregate");
    return weighted_sum(alpha, outputs);
}

inline Tensor aggregate(std::span<const double> alpha, std::span<const Tensor> outputs)
{
    Tape tape;
    Var a = tape.constant(Tensor({alpha.size()}, std::vector<double>(alpha.begin(), alpha.end())));
    std::vector<Var> hs;
    for (const auto& h : outputs)
        hs.push_back(tape.constant(h));
    return tape.value(aggregate(a, hs));
}

// ---------------------------------------------------------------------------
// Curvature

struct CurvatureEstimate
{
    std::vector<double> per_module;
    std::size_t probes{0};
    std::uint64_t seed{0};
};

/// Rademacher (+1/-1) probe number k, keyed by (seed, k, coordinate).
inline Tensor rademacher_probe(std::uint64_t seed, std::size_t k, const Shape& shape)
{
    Tensor v(shape);
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = (counter_hash(seed, k, i) >> 63) ? 1.0 : -1.0;
    return v;
}

/// s_m(X): sum of all output entries of a module.
inline ScalarFn scalarize(ModuleFn f)
{
    return [f = std::move(f)](Tape& t, Var x) { return sum_all(f(t, x)); };
}

/// Frobenius norm estimate sqrt(mean_k |H v_k|^2) with caller-supplied probes.
inline CurvatureEstimate curvature_estimate_with_probes(std::span<const ModuleFn> modules, const Tensor& x,
                                                        std::span<const Tensor> probes)
{
    if (probes.empty())
        throw ConfigError("curvature estimate needs at least one probe");
    CurvatureEstimate est;
    est.probes = probes.size();
    for (const auto& f : modules) {
        const ScalarFn s = scalarize(f);
        double acc = 0.0;
        for (const auto& v : probes)
            acc += hvp(s, x, v).squared_norm();
        const double e = std::sqrt(acc / static_cast<double>(probes.size()));
        if (!std::isfinite(e))
            throw NumericError("curvature estimate is non-finite");
        est.per_module.push_back(e);
    }
    return est;
}

/// Hutchinson-style estimate of |Hess_X s_m|_F for every module, treating the
/// whole batch X as one flattened input. All modules see the same probes.
inline CurvatureEstimate curvature_estimate(std::span<const ModuleFn> modules, const Tensor& x,
                                            std::size_t probes, std::uint64_t seed)
{
    if (probes == 0)
        throw ConfigError("curvature estimate needs K >= 1 probes");
    std::vector<Tensor> vs;
    vs.reserve(probes);
    for (std::size_t k = 0; k < probes; ++k)
        vs.push_back(rademacher_probe(seed, k, x.shape()));
    CurvatureEstimate est = curvature_estimate_with_probes(modules, x, vs);
    est.seed = seed;
    return est;
}

inline CurvatureEstimate curvature_estimate(const EncapsulationLayer& layer, const Tensor& x, std::size_t probes,
                                            std::uint64_t seed)
{
    layer.validate();
    const auto fns = frozen_modules(layer);
    return curvature_estimate(fns, x, probes, seed);
}

/// alpha_m proportional to exp(-beta * curvature_m).
inline std::vector<double> curvature_weights(std::span<const double> curvatures, double beta)
{
    if (curvatures.empty())
        throw ConfigError("curvature_weights: no modules");
    if (!(beta >= 0.0) || !std::isfinite(beta))
        throw ConfigError("curvature_weights: beta must be finite and nonnegative");
    std::vector<double> out(curvatures.size());
    for (std::size_t m = 0; m < curvatures.size(); ++m) {
        if (!std::isfinite(curvatures[m]) || curvatures[m] < 0.0)
            throw NumericError("curvature_weights: curvature estimates must be finite and nonnegative");
        out[m] = -beta * curvatures[m];
    }
    detail::softmax_inplace(out);
    return out;
}

inline std::vector<double> curvature_weights(const CurvatureEstimate& est, double beta)
{
    return curvature_weights(est.per_module, beta);
}

// ---------------------------------------------------------------------------
// Losses

/// sum_m |H - H_m|^2
inline Var consensus_loss(Var h, std::span<const Var> outputs)
{
    Tape& t = *h.tape;
    Var total = t.constant(Tensor::scalar(0.0));
    for (Var hm : outputs)
        total = add(total, sum_squares(sub(h, hm)));
    return total;
}

/// |grad_X s_m(X)|_2 as a tape node whose parameter gradient is exact up to a
/// central difference along u = g / |g|, since d|g| = u . dg and u . g is the
/// directional derivative of s_m. `live` must build on x's tape; `frozen` is
/// evaluated on a scratch tape to obtain g.
inline Var gradient_norm_penalty(const ModuleFn& live, const ModuleFn& frozen, Var x)
{
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor g = gradient(scalarize(frozen), xv);
    const double norm = std::sqrt(g.squared_norm());
    if (norm == 0.0)
        return t.constant(Tensor::scalar(0.0));
    const double eps = hvp_step(xv);
    Tensor step = g;
    for (double& v : step.storage())
        v *= eps / norm;
    Var delta = t.constant(step);
    Var sp = sum_all(live(t, add(x, delta)));
    Var sm = sum_all(live(t, sub(x, delta)));
    Var directional = scale(sub(sp, sm), 1.0 / (2.0 * eps));
    return add_scalar(directional, norm - t.value(directional)[0]);
}

/// Consensus plus gradient-norm penalty:
/// sum_m |H - f_m(X)|^2 + lambda * sum_m |grad_X s_m|_2.
inline Var alg1_loss(std::span<const ModuleFn> live, std::span<const ModuleFn> frozen, Var x,
                     std::span<const Var> outputs, Var h, double lambda_penalty)
{
    if (live.size() != frozen.size() || live.size() != outputs.size())
        throw ShapeError("alg1_loss: module, closure and output counts differ");
    for (Var hm : outputs)
        require_same_shape(h.tape->value(h), h.tape->value(hm), "alg1_loss");
    Var total = consensus_loss(h, outputs);
    if (lambda_penalty != 0.0) {
        for (std::size_t m = 0; m < live.size(); ++m)
            total = add(total, scale(gradient_norm_penalty(live[m], frozen[m], x), lambda_penalty));
    }
    return total;
}

/// Value of the consensus-plus-penalty loss for a layer at (X, H).
inline double alg1_loss(const EncapsulationLayer& layer, const Tensor& x, const Tensor& h, double lambda_penalty)
{
    layer.validate();
    const auto fns = frozen_modules(layer);
    double total = 0.0;
    for (std::size_t m = 0; m < layer.size(); ++m) {
        const Tensor hm = module_forward(layer, m, x);
        require_same_shape(h, hm, "alg1_loss");
        for (std::size_t i = 0; i < h.size(); ++i)
            total += (h[i] - hm[i]) * (h[i] - hm[i]);
        if (lambda_penalty != 0.0)
            total += lambda_penalty * std::sqrt(gradient(scalarize(fns[m]), x).squared_norm());
    }
    return total;
}

/// Coordinates of a flattened input used by the Laplacian penalty: all of
/// them when `sample` is 0 and there are at most 64, otherwise a seeded
/// sample of `sample` (or 64) distinct coordinates, ascending.
inline std::vector<std::size_t> laplacian_coords(std::size_t count, std::size_t sample, std::uint64_t seed)
{
    const std::size_t want = sample == 0 ? std::min<std::size_t>(count, 64) : std::min(sample, count);
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (want == count)
        return idx;
    for (std::size_t i = 0; i < want; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(counter_hash(seed, 0x1a9cULL, i) % (count - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(want);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// sum_m sum_j (d2 s_m / dX_j^2 - lambda_m d s_m / dX_j)^2 over `coords`, with
/// both derivatives taken by central differences of step h. Every term is
/// built on x's tape, so the result is differentiable in the module parameters.
inline Var laplacian_encap_loss(std::span<const ModuleFn> live, std::span<const double> lambdas, Var x,
                                std::span<const std::size_t> coords, double h = laplacian_step)
{
    if (live.size() != lambdas.size())
        throw ShapeError("laplacian_encap_loss: one lambda per module required");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    Var total = t.constant(Tensor::scalar(0.0));
    for (std::size_t m = 0; m < live.size(); ++m) {
        Var s0 = sum_all(live[m](t, x));
        for (std::size_t j : coords) {
            if (j >= xv.size())
                throw IndexError("laplacian coordinate " + std::to_string(j) + " out of range");
            Tensor e(xv.shape());
            e[j] = h;
            Var ev = t.constant(std::move(e));
            Var sp = sum_all(live[m](t, add(x, ev)));
            Var sm = sum_all(live[m](t, sub(x, ev)));
            Var d2 = scale(add(sub(sp, scale(s0, 2.0)), sm), 1.0 / (h * h));
            Var d1 = scale(sub(sp, sm), 1.0 / (2.0 * h));
            if (!std::isfinite(t.value(d2)[0]) || !std::isfinite(t.value(d1)[0]))
                throw NumericError("laplacian_encap_loss: non-finite difference quotient");
            Var r = sub(d2, scale(d1, lambdas[m]));
            total = add(total, multiply(r, r));
        }
    }
    return total;
}

inline double laplacian_encap_loss(const EncapsulationLayer& layer, const Tensor& x, std::size_t coord_sample = 0,
                                   std::uint64_t seed = 0)
{
    layer.validate();
    const auto fns = frozen_modules(layer);
    const auto coords = laplacian_coords(x.size(), coord_sample, seed);
    Tape tape;
    Var xv = tape.constant(x);
    return tape.value(laplacian_encap_loss(fns, layer.lambda_laplacian, xv, coords))[0];
}

/// Batch Monte Carlo stand-in for the integral of |sum_m alpha_m grad f_m|^2:
/// mean over rows of the squared norm of the alpha-combined input gradient.
inline double eq3_divergence_diagnostic(std::span<const ModuleFn> modules, std::span<const double> alpha,
                                        const Tensor& x)
{
    if (x.empty())
        throw ShapeError("eq3 diagnostic: empty batch");
    if (alpha.size() != modules.size())
        throw ShapeError("eq3 diagnostic: one weight per module required");
    Tensor combined(x.shape());
    for (std::size_t m = 0; m < modules.size(); ++m) {
        if (alpha[m] == 0.0)
            continue;
        const Tensor g = gradient(scalarize(modules[m]), x);
        for (std::size_t i = 0; i < g.size(); ++i)
            combined[i] += alpha[m] * g[i];
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < combined.rows(); ++r)
        for (double v : combined.row(r))
            acc += v * v;
    return acc / static_cast<double>(combined.rows());
}

inline double eq3_divergence_diagnostic(const EncapsulationLayer& layer, const Tensor& x)
{
    layer.validate();
    const auto fns = frozen_modules(layer);
    return eq3_divergence_diagnostic(fns, layer.alpha, x);
}

// ---------------------------------------------------------------------------
// Simplex constraint

struct SimplexProjection
{
    std::vector<double> alpha;
    /// Set when every entry was <= 0 and the weights were reset to uniform.
    bool reset_to_uniform{false};
    std::string warning;
};

/// Clamp negatives to zero, then divide by the sum.
inline SimplexProjection project_simplex(std::span<const double> alpha)
{
    if (alpha.empty())
        throw ConfigError("project_simplex: empty weight vector");
    SimplexProjection out;
    out.alpha.assign(alpha.begin(), alpha.end());
    double s = 0.0;
    for (double& a : out.alpha) {
        if (!std::isfinite(a))
            throw NumericError("project_simplex: non-finite weight");
        a = std::max(a, 0.0);
        s += a;
    }
    if (s <= 0.0) {
        out.alpha.assign(alpha.size(), 1.0 / static_cast<double>(alpha.size()));
        out.reset_to_uniform = true;
        out.warning = "all weights <= 0; reset to uniform";
        return out;
    }
    for (double& a : out.alpha)
        a /= s;
    return out;
}

} // namespace encap

#endif // ENCAP_ENCAPSULATION_HPP_
