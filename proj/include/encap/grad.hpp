// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_GRAD_HPP_
#define ENCAP_GRAD_HPP_

#include <algorithm>
#include <functional>

#include "encap/errors.hpp"
#include "encap/tape.hpp"
#include "encap/tensor.hpp"

namespace encap
{

/// Builds a scalar (1-element) function of x on the given tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

inline double evaluate(const ScalarFn& f, const Tensor& x)
{
    Tape tape;
    Var xv = tape.constant(x);
    Var y = f(tape, xv);
    const Tensor& out = tape.value(y);
    if (out.size() != 1)
        throw ShapeError("scalar function returned shape " + shape_str(out.shape()));
    return out[0];
}

/// Exact reverse-mode gradient of f at x.
inline Tensor gradient(const ScalarFn& f, const Tensor& x)
{
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var y = f(tape, xv);
    if (tape.value(y).size() != 1)
        throw ShapeError("gradient of non-scalar function with output shape " +
                         shape_str(tape.value(y).shape()));
    tape.backward(y);
    Tensor g = tape.grad(xv);
    require_finite(g, "gradient");
    return g;
}

/// Step used by hvp(): 1e-4 * max(1, |x|_inf).
inline double hvp_step(const Tensor& x) noexcept
{
    return 1e-4 * std::max(1.0, x.max_abs());
}

/// Hessian-vector product by central differences of exact gradients:
/// (grad f(x + eps v) - grad f(x - eps v)) / (2 eps).
inline Tensor hvp(const ScalarFn& f, const Tensor& x, const Tensor& v)
{
    require_same_shape(x, v, "hvp");
    const double eps = hvp_step(x);
    Tensor xp = x, xm = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] += eps * v[i];
        xm[i] -= eps * v[i];
    }
    const Tensor gp = gradient(f, xp);
    const Tensor gm = gradient(f, xm);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (gp[i] - gm[i]) / (2.0 * eps);
    require_finite(out, "hvp");
    return out;
}

/// Central finite-difference gradient, forward evaluations only.
inline Tensor central_difference_gradient(const ScalarFn& f, const Tensor& x, double h = 1e-5)
{
    Tensor g(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = evaluate(f, probe);
        probe[i] = orig - h;
        const double fm = evaluate(f, probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

} // namespace encap

#endif // ENCAP_GRAD_HPP_
