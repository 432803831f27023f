// SPDX-License-Identifier: Apache-2.0

// Test-only helpers: independent oracles and deterministic fixtures.

#ifndef ENCAP_TESTS_SUPPORT_HPP_
#define ENCAP_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "encap/rng.hpp"
#include "encap/tensor.hpp"

namespace encap::testing
{

/// Relative error with a floor on the magnitude so that entries which are
/// both essentially zero do not blow up the ratio.
inline double rel_err(double a, double b, double floor = 1e-6)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-6)
{
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, rel_err(a[i], b[i], floor));
    return m;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0)
{
    Tensor t(std::move(shape));
    for (double& v : t.storage())
        v = stddev * rng.normal();
    return t;
}

/// Central differences of a plain C++ function of a flat vector. Kept free of
/// any tape machinery so it can serve as an oracle for it.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5)
{
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Deterministic English-like text: sentences assembled from small word
/// lists with a seeded generator. Produces at least `min_bytes` characters.
inline std::string synthetic_corpus(std::size_t min_bytes, std::uint64_t seed = 7)
{
    static const std::vector<std::string> subjects{
        "the cat", "a dog", "the old man", "my sister", "the teacher", "a small bird", "the river",
        "our neighbour", "the engineer", "a young girl", "the farmer", "this machine"};
    static const std::vector<std::string> verbs{
        "sees", "likes", "finds", "carries", "watches", "remembers", "builds", "follows", "paints",
        "opens", "counts", "hears"};
    static const std::vector<std::string> objects{
        "the red ball", "a wooden box", "the green hill", "an open door", "the quiet town",
        "a long letter", "the bright lamp", "a cold morning", "the narrow road", "an empty cup"};
    static const std::vector<std::string> tails{
        "today", "in the garden", "after dinner", "near the station", "every morning",
        "with great care", "before the rain", "at night"};
    static const std::vector<std::string> ends{".", ".", ".", "!", "?"};
    Rng rng(seed);
    std::string out;
    while (out.size() < min_bytes) {
        std::string s = subjects[rng.below(subjects.size())] + " " + verbs[rng.below(verbs.size())] + " " +
                        objects[rng.below(objects.size())];
        if (rng.uniform() < 0.6)
            s += " " + tails[rng.below(tails.size())];
        s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
        out += s + ends[rng.below(ends.size())] + (rng.uniform() < 0.15 ? "\n" : " ");
    }
    return out;
}

} // namespace encap::testing

#endif // ENCAP_TESTS_SUPPORT_HPP_
