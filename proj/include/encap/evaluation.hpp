// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_EVALUATION_HPP_
#define ENCAP_EVALUATION_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "encap/errors.hpp"
#include "encap/model.hpp"
#include "encap/rng.hpp"
#include "encap/training.hpp"

namespace encap
{

// ---------------------------------------------------------------------------
// Perplexity

/// exp of the mean next-token negative log-likelihood, teacher forced over
/// non-overlapping windows of seq_len inputs. Every token after the first is
/// predicted exactly once.
inline double perplexity(const LanguageModel& lm, std::span<const std::size_t> tokens)
{
    if (tokens.size() < 2)
        throw ConfigError("text too short for perplexity: need at least 2 tokens");
    const std::size_t seq = lm.config.seq_len, vsize = lm.config.vocab_size;
    const std::size_t predicted = tokens.size() - 1;
    const std::size_t full = predicted / seq;
    constexpr std::size_t group = 16;
    double nll = 0.0;
    auto accumulate = [&](std::size_t first_window, std::size_t windows, std::size_t len) {
        std::vector<std::size_t> inputs;
        inputs.reserve(windows * len);
        for (std::size_t w = 0; w < windows; ++w) {
            const std::size_t start = (first_window + w) * seq;
            inputs.insert(inputs.end(), tokens.begin() + start, tokens.begin() + start + len);
        }
        const LmOutput out = forward_lm(lm, inputs, windows, len);
        for (std::size_t w = 0; w < windows; ++w) {
            const std::size_t start = (first_window + w) * seq;
            for (std::size_t t = 0; t < len; ++t) {
                std::span<const double> row(out.logits.data().data() + (w * len + t) * vsize, vsize);
                const double mx = *std::max_element(row.begin(), row.end());
                double z = 0.0;
                for (double v : row)
                    z += std::exp(v - mx);
                nll += mx + std::log(z) - row[tokens[start + t + 1]];
            }
        }
    };
    for (std::size_t w = 0; w < full; w += group)
        accumulate(w, std::min(group, full - w), seq);
    if (const std::size_t tail = predicted - full * seq; tail > 0)
        accumulate(full, 1, tail);
    const double ppl = std::exp(nll / static_cast<double>(predicted));
    if (!std::isfinite(ppl))
        throw NumericError("perplexity is non-finite");
    return ppl;
}

inline double perplexity(const LanguageModel& lm, const Vocabulary& vocab, std::string_view text)
{
    const auto ids = vocab.encode(text);
    return perplexity(lm, ids);
}

// ---------------------------------------------------------------------------
// Lexical diversity

/// Whitespace split, lowercased. Punctuation stays attached to its word.
inline std::vector<std::string> words(std::string_view text)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty())
                out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty())
        out.push_back(std::move(cur));
    return out;
}

struct LexicalReport
{
    double ttr{0.0};
    double mattr{0.0};
    double unique_per_1000{0.0};
    double repeated_phrase_rate_pct{0.0};
};

inline constexpr std::size_t mattr_window = 500;

inline LexicalReport lexical_diversity(std::span<const std::string> tokens)
{
    if (tokens.empty())
        throw ConfigError("lexical_diversity: empty token list");
    const std::size_t n = tokens.size();
    // Dense ids make the sliding counts cheap.
    std::unordered_map<std::string, std::size_t> index;
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i)
        ids[i] = index.try_emplace(tokens[i], index.size()).first->second;

    LexicalReport r;
    r.ttr = static_cast<double>(index.size()) / static_cast<double>(n);

    const std::size_t w = std::min(mattr_window, n);
    std::vector<std::size_t> counts(index.size(), 0);
    std::size_t distinct = 0;
    for (std::size_t i = 0; i < w; ++i)
        distinct += counts[ids[i]]++ == 0;
    double sum = static_cast<double>(distinct);
    for (std::size_t i = w; i < n; ++i) {
        distinct += counts[ids[i]]++ == 0;
        distinct -= --counts[ids[i - w]] == 0;
        sum += static_cast<double>(distinct);
    }
    r.mattr = sum / static_cast<double>(n - w + 1) / static_cast<double>(w);

    if (n < 1000) {
        r.unique_per_1000 = static_cast<double>(index.size()) * 1000.0 / static_cast<double>(n);
    } else {
        double acc = 0.0;
        const std::size_t chunks = n / 1000;
        for (std::size_t c = 0; c < chunks; ++c) {
            std::vector<bool> seen(index.size(), false);
            std::size_t d = 0;
            for (std::size_t i = c * 1000; i < (c + 1) * 1000; ++i)
                if (!seen[ids[i]]) {
                    seen[ids[i]] = true;
                    ++d;
                }
            acc += static_cast<double>(d);
        }
        r.unique_per_1000 = acc / static_cast<double>(chunks);
    }

    if (n >= 3) {
        std::map<std::array<std::size_t, 3>, std::size_t> seen;
        for (std::size_t i = 0; i + 2 < n; ++i)
            ++seen[{ids[i], ids[i + 1], ids[i + 2]}];
        const std::size_t total = n - 2;
        r.repeated_phrase_rate_pct =
            100.0 * static_cast<double>(total - seen.size()) / static_cast<double>(total);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Sentence lengths

/// Word counts of sentences ended by '.', '!' or '?'. A nonempty unterminated
/// tail is one more sentence; sentences without words are skipped.
inline std::vector<std::size_t> sentence_lengths(std::string_view text)
{
    std::vector<std::size_t> out;
    std::size_t count = 0;
    bool in_word = false;
    for (char c : text) {
        const bool term = c == '.' || c == '!' || c == '?';
        const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !term && !in_word) {
            ++count;
            in_word = true;
        } else if (space) {
            in_word = false;
        }
        if (term) {
            in_word = false;
            if (count > 0)
                out.push_back(count);
            count = 0;
        }
    }
    if (count > 0)
        out.push_back(count);
    return out;
}

/// Sentence length (width-1 bins) to count.
using Histogram = std::map<std::size_t, std::size_t>;

inline Histogram sentence_length_histogram(std::string_view text)
{
    Histogram h;
    for (std::size_t len : sentence_lengths(text))
        ++h[len];
    return h;
}

/// Counts of two histograms over the union of their bins, ascending.
struct AlignedHistograms
{
    std::vector<std::size_t> bins;
    std::vector<std::size_t> counts_a;
    std::vector<std::size_t> counts_b;
};

inline AlignedHistograms align_histograms(const Histogram& a, const Histogram& b)
{
    AlignedHistograms out;
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> merged;
    for (const auto& [k, v] : a)
        merged[k].first = v;
    for (const auto& [k, v] : b)
        merged[k].second = v;
    for (const auto& [k, v] : merged) {
        out.bins.push_back(k);
        out.counts_a.push_back(v.first);
        out.counts_b.push_back(v.second);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention divergence

/// Mean over heads and (query, key) entries of |A_{l+1} - A_l| for each pair
/// of successive layers.
inline std::vector<double> attention_divergence(const AttentionTrace& trace)
{
    if (trace.layers.size() < 2)
        throw ConfigError("attention divergence needs at least 2 layers");
    std::vector<double> out;
    for (std::size_t l = 0; l + 1 < trace.layers.size(); ++l) {
        const Tensor& a = trace.layers[l];
        const Tensor& b = trace.layers[l + 1];
        require_same_shape(a, b, "attention_divergence");
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            acc += std::abs(b[i] - a[i]);
        out.push_back(acc / static_cast<double>(a.size()));
    }
    return out;
}

/// Per-pair divergence averaged over several probe inputs.
inline std::vector<double> attention_divergence(std::span<const AttentionTrace> traces)
{
    if (traces.empty())
        throw ConfigError("attention divergence needs at least one probe trace");
    std::vector<double> mean;
    for (const auto& t : traces) {
        const auto d = attention_divergence(t);
        if (mean.empty())
            mean.assign(d.size(), 0.0);
        if (d.size() != mean.size())
            throw ShapeError("probe traces have different layer counts");
        for (std::size_t i = 0; i < d.size(); ++i)
            mean[i] += d[i];
    }
    for (double& v : mean)
        v /= static_cast<double>(traces.size());
    return mean;
}

// ---------------------------------------------------------------------------
// Overlap scores

using Tokens = std::vector<std::string>;

struct NgramPrecision
{
    std::size_t clipped{0};
    std::size_t total{0};
};

inline NgramPrecision modified_precision(std::span<const std::string> candidate,
                                         std::span<const Tokens> references, std::size_t n)
{
    auto grams = [n](std::span<const std::string> toks) {
        std::map<std::vector<std::string>, std::size_t> out;
        for (std::size_t i = 0; i + n <= toks.size(); ++i)
            ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
        return out;
    };
    const auto cand = grams(candidate);
    std::map<std::vector<std::string>, std::size_t> max_ref;
    for (const auto& ref : references)
        for (const auto& [g, c] : grams(ref))
            max_ref[g] = std::max(max_ref[g], c);
    NgramPrecision p;
    for (const auto& [g, c] : cand) {
        p.total += c;
        auto it = max_ref.find(g);
        p.clipped += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
    }
    return p;
}

/// Corpus-free sentence BLEU: geometric mean of clipped n-gram precisions
/// times the brevity penalty. Zero counts at n >= 2 are smoothed to
/// 1 / (total + 1); orders longer than the candidate are left out.
inline double bleu(std::span<const std::string> candidate, std::span<const Tokens> references,
                   std::size_t max_n = 4)
{
    if (candidate.empty())
        throw ConfigError("bleu: empty candidate");
    if (references.empty())
        throw ConfigError("bleu: at least one reference required");
    if (max_n == 0)
        throw ConfigError("bleu: max_n must be >= 1");
    double log_sum = 0.0;
    std::size_t orders = 0;
    for (std::size_t n = 1; n <= std::min(max_n, candidate.size()); ++n) {
        const NgramPrecision p = modified_precision(candidate, references, n);
        double prec;
        if (p.clipped > 0)
            prec = static_cast<double>(p.clipped) / static_cast<double>(p.total);
        else if (n == 1)
            return 0.0;
        else
            prec = 1.0 / static_cast<double>(p.total + 1);
        log_sum += std::log(prec);
        ++orders;
    }
    const double c = static_cast<double>(candidate.size());
    // Closest reference length, the shorter one on ties.
    std::size_t r = references[0].size();
    for (const auto& ref : references) {
        const auto d = [&](std::size_t len) { return std::abs(static_cast<double>(len) - c); };
        if (d(ref.size()) < d(r) || (d(ref.size()) == d(r) && ref.size() < r))
            r = ref.size();
    }
    const double bp = c > static_cast<double>(r) ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
    return std::min(1.0, bp * std::exp(log_sum / static_cast<double>(orders)));
}

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b)
{
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// ROUGE-L F1 from the longest common subsequence.
inline double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference)
{
    if (candidate.empty() || reference.empty())
        throw ConfigError("rouge_l: empty input");
    const double lcs = static_cast<double>(lcs_length(candidate, reference));
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(reference.size());
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// Clustering

struct Clustering
{
    std::vector<std::size_t> assignments;
    std::vector<std::vector<double>> centroids;
    /// Within-cluster sum of squares after every completed iteration.
    std::vector<double> wcss_history;
    std::size_t iterations{0};
};

/// k-means with a seeded first centre and farthest-point initialisation.
inline Clustering cluster_activations(const std::vector<std::vector<double>>& rows, std::size_t k,
                                      std::size_t iters = 50, std::uint64_t seed = 0)
{
    if (k == 0)
        throw ConfigError("cluster_activations: k must be >= 1");
    if (k > rows.size())
        throw ConfigError("cluster_activations: k = " + std::to_string(k) + " exceeds " +
                          std::to_string(rows.size()) + " rows");
    const std::size_t dim = rows[0].size();
    for (const auto& r : rows)
        if (r.size() != dim)
            throw ShapeError("cluster_activations: ragged rows");
    auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            s += (a[i] - b[i]) * (a[i] - b[i]);
        return s;
    };

    Clustering out;
    Rng rng(seed);
    out.centroids.push_back(rows[rng.below(rows.size())]);
    std::vector<double> nearest(rows.size(), std::numeric_limits<double>::infinity());
    while (out.centroids.size() < k) {
        std::size_t far = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            nearest[i] = std::min(nearest[i], dist2(rows[i], out.centroids.back()));
            if (nearest[i] > nearest[far])
                far = i;
        }
        out.centroids.push_back(rows[far]);
    }

    out.assignments.assign(rows.size(), k);
    for (std::size_t it = 0; it < iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::size_t best = 0;
            double bd = dist2(rows[i], out.centroids[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = dist2(rows[i], out.centroids[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            changed = changed || out.assignments[i] != best;
            out.assignments[i] = best;
        }
        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            ++sizes[out.assignments[i]];
            for (std::size_t j = 0; j < dim; ++j)
                sums[out.assignments[i]][j] += rows[i][j];
        }
        for (std::size_t c = 0; c < k; ++c)
            if (sizes[c] > 0)
                for (std::size_t j = 0; j < dim; ++j)
                    out.centroids[c][j] = sums[c][j] / static_cast<double>(sizes[c]);
        double wcss = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i)
            wcss += dist2(rows[i], out.centroids[out.assignments[i]]);
        out.wcss_history.push_back(wcss);
        out.iterations = it + 1;
        if (!changed)
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingStat
{
    double median_ms{0.0};
    double cv{0.0};
    std::size_t reps{0};
};

struct TimingProfile
{
    TimingStat train_ms_per_step;
    TimingStat infer_ms_per_prediction;
};

inline constexpr std::size_t timing_warmup = 3;

template <class Fn>
TimingStat time_repeated(Fn&& fn, std::size_t reps)
{
    for (std::size_t i = 0; i < timing_warmup; ++i)
        fn();
    std::vector<double> ms;
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    TimingStat s;
    s.reps = reps;
    const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(reps);
    double var = 0.0;
    for (double v : ms)
        var += (v - mean) * (v - mean);
    s.cv = mean > 0.0 ? std::sqrt(var / static_cast<double>(reps)) / mean : 0.0;
    std::sort(ms.begin(), ms.end());
    s.median_ms = reps % 2 ? ms[reps / 2] : 0.5 * (ms[reps / 2 - 1] + ms[reps / 2]);
    return s;
}

/// Median wall-clock of a training step (on a scratch copy of the state) and
/// of one full-context next-token prediction.
inline TimingProfile timing_profile(const TrainState& state, std::span<const std::size_t> tokens,
                                    std::size_t reps = 20)
{
    if (reps < 20)
        throw ConfigError("timing needs at least 20 repetitions");
    const std::size_t seq = state.model.config.seq_len;
    TrainState scratch = state;
    std::uint64_t draw = 0;
    TimingProfile p;
    p.train_ms_per_step = time_repeated(
        [&] {
            const Batch b = sample_batch(tokens, state.train.batch_size, seq, state.train.seed ^ 0x71e5ULL, draw++);
            train_step(scratch, b);
        },
        reps);
    const std::span<const std::size_t> window = tokens.first(seq);
    p.infer_ms_per_prediction = time_repeated([&] { forward_lm(state.model, window, 1, seq); }, reps);
    return p;
}

} // namespace encap

#endif // ENCAP_EVALUATION_HPP_
