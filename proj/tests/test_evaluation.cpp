// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "encap/evaluation.hpp"
#include "support.hpp"

using namespace encap;

namespace
{

Tokens toks(std::string_view s) { return words(s); }

/// A transformer that predicts the successor in "abcd" cycles with
/// probability one: one-hot embeddings, every block zeroed so it reduces to
/// the residual path, and a head mapping each character to its successor.
LanguageModel memorizer(const Vocabulary& v, std::string_view cycle, double scale)
{
    ModelConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.seq_len = 8;
    c.vocab_size = v.size();
    LanguageModel lm = LanguageModel::init(c, 1);
    for (auto& [name, t] : lm.params)
        if (!name.ends_with(".gain"))
            for (double& x : t.storage())
                x = 0.0;
    Tensor& emb = lm.params.at("tok_emb");
    for (std::size_t id = 0; id < v.size(); ++id)
        emb.at(id, id) = 1.0;
    Tensor& head = lm.params.at("head.w");
    for (std::size_t i = 0; i < cycle.size(); ++i)
        head.at(v.id_of(cycle[i]), v.id_of(cycle[(i + 1) % cycle.size()])) = scale;
    return lm;
}

std::size_t brute_lcs(const Tokens& a, const Tokens& b)
{
    // Every subsequence of a, checked for being a subsequence of b.
    std::size_t best = 0;
    for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
        std::size_t j = 0, len = 0;
        bool ok = true;
        for (std::size_t i = 0; i < a.size() && ok; ++i) {
            if (!(mask >> i & 1u))
                continue;
            while (j < b.size() && b[j] != a[i])
                ++j;
            if (j == b.size())
                ok = false;
            else {
                ++j;
                ++len;
            }
        }
        if (ok)
            best = std::max(best, len);
    }
    return best;
}

Tokens random_tokens(Rng& rng, std::size_t n, std::size_t vocab)
{
    Tokens out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back("w" + std::to_string(rng.below(vocab)));
    return out;
}

} // namespace

// ---------------------------------------------------------------------------

TEST(Perplexity, UniformModelGivesVocabularySize)
{
    ModelConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.seq_len = 8;
    c.vocab_size = 10;
    LanguageModel lm = LanguageModel::init(c, 3);
    for (double& x : lm.params.at("head.w").storage())
        x = 0.0;
    Rng rng(1);
    std::vector<std::size_t> ids(45);
    for (auto& id : ids)
        id = rng.below(10);
    EXPECT_NEAR(perplexity(lm, ids), 10.0, 1e-12);
}

TEST(Perplexity, MemorizerGivesOne)
{
    std::string text;
    for (int i = 0; i < 30; ++i)
        text += "abcd";
    const Vocabulary v = Vocabulary::build(text);
    const LanguageModel lm = memorizer(v, "abcd", 10.0);
    EXPECT_NEAR(perplexity(lm, v, text), 1.0, 1e-6);
}

TEST(Perplexity, TooShort)
{
    const Vocabulary v = Vocabulary::build("ab");
    const LanguageModel lm = memorizer(v, "ab", 1.0);
    EXPECT_THROW(perplexity(lm, v, "a"), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Lexical, Examples)
{
    const Tokens abab{"a", "b", "a", "b"};
    EXPECT_EQ(lexical_diversity(abab).ttr, 0.5);

    const Tokens distinct = toks("one two three four five six");
    const LexicalReport r = lexical_diversity(distinct);
    EXPECT_EQ(r.ttr, 1.0);
    EXPECT_EQ(r.repeated_phrase_rate_pct, 0.0);
    EXPECT_EQ(r.mattr, r.ttr);

    // Trigrams abc, bca, cab, abc: one of four repeats.
    EXPECT_DOUBLE_EQ(lexical_diversity(toks("a b c a b c")).repeated_phrase_rate_pct, 25.0);
    EXPECT_THROW(lexical_diversity(Tokens{}), ConfigError);
}

TEST(Lexical, TokenizationLowercasesOnWhitespace)
{
    EXPECT_EQ(words("The  cat\nSAT. "), (Tokens{"the", "cat", "sat."}));
}

TEST(Lexical, MattrMatchesDirectRecomputation)
{
    Rng rng(12);
    for (std::size_t n : {40u, 499u, 500u, 501u, 1300u}) {
        const Tokens t = random_tokens(rng, n, 60);
        const std::size_t w = std::min<std::size_t>(500, n);
        double acc = 0.0;
        for (std::size_t s = 0; s + w <= n; ++s)
            acc += static_cast<double>(std::set<std::string>(t.begin() + s, t.begin() + s + w).size()) /
                   static_cast<double>(w);
        const double oracle = acc / static_cast<double>(n - w + 1);
        EXPECT_NEAR(lexical_diversity(t).mattr, oracle, 1e-12) << n;
    }
}

TEST(Lexical, UniquePerThousand)
{
    Rng rng(4);
    Tokens partial;
    for (int i = 0; i < 500; ++i)
        partial.push_back("w" + std::to_string(i % 100));
    EXPECT_DOUBLE_EQ(lexical_diversity(partial).unique_per_1000, 200.0);

    Tokens chunks;
    for (int i = 0; i < 1000; ++i)
        chunks.push_back("a" + std::to_string(i % 10));
    for (int i = 0; i < 1000; ++i)
        chunks.push_back("b" + std::to_string(i % 30));
    for (int i = 0; i < 400; ++i)
        chunks.push_back("c" + std::to_string(i));
    EXPECT_DOUBLE_EQ(lexical_diversity(chunks).unique_per_1000, 20.0);
}

// ---------------------------------------------------------------------------

TEST(SentenceLengths, Examples)
{
    EXPECT_EQ(sentence_lengths("Hi. How are you?"), (std::vector<std::size_t>{1, 3}));
    EXPECT_TRUE(sentence_length_histogram("").empty());
    EXPECT_EQ(sentence_lengths("no terminator here"), (std::vector<std::size_t>{3}));
    EXPECT_EQ(sentence_lengths("Wait... what?! Yes"), (std::vector<std::size_t>{1, 1, 1}));
}

TEST(SentenceLengths, CountsSumToSentences)
{
    const std::string text = encap::testing::synthetic_corpus(4000, 3);
    const auto lengths = sentence_lengths(text);
    const Histogram h = sentence_length_histogram(text);
    std::size_t total = 0;
    for (const auto& [len, count] : h)
        total += count;
    EXPECT_EQ(total, lengths.size());
    const Histogram other = sentence_length_histogram("One two. Three.");
    const AlignedHistograms a = align_histograms(h, other);
    EXPECT_EQ(a.bins.size(), a.counts_a.size());
    EXPECT_EQ(a.bins.size(), a.counts_b.size());
    EXPECT_TRUE(std::is_sorted(a.bins.begin(), a.bins.end()));
}

// ---------------------------------------------------------------------------

TEST(AttentionDivergence, Examples)
{
    AttentionTrace t;
    t.layers.push_back(Tensor({1, 2, 2}, {0.5, 0.5, 0.5, 0.5}));
    t.layers.push_back(Tensor({1, 2, 2}, {1.0, 0.0, 0.0, 1.0}));
    EXPECT_EQ(attention_divergence(t), (std::vector<double>{0.5}));

    AttentionTrace same;
    same.layers.assign(3, Tensor({1, 2, 2}, {1.0, 0.0, 0.3, 0.7}));
    EXPECT_EQ(attention_divergence(same), (std::vector<double>{0.0, 0.0}));

    AttentionTrace one;
    one.layers.push_back(Tensor({1, 2, 2}, {1.0, 0.0, 0.5, 0.5}));
    EXPECT_THROW(attention_divergence(one), ConfigError);
}

TEST(AttentionDivergence, BoundedOnModelTraces)
{
    ModelConfig c;
    c.layers = 3;
    c.hidden = 8;
    c.heads = 2;
    c.seq_len = 6;
    c.vocab_size = 9;
    c.encapsulation = true;
    c.module_count = 2;
    Rng rng(5);
    std::vector<AttentionTrace> traces;
    for (int trial = 0; trial < 10; ++trial) {
        LanguageModel lm = LanguageModel::init(c, 100 + trial);
        for (auto& [name, t] : lm.params)
            if (name.ends_with("wqkv"))
                for (double& x : t.storage())
                    x = 2.0 * rng.normal();
        std::vector<std::size_t> ids(6);
        for (auto& id : ids)
            id = rng.below(9);
        traces.push_back(*forward_lm(lm, ids, 1, 6, true).trace);
        for (double d : attention_divergence(traces.back())) {
            EXPECT_GE(d, 0.0);
            EXPECT_LE(d, 2.0);
        }
    }
    const auto mean = attention_divergence(traces);
    double direct = 0.0;
    for (const auto& t : traces)
        direct += attention_divergence(t)[1];
    EXPECT_NEAR(mean[1], direct / 10.0, 1e-15);
}

// ---------------------------------------------------------------------------

TEST(Bleu, Examples)
{
    const Tokens ref = toks("the cat is on the mat");
    const std::vector<Tokens> refs{ref};
    EXPECT_EQ(bleu(ref, refs), 1.0);
    EXPECT_EQ(bleu(toks("dog runs fast"), refs), 0.0);

    const NgramPrecision p = modified_precision(toks("the the the the the the the"), refs, 1);
    EXPECT_EQ(p.clipped, 2u);
    EXPECT_EQ(p.total, 7u);

    EXPECT_THROW(bleu(Tokens{}, refs), ConfigError);
}

TEST(Bleu, HandComputedValue)
{
    // p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0 -> smoothed 1/(3+1); equal lengths.
    const std::vector<Tokens> refs{toks("the cat is on the mat")};
    const double expect = std::pow((5.0 / 6.0) * (3.0 / 5.0) * 0.25 * 0.25, 0.25);
    EXPECT_NEAR(bleu(toks("the cat sat on the mat"), refs), expect, 1e-12);
    // Brevity penalty: candidate of 3 against a reference of 6.
    EXPECT_NEAR(bleu(toks("the cat is"), refs), std::exp(1.0 - 2.0), 1e-12);
}

TEST(Bleu, RangeOnRandomPairs)
{
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) {
        const Tokens c = random_tokens(rng, 1 + rng.below(12), 6);
        const std::vector<Tokens> r{random_tokens(rng, 1 + rng.below(12), 6)};
        const double b = bleu(c, r);
        EXPECT_GE(b, 0.0);
        EXPECT_LE(b, 1.0);
        const double rl = rouge_l(c, r[0]);
        EXPECT_GE(rl, 0.0);
        EXPECT_LE(rl, 1.0);
    }
}

// ---------------------------------------------------------------------------

TEST(RougeL, Examples)
{
    EXPECT_EQ(rouge_l(toks("a b c"), toks("a b c")), 1.0);
    EXPECT_EQ(rouge_l(toks("a b"), toks("c d")), 0.0);
    EXPECT_DOUBLE_EQ(rouge_l(toks("a c e"), toks("a b c d e")), 0.75);
    EXPECT_THROW(rouge_l(Tokens{}, toks("a")), ConfigError);
}

TEST(RougeL, LcsMatchesBruteForce)
{
    Rng rng(3);
    for (int i = 0; i < 300; ++i) {
        const Tokens a = random_tokens(rng, 1 + rng.below(10), 4);
        const Tokens b = random_tokens(rng, 1 + rng.below(10), 4);
        EXPECT_EQ(lcs_length(a, b), brute_lcs(a, b));
    }
}

// ---------------------------------------------------------------------------

TEST(Clustering, SingleClusterIsTheMean)
{
    const std::vector<std::vector<double>> rows{{1, 2}, {3, 4}, {5, 9}};
    const Clustering c = cluster_activations(rows, 1, 50, 2);
    EXPECT_DOUBLE_EQ(c.centroids[0][0], 3.0);
    EXPECT_DOUBLE_EQ(c.centroids[0][1], 5.0);
}

TEST(Clustering, RecoversSeparatedClouds)
{
    Rng rng(19);
    std::vector<std::vector<double>> rows;
    std::vector<int> truth;
    for (int i = 0; i < 40; ++i) {
        const int side = static_cast<int>(rng.below(2));
        rows.push_back({side * 10.0 + 0.3 * rng.normal(), 0.3 * rng.normal(), side * -10.0 + 0.3 * rng.normal()});
        truth.push_back(side);
    }
    for (std::uint64_t seed : {0u, 1u, 2u, 3u}) {
        const Clustering c = cluster_activations(rows, 2, 50, seed);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < rows.size(); ++j)
                EXPECT_EQ(c.assignments[i] == c.assignments[j], truth[i] == truth[j]);
    }
}

TEST(Clustering, WcssNonIncreasingAndSeeded)
{
    Rng rng(23);
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 200; ++i)
        rows.push_back({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    const Clustering a = cluster_activations(rows, 5, 50, 9), b = cluster_activations(rows, 5, 50, 9);
    EXPECT_EQ(a.assignments, b.assignments);
    EXPECT_EQ(a.centroids, b.centroids);
    for (std::size_t i = 1; i < a.wcss_history.size(); ++i)
        EXPECT_LE(a.wcss_history[i], a.wcss_history[i - 1]);
    EXPECT_THROW(cluster_activations(rows, 0), ConfigError);
    EXPECT_THROW(cluster_activations({{1.0}, {2.0}}, 3), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Timing, PositiveWithSpread)
{
    const std::string text = encap::testing::synthetic_corpus(3000);
    const Vocabulary v = Vocabulary::build(text);
    ModelConfig c;
    c.layers = 1;
    c.hidden = 8;
    c.heads = 2;
    c.seq_len = 8;
    TrainConfig tc;
    tc.batch_size = 2;
    const TrainState s = make_state(c, tc, v);
    const auto ids = v.encode(text);
    const TimingProfile p = timing_profile(s, ids, 20);
    EXPECT_GT(p.infer_ms_per_prediction.median_ms, 0.0);
    EXPECT_GT(p.train_ms_per_step.median_ms, 0.0);
    EXPECT_GE(p.infer_ms_per_prediction.cv, 0.0);
    EXPECT_EQ(p.train_ms_per_step.reps, 20u);
    EXPECT_THROW(timing_profile(s, ids, 5), ConfigError);
}
