// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_MODEL_HPP_
#define ENCAP_MODEL_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "encap/encapsulation.hpp"
#include "encap/errors.hpp"
#include "encap/ops.hpp"
#include "encap/rng.hpp"
#include "encap/tape.hpp"
#include "encap/tensor.hpp"

namespace encap
{

// ---------------------------------------------------------------------------
// Vocabulary

/// Byte-level character vocabulary. Id 0 is reserved for unknown characters;
/// the remaining ids follow first occurrence in the corpus.
class Vocabulary
{
public:
    static constexpr std::size_t unk_id = 0;
    /// Rendering of the unknown id when decoding (ASCII SUB).
    static constexpr char unk_char = '\x1a';

    Vocabulary() { index_.fill(unk_id); }

    static Vocabulary build(std::string_view corpus)
    {
        if (corpus.empty())
            throw ConfigError("cannot build a vocabulary from an empty corpus");
        Vocabulary v;
        for (char c : corpus)
            v.add(c);
        return v;
    }

    /// Rebuilds from the ordered character list of ids 1..V-1.
    static Vocabulary from_chars(std::span<const char> chars)
    {
        Vocabulary v;
        for (char c : chars) {
            if (v.contains(c))
                throw ConfigError("vocabulary lists a character twice");
            v.add(c);
        }
        return v;
    }

    std::size_t size() const noexcept { return chars_.size() + 1; }
    const std::vector<char>& chars() const noexcept { return chars_; }

    bool contains(char c) const noexcept { return index_[static_cast<unsigned char>(c)] != unk_id; }

    std::size_t id_of(char c) const noexcept { return index_[static_cast<unsigned char>(c)]; }

    std::vector<std::size_t> encode(std::string_view text) const
    {
        std::vector<std::size_t> ids;
        ids.reserve(text.size());
        for (char c : text)
            ids.push_back(id_of(c));
        return ids;
    }

    std::string decode(std::span<const std::size_t> ids) const
    {
        std::string out;
        out.reserve(ids.size());
        for (std::size_t id : ids) {
            if (id >= size())
                throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(size()));
            out.push_back(id == unk_id ? unk_char : chars_[id - 1]);
        }
        return out;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.chars_ == b.chars_; }

private:
    void add(char c)
    {
        if (contains(c))
            return;
        chars_.push_back(c);
        index_[static_cast<unsigned char>(c)] = chars_.size();
    }

    std::vector<char> chars_;
    std::array<std::size_t, 256> index_{};
};

// ---------------------------------------------------------------------------
// Configuration and parameters

struct ModelConfig
{
    std::size_t layers{2};
    std::size_t hidden{64};
    std::size_t heads{4};
    std::size_t seq_len{128};
    std::size_t module_count{1};
    bool encapsulation{false};
    double beta{1.0};
    std::size_t vocab_size{0};

    std::size_t ffn_width() const noexcept { return 4 * hidden; }

    void validate() const
    {
        if (layers == 0)
            throw ConfigError("layers must be >= 1");
        if (hidden == 0 || heads == 0)
            throw ConfigError("hidden and heads must be >= 1");
        if (hidden % heads != 0)
            throw ConfigError("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                              std::to_string(heads) + ")");
        if (seq_len == 0)
            throw ConfigError("seq_len must be >= 1");
        if (module_count == 0)
            throw ConfigError("module_count must be >= 1");
        if (!encapsulation && module_count != 1)
            throw ConfigError("module_count must be 1 when encapsulation is false");
        if (!(beta >= 0.0) || !std::isfinite(beta))
            throw ConfigError("beta must be finite and nonnegative");
        if (vocab_size < 2)
            throw ConfigError("vocab_size must be >= 2");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using ParamMap = std::map<std::string, Tensor>;

inline std::string block_prefix(std::size_t layer, std::size_t module)
{
    return "layers." + std::to_string(layer) + ".mod." + std::to_string(module) + ".";
}

inline std::string alpha_name(std::size_t layer) { return "layers." + std::to_string(layer) + ".alpha"; }

inline bool is_alpha_name(std::string_view name)
{
    return name.size() > 6 && name.substr(name.size() - 6) == ".alpha";
}

/// Parameter names and shapes, in the order used for initialisation.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c)
{
    const std::size_t d = c.hidden, v = c.vocab_size, f = c.ffn_width();
    std::vector<std::pair<std::string, Shape>> out{{"tok_emb", {v, d}}, {"pos_emb", {c.seq_len, d}}};
    for (std::size_t l = 0; l < c.layers; ++l) {
        for (std::size_t m = 0; m < c.module_count; ++m) {
            const std::string p = block_prefix(l, m);
            out.push_back({p + "ln1.gain", {d}});
            out.push_back({p + "ln1.bias", {d}});
            out.push_back({p + "attn.wqkv", {d, 3 * d}});
            out.push_back({p + "attn.bqkv", {3 * d}});
            out.push_back({p + "attn.wo", {d, d}});
            out.push_back({p + "attn.bo", {d}});
            out.push_back({p + "ln2.gain", {d}});
            out.push_back({p + "ln2.bias", {d}});
            out.push_back({p + "ffn.w1", {d, f}});
            out.push_back({p + "ffn.b1", {f}});
            out.push_back({p + "ffn.w2", {f, d}});
            out.push_back({p + "ffn.b2", {d}});
        }
        if (c.encapsulation)
            out.push_back({alpha_name(l), {c.module_count}});
    }
    out.push_back({"ln_f.gain", {d}});
    out.push_back({"ln_f.bias", {d}});
    out.push_back({"head.w", {d, v}});
    out.push_back({"head.b", {v}});
    return out;
}

/// Exact number of scalar parameters, alpha weights included.
inline std::size_t param_count(const ModelConfig& c)
{
    std::size_t n = 0;
    for (const auto& [name, shape] : parameter_layout(c))
        n += shape_numel(shape);
    return n;
}

struct LanguageModel
{
    ModelConfig config;
    ParamMap params;

    /// normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm
    /// gains, uniform alpha.
    static LanguageModel init(const ModelConfig& config, std::uint64_t seed)
    {
        config.validate();
        LanguageModel lm;
        lm.config = config;
        Rng rng(seed);
        for (const auto& [name, shape] : parameter_layout(config)) {
            Tensor t(shape);
            const bool is_bias = name.ends_with(".bias") || name.ends_with("bqkv") || name.ends_with(".bo") ||
                                 name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b";
            if (name.ends_with(".gain")) {
                for (double& x : t.storage())
                    x = 1.0;
            } else if (is_alpha_name(name)) {
                for (double& x : t.storage())
                    x = 1.0 / static_cast<double>(config.module_count);
            } else if (!is_bias) {
                for (double& x : t.storage())
                    x = 0.02 * rng.normal();
            }
            lm.params.emplace(name, std::move(t));
        }
        return lm;
    }

    std::vector<double> alpha(std::size_t layer) const
    {
        if (!config.encapsulation)
            return {1.0};
        const Tensor& a = params.at(alpha_name(layer));
        return {a.data().begin(), a.data().end()};
    }

    void set_alpha(std::size_t layer, std::span<const double> values)
    {
        if (!config.encapsulation)
            throw ConfigError("baseline model has no aggregation weights");
        Tensor& a = params.at(alpha_name(layer));
        if (values.size() != a.size())
            throw ShapeError("alpha size mismatch");
        std::copy(values.begin(), values.end(), a.data().begin());
    }

    /// Checks that every expected tensor is present with the expected shape.
    void validate() const
    {
        config.validate();
        const auto layout = parameter_layout(config);
        if (layout.size() != params.size())
            throw ShapeError("model holds " + std::to_string(params.size()) + " tensors, config expects " +
                             std::to_string(layout.size()));
        for (const auto& [name, shape] : layout) {
            auto it = params.find(name);
            if (it == params.end())
                throw ShapeError("missing parameter tensor " + name);
            if (it->second.shape() != shape)
                throw ShapeError("parameter " + name + " has shape " + shape_str(it->second.shape()) +
                                 ", config expects " + shape_str(shape));
        }
    }
};

// ---------------------------------------------------------------------------
// Forward pass

/// Binds every parameter to the tape.
inline ParamVars bind_params(Tape& tape, const ParamMap& params, bool trainable)
{
    ParamVars vars;
    for (const auto& [name, t] : params)
        vars.emplace(name, tape.leaf(t, trainable));
    return vars;
}

/// Output of one transformer block plus the node holding its attention
/// probabilities.
struct BlockOutput
{
    Var out;
    std::size_t attention_node{0};
};

/// Pre-norm block: x + attn(ln1 x), then + ffn(ln2 .). Rows of x are
/// batch * seq tokens, sequence-major.
inline BlockOutput block_forward(const ParamVars& p, const std::string& prefix, Var x, std::size_t seq,
                                 std::size_t heads)
{
    const std::size_t rows = x.tape->value(x).rows();
    if (seq == 0 || rows % seq != 0)
        throw ShapeError("block input rows are not a whole number of sequences");
    auto at = [&](const char* n) { return p.at(prefix + n); };
    Var h = scale_shift_rows(layer_norm(x), at("ln1.gain"), at("ln1.bias"));
    Var qkv = add_row_bias(matmul(h, at("attn.wqkv")), at("attn.bqkv"));
    Var att = causal_attention(qkv, rows / seq, seq, heads);
    Var x1 = add(x, add_row_bias(matmul(att, at("attn.wo")), at("attn.bo")));
    Var h2 = scale_shift_rows(layer_norm(x1), at("ln2.gain"), at("ln2.bias"));
    Var f = add_row_bias(matmul(gelu(add_row_bias(matmul(h2, at("ffn.w1")), at("ffn.b1"))), at("ffn.w2")),
                         at("ffn.b2"));
    return {add(x1, f), att.id};
}

/// Sub-block (layer, module) as a module closure over already-bound params.
inline ModuleFn live_block(const ParamVars& p, std::size_t layer, std::size_t module, std::size_t seq,
                           std::size_t heads)
{
    return [&p, prefix = block_prefix(layer, module), seq, heads](Tape&, Var x) {
        return block_forward(p, prefix, x, seq, heads).out;
    };
}

/// Sub-block (layer, module) binding its own parameters as constants.
inline ModuleFn frozen_block(const ParamMap& params, std::size_t layer, std::size_t module, std::size_t seq,
                             std::size_t heads)
{
    return [&params, prefix = block_prefix(layer, module), seq, heads](Tape& t, Var x) {
        ParamVars p;
        for (auto it = params.lower_bound(prefix); it != params.end() && it->first.starts_with(prefix); ++it)
            p.emplace(it->first, t.constant(it->second));
        return block_forward(p, prefix, x, seq, heads).out;
    };
}

struct LayerRecord
{
    Var input;
    std::vector<Var> module_outputs;
    std::vector<std::size_t> attention_nodes;
    Var output;
};

struct TapeForward
{
    Var logits; // [batch*seq x V]
    std::vector<LayerRecord> layers;
};

inline void check_tokens(const ModelConfig& c, std::span<const std::size_t> tokens, std::size_t batch,
                         std::size_t seq)
{
    if (batch == 0 || seq == 0 || tokens.size() != batch * seq)
        throw ShapeError("token batch must hold batch * seq ids");
    if (seq > c.seq_len)
        throw ShapeError("sequence of length " + std::to_string(seq) + " exceeds seq_len " +
                         std::to_string(c.seq_len));
    for (std::size_t id : tokens)
        if (id >= c.vocab_size)
            throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(c.vocab_size));
}

/// Forward pass on a tape. `tokens` is batch sequences of length seq, laid
/// out sequence-major.
inline TapeForward forward_on_tape(const ModelConfig& c, const ParamVars& p, std::span<const std::size_t> tokens,
                                   std::size_t batch, std::size_t seq)
{
    check_tokens(c, tokens, batch, seq);
    std::vector<std::size_t> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i)
        positions[i] = i % seq;
    Var x = add(embedding_lookup(p.at("tok_emb"), tokens), embedding_lookup(p.at("pos_emb"), positions));
    TapeForward fw;
    for (std::size_t l = 0; l < c.layers; ++l) {
        LayerRecord rec;
        rec.input = x;
        for (std::size_t m = 0; m < c.module_count; ++m) {
            BlockOutput b = block_forward(p, block_prefix(l, m), x, seq, c.heads);
            rec.module_outputs.push_back(b.out);
            rec.attention_nodes.push_back(b.attention_node);
        }
        x = c.encapsulation ? aggregate(p.at(alpha_name(l)), rec.module_outputs) : rec.module_outputs[0];
        rec.output = x;
        fw.layers.push_back(std::move(rec));
    }
    Var h = scale_shift_rows(layer_norm(x), p.at("ln_f.gain"), p.at("ln_f.bias"));
    fw.logits = add_row_bias(matmul(h, p.at("head.w")), p.at("head.b"));
    return fw;
}

/// Attention maps of one forward pass: per layer a [heads x seq x seq] tensor.
struct AttentionTrace
{
    std::vector<Tensor> layers;
};

struct LmOutput
{
    Tensor logits; // [batch x seq x V]
    std::optional<AttentionTrace> trace;
};

/// Frozen-parameter forward pass. When recorded, each layer's trace is the
/// batch mean of its attention maps; with several modules the maps are
/// averaged with that layer's alpha.
inline LmOutput forward_lm(const LanguageModel& lm, std::span<const std::size_t> tokens, std::size_t batch,
                           std::size_t seq, bool record_attention = false)
{
    const ModelConfig& c = lm.config;
    Tape tape;
    ParamVars p = bind_params(tape, lm.params, false);
    TapeForward fw = forward_on_tape(c, p, tokens, batch, seq);
    LmOutput out;
    out.logits = tape.value(fw.logits).reshaped({batch, seq, c.vocab_size});
    if (record_attention) {
        AttentionTrace trace;
        for (std::size_t l = 0; l < c.layers; ++l) {
            const auto alpha = lm.alpha(l);
            Tensor map({c.heads, seq, seq});
            const std::size_t per = c.heads * seq * seq;
            for (std::size_t m = 0; m < c.module_count; ++m) {
                const Tensor& probs = tape.node(fw.layers[l].attention_nodes[m]).saved[0];
                const double w = alpha[m] / static_cast<double>(batch);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t i = 0; i < per; ++i)
                        map[i] += w * probs[b * per + i];
            }
            trace.layers.push_back(std::move(map));
        }
        out.trace = std::move(trace);
    }
    return out;
}

/// Input X of every layer for one token batch, frozen parameters.
inline std::vector<Tensor> layer_inputs(const LanguageModel& lm, std::span<const std::size_t> tokens,
                                        std::size_t batch, std::size_t seq)
{
    Tape tape;
    ParamVars p = bind_params(tape, lm.params, false);
    TapeForward fw = forward_on_tape(lm.config, p, tokens, batch, seq);
    std::vector<Tensor> out;
    for (const auto& rec : fw.layers)
        out.push_back(tape.value(rec.input));
    return out;
}

// ---------------------------------------------------------------------------
// Generation

/// Samples n_tokens continuations of prompt. Temperature 0 takes the argmax
/// (lowest id on ties); otherwise sampling from softmax(logits / T) driven by
/// a generator seeded with `seed`.
inline std::string generate(const LanguageModel& lm, const Vocabulary& vocab, std::string_view prompt,
                            std::size_t n_tokens, double temperature, std::uint64_t seed,
                            std::vector<std::string>* warnings = nullptr)
{
    if (!(temperature >= 0.0) || !std::isfinite(temperature))
        throw ConfigError("temperature must be finite and >= 0");
    if (vocab.size() != lm.config.vocab_size)
        throw ConfigError("vocabulary size does not match the model");
    std::vector<std::size_t> ids = vocab.encode(prompt);
    std::string out(prompt);
    if (n_tokens == 0)
        return out;
    const bool no_context =
        std::all_of(ids.begin(), ids.end(), [](std::size_t id) { return id == Vocabulary::unk_id; });
    if (no_context && warnings)
        warnings->push_back("prompt carries no known characters; generating from the unknown token");
    if (ids.empty())
        ids.push_back(Vocabulary::unk_id);
    Rng rng(seed);
    const std::size_t vsize = lm.config.vocab_size;
    for (std::size_t step = 0; step < n_tokens; ++step) {
        const std::size_t ctx = std::min(ids.size(), lm.config.seq_len);
        std::span<const std::size_t> window(ids.data() + ids.size() - ctx, ctx);
        const LmOutput fw = forward_lm(lm, window, 1, ctx);
        const double* logits = fw.logits.data().data() + (ctx - 1) * vsize;
        std::size_t next = 0;
        if (temperature == 0.0) {
            for (std::size_t j = 1; j < vsize; ++j)
                if (logits[j] > logits[next])
                    next = j;
        } else {
            std::vector<double> probs(logits, logits + vsize);
            for (double& v : probs)
                v /= temperature;
            detail::softmax_inplace(probs);
            const double u = rng.uniform();
            double acc = 0.0;
            next = vsize - 1;
            for (std::size_t j = 0; j < vsize; ++j) {
                acc += probs[j];
                if (u < acc) {
                    next = j;
                    break;
                }
            }
        }
        ids.push_back(next);
        const std::size_t one[1] = {next};
        out += vocab.decode(one);
    }
    return out;
}

} // namespace encap

#endif // ENCAP_MODEL_HPP_
