// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_TRAINING_HPP_
#define ENCAP_TRAINING_HPP_

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "encap/encapsulation.hpp"
#include "encap/errors.hpp"
#include "encap/model.hpp"
#include "encap/rng.hpp"

namespace encap
{

struct TrainConfig
{
    double learning_rate{0.1};
    std::size_t batch_size{8};
    std::size_t steps{1000};
    std::uint64_t seed{1};
    double lambda_penalty{1e-3};
    double lambda_decay{1e-4};
    double lambda_laplacian{0.0};
    std::size_t curvature_probes{4};
    /// Steps between curvature re-weightings of alpha; 0 keeps alpha uniform
    /// at initialisation and never re-weights.
    std::size_t curvature_refresh_every{50};
    double mix_consensus{0.1};
    double mix_laplacian{0.0};
    std::size_t eval_every{100};
    /// Leading sequences of a batch used for the gradient-norm penalty.
    std::size_t penalty_sequences{1};
    /// Coordinates per Laplacian evaluation; 0 means all when at most 64.
    std::size_t laplacian_coord_sample{0};
    /// Also shrink alpha by (1 - lambda_decay) before projecting.
    bool decay_alpha{false};

    void validate() const
    {
        auto finite_nonneg = [](double v, const char* name) {
            if (!std::isfinite(v) || v < 0.0)
                throw ConfigError(std::string(name) + " must be finite and >= 0");
        };
        if (!std::isfinite(learning_rate) || learning_rate <= 0.0)
            throw ConfigError("learning_rate must be finite and > 0");
        finite_nonneg(lambda_penalty, "lambda_penalty");
        finite_nonneg(lambda_laplacian, "lambda_laplacian");
        finite_nonneg(mix_consensus, "mix_consensus");
        finite_nonneg(mix_laplacian, "mix_laplacian");
        if (!std::isfinite(lambda_decay) || lambda_decay < 0.0 || lambda_decay >= 1.0)
            throw ConfigError("lambda_decay must lie in [0, 1)");
        if (batch_size == 0)
            throw ConfigError("batch_size must be >= 1");
        if (curvature_probes == 0)
            throw ConfigError("curvature_probes must be >= 1");
        if (eval_every == 0)
            throw ConfigError("eval_every must be >= 1");
        if (penalty_sequences == 0)
            throw ConfigError("penalty_sequences must be >= 1");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Data

struct CorpusSplit
{
    std::string train;
    std::string heldout;
};

/// Last tenth of the text is held out.
inline CorpusSplit split_corpus(std::string_view text)
{
    const std::size_t held = text.size() / 10;
    return {std::string(text.substr(0, text.size() - held)), std::string(text.substr(text.size() - held))};
}

struct Batch
{
    std::vector<std::size_t> inputs;
    std::vector<std::size_t> targets;
    std::size_t batch{0};
    std::size_t seq{0};
};

inline void require_trainable_length(std::size_t tokens, std::size_t batch, std::size_t seq)
{
    if (tokens < seq + 1 || tokens < batch * seq)
        throw ConfigError("corpus too small: " + std::to_string(tokens) + " training tokens, need at least " +
                          std::to_string(std::max(seq + 1, batch * seq)) + " for batch_size " +
                          std::to_string(batch) + " x seq_len " + std::to_string(seq));
}

/// Batch number `draw`: windows start at counter-hashed offsets, so any draw
/// can be reproduced without replaying earlier ones.
inline Batch sample_batch(std::span<const std::size_t> tokens, std::size_t batch, std::size_t seq,
                          std::uint64_t seed, std::uint64_t draw)
{
    require_trainable_length(tokens.size(), batch, seq);
    Batch b;
    b.batch = batch;
    b.seq = seq;
    const std::size_t span = tokens.size() - seq;
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t start = counter_hash(seed, 0xba7c4ULL + draw, i) % span;
        b.inputs.insert(b.inputs.end(), tokens.begin() + start, tokens.begin() + start + seq);
        b.targets.insert(b.targets.end(), tokens.begin() + start + 1, tokens.begin() + start + seq + 1);
    }
    return b;
}

// ---------------------------------------------------------------------------
// State and step

struct TrainState
{
    LanguageModel model;
    Vocabulary vocab;
    TrainConfig train;
    /// Completed steps; also the number of batches drawn so far.
    std::size_t step{0};
};

inline TrainState make_state(ModelConfig model, const TrainConfig& train, const Vocabulary& vocab)
{
    train.validate();
    model.vocab_size = vocab.size();
    TrainState s;
    s.model = LanguageModel::init(model, train.seed);
    s.vocab = vocab;
    s.train = train;
    return s;
}

struct StepReport
{
    std::size_t step{0};
    double ce{0.0};
    double consensus{0.0};
    double penalty{0.0};
    std::optional<double> laplacian;
    double total{0.0};
    std::vector<std::vector<double>> alpha;
    std::vector<std::vector<double>> curvature;
    std::vector<std::string> warnings;
};

/// One descent step on alpha followed by projection back onto the simplex.
inline SimplexProjection update_alpha(std::span<const double> alpha, std::span<const double> grad,
                                      double learning_rate, double decay = 0.0)
{
    if (alpha.size() != grad.size())
        throw ShapeError("update_alpha: weight and gradient sizes differ");
    std::vector<double> next(alpha.size());
    for (std::size_t m = 0; m < alpha.size(); ++m)
        next[m] = (alpha[m] - learning_rate * grad[m]) * (1.0 - decay);
    return project_simplex(next);
}

inline std::vector<ModuleFn> frozen_blocks(const LanguageModel& lm, std::size_t layer, std::size_t seq)
{
    std::vector<ModuleFn> fns;
    for (std::size_t m = 0; m < lm.config.module_count; ++m)
        fns.push_back(frozen_block(lm.params, layer, m, seq, lm.config.heads));
    return fns;
}

/// Re-weights every layer's alpha from curvature estimates at that layer's
/// input for one sequence. Returns the estimates, per layer.
inline std::vector<std::vector<double>> refresh_alpha(TrainState& s, std::span<const std::size_t> sequence)
{
    LanguageModel& lm = s.model;
    if (!lm.config.encapsulation)
        return {};
    const std::size_t seq = sequence.size();
    const auto inputs = layer_inputs(lm, sequence, 1, seq);
    std::vector<std::vector<double>> curv;
    for (std::size_t l = 0; l < lm.config.layers; ++l) {
        const auto fns = frozen_blocks(lm, l, seq);
        const auto est = curvature_estimate(fns, inputs[l], s.train.curvature_probes,
                                            counter_hash(s.train.seed, 0xc0ffULL + s.step, l));
        curv.push_back(est.per_module);
    }
    for (std::size_t l = 0; l < lm.config.layers; ++l)
        lm.set_alpha(l, curvature_weights(curv[l], lm.config.beta));
    return curv;
}

/// Forward, backward and update on one batch. Raises NumericError naming the
/// offending tensor if anything turns non-finite.
inline StepReport train_step(TrainState& s, const Batch& b)
{
    LanguageModel& lm = s.model;
    const ModelConfig& c = lm.config;
    const TrainConfig& tc = s.train;
    const std::size_t rows = b.batch * b.seq;

    Tape tape;
    ParamVars p = bind_params(tape, lm.params, true);
    TapeForward fw = forward_on_tape(c, p, b.inputs, b.batch, b.seq);
    Var ce = cross_entropy_mean(fw.logits, b.targets);
    Var total = ce;

    StepReport r;
    if (c.encapsulation) {
        const std::size_t pen_rows = std::min(tc.penalty_sequences, b.batch) * b.seq;
        double lap_value = 0.0;
        for (std::size_t l = 0; l < c.layers; ++l) {
            const LayerRecord& rec = fw.layers[l];
            // Per token row, like the cross-entropy, so the mix weight does not
            // grow with batch size.
            Var cons = scale(consensus_loss(rec.output, rec.module_outputs), 1.0 / static_cast<double>(rows));
            r.consensus += tape.value(cons)[0];
            std::vector<ModuleFn> live;
            for (std::size_t m = 0; m < c.module_count; ++m)
                live.push_back(live_block(p, l, m, b.seq, c.heads));
            if (tc.mix_consensus > 0.0) {
                Var term = cons;
                if (tc.lambda_penalty > 0.0) {
                    const auto frozen = frozen_blocks(lm, l, b.seq);
                    Var xs = slice_rows(rec.input, 0, pen_rows);
                    for (std::size_t m = 0; m < c.module_count; ++m) {
                        Var pen = gradient_norm_penalty(live[m], frozen[m], xs);
                        r.penalty += tape.value(pen)[0];
                        term = add(term, scale(pen, tc.lambda_penalty));
                    }
                }
                total = add(total, scale(term, tc.mix_consensus));
            }
            if (tc.mix_laplacian > 0.0) {
                Var x1 = slice_rows(rec.input, 0, b.seq);
                const auto coords = laplacian_coords(b.seq * c.hidden, tc.laplacian_coord_sample,
                                                     counter_hash(tc.seed, 0x1a91ULL + s.step, l));
                const std::vector<double> lambdas(c.module_count, tc.lambda_laplacian);
                Var lap = laplacian_encap_loss(live, lambdas, x1, coords);
                lap_value += tape.value(lap)[0];
                total = add(total, scale(lap, tc.mix_laplacian));
            }
        }
        if (tc.mix_laplacian > 0.0)
            r.laplacian = lap_value;
    }
    tape.backward(total);
    r.ce = tape.value(ce)[0];
    r.total = tape.value(total)[0];

    std::map<std::string, Tensor> grads;
    for (const auto& [name, var] : p) {
        Tensor g = tape.grad(var);
        if (!g.all_finite())
            throw NumericError("non-finite gradient for parameter " + name + " at step " + std::to_string(s.step));
        grads.emplace(name, std::move(g));
    }
    const double keep = 1.0 - tc.lambda_decay;
    for (auto& [name, t] : lm.params) {
        const Tensor& g = grads.at(name);
        if (is_alpha_name(name)) {
            SimplexProjection proj =
                update_alpha(t.data(), g.data(), tc.learning_rate, tc.decay_alpha ? tc.lambda_decay : 0.0);
            if (proj.reset_to_uniform)
                r.warnings.push_back(name + ": " + proj.warning);
            t.storage() = std::move(proj.alpha);
            continue;
        }
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = (t[i] - tc.learning_rate * g[i]) * keep;
        if (!t.all_finite())
            throw NumericError("parameter " + name + " became non-finite at step " + std::to_string(s.step));
    }
    ++s.step;
    r.step = s.step;

    if (c.encapsulation && tc.curvature_refresh_every > 0 && s.step % tc.curvature_refresh_every == 0)
        r.curvature = refresh_alpha(s, std::span(b.inputs).first(b.seq));
    for (std::size_t l = 0; l < c.layers; ++l)
        r.alpha.push_back(lm.alpha(l));
    return r;
}

// ---------------------------------------------------------------------------
// Standalone layer

struct LayerStepReport
{
    double task{0.0};
    double encapsulation{0.0};
    double total{0.0};
    std::vector<double> alpha;
    std::vector<std::string> warnings;
};

/// The same update applied to a bare encapsulation layer whose task loss is
/// |H - target|^2.
inline LayerStepReport layer_step(EncapsulationLayer& layer, const Tensor& x, const Tensor& target,
                                  const TrainConfig& tc, std::uint64_t step_seed = 0)
{
    Tape tape;
    BoundLayer b = bind(tape, layer, true);
    Var xv = tape.constant(x);
    std::vector<Var> outs;
    std::vector<ModuleFn> live;
    for (std::size_t m = 0; m < layer.size(); ++m) {
        outs.push_back(module_forward(b, m, xv));
        live.push_back(b.module(m));
    }
    Var h = aggregate(b.alpha, outs);
    Var task = sum_squares(sub(h, tape.constant(target)));
    Var total = task;
    Var enc = tape.constant(Tensor::scalar(0.0));
    if (tc.mix_consensus > 0.0) {
        const auto frozen = frozen_modules(layer);
        enc = add(enc, scale(alg1_loss(live, frozen, xv, outs, h, tc.lambda_penalty), tc.mix_consensus));
    }
    if (tc.mix_laplacian > 0.0) {
        const auto coords = laplacian_coords(x.size(), tc.laplacian_coord_sample, step_seed);
        enc = add(enc, scale(laplacian_encap_loss(live, layer.lambda_laplacian, xv, coords), tc.mix_laplacian));
    }
    total = add(total, enc);
    tape.backward(total);

    LayerStepReport r;
    r.task = tape.value(task)[0];
    r.encapsulation = tape.value(enc)[0];
    r.total = tape.value(total)[0];
    const double keep = 1.0 - tc.lambda_decay;
    for (std::size_t m = 0; m < layer.size(); ++m) {
        for (auto& [name, t] : layer.modules[m].params) {
            const Tensor g = tape.grad(b.params[m].at(name));
            if (!g.all_finite())
                throw NumericError("non-finite gradient for module " + std::to_string(m) + " parameter " + name);
            for (std::size_t i = 0; i < t.size(); ++i)
                t[i] = (t[i] - tc.learning_rate * g[i]) * keep;
        }
    }
    const Tensor ga = tape.grad(b.alpha);
    SimplexProjection proj =
        update_alpha(layer.alpha, ga.data(), tc.learning_rate, tc.decay_alpha ? tc.lambda_decay : 0.0);
    if (proj.reset_to_uniform)
        r.warnings.push_back(proj.warning);
    layer.alpha = std::move(proj.alpha);
    r.alpha = layer.alpha;
    return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow
{
    std::size_t step{0};
    double ce{0.0};
    double consensus{0.0};
    std::optional<double> laplacian;
    double eq3{0.0};
    std::vector<std::vector<double>> alpha;
    double wall_ms{0.0};
};

inline nlohmann::json to_json(const MetricsRow& m)
{
    nlohmann::json j;
    j["step"] = m.step;
    j["ce"] = m.ce;
    j["consensus"] = m.consensus;
    j["laplacian"] = m.laplacian ? nlohmann::json(*m.laplacian) : nlohmann::json(nullptr);
    j["eq3"] = m.eq3;
    j["alpha"] = m.alpha;
    j["wall_ms"] = m.wall_ms;
    return j;
}

/// Mean over layers of the alpha-combined input-gradient norm at each layer
/// input, for one sequence.
inline double eq3_for_model(const LanguageModel& lm, std::span<const std::size_t> sequence)
{
    const auto inputs = layer_inputs(lm, sequence, 1, sequence.size());
    double acc = 0.0;
    for (std::size_t l = 0; l < lm.config.layers; ++l) {
        const auto fns = frozen_blocks(lm, l, sequence.size());
        acc += eq3_divergence_diagnostic(fns, lm.alpha(l), inputs[l]);
    }
    return acc / static_cast<double>(lm.config.layers);
}

using MetricsSink = std::function<void(const MetricsRow&)>;

/// Runs steps until s.step reaches s.train.steps. A fresh state first sets
/// alpha from curvature. Metrics rows are emitted every eval_every steps and
/// after the last one.
inline std::vector<MetricsRow> train(TrainState& s, std::span<const std::size_t> tokens,
                                     const MetricsSink& sink = {})
{
    s.train.validate();
    s.model.validate();
    const std::size_t seq = s.model.config.seq_len, batch = s.train.batch_size;
    require_trainable_length(tokens.size(), batch, seq);
    const auto start = std::chrono::steady_clock::now();
    if (s.step == 0 && s.model.config.encapsulation && s.train.curvature_refresh_every > 0) {
        const Batch first = sample_batch(tokens, 1, seq, s.train.seed, 0);
        refresh_alpha(s, first.inputs);
    }
    std::vector<MetricsRow> log;
    while (s.step < s.train.steps) {
        const Batch b = sample_batch(tokens, batch, seq, s.train.seed, s.step);
        const StepReport r = train_step(s, b);
        if (r.step % s.train.eval_every == 0 || r.step == s.train.steps) {
            MetricsRow row;
            row.step = r.step;
            row.ce = r.ce;
            row.consensus = r.consensus;
            row.laplacian = r.laplacian;
            row.eq3 = eq3_for_model(s.model, std::span(b.inputs).first(seq));
            row.alpha = r.alpha;
            row.wall_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            if (sink)
                sink(row);
            log.push_back(std::move(row));
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int checkpoint_format_version = 1;

inline nlohmann::json to_json(const ModelConfig& c)
{
    return {{"layers", c.layers},   {"hidden", c.hidden},
            {"heads", c.heads},     {"seq_len", c.seq_len},
            {"module_count", c.module_count}, {"encapsulation", c.encapsulation},
            {"beta", c.beta},       {"vocab_size", c.vocab_size}};
}

inline nlohmann::json to_json(const TrainConfig& c)
{
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"seed", c.seed},
            {"lambda_penalty", c.lambda_penalty},
            {"lambda_decay", c.lambda_decay},
            {"lambda_laplacian", c.lambda_laplacian},
            {"curvature_probes", c.curvature_probes},
            {"curvature_refresh_every", c.curvature_refresh_every},
            {"mix_consensus", c.mix_consensus},
            {"mix_laplacian", c.mix_laplacian},
            {"eval_every", c.eval_every},
            {"penalty_sequences", c.penalty_sequences},
            {"laplacian_coord_sample", c.laplacian_coord_sample},
            {"decay_alpha", c.decay_alpha}};
}

namespace detail
{

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out)
{
    if (!j.contains(key))
        throw IoError(std::string("checkpoint is missing field ") + key);
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint field ") + key + ": " + e.what());
    }
}

} // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j)
{
    ModelConfig c;
    detail::read_field(j, "layers", c.layers);
    detail::read_field(j, "hidden", c.hidden);
    detail::read_field(j, "heads", c.heads);
    detail::read_field(j, "seq_len", c.seq_len);
    detail::read_field(j, "module_count", c.module_count);
    detail::read_field(j, "encapsulation", c.encapsulation);
    detail::read_field(j, "beta", c.beta);
    detail::read_field(j, "vocab_size", c.vocab_size);
    return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j)
{
    TrainConfig c;
    detail::read_field(j, "learning_rate", c.learning_rate);
    detail::read_field(j, "batch_size", c.batch_size);
    detail::read_field(j, "steps", c.steps);
    detail::read_field(j, "seed", c.seed);
    detail::read_field(j, "lambda_penalty", c.lambda_penalty);
    detail::read_field(j, "lambda_decay", c.lambda_decay);
    detail::read_field(j, "lambda_laplacian", c.lambda_laplacian);
    detail::read_field(j, "curvature_probes", c.curvature_probes);
    detail::read_field(j, "curvature_refresh_every", c.curvature_refresh_every);
    detail::read_field(j, "mix_consensus", c.mix_consensus);
    detail::read_field(j, "mix_laplacian", c.mix_laplacian);
    detail::read_field(j, "eval_every", c.eval_every);
    detail::read_field(j, "penalty_sequences", c.penalty_sequences);
    detail::read_field(j, "laplacian_coord_sample", c.laplacian_coord_sample);
    detail::read_field(j, "decay_alpha", c.decay_alpha);
    return c;
}

/// Characters are stored as byte values so any corpus survives as JSON.
inline nlohmann::json checkpoint_json(const TrainState& s)
{
    nlohmann::json j;
    j["format_version"] = checkpoint_format_version;
    j["model_config"] = to_json(s.model.config);
    j["train_config"] = to_json(s.train);
    std::vector<int> chars;
    for (char ch : s.vocab.chars())
        chars.push_back(static_cast<unsigned char>(ch));
    j["vocabulary"] = chars;
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : s.model.params)
        tensors[name] = {{"shape", t.shape()}, {"data", t.storage()}};
    j["tensors"] = std::move(tensors);
    j["step"] = s.step;
    j["rng_state"] = {{"seed", s.train.seed}, {"draws", s.step}};
    return j;
}

inline TrainState state_from_json(const nlohmann::json& j)
{
    int version = 0;
    detail::read_field(j, "format_version", version);
    if (version != checkpoint_format_version)
        throw IoError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                      std::to_string(checkpoint_format_version) + ")");
    for (const char* key : {"model_config", "train_config", "tensors", "rng_state"})
        if (!j.contains(key) || !j.at(key).is_object())
            throw IoError(std::string("checkpoint is missing object ") + key);
    TrainState s;
    s.model.config = model_config_from_json(j["model_config"]);
    s.train = train_config_from_json(j["train_config"]);
    std::vector<int> codes;
    detail::read_field(j, "vocabulary", codes);
    std::vector<char> chars;
    for (int code : codes) {
        if (code < 0 || code > 255)
            throw IoError("checkpoint vocabulary holds a non-byte value");
        chars.push_back(static_cast<char>(static_cast<unsigned char>(code)));
    }
    s.vocab = Vocabulary::from_chars(chars);
    detail::read_field(j, "step", s.step);
    std::size_t draws = 0;
    detail::read_field(j["rng_state"], "draws", draws);
    if (draws != s.step)
        throw IoError("checkpoint rng_state disagrees with step");
    s.model.config.validate();
    s.train.validate();
    if (s.vocab.size() != s.model.config.vocab_size)
        throw ShapeError("checkpoint vocabulary has " + std::to_string(s.vocab.size()) +
                         " entries, config expects " + std::to_string(s.model.config.vocab_size));
    for (const auto& [name, entry] : j["tensors"].items()) {
        Shape shape;
        std::vector<double> data;
        detail::read_field(entry, "shape", shape);
        detail::read_field(entry, "data", data);
        s.model.params.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    s.model.validate();
    return s;
}

/// Loads a checkpoint and checks it against the model configuration the
/// caller expects (vocab_size is taken from the file).
inline TrainState load_checkpoint(const std::filesystem::path& path, ModelConfig expected);

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s)
{
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write checkpoint " + tmp.string());
        out << checkpoint_json(s).dump() << '\n';
        if (!out)
            throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline TrainState load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    return state_from_json(j);
}

inline TrainState load_checkpoint(const std::filesystem::path& path, ModelConfig expected)
{
    TrainState s = load_checkpoint(path);
    expected.vocab_size = s.model.config.vocab_size;
    LanguageModel probe{expected, s.model.params};
    probe.validate();
    if (!(expected == s.model.config))
        throw ConfigError("checkpoint model configuration differs from the expected one");
    return s;
}

} // namespace encap

#endif // ENCAP_TRAINING_HPP_
