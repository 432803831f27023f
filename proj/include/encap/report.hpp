// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_REPORT_HPP_
#define ENCAP_REPORT_HPP_

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "encap/config.hpp"
#include "encap/errors.hpp"
#include "encap/evaluation.hpp"
#include "encap/model.hpp"
#include "encap/training.hpp"

namespace encap
{

inline std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read corpus file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << text;
    if (!out)
        throw IoError("failed writing " + path.string());
}

struct Dataset
{
    std::string label;
    std::string train;
    std::string heldout;
};

/// Windows shared by both models for attention, clustering and gradient-diagnostic probes.
struct ProbeWindow
{
    std::size_t dataset{0};
    std::vector<std::size_t> tokens;
};

inline std::vector<ProbeWindow> probe_windows(const std::vector<Dataset>& data, const Vocabulary& vocab,
                                              std::size_t count, std::size_t seq, std::uint64_t seed)
{
    std::vector<ProbeWindow> out;
    for (std::size_t p = 0; p < count; ++p) {
        const std::size_t d = p % data.size();
        const auto ids = vocab.encode(data[d].heldout);
        if (ids.empty())
            continue;
        const std::size_t len = std::min(seq, ids.size());
        const std::size_t start = ids.size() > len ? counter_hash(seed, 0xa77ULL, p) % (ids.size() - len + 1) : 0;
        out.push_back({d, std::vector<std::size_t>(ids.begin() + start, ids.begin() + start + len)});
    }
    return out;
}

/// Per (layer, module) mean over tokens of the module output, for one window.
inline std::vector<std::vector<double>> module_mean_outputs(const LanguageModel& lm,
                                                            std::span<const std::size_t> window)
{
    Tape tape;
    ParamVars p = bind_params(tape, lm.params, false);
    TapeForward fw = forward_on_tape(lm.config, p, window, 1, window.size());
    std::vector<std::vector<double>> rows;
    for (const auto& rec : fw.layers) {
        for (Var h : rec.module_outputs) {
            const Tensor& v = tape.value(h);
            std::vector<double> mean(v.cols(), 0.0);
            for (std::size_t r = 0; r < v.rows(); ++r)
                for (std::size_t c = 0; c < v.cols(); ++c)
                    mean[c] += v.at(r, c) / static_cast<double>(v.rows());
            rows.push_back(std::move(mean));
        }
    }
    return rows;
}

struct ModelEval
{
    std::size_t params{0};
    std::map<std::string, double> perplexity;
    std::map<std::string, double> perplexity_untrained;
    std::optional<LexicalReport> lexical;
    Histogram sentence_hist;
    std::vector<double> attn_divergence;
    std::map<std::string, std::optional<double>> bleu;
    std::map<std::string, std::optional<double>> rouge_l;
    double eq3{0.0};
    std::vector<std::vector<double>> alpha;
    std::vector<std::string> cluster_rows;
    Clustering clusters;
    TimingProfile timing;
};

inline ModelEval evaluate_model(const TrainState& s, const LanguageModel& untrained, const std::vector<Dataset>& data,
                                std::span<const std::size_t> train_tokens, const RunConfig& rc,
                                std::vector<std::string>* warnings = nullptr)
{
    const LanguageModel& lm = s.model;
    const std::size_t seq = lm.config.seq_len;
    const std::uint64_t seed = s.train.seed;
    ModelEval e;
    e.params = param_count(lm.config);
    for (const auto& d : data) {
        e.perplexity[d.label] = perplexity(lm, s.vocab, d.heldout);
        e.perplexity_untrained[d.label] = perplexity(untrained, s.vocab, d.heldout);
    }

    // Continue the opening of each held-out split and compare with what
    // actually follows.
    std::string generated_all;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string& held = data[i].heldout;
        const std::size_t prompt_len = std::min(seq, held.size() / 4);
        const std::size_t cont_len = std::min(rc.gen_tokens, held.size() - prompt_len);
        const std::string prompt = held.substr(0, prompt_len);
        const std::string out =
            generate(lm, s.vocab, prompt, cont_len, rc.gen_temperature, counter_hash(seed, 0x9e4ULL, i), warnings);
        const std::string cont = out.substr(prompt_len);
        const Tokens cand = words(cont), ref = words(held.substr(prompt_len, cont_len));
        if (!cand.empty() && !ref.empty()) {
            const std::vector<Tokens> refs{ref};
            e.bleu[data[i].label] = bleu(cand, refs);
            e.rouge_l[data[i].label] = rouge_l(cand, ref);
        } else {
            e.bleu[data[i].label] = std::nullopt;
            e.rouge_l[data[i].label] = std::nullopt;
        }
        if (!generated_all.empty())
            generated_all += ' ';
        generated_all += cont;
    }
    if (const Tokens w = words(generated_all); !w.empty())
        e.lexical = lexical_diversity(w);
    e.sentence_hist = sentence_length_histogram(generated_all);

    const auto probes = probe_windows(data, s.vocab, rc.attn_probes, seq, seed);
    std::vector<AttentionTrace> traces;
    std::vector<std::vector<double>> cluster_input;
    double eq3 = 0.0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        const auto& w = probes[p].tokens;
        traces.push_back(*forward_lm(lm, w, 1, w.size(), true).trace);
        auto rows = module_mean_outputs(lm, w);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            cluster_input.push_back(std::move(rows[r]));
            e.cluster_rows.push_back("probe" + std::to_string(p) + ".layer" +
                                     std::to_string(r / lm.config.module_count) + ".module" +
                                     std::to_string(r % lm.config.module_count));
        }
        eq3 += eq3_for_model(lm, w);
    }
    if (!probes.empty())
        e.eq3 = eq3 / static_cast<double>(probes.size());
    if (lm.config.layers >= 2 && !traces.empty())
        e.attn_divergence = attention_divergence(traces);
    if (!cluster_input.empty())
        e.clusters = cluster_activations(cluster_input, std::min(rc.cluster_k, cluster_input.size()), 50, seed);
    for (std::size_t l = 0; l < lm.config.layers; ++l)
        e.alpha.push_back(lm.alpha(l));
    e.timing = timing_profile(s, train_tokens, rc.timing_reps);
    return e;
}

namespace detail
{

inline nlohmann::json opt_json(const std::optional<double>& v)
{
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json pair_json(const nlohmann::json& a, const nlohmann::json& b)
{
    return {{"baseline", a}, {"experimental", b}};
}

inline nlohmann::json lexical_json(const std::optional<LexicalReport>& r, const char* field)
{
    if (!r)
        return nullptr;
    const std::string f = field;
    if (f == "ttr")
        return r->ttr;
    if (f == "mattr")
        return r->mattr;
    if (f == "unique_per_1000")
        return r->unique_per_1000;
    return r->repeated_phrase_rate_pct;
}

inline nlohmann::json cluster_json(const ModelEval& e)
{
    return {{"k", e.clusters.centroids.size()},
            {"rows", e.cluster_rows},
            {"assignments", e.clusters.assignments},
            {"wcss", e.clusters.wcss_history.empty() ? nlohmann::json(nullptr)
                                                     : nlohmann::json(e.clusters.wcss_history.back())},
            {"iterations", e.clusters.iterations}};
}

/// Shortest round-trip rendering, matching the JSON report.
inline std::string num(const nlohmann::json& v) { return v.is_null() ? "" : v.dump(); }

} // namespace detail

inline constexpr const char* lexical_metrics[] = {"ttr", "mattr", "unique_per_1000", "repeated_phrase_rate_pct"};

inline nlohmann::json build_report(const RunConfig& a, const RunConfig& b, const std::vector<Dataset>& data,
                                   const ModelEval& base, const ModelEval& exp)
{
    using detail::pair_json;
    nlohmann::json r;
    r["config"] = pair_json(serialize(a), serialize(b));
    r["datasets"] = nlohmann::json::array();
    for (const auto& d : data)
        r["datasets"].push_back(d.label);
    r["steps"] = pair_json(a.train.steps, b.train.steps);
    r["params"] = pair_json(base.params, exp.params);

    nlohmann::json ppl = nlohmann::json::object();
    for (const auto& d : data) {
        ppl[d.label] = {{"baseline", base.perplexity.at(d.label)},
                        {"experimental", exp.perplexity.at(d.label)},
                        {"baseline_untrained", base.perplexity_untrained.at(d.label)},
                        {"experimental_untrained", exp.perplexity_untrained.at(d.label)}};
    }
    r["perplexity"] = ppl;

    nlohmann::json lex = nlohmann::json::object();
    for (const char* m : lexical_metrics)
        lex[m] = pair_json(detail::lexical_json(base.lexical, m), detail::lexical_json(exp.lexical, m));
    r["lexical"] = lex;

    nlohmann::json overlap = nlohmann::json::object();
    for (const auto& d : data)
        overlap[d.label] = {
            {"bleu", pair_json(detail::opt_json(base.bleu.at(d.label)), detail::opt_json(exp.bleu.at(d.label)))},
            {"rouge_l",
             pair_json(detail::opt_json(base.rouge_l.at(d.label)), detail::opt_json(exp.rouge_l.at(d.label)))}};
    r["overlap"] = overlap;

    auto timing_pair = [](const TimingStat& x, const TimingStat& y) {
        return nlohmann::json{
            {"baseline", x.median_ms}, {"experimental", y.median_ms}, {"baseline_cv", x.cv}, {"experimental_cv", y.cv}};
    };
    r["timing"] = {{"nondeterministic", true},
                   {"reps", base.timing.train_ms_per_step.reps},
                   {"warmup", timing_warmup},
                   {"train_ms_per_step", timing_pair(base.timing.train_ms_per_step, exp.timing.train_ms_per_step)},
                   {"infer_ms_per_prediction",
                    timing_pair(base.timing.infer_ms_per_prediction, exp.timing.infer_ms_per_prediction)}};

    const AlignedHistograms h = align_histograms(base.sentence_hist, exp.sentence_hist);
    r["sentence_hist"] = {{"bins", h.bins}, {"counts_baseline", h.counts_a}, {"counts_experimental", h.counts_b}};

    std::vector<std::string> pairs;
    for (std::size_t l = 0; l < base.attn_divergence.size(); ++l)
        pairs.push_back(std::to_string(l) + "-" + std::to_string(l + 1));
    r["attn_divergence"] = {
        {"layers", pairs}, {"baseline", base.attn_divergence}, {"experimental", exp.attn_divergence}};

    r["eq3_diagnostic"] = pair_json(base.eq3, exp.eq3);
    r["alpha_final"] = pair_json(base.alpha, exp.alpha);
    r["clusters"] = pair_json(detail::cluster_json(base), detail::cluster_json(exp));
    return r;
}

/// One CSV per report section, fixed headers.
inline std::map<std::string, std::string> report_csvs(const nlohmann::json& r)
{
    using detail::num;
    std::map<std::string, std::string> out;
    std::string s = "dataset,baseline,experimental,baseline_untrained,experimental_untrained\n";
    for (const auto& label : r["datasets"]) {
        const auto& p = r["perplexity"][label.get<std::string>()];
        s += label.get<std::string>() + "," + num(p["baseline"]) + "," + num(p["experimental"]) + "," +
             num(p["baseline_untrained"]) + "," + num(p["experimental_untrained"]) + "\n";
    }
    out["perplexity.csv"] = s;

    s = "metric,baseline,experimental\n";
    for (const char* m : lexical_metrics)
        s += std::string(m) + "," + num(r["lexical"][m]["baseline"]) + "," + num(r["lexical"][m]["experimental"]) +
             "\n";
    out["lexical.csv"] = s;

    s = "metric,baseline,experimental,baseline_cv,experimental_cv\n";
    for (const char* m : {"train_ms_per_step", "infer_ms_per_prediction"}) {
        const auto& t = r["timing"][m];
        s += std::string(m) + "," + num(t["baseline"]) + "," + num(t["experimental"]) + "," + num(t["baseline_cv"]) +
             "," + num(t["experimental_cv"]) + "\n";
    }
    out["timing.csv"] = s;

    s = "length,baseline,experimental\n";
    const auto& h = r["sentence_hist"];
    for (std::size_t i = 0; i < h["bins"].size(); ++i)
        s += num(h["bins"][i]) + "," + num(h["counts_baseline"][i]) + "," + num(h["counts_experimental"][i]) + "\n";
    out["sentence_hist.csv"] = s;

    s = "layer_pair,baseline,experimental\n";
    const auto& a = r["attn_divergence"];
    for (std::size_t i = 0; i < a["layers"].size(); ++i)
        s += a["layers"][i].get<std::string>() + "," + num(a["baseline"][i]) + "," + num(a["experimental"][i]) + "\n";
    out["attn_divergence.csv"] = s;

    s = "dataset,metric,baseline,experimental\n";
    for (const auto& label : r["datasets"])
        for (const char* m : {"bleu", "rouge_l"}) {
            const auto& o = r["overlap"][label.get<std::string>()][m];
            s += label.get<std::string>() + "," + m + "," + num(o["baseline"]) + "," + num(o["experimental"]) + "\n";
        }
    out["overlap.csv"] = s;

    s = "model,eq3\n";
    for (const char* m : {"baseline", "experimental"})
        s += std::string(m) + "," + num(r["eq3_diagnostic"][m]) + "\n";
    out["eq3_diagnostic.csv"] = s;

    s = "model,layer,module,alpha\n";
    for (const char* m : {"baseline", "experimental"}) {
        const auto& layers = r["alpha_final"][m];
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (std::size_t k = 0; k < layers[l].size(); ++k)
                s += std::string(m) + "," + std::to_string(l) + "," + std::to_string(k) + "," + num(layers[l][k]) +
                     "\n";
    }
    out["alpha_final.csv"] = s;
    return out;
}

/// Human-readable side-by-side summary.
inline std::string report_summary(const nlohmann::json& r)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << "perplexity (held out)        baseline  experimental\n";
    for (const auto& label : r["datasets"]) {
        const auto& p = r["perplexity"][label.get<std::string>()];
        os << "  " << std::left << std::setw(26) << label.get<std::string>() << std::right << std::setw(9)
           << p["baseline"].get<double>() << std::setw(14) << p["experimental"].get<double>() << "\n";
    }
    os << "timing (ms, median)\n";
    for (const char* m : {"train_ms_per_step", "infer_ms_per_prediction"})
        os << "  " << std::left << std::setw(26) << m << std::right << std::setw(9)
           << r["timing"][m]["baseline"].get<double>() << std::setw(14)
           << r["timing"][m]["experimental"].get<double>() << "\n";
    os << std::setprecision(3) << "lexical\n";
    for (const char* m : lexical_metrics) {
        const auto& x = r["lexical"][m];
        os << "  " << std::left << std::setw(26) << m << std::right << std::setw(9)
           << (x["baseline"].is_null() ? 0.0 : x["baseline"].get<double>()) << std::setw(14)
           << (x["experimental"].is_null() ? 0.0 : x["experimental"].get<double>()) << "\n";
    }
    return os.str();
}

struct CompareOptions
{
    bool allow_diff{false};
    std::ostream* progress{nullptr};
};

/// Trains `a` as the baseline and `b` as the experimental model on the same
/// corpora and writes report.json, per-section CSVs, JSON-lines training logs
/// and both checkpoints into out_dir. Returns the report.
inline nlohmann::json cmd_compare(const RunConfig& a, const RunConfig& b, const std::vector<std::string>& corpora,
                                  std::vector<std::string> labels, const std::filesystem::path& out_dir,
                                  const CompareOptions& opt = {})
{
    namespace fs = std::filesystem;
    a.validate();
    b.validate();
    if (const auto drift = config_drift(a, b); !drift.empty() && !opt.allow_diff) {
        std::string keys;
        for (const auto& k : drift)
            keys += (keys.empty() ? "" : ", ") + k;
        throw ConfigError("configs differ outside the encapsulation keys: " + keys +
                          " (pass --allow-diff to compare anyway)");
    }
    if (corpora.empty())
        throw ConfigError("compare needs at least one corpus");
    if (labels.empty())
        for (const auto& c : corpora)
            labels.push_back(fs::path(c).stem().string());
    if (labels.size() != corpora.size())
        throw ConfigError("labels must have one entry per corpus");
    if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size())
        throw ConfigError("dataset labels must be unique");

    // Read everything before any training starts.
    std::vector<Dataset> data;
    std::string all_text, train_text;
    for (std::size_t i = 0; i < corpora.size(); ++i) {
        const std::string text = read_text_file(corpora[i]);
        if (text.empty())
            throw ConfigError("corpus file " + corpora[i] + " is empty");
        CorpusSplit split = split_corpus(text);
        all_text += text;
        train_text += split.train;
        data.push_back({labels[i], std::move(split.train), std::move(split.heldout)});
    }
    fs::create_directories(out_dir);
    const Vocabulary vocab = Vocabulary::build(all_text);
    const auto train_tokens = vocab.encode(train_text);
    require_trainable_length(train_tokens.size(), std::max(a.train.batch_size, b.train.batch_size),
                             std::max(a.model.seq_len, b.model.seq_len));

    write_text_file(out_dir / "config_effective.json",
                    nlohmann::json{{"baseline", serialize(a)}, {"experimental", serialize(b)}}.dump(2) + "\n");

    std::vector<std::string> warnings;
    auto run = [&](const RunConfig& rc, const std::string& name) {
        TrainState s = make_state(rc.model, rc.train, vocab);
        const LanguageModel untrained = s.model;
        std::ofstream log(out_dir / (name + ".log.jsonl"), std::ios::binary | std::ios::trunc);
        if (!log)
            throw IoError("cannot write training log for " + name);
        train(s, train_tokens, [&](const MetricsRow& row) {
            log << to_json(row).dump() << "\n";
            if (opt.progress)
                *opt.progress << name << " step " << row.step << " ce " << row.ce << "\n";
        });
        save_checkpoint(out_dir / (name + ".ckpt.json"), s);
        return evaluate_model(s, untrained, data, train_tokens, rc, &warnings);
    };
    const ModelEval base = run(a, "baseline");
    const ModelEval exp = run(b, "experimental");

    nlohmann::json report = build_report(a, b, data, base, exp);
    if (!warnings.empty())
        report["warnings"] = warnings;
    write_text_file(out_dir / "report.json", report.dump(2) + "\n");
    for (const auto& [name, text] : report_csvs(report))
        write_text_file(out_dir / name, text);
    return report;
}

} // namespace encap

#endif // ENCAP_REPORT_HPP_
