// SPDX-License-Identifier: Apache-2.0

// encap: train, evaluate, sample from and compare small character-level
// language models with and without encapsulated blocks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "encap/config.hpp"
#include "encap/evaluation.hpp"
#include "encap/report.hpp"
#include "encap/training.hpp"

namespace fs = std::filesystem;
using namespace encap;

namespace
{

constexpr int exit_ok = 0;
constexpr int exit_usage = 1;
constexpr int exit_runtime = 2;

RunConfig load_run_config(const std::string& path)
{
    return path.empty() ? parse_config(nlohmann::json::object()) : parse_config_file(path);
}

int cmd_train(const std::string& config_path, const std::string& corpus, const std::string& out,
              std::optional<std::uint64_t> seed)
{
    RunConfig rc = load_run_config(config_path);
    if (seed)
        rc.train.seed = *seed;
    const std::string text = read_text_file(corpus);
    if (text.empty())
        throw ConfigError("corpus file " + corpus + " is empty");
    std::cerr << "effective config: " << serialize(rc).dump() << "\n";
    write_text_file(out + ".config.json", serialize(rc).dump(2) + "\n");

    const CorpusSplit split = split_corpus(text);
    const Vocabulary vocab = Vocabulary::build(text);
    const auto train_tokens = vocab.encode(split.train);
    TrainState s = make_state(rc.model, rc.train, vocab);
    const double before = perplexity(s.model, vocab, split.heldout);
    std::ofstream log(out + ".log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log)
        throw IoError("cannot write " + out + ".log.jsonl");
    train(s, train_tokens, [&](const MetricsRow& row) {
        log << to_json(row).dump() << "\n";
        log.flush();
        std::cerr << "step " << row.step << " ce " << row.ce << "\n";
    });
    save_checkpoint(out, s);
    const double after = perplexity(s.model, vocab, split.heldout);
    std::cout << "held-out perplexity " << before << " -> " << after << "\n";
    return exit_ok;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus, const std::string& label, const std::string& report)
{
    const TrainState s = load_checkpoint(ckpt);
    const std::string text = read_text_file(corpus);
    nlohmann::json out = nlohmann::json::object();
    if (fs::exists(report)) {
        try {
            out = nlohmann::json::parse(read_text_file(report));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("existing report " + report + " is not valid JSON: " + e.what());
        }
    }
    const double ppl = perplexity(s.model, s.vocab, text);
    out[label] = {{"perplexity", ppl}, {"characters", text.size()}, {"checkpoint_step", s.step}};
    write_text_file(report, out.dump(2) + "\n");
    std::cout << label << " perplexity " << ppl << "\n";
    return exit_ok;
}

int cmd_generate(const std::string& ckpt, const std::string& prompt, std::size_t tokens, double temperature,
                 std::uint64_t seed)
{
    const TrainState s = load_checkpoint(ckpt);
    std::vector<std::string> warnings;
    const std::string text = generate(s.model, s.vocab, prompt, tokens, temperature, seed, &warnings);
    for (const auto& w : warnings)
        std::cerr << "warning: " << w << "\n";
    std::cout << text << "\n";
    return exit_ok;
}

int cmd_probe(const std::string& ckpt, const std::string& corpus, std::size_t probes, std::uint64_t seed)
{
    TrainState s = load_checkpoint(ckpt);
    const auto ids = s.vocab.encode(read_text_file(corpus));
    const std::size_t seq = std::min(s.model.config.seq_len, ids.size());
    if (seq == 0)
        throw ConfigError("corpus is empty");
    const std::size_t start = ids.size() > seq ? counter_hash(seed, 0x9b0eULL, 0) % (ids.size() - seq + 1) : 0;
    const std::span<const std::size_t> window(ids.data() + start, seq);
    const auto inputs = layer_inputs(s.model, window, 1, seq);
    nlohmann::json out;
    out["window_start"] = start;
    out["probes"] = probes;
    out["beta"] = s.model.config.beta;
    out["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < s.model.config.layers; ++l) {
        const auto fns = frozen_blocks(s.model, l, seq);
        const CurvatureEstimate est = curvature_estimate(fns, inputs[l], probes, counter_hash(seed, 0xc0ffULL, l));
        out["layers"].push_back({{"layer", l},
                                 {"curvature", est.per_module},
                                 {"weights", curvature_weights(est, s.model.config.beta)},
                                 {"alpha_current", s.model.alpha(l)}});
    }
    std::cout << out.dump(2) << "\n";
    return exit_ok;
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty() || !out.empty())
        out.push_back(cur);
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Character-level language models with encapsulated blocks"};
    app.require_subcommand(1);

    std::string config, corpus, out, ckpt, label, report, prompt, config_a, config_b, corpora, labels;
    std::uint64_t seed_value = 0;
    std::size_t tokens = 100, probes = 16;
    double temperature = 0.0;
    bool allow_diff = false;

    auto* train_cmd = app.add_subcommand("train", "Train one model and save a checkpoint");
    train_cmd->add_option("--config", config, "Run config JSON (defaults if omitted)");
    train_cmd->add_option("--corpus", corpus, "Training text file")->required();
    train_cmd->add_option("--out", out, "Checkpoint path")->required();
    auto* train_seed = train_cmd->add_option("--seed", seed_value, "Override the config seed");

    auto* eval_cmd = app.add_subcommand("eval", "Perplexity of a checkpoint on a text file");
    eval_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
    eval_cmd->add_option("--corpus", corpus, "Text file")->required();
    eval_cmd->add_option("--label", label, "Dataset label")->required();
    eval_cmd->add_option("--report", report, "Report JSON (created or extended)")->required();

    auto* gen_cmd = app.add_subcommand("generate", "Sample text from a checkpoint");
    gen_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
    gen_cmd->add_option("--prompt", prompt, "Prompt text");
    gen_cmd->add_option("--tokens", tokens, "Characters to generate");
    gen_cmd->add_option("--temperature", temperature, "0 = greedy");
    gen_cmd->add_option("--seed", seed_value, "Sampling seed");

    auto* cmp_cmd = app.add_subcommand("compare", "Train a baseline and an experimental model and report both");
    cmp_cmd->add_option("--config-a", config_a, "Baseline config JSON")->required();
    cmp_cmd->add_option("--config-b", config_b, "Experimental config JSON")->required();
    cmp_cmd->add_option("--corpora", corpora, "Comma-separated text files (default: config corpora)");
    cmp_cmd->add_option("--labels", labels, "Comma-separated dataset labels");
    cmp_cmd->add_option("--out", out, "Output directory (default: config out_dir)");
    auto* cmp_seed = cmp_cmd->add_option("--seed", seed_value, "Override both config seeds");
    cmp_cmd->add_flag("--allow-diff", allow_diff, "Allow differences outside the encapsulation keys");

    auto* probe_cmd = app.add_subcommand("probe-curvature", "Per-module curvature estimates and weights");
    probe_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
    probe_cmd->add_option("--corpus", corpus, "Text file to draw a window from")->required();
    probe_cmd->add_option("--probes", probes, "Number of Rademacher probes");
    probe_cmd->add_option("--seed", seed_value, "Probe seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (train_cmd->parsed())
            return cmd_train(config, corpus, out,
                             train_seed->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt);
        if (eval_cmd->parsed())
            return cmd_eval(ckpt, corpus, label, report);
        if (gen_cmd->parsed())
            return cmd_generate(ckpt, prompt, tokens, temperature, seed_value);
        if (probe_cmd->parsed())
            return cmd_probe(ckpt, corpus, probes, seed_value);
        if (cmp_cmd->parsed()) {
            RunConfig a = parse_config_file(config_a), b = parse_config_file(config_b);
            if (cmp_seed->count())
                a.train.seed = b.train.seed = seed_value;
            const std::vector<std::string> files = corpora.empty() ? a.corpora : split_list(corpora);
            const std::vector<std::string> names = labels.empty() ? a.labels : split_list(labels);
            const fs::path dir = out.empty() ? fs::path(a.out_dir) : fs::path(out);
            CompareOptions opt;
            opt.allow_diff = allow_diff;
            opt.progress = &std::cerr;
            const nlohmann::json r = cmd_compare(a, b, files, names, dir, opt);
            std::cout << report_summary(r) << "report written to " << (dir / "report.json").string() << "\n";
            return exit_ok;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return exit_usage;
}
