// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_CONFIG_HPP_
#define ENCAP_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "encap/errors.hpp"
#include "encap/model.hpp"
#include "encap/training.hpp"

namespace encap
{

/// Everything a run needs, parsed from one flat JSON object. Every key is
/// optional; see README for the table of keys and defaults.
struct RunConfig
{
    ModelConfig model;
    TrainConfig train;

    std::size_t gen_tokens{1000};
    double gen_temperature{0.8};
    std::size_t attn_probes{8};
    std::size_t timing_reps{20};
    std::size_t cluster_k{4};

    std::vector<std::string> corpora;
    std::vector<std::string> labels;
    std::string out_dir{"out"};

    friend bool operator==(const RunConfig&, const RunConfig&) = default;

    void validate() const
    {
        ModelConfig m = model;
        m.vocab_size = std::max<std::size_t>(m.vocab_size, 2); // known only once a corpus is read
        m.validate();
        train.validate();
        if (!std::isfinite(gen_temperature) || gen_temperature < 0.0)
            throw ConfigError("gen_temperature must be finite and >= 0");
        if (attn_probes == 0)
            throw ConfigError("attn_probes must be >= 1");
        if (timing_reps < 20)
            throw ConfigError("timing_reps must be >= 20");
        if (cluster_k == 0)
            throw ConfigError("cluster_k must be >= 1");
        if (!labels.empty() && labels.size() != corpora.size())
            throw ConfigError("labels must have one entry per corpus");
    }
};

namespace detail
{

/// Field table shared by parsing and serialisation so the two cannot drift.
struct FieldSpec
{
    std::function<nlohmann::json(const RunConfig&)> get;
    std::function<void(RunConfig&, const nlohmann::json&)> set;
    /// Differences in these keys are expected between a paired baseline and
    /// experimental config.
    bool encapsulation_related{false};
    /// Paths and labels; never part of the drift check.
    bool io{false};
};

template <class T>
FieldSpec field(T RunConfig::*member, bool enc = false, bool io = false)
{
    return {[member](const RunConfig& c) { return nlohmann::json(c.*member); },
            [member](RunConfig& c, const nlohmann::json& j) { c.*member = j.get<T>(); }, enc, io};
}

template <class T>
FieldSpec model_field(T ModelConfig::*member, bool enc = false)
{
    return {[member](const RunConfig& c) { return nlohmann::json(c.model.*member); },
            [member](RunConfig& c, const nlohmann::json& j) { c.model.*member = j.get<T>(); }, enc, false};
}

template <class T>
FieldSpec train_field(T TrainConfig::*member, bool enc = false)
{
    return {[member](const RunConfig& c) { return nlohmann::json(c.train.*member); },
            [member](RunConfig& c, const nlohmann::json& j) { c.train.*member = j.get<T>(); }, enc, false};
}

inline const std::map<std::string, FieldSpec>& run_config_fields()
{
    static const std::map<std::string, FieldSpec> fields{
        {"layers", model_field(&ModelConfig::layers)},
        {"hidden", model_field(&ModelConfig::hidden)},
        {"heads", model_field(&ModelConfig::heads)},
        {"seq_len", model_field(&ModelConfig::seq_len)},
        {"module_count", model_field(&ModelConfig::module_count, true)},
        {"encapsulation", model_field(&ModelConfig::encapsulation, true)},
        {"beta", model_field(&ModelConfig::beta, true)},
        {"learning_rate", train_field(&TrainConfig::learning_rate)},
        {"batch_size", train_field(&TrainConfig::batch_size)},
        {"steps", train_field(&TrainConfig::steps)},
        {"seed", train_field(&TrainConfig::seed)},
        {"lambda_penalty", train_field(&TrainConfig::lambda_penalty, true)},
        {"lambda_decay", train_field(&TrainConfig::lambda_decay)},
        {"lambda_laplacian", train_field(&TrainConfig::lambda_laplacian, true)},
        {"curvature_probes", train_field(&TrainConfig::curvature_probes, true)},
        {"curvature_refresh_every", train_field(&TrainConfig::curvature_refresh_every, true)},
        {"mix_consensus", train_field(&TrainConfig::mix_consensus, true)},
        {"mix_laplacian", train_field(&TrainConfig::mix_laplacian, true)},
        {"eval_every", train_field(&TrainConfig::eval_every)},
        {"penalty_sequences", train_field(&TrainConfig::penalty_sequences, true)},
        {"laplacian_coord_sample", train_field(&TrainConfig::laplacian_coord_sample, true)},
        {"decay_alpha", train_field(&TrainConfig::decay_alpha, true)},
        {"gen_tokens", field(&RunConfig::gen_tokens)},
        {"gen_temperature", field(&RunConfig::gen_temperature)},
        {"attn_probes", field(&RunConfig::attn_probes)},
        {"timing_reps", field(&RunConfig::timing_reps)},
        {"cluster_k", field(&RunConfig::cluster_k)},
        {"corpora", field(&RunConfig::corpora, false, true)},
        {"labels", field(&RunConfig::labels, false, true)},
        {"out_dir", field(&RunConfig::out_dir, false, true)},
    };
    return fields;
}

} // namespace detail

inline nlohmann::json serialize(const RunConfig& c)
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, f] : detail::run_config_fields())
        j[key] = f.get(c);
    return j;
}

inline RunConfig parse_config(const nlohmann::json& j)
{
    if (!j.is_object())
        throw ConfigError("config must be a JSON object");
    const auto& fields = detail::run_config_fields();
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
        auto it = fields.find(key);
        if (it == fields.end())
            throw ConfigError("unknown config key \"" + key + "\"");
        const bool want_unsigned = it->second.get(c).is_number_unsigned();
        if (want_unsigned && value.is_number_integer() && !value.is_number_unsigned() &&
            value.get<long long>() < 0)
            throw ConfigError("config key \"" + key + "\" must be nonnegative");
        if (want_unsigned && value.is_number_float())
            throw ConfigError("config key \"" + key + "\" must be an integer");
        try {
            it->second.set(c, value);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key \"" + key + "\" has the wrong type (" + value.type_name() + ")");
        }
    }
    c.validate();
    return c;
}

inline RunConfig parse_config_text(const std::string& text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("malformed config JSON: ") + e.what());
    }
    return parse_config(j);
}

inline RunConfig parse_config_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

/// Keys outside the encapsulation group on which two configs disagree.
inline std::vector<std::string> config_drift(const RunConfig& a, const RunConfig& b)
{
    std::vector<std::string> out;
    for (const auto& [key, f] : detail::run_config_fields())
        if (!f.encapsulation_related && !f.io && f.get(a) != f.get(b))
            out.push_back(key);
    return out;
}

} // namespace encap

#endif // ENCAP_CONFIG_HPP_
