// SPDX-License-Identifier: Apache-2.0
//
// Flat JSON run configuration. Layers merge as default < file < flags;
// every key has a fixed type taken from its default.

#pragma once

#include "g2p2/eval.hpp"
#include "g2p2/pretrain.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace g2p2 {

inline nlohmann::json default_run_config() {
    return {
        // paths
        {"corpus", ""},
        {"target_corpus", ""},
        {"checkpoint", ""},
        {"out", "out"},
        // seeds
        {"seed", 1},
        {"feature_seed", 0},
        // encoders
        {"d_in", 32},
        {"width", 64},
        {"layers", 2},
        {"heads", 4},
        {"embed_dim", 32},
        {"max_length", 128},
        {"gcn_hidden", 64},
        // pre-training
        {"lambda", 0.1},
        {"eta", 3},
        {"batch_size", 64},
        {"epochs", 2},
        {"lr", 2e-5},
        {"l1_weight", 1.0},
        {"max_exp_tau", 100.0},
        {"resample_neighbors", true},
        // prompting
        {"template", "[CLASS]"},
        {"prompt_length", 4},
        {"prompt_lr", 0.01},
        {"prompt_steps", 100},
        {"context_init", true},
        {"meta_hidden", 8},
        {"meta_zero", false},
        // evaluation
        {"protocol", "standard"},
        {"method", "fewshot-static"},
        {"n_way", 5},
        {"k_shot", 5},
        {"tasks_per_seed", 1},
        {"seeds", {1, 2, 4, 8, 16}},
        {"n_base", 0},
        {"inductive", false},
        {"inductive_fraction", 0.5},
        {"inductive_seed", 0},
        // synthetic corpus
        {"n_classes", 5},
        {"docs_per_class", 200},
        {"vocab_size", 300},
        {"keywords_per_class", 5},
        {"homophily", 0.9},
        {"keyword_rate", 0.2},
        {"class_keyword_rate", nlohmann::json::array()},
        {"edges_per_node", 2},
        {"doc_length_min", 16},
        {"doc_length_max", 32},
    };
}

namespace detail {

inline bool same_kind(const nlohmann::json& want, const nlohmann::json& got) {
    if (want.is_boolean()) return got.is_boolean();
    if (want.is_number_integer()) return got.is_number_integer();
    if (want.is_number()) return got.is_number();
    if (want.is_string()) return got.is_string();
    if (want.is_array()) return got.is_array() && std::all_of(got.begin(), got.end(), [](const auto& x) { return x.is_number(); });
    return false;
}

}  // namespace detail

/// Overlays `layer` onto `base`; unknown keys and type mismatches name the
/// offending key and its source.
inline nlohmann::json merge_run_config(nlohmann::json base, const nlohmann::json& layer, const std::string& source) {
    if (!layer.is_object()) throw ConfigurationError(source + ": configuration must be a JSON object");
    const auto defaults = default_run_config();
    for (const auto& [key, value] : layer.items()) {
        if (!defaults.contains(key)) throw ConfigurationError(source + ": unknown key '" + key + "'");
        if (!detail::same_kind(defaults[key], value))
            throw ConfigurationError(source + ": key '" + key + "' expects a value like " + defaults[key].dump() + ", got " + value.dump());
        base[key] = value;
    }
    return base;
}

inline nlohmann::json read_config_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigurationError("cannot read config file " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError("config file " + p.string() + " is not valid JSON: " + e.what());
    }
}

/// Converts a command-line string to the type of `key`'s default. Lists are
/// comma separated.
inline nlohmann::json parse_flag_value(const std::string& key, const std::string& text) {
    const auto defaults = default_run_config();
    if (!defaults.contains(key)) throw ConfigurationError("unknown key '" + key + "'");
    const auto& d = defaults[key];
    auto bad = [&] { return ConfigurationError("--" + key + ": cannot parse '" + text + "'"); };
    auto number = [&](const std::string& s) -> nlohmann::json {
        std::size_t used = 0;
        try {
            if (d.is_number_integer() || (d.is_array() && key == "seeds")) {
                const long long v = std::stoll(s, &used);
                if (used != s.size()) throw bad();
                return v;
            }
            const double v = std::stod(s, &used);
            if (used != s.size()) throw bad();
            return v;
        } catch (const std::logic_error&) {
            throw bad();
        }
    };
    if (d.is_boolean()) {
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        throw bad();
    }
    if (d.is_string()) return text;
    if (d.is_number()) return number(text);
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) arr.push_back(number(item));
    return arr;
}

inline std::string flag_name(const std::string& key) {
    std::string s = key;
    std::replace(s.begin(), s.end(), '_', '-');
    return s;
}

/// Ensures the path under `key` is set and exists.
inline std::filesystem::path require_path(const nlohmann::json& cfg, const std::string& key) {
    const auto p = cfg.at(key).get<std::string>();
    if (p.empty()) throw ConfigurationError("--" + flag_name(key) + " is required");
    if (!std::filesystem::exists(p)) throw ConfigurationError(flag_name(key) + " path '" + p + "' does not exist");
    return p;
}

// ---------------------------------------------------------------------------
// Typed views

inline TextEncoderConfig text_encoder_config(const nlohmann::json& c, int vocab_size) {
    TextEncoderConfig t;
    t.vocab_size = vocab_size;
    t.width = c.at("width").get<int>();
    t.layers = c.at("layers").get<int>();
    t.heads = c.at("heads").get<int>();
    t.embed_dim = c.at("embed_dim").get<int>();
    t.max_length = c.at("max_length").get<int>();
    return t;
}

inline GraphEncoderConfig graph_encoder_config(const nlohmann::json& c) {
    GraphEncoderConfig g;
    g.input_dim = c.at("d_in").get<int>();
    g.hidden_dim = c.at("gcn_hidden").get<int>();
    g.output_dim = c.at("embed_dim").get<int>();
    return g;
}

inline PretrainConfig pretrain_config(const nlohmann::json& c) {
    PretrainConfig p;
    p.lambda = c.at("lambda").get<double>();
    p.eta = c.at("eta").get<int>();
    p.batch_size = c.at("batch_size").get<int>();
    p.epochs = c.at("epochs").get<int>();
    p.learning_rate = c.at("lr").get<double>();
    p.seed = c.at("seed").get<std::uint64_t>();
    p.l1_weight = c.at("l1_weight").get<double>();
    p.max_exp_tau = c.at("max_exp_tau").get<double>();
    p.resample_neighbors = c.at("resample_neighbors").get<bool>();
    return p;
}

inline ProtocolConfig protocol_config(const nlohmann::json& c) {
    ProtocolConfig p;
    p.n_way = c.at("n_way").get<int>();
    p.k_shot = c.at("k_shot").get<int>();
    p.tasks_per_seed = c.at("tasks_per_seed").get<int>();
    p.seeds = c.at("seeds").get<std::vector<std::uint64_t>>();
    if (p.seeds.empty()) throw ConfigurationError("seeds must not be empty");
    p.prompt_template = c.at("template").get<std::string>();
    p.prompt_length = c.at("prompt_length").get<int>();
    p.eta = c.at("eta").get<int>();
    p.context_init = c.at("context_init").get<bool>();
    p.tune.learning_rate = c.at("prompt_lr").get<double>();
    p.tune.steps = c.at("prompt_steps").get<int>();
    p.meta_hidden = c.at("meta_hidden").get<int>();
    p.meta_zero = c.at("meta_zero").get<bool>();
    p.n_base = c.at("n_base").get<int>();
    p.inductive_fraction = c.at("inductive_fraction").get<double>();
    p.inductive_seed = c.at("inductive_seed").get<std::uint64_t>();
    return p;
}

inline SyntheticCorpusConfig synthetic_config(const nlohmann::json& c) {
    SyntheticCorpusConfig s;
    s.n_classes = c.at("n_classes").get<int>();
    s.docs_per_class = c.at("docs_per_class").get<int>();
    s.vocab_size = c.at("vocab_size").get<int>();
    s.keywords_per_class = c.at("keywords_per_class").get<int>();
    s.homophily = c.at("homophily").get<double>();
    s.seed = c.at("seed").get<std::uint64_t>();
    s.keyword_rate = c.at("keyword_rate").get<double>();
    s.class_keyword_rate = c.at("class_keyword_rate").get<std::vector<double>>();
    s.edges_per_node = c.at("edges_per_node").get<int>();
    s.doc_length_min = c.at("doc_length_min").get<int>();
    s.doc_length_max = c.at("doc_length_max").get<int>();
    s.feature_dim = c.at("d_in").get<int>();
    s.feature_seed = c.at("feature_seed").get<std::uint64_t>();
    return s;
}

}  // namespace g2p2
