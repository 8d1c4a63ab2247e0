// SPDX-License-Identifier: Apache-2.0
//
// g2p2 command-line driver: synth, pretrain, zeroshot, fewshot,
// conditional, eval.

#include "g2p2/g2p2.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { exit_ok = 0, exit_other = 1, exit_argument = 2, exit_data = 3, exit_numerical = 4 };

struct Command {
    std::string config_file;
    std::map<std::string, std::string> flags;
};

/// Registers --config plus one --flag per run-config key.
void add_config_options(CLI::App* sub, Command& cmd) {
    sub->add_option("--config", cmd.config_file, "JSON config file (flat keys)");
    const auto defaults = g2p2::default_run_config();
    for (const auto& [key, value] : defaults.items()) {
        std::string help = "default " + value.dump();
        sub->add_option_function<std::string>(
            "--" + g2p2::flag_name(key), [&cmd, key = key](const std::string& v) { cmd.flags[key] = v; }, help);
    }
    sub->add_option_function<std::string>(
        "--template-file", [&cmd](const std::string& v) { cmd.flags["template_file"] = v; }, "file whose first line is the prompt template");
}

json resolve_config(const Command& cmd) {
    json cfg = g2p2::default_run_config();
    if (!cmd.config_file.empty()) cfg = g2p2::merge_run_config(cfg, g2p2::read_config_file(cmd.config_file), cmd.config_file);
    json layer = json::object();
    for (const auto& [key, value] : cmd.flags)
        if (key != "template_file") layer[key] = g2p2::parse_flag_value(key, value);
    cfg = g2p2::merge_run_config(cfg, layer, "command line");
    if (auto it = cmd.flags.find("template_file"); it != cmd.flags.end()) {
        std::ifstream in(it->second);
        if (!in) throw g2p2::ConfigurationError("cannot read template file " + it->second);
        std::string line;
        while (std::getline(in, line) && line.find_first_not_of(" \t\r") == std::string::npos) {
        }
        if (!line.empty() && line.back() == '\r') line.pop_back();
        cfg["template"] = line;
    }
    return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw g2p2::ConfigurationError("cannot write " + p.string());
    out << s;
}

json seed_streams(const json& cfg) {
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    return {{"master", seed},
            {"batching", g2p2::derive_seed(seed, "batching")},
            {"neighbors", g2p2::derive_seed(seed, "neighbors")},
            {"text_init", seed},
            {"graph_init", seed},
            {"feature_seed", cfg.at("feature_seed")},
            {"split_seeds", cfg.at("seeds")}};
}

int cmd_synth(const json& cfg) {
    const fs::path out = cfg.at("out").get<std::string>();
    const auto corpus = g2p2::generate_synthetic_corpus(g2p2::synthetic_config(cfg));
    g2p2::save_corpus(corpus, out);
    std::cout << "wrote " << corpus.size() << " documents, " << corpus.edges.size() << " edges to " << out.string() << "\n";
    return exit_ok;
}

int cmd_pretrain(const json& cfg) {
    const auto corpus_dir = g2p2::require_path(cfg, "corpus");
    const fs::path out = cfg.at("out").get<std::string>();
    auto corpus = g2p2::load_corpus(corpus_dir, cfg.at("d_in").get<int>(), cfg.at("feature_seed").get<std::uint64_t>());
    if (cfg.at("inductive").get<bool>()) {
        const auto nodes = g2p2::inductive_split(corpus.size(), cfg.at("inductive_fraction").get<double>(), cfg.at("inductive_seed").get<std::uint64_t>()).first;
        corpus = g2p2::induced_subcorpus(corpus, nodes);
    }
    g2p2::Vocabulary vocab(g2p2::corpus_words(corpus));
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    auto text = g2p2::init_text_encoder<float>(g2p2::text_encoder_config(cfg, vocab.size()), seed);
    auto graph = g2p2::init_graph_encoder<float>(g2p2::graph_encoder_config(cfg), seed);
    auto result = g2p2::pretrain(corpus, vocab, std::move(text), std::move(graph), g2p2::pretrain_config(cfg));
    fs::create_directories(out);
    g2p2::Model<float> model{vocab, std::move(result.text), std::move(result.graph)};
    g2p2::save_checkpoint(g2p2::model_checkpoint(model, cfg, seed_streams(cfg)), out / "checkpoint");
    write_text(out / "losses.csv", g2p2::loss_history_csv(result.history));
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        std::cout << "pre-trained " << result.history.size() << " batches; final loss " << last.total << ", exp(tau) " << last.exp_tau << "\n";
    }
    std::cout << "checkpoint: " << (out / "checkpoint").string() << "\n";
    return exit_ok;
}

int cmd_evaluate(const json& cfg, g2p2::Method method) {
    const auto ck_dir = g2p2::require_path(cfg, "checkpoint");
    const auto corpus_dir = g2p2::require_path(cfg, "corpus");
    const fs::path out = cfg.at("out").get<std::string>();
    const auto model = g2p2::model_from_checkpoint<float>(g2p2::load_checkpoint(ck_dir));
    const int d_in = model.graph.config.input_dim;
    const auto feature_seed = cfg.at("feature_seed").get<std::uint64_t>();
    const auto corpus = g2p2::load_corpus(corpus_dir, d_in, feature_seed);
    const auto mode = g2p2::parse_split_mode(cfg.at("protocol").get<std::string>());
    const auto pcfg = g2p2::protocol_config(cfg);
    std::optional<g2p2::GraphTextCorpus> target;
    if (mode == g2p2::SplitMode::cross_domain) target = g2p2::load_corpus(g2p2::require_path(cfg, "target_corpus"), d_in, feature_seed);
    const auto report = g2p2::run_protocol(mode, model, corpus, method, pcfg, target ? &*target : nullptr);
    fs::create_directories(out);
    json j = g2p2::to_json(report);
    j["config"] = cfg;
    write_text(out / "report.json", j.dump(2) + "\n");
    const auto table = g2p2::format_table(report);
    write_text(out / "report.txt", table);
    std::cout << table;
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-grounded text/graph pre-training and prompt-based classification"};
    app.require_subcommand(1);
    std::map<std::string, Command> commands;
    const std::vector<std::pair<std::string, std::string>> subs{
        {"synth", "generate a synthetic corpus directory"},
        {"pretrain", "contrastive pre-training; writes a checkpoint and losses.csv"},
        {"zeroshot", "discrete-template zero-shot classification"},
        {"fewshot", "few-shot classification with tuned continuous prompts"},
        {"conditional", "few-shot classification with node-conditioned prompts"},
        {"eval", "run --method under --protocol"}};
    std::map<std::string, CLI::App*> handles;
    for (const auto& [name, help] : subs) {
        handles[name] = app.add_subcommand(name, help);
        add_config_options(handles[name], commands[name]);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_argument;
    }
    try {
        for (const auto& [name, sub] : handles) {
            if (!sub->parsed()) continue;
            const auto cfg = resolve_config(commands[name]);
            if (name == "synth") return cmd_synth(cfg);
            if (name == "pretrain") return cmd_pretrain(cfg);
            if (name == "zeroshot") return cmd_evaluate(cfg, g2p2::Method::zero_discrete);
            if (name == "fewshot") return cmd_evaluate(cfg, g2p2::Method::fewshot_static);
            if (name == "conditional") return cmd_evaluate(cfg, g2p2::Method::conditional);
            return cmd_evaluate(cfg, g2p2::parse_method(cfg.at("method").get<std::string>()));
        }
    } catch (const g2p2::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return exit_numerical;
    } catch (const g2p2::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const g2p2::SamplingError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const g2p2::LookupError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const g2p2::ConfigurationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_argument;
    } catch (const g2p2::ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_argument;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_other;
    }
    return exit_other;
}
