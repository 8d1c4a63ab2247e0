// SPDX-License-Identifier: Apache-2.0
//
// Metrics, aggregation and the evaluation protocols.

#pragma once

#include "g2p2/conditional.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace g2p2 {

inline double accuracy(const std::vector<ClassId>& preds, const std::vector<ClassId>& golds) {
    if (preds.size() != golds.size()) throw ParameterError("accuracy: prediction and gold lengths differ");
    if (preds.empty()) throw ParameterError("accuracy: empty input");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i];
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Unweighted mean of per-class F1; a class with P + R = 0 scores 0.
inline double macro_f1(const std::vector<ClassId>& preds, const std::vector<ClassId>& golds, const std::vector<ClassId>& class_ids) {
    if (preds.size() != golds.size()) throw ParameterError("macro_f1: prediction and gold lengths differ");
    if (class_ids.empty()) throw ParameterError("macro_f1: no classes");
    double total = 0.0;
    for (ClassId c : class_ids) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const bool p = preds[i] == c, g = golds[i] == c;
            tp += p && g;
            fp += p && !g;
            fn += !p && g;
        }
        const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        if (precision + recall > 0.0) total += 2.0 * precision * recall / (precision + recall);
    }
    return total / static_cast<double>(class_ids.size());
}

inline double harmonic_mean(double a, double b) {
    if (a < 0.0 || b < 0.0) throw ParameterError("harmonic_mean: negative argument");
    return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0;
}

/// Mean and 1.96 * sample sd / sqrt(n); the half-width is absent for n < 2.
struct Summary {
    double mean = 0.0;
    double stddev = 0.0;
    std::optional<double> ci95;
    std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& values) {
    if (values.empty()) throw ParameterError("cannot summarize an empty list");
    Summary s;
    s.n = values.size();
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(s.n);
    if (s.n >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
        s.ci95 = 1.96 * s.stddev / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

struct BaseUnseenMetrics {
    double base = 0.0;
    double unseen = 0.0;
    double hm = 0.0;
};

struct TaskMetrics {
    std::uint64_t seed = 0;
    int task = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::optional<BaseUnseenMetrics> base_unseen;
};

struct EvalReport {
    std::string protocol;
    std::string method;
    std::vector<TaskMetrics> per_task;
    Summary accuracy, macro_f1;            // over tasks
    Summary seed_accuracy, seed_macro_f1;  // over per-seed means
    std::optional<BaseUnseenMetrics> base_unseen;  // means; hm is the mean of per-split values
};

/// Task-level and seed-level summaries. Output does not depend on the order
/// of `tasks` beyond the per_task listing.
inline EvalReport aggregate_tasks(const std::vector<TaskMetrics>& tasks, std::string protocol = "standard", std::string method = "") {
    if (tasks.empty()) throw ParameterError("aggregate_tasks: no tasks");
    EvalReport r;
    r.protocol = std::move(protocol);
    r.method = std::move(method);
    r.per_task = tasks;
    std::vector<double> acc, f1;
    std::map<std::uint64_t, std::vector<const TaskMetrics*>> by_seed;
    for (const auto& t : tasks) {
        acc.push_back(t.accuracy);
        f1.push_back(t.macro_f1);
        by_seed[t.seed].push_back(&t);
    }
    r.accuracy = summarize(acc);
    r.macro_f1 = summarize(f1);
    std::vector<double> sacc, sf1;
    for (const auto& [seed, ts] : by_seed) {
        double a = 0.0, f = 0.0;
        for (const auto* t : ts) {
            a += t->accuracy;
            f += t->macro_f1;
        }
        sacc.push_back(a / static_cast<double>(ts.size()));
        sf1.push_back(f / static_cast<double>(ts.size()));
    }
    r.seed_accuracy = summarize(sacc);
    r.seed_macro_f1 = summarize(sf1);
    if (std::all_of(tasks.begin(), tasks.end(), [](const TaskMetrics& t) { return t.base_unseen.has_value(); })) {
        BaseUnseenMetrics m;
        for (const auto& t : tasks) {
            m.base += t.base_unseen->base;
            m.unseen += t.base_unseen->unseen;
            m.hm += t.base_unseen->hm;
        }
        const auto n = static_cast<double>(tasks.size());
        r.base_unseen = BaseUnseenMetrics{m.base / n, m.unseen / n, m.hm / n};
    }
    return r;
}

inline nlohmann::json to_json(const Summary& s) {
    nlohmann::json j{{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}};
    j["ci95"] = s.ci95 ? nlohmann::json(*s.ci95) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : r.per_task) {
        nlohmann::json j{{"seed", t.seed}, {"task", t.task}, {"accuracy", t.accuracy}, {"macro_f1", t.macro_f1}};
        if (t.base_unseen) j["base_unseen"] = {{"base", t.base_unseen->base}, {"unseen", t.base_unseen->unseen}, {"hm", t.base_unseen->hm}};
        tasks.push_back(std::move(j));
    }
    nlohmann::json j{{"protocol", r.protocol},
                     {"method", r.method},
                     {"per_task", std::move(tasks)},
                     {"task_level", {{"accuracy", to_json(r.accuracy)}, {"macro_f1", to_json(r.macro_f1)}}},
                     {"seed_level", {{"accuracy", to_json(r.seed_accuracy)}, {"macro_f1", to_json(r.seed_macro_f1)}}}};
    if (r.base_unseen) j["base_unseen"] = {{"base", r.base_unseen->base}, {"unseen", r.base_unseen->unseen}, {"hm", r.base_unseen->hm}};
    return j;
}

inline std::string format_table(const EvalReport& r) {
    auto pct = [](const Summary& s) {
        char buf[64];
        if (s.ci95)
            std::snprintf(buf, sizeof(buf), "%6.2f +- %5.2f", 100.0 * s.mean, 100.0 * *s.ci95);
        else
            std::snprintf(buf, sizeof(buf), "%6.2f", 100.0 * s.mean);
        return std::string(buf);
    };
    std::string out = "protocol: " + r.protocol + "\nmethod:   " + r.method + "\n";
    out += "level  n    accuracy          macro-F1\n";
    char line[160];
    std::snprintf(line, sizeof(line), "task   %-4zu %-17s %s\n", r.accuracy.n, pct(r.accuracy).c_str(), pct(r.macro_f1).c_str());
    out += line;
    std::snprintf(line, sizeof(line), "seed   %-4zu %-17s %s\n", r.seed_accuracy.n, pct(r.seed_accuracy).c_str(), pct(r.seed_macro_f1).c_str());
    out += line;
    if (r.base_unseen) {
        std::snprintf(line, sizeof(line), "base %.2f  unseen %.2f  HM %.2f\n", 100.0 * r.base_unseen->base, 100.0 * r.base_unseen->unseen,
                      100.0 * r.base_unseen->hm);
        out += line;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Protocols

enum class Method { zero_discrete, fewshot_static, conditional };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::zero_discrete: return "zero-discrete";
        case Method::fewshot_static: return "fewshot-static";
        case Method::conditional: return "conditional";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "zero-discrete") return Method::zero_discrete;
    if (s == "fewshot-static") return Method::fewshot_static;
    if (s == "conditional") return Method::conditional;
    throw ParameterError("unknown method '" + s + "'");
}

template <typename Scalar>
struct Model {
    Vocabulary vocab;
    TextEncoderState<Scalar> text;
    GraphEncoderState<Scalar> graph;
};

struct ProtocolConfig {
    int n_way = 5;
    int k_shot = 5;
    int tasks_per_seed = 1;
    std::vector<std::uint64_t> seeds{1, 2, 4, 8, 16};
    std::string prompt_template = "[CLASS]";
    int prompt_length = 4;
    int eta = 3;
    bool context_init = true;
    TuneOptions tune;
    int meta_hidden = 8;
    bool meta_zero = false;
    int n_base = 0;  // 0: half of the labelled classes
    /// When nonempty, a fixed base set; every other labelled class is unseen.
    std::set<ClassId> base_classes;
    double inductive_fraction = 0.5;
    std::uint64_t inductive_seed = 0;
};

/// Disjoint (pre-training, evaluation) node subsets for the inductive
/// setting; the first holds round(fraction * n) nodes.
inline std::pair<std::vector<NodeId>, std::vector<NodeId>> inductive_split(std::size_t n_nodes, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ParameterError("inductive fraction must lie in (0, 1)");
    std::vector<NodeId> order(n_nodes);
    for (std::size_t i = 0; i < n_nodes; ++i) order[i] = static_cast<NodeId>(i);
    Rng rng(derive_seed(seed, "inductive"));
    rng.shuffle(order);
    const auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_nodes)));
    std::vector<NodeId> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    std::vector<NodeId> b(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return {a, b};
}

template <typename Scalar>
Mat<Scalar> node_embeddings(const Model<Scalar>& model, const GraphTextCorpus& corpus) {
    if (corpus.node_features.cols() != model.graph.config.input_dim)
        throw ConfigurationError("node features have width " + std::to_string(corpus.node_features.cols()) + " but graph.w1 expects " +
                                 std::to_string(model.graph.config.input_dim));
    return gcn_forward(model.graph, corpus, features_as<Scalar>(corpus.node_features));
}

namespace detail {

/// A prompt classifier after tuning; predicts classes for rows of z.
template <typename Scalar>
struct TunedClassifier {
    Method method = Method::zero_discrete;
    PromptState<Scalar> prompt;
    MetaNetState<Scalar> meta;
    bool static_path = true;

    std::vector<ClassId> predict_rows(const Model<Scalar>& model, const DiscretePromptTemplate& tmpl, const GraphTextCorpus& corpus,
                                      const Mat<Scalar>& z, const std::vector<ClassId>& class_ids) const {
        Mat<Scalar> probs;
        if (method == Method::zero_discrete) {
            std::vector<std::string> labels;
            for (ClassId c : class_ids) labels.push_back(corpus.class_texts.at(c));
            probs = classify_rows(z, class_weights_discrete(model.text, model.vocab, tmpl, labels));
        } else {
            auto p = make_prompt_state(model.text, model.vocab, prompt.tokens, corpus.class_texts);
            if (static_path)
                probs = classify_rows(z, class_weights_continuous(model.text, p, class_ids));
            else
                probs = classify_conditional_rows(model.text, p, meta, z, class_ids);
        }
        std::vector<ClassId> out;
        for (Eigen::Index i = 0; i < probs.rows(); ++i) out.push_back(class_ids[static_cast<std::size_t>(predict(probs.row(i)))]);
        return out;
    }
};

template <typename Scalar>
TunedClassifier<Scalar> fit(const Model<Scalar>& model, const GraphTextCorpus& corpus, const Mat<Scalar>& z, const FewShotTask& task, Method method,
                            const ProtocolConfig& cfg, std::uint64_t seed) {
    TunedClassifier<Scalar> clf;
    clf.method = method;
    if (method == Method::zero_discrete) return clf;
    if (task.support.empty()) throw ParameterError("tuned methods need K >= 1");
    const auto tokens = cfg.context_init ? init_prompt_from_context(corpus, task, model.text, model.vocab, cfg.prompt_length, cfg.eta, seed)
                                         : init_prompt_random(model.text, cfg.prompt_length, seed);
    auto prompt = make_prompt_state(model.text, model.vocab, tokens, corpus.class_texts);
    const auto support = make_labeled_set(z, task.support, task.class_ids);
    const auto validation = make_labeled_set(z, task.validation, task.class_ids);
    if (method == Method::fewshot_static) {
        clf.prompt = tune_prompt(model.text, std::move(prompt), task.class_ids, support, validation, cfg.tune).prompt;
        return clf;
    }
    const int d = model.text.config.embed_dim, w = model.text.config.width;
    auto meta = cfg.meta_zero ? zero_meta_net<Scalar>(d, cfg.meta_hidden, w) : init_meta_net<Scalar>(d, cfg.meta_hidden, w, seed);
    auto r = tune_conditional(model.text, std::move(prompt), std::move(meta), task.class_ids, support, validation, cfg.tune, !cfg.meta_zero);
    clf.prompt = std::move(r.prompt);
    clf.meta = std::move(r.meta);
    clf.static_path = false;
    return clf;
}

inline std::vector<ClassId> golds_of(const std::vector<std::pair<NodeId, ClassId>>& items) {
    std::vector<ClassId> g;
    for (const auto& [v, c] : items) g.push_back(c);
    return g;
}

template <typename Scalar>
Mat<Scalar> rows_of(const Mat<Scalar>& z, const std::vector<std::pair<NodeId, ClassId>>& items) {
    Mat<Scalar> out(static_cast<Eigen::Index>(items.size()), z.cols());
    for (std::size_t i = 0; i < items.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = z.row(items[i].first);
    return out;
}

/// K support and K validation instances per base class pooled into one
/// N_base-way task; the remaining base instances form the base test split.
inline FewShotTask pooled_base_task(const GraphTextCorpus& corpus, const SplitSpec& split, int k_shot, std::uint64_t seed) {
    SplitSpec base_only;
    base_only.base_classes = split.base_classes;
    return sample_task(corpus, base_only, static_cast<int>(split.base_classes.size()), k_shot, seed);
}

inline std::vector<std::pair<NodeId, ClassId>> instances_of(const GraphTextCorpus& corpus, const std::set<ClassId>& classes) {
    std::vector<std::pair<NodeId, ClassId>> out;
    for (std::size_t v = 0; v < corpus.size(); ++v) {
        const auto& l = corpus.labels[v];
        if (l && classes.count(*l)) out.emplace_back(static_cast<NodeId>(v), *l);
    }
    return out;
}

inline int default_n_base(const GraphTextCorpus& corpus, int n_base) {
    return n_base > 0 ? n_base : static_cast<int>(corpus.nodes_by_class().size() / 2);
}

inline SplitSpec generalization_split(const GraphTextCorpus& corpus, const ProtocolConfig& cfg, std::uint64_t seed) {
    if (cfg.base_classes.empty()) return split_base_unseen(corpus, default_n_base(corpus, cfg.n_base), seed);
    SplitSpec split;
    split.mode = SplitMode::base_unseen;
    for (const auto& [c, nodes] : corpus.nodes_by_class()) (cfg.base_classes.count(c) ? split.base_classes : split.unseen_classes).insert(c);
    if (split.base_classes.size() != cfg.base_classes.size()) throw ParameterError("a configured base class has no labelled instances");
    if (split.unseen_classes.empty()) throw ParameterError("fixed base classes leave no unseen class");
    return split;
}

template <typename Scalar>
TaskMetrics score(const TunedClassifier<Scalar>& clf, const Model<Scalar>& model, const DiscretePromptTemplate& tmpl, const GraphTextCorpus& corpus,
                  const Mat<Scalar>& z, const std::vector<std::pair<NodeId, ClassId>>& items, const std::vector<ClassId>& class_ids) {
    if (items.empty()) throw SamplingError("no evaluation instances");
    const auto preds = clf.predict_rows(model, tmpl, corpus, rows_of(z, items), class_ids);
    const auto golds = golds_of(items);
    TaskMetrics m;
    m.accuracy = accuracy(preds, golds);
    m.macro_f1 = macro_f1(preds, golds, class_ids);
    return m;
}

}  // namespace detail

/// Sampled N-way K-shot tasks over all classes of `corpus`.
template <typename Scalar>
EvalReport run_standard(const Model<Scalar>& model, const GraphTextCorpus& corpus, Method method, const ProtocolConfig& cfg,
                        const std::string& protocol = "standard") {
    const DiscretePromptTemplate tmpl(cfg.prompt_template);
    const auto z = node_embeddings(model, corpus);
    std::vector<TaskMetrics> all;
    for (auto seed : cfg.seeds) {
        for (int t = 0; t < cfg.tasks_per_seed; ++t) {
            const auto task = sample_task(corpus, SplitSpec{}, cfg.n_way, method == Method::zero_discrete ? 0 : cfg.k_shot, derive_seed(seed, "task", t));
            const auto clf = detail::fit(model, corpus, z, task, method, cfg, derive_seed(seed, "init", t));
            auto m = detail::score(clf, model, tmpl, corpus, z, task.query, task.class_ids);
            m.seed = seed;
            m.task = t;
            all.push_back(m);
        }
    }
    return aggregate_tasks(all, protocol, to_string(method));
}

/// Tune once per split seed on the pooled base classes of `source`, then
/// evaluate. base-unseen: base test split over base classes, every unseen
/// instance over unseen classes, HM per split. continual: the union of both
/// over all classes. cross-domain: the unseen classes of `target`.
template <typename Scalar>
EvalReport run_generalization(const Model<Scalar>& model, const GraphTextCorpus& source, const GraphTextCorpus& target, SplitMode mode, Method method,
                              const ProtocolConfig& cfg) {
    const DiscretePromptTemplate tmpl(cfg.prompt_template);
    const auto zs = node_embeddings(model, source);
    const auto zt = &source == &target ? zs : node_embeddings(model, target);
    std::vector<TaskMetrics> all;
    for (auto seed : cfg.seeds) {
        const auto split = detail::generalization_split(source, cfg, seed);
        const auto base = detail::pooled_base_task(source, split, cfg.k_shot, derive_seed(seed, "base-task"));
        const auto clf = detail::fit(model, source, zs, base, method, cfg, derive_seed(seed, "init"));
        const std::vector<ClassId> base_ids(split.base_classes.begin(), split.base_classes.end());
        const std::vector<ClassId> unseen_ids(split.unseen_classes.begin(), split.unseen_classes.end());
        TaskMetrics m;
        if (mode == SplitMode::base_unseen) {
            const auto b = detail::score(clf, model, tmpl, source, zs, base.query, base_ids);
            const auto u = detail::score(clf, model, tmpl, source, zs, detail::instances_of(source, split.unseen_classes), unseen_ids);
            const double hm = harmonic_mean(b.accuracy, u.accuracy);
            m.accuracy = hm;
            m.macro_f1 = harmonic_mean(b.macro_f1, u.macro_f1);
            m.base_unseen = BaseUnseenMetrics{b.accuracy, u.accuracy, hm};
        } else if (mode == SplitMode::continual) {
            auto items = base.query;
            const auto unseen = detail::instances_of(source, split.unseen_classes);
            items.insert(items.end(), unseen.begin(), unseen.end());
            std::vector<ClassId> all_ids = base_ids;
            all_ids.insert(all_ids.end(), unseen_ids.begin(), unseen_ids.end());
            const auto preds = clf.predict_rows(model, tmpl, source, detail::rows_of(zs, items), all_ids);
            const auto golds = detail::golds_of(items);
            m.accuracy = accuracy(preds, golds);
            m.macro_f1 = macro_f1(preds, golds, all_ids);
            const std::size_t nb = base.query.size();
            std::vector<ClassId> pb(preds.begin(), preds.begin() + static_cast<std::ptrdiff_t>(nb)), gb(golds.begin(), golds.begin() + static_cast<std::ptrdiff_t>(nb));
            std::vector<ClassId> pu(preds.begin() + static_cast<std::ptrdiff_t>(nb), preds.end()), gu(golds.begin() + static_cast<std::ptrdiff_t>(nb), golds.end());
            const double ba = accuracy(pb, gb), ua = accuracy(pu, gu);
            m.base_unseen = BaseUnseenMetrics{ba, ua, harmonic_mean(ba, ua)};
        } else if (mode == SplitMode::cross_domain) {
            const auto tsplit = detail::generalization_split(target, cfg, seed);
            const std::vector<ClassId> t_ids(tsplit.unseen_classes.begin(), tsplit.unseen_classes.end());
            m = detail::score(clf, model, tmpl, target, zt, detail::instances_of(target, tsplit.unseen_classes), t_ids);
        } else {
            throw ParameterError("run_generalization does not handle protocol " + to_string(mode));
        }
        m.seed = seed;
        all.push_back(m);
    }
    return aggregate_tasks(all, to_string(mode), to_string(method));
}

/// Dispatch on the protocol. Inductive evaluates standard tasks on the
/// evaluation half of inductive_split; the model is expected to have been
/// pre-trained on the other half. Cross-domain needs `target`.
template <typename Scalar>
EvalReport run_protocol(SplitMode mode, const Model<Scalar>& model, const GraphTextCorpus& corpus, Method method, const ProtocolConfig& cfg,
                        const GraphTextCorpus* target = nullptr) {
    switch (mode) {
        case SplitMode::standard: return run_standard(model, corpus, method, cfg);
        case SplitMode::inductive: {
            const auto held_out = inductive_split(corpus.size(), cfg.inductive_fraction, cfg.inductive_seed).second;
            return run_standard(model, induced_subcorpus(corpus, held_out), method, cfg, "inductive");
        }
        case SplitMode::base_unseen:
        case SplitMode::continual: return run_generalization(model, corpus, corpus, mode, method, cfg);
        case SplitMode::cross_domain:
            if (!target) throw ConfigurationError("cross-domain protocol needs a target corpus");
            return run_generalization(model, corpus, *target, mode, method, cfg);
    }
    throw ParameterError("unknown protocol");
}

}  // namespace g2p2
