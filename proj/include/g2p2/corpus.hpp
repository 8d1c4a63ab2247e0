// SPDX-License-Identifier: Apache-2.0
//
// Graph-grounded text corpora: data model, synthetic generator, node
// features, neighbour sampling and N-way K-shot task construction.

#pragma once

#include "g2p2/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace g2p2 {

/// Lower-cases and splits on ASCII whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

struct Document {
    NodeId id = 0;
    std::string text;
};

/// Documents are nodes: document i is node i. Edges are stored once per
/// undirected pair with u < v; self-loops are never stored.
class GraphTextCorpus {
public:
    std::vector<Document> documents;
    std::vector<std::pair<NodeId, NodeId>> edges;
    Mat<double> node_features;
    std::vector<std::optional<ClassId>> labels;
    std::map<ClassId, std::string> class_texts;

    std::size_t size() const { return documents.size(); }

    /// Checks invariants, canonicalises the edge list and rebuilds adjacency.
    void finalize() {
        const auto n = static_cast<NodeId>(documents.size());
        for (NodeId i = 0; i < n; ++i) {
            if (documents[static_cast<std::size_t>(i)].id != i)
                throw DataError("document ids must be dense and ordered; expected " + std::to_string(i));
            if (split_words(documents[static_cast<std::size_t>(i)].text).empty())
                throw DataError("document " + std::to_string(i) + " has empty text");
        }
        if (labels.empty()) labels.assign(documents.size(), std::nullopt);
        if (labels.size() != documents.size()) throw DataError("label vector size differs from document count");
        for (const auto& l : labels) {
            if (l && !class_texts.count(*l))
                throw DataError("class " + std::to_string(*l) + " has no label text");
        }
        std::set<std::pair<NodeId, NodeId>> unique;
        for (auto [u, v] : edges) {
            if (u < 0 || u >= n || v < 0 || v >= n)
                throw LookupError("edge (" + std::to_string(u) + ", " + std::to_string(v) + ") references an unknown node");
            if (u == v) continue;
            unique.emplace(std::min(u, v), std::max(u, v));
        }
        edges.assign(unique.begin(), unique.end());
        adjacency_.assign(documents.size(), {});
        for (auto [u, v] : edges) {
            adjacency_[static_cast<std::size_t>(u)].push_back(v);
            adjacency_[static_cast<std::size_t>(v)].push_back(u);
        }
        for (auto& a : adjacency_) std::sort(a.begin(), a.end());
        if (node_features.rows() != 0 && node_features.rows() != static_cast<Eigen::Index>(documents.size()))
            throw DataError("node feature rows differ from document count");
    }

    const std::vector<NodeId>& neighbors(NodeId node) const {
        if (node < 0 || static_cast<std::size_t>(node) >= adjacency_.size())
            throw LookupError("unknown node " + std::to_string(node));
        return adjacency_[static_cast<std::size_t>(node)];
    }

    std::size_t degree(NodeId node) const { return neighbors(node).size(); }

    /// Labelled node ids per class, ascending.
    std::map<ClassId, std::vector<NodeId>> nodes_by_class() const {
        std::map<ClassId, std::vector<NodeId>> out;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i]) out[*labels[i]].push_back(static_cast<NodeId>(i));
        }
        return out;
    }

    ClassId label_of(NodeId node) const {
        if (node < 0 || static_cast<std::size_t>(node) >= labels.size() || !labels[static_cast<std::size_t>(node)])
            throw LookupError("node " + std::to_string(node) + " is unlabelled");
        return *labels[static_cast<std::size_t>(node)];
    }

private:
    std::vector<std::vector<NodeId>> adjacency_;
};

// ---------------------------------------------------------------------------
// Word embeddings and node features

/// Word -> vector table. Unknown words embed to zero.
struct WordEmbeddings {
    std::unordered_map<std::string, Eigen::Index> index;
    Mat<double> vectors;

    Eigen::Index dim() const { return vectors.cols(); }
};

/// Seeded random table; each word's vector depends only on (word, seed) so
/// tables built from different vocabularies agree on shared words.
inline WordEmbeddings random_word_embeddings(const std::vector<std::string>& words, int dim, std::uint64_t seed) {
    if (dim <= 0) throw ParameterError("embedding dimension must be positive");
    WordEmbeddings table;
    table.vectors.resize(static_cast<Eigen::Index>(words.size()), dim);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t i = 0; i < words.size(); ++i) {
        table.index.emplace(words[i], static_cast<Eigen::Index>(i));
        Rng rng(derive_seed(seed, "word", fnv1a(words[i])));
        for (int j = 0; j < dim; ++j) table.vectors(static_cast<Eigen::Index>(i), j) = stddev * rng.normal();
    }
    return table;
}

/// Sorted distinct lower-cased words across documents and class texts.
inline std::vector<std::string> corpus_words(const GraphTextCorpus& corpus) {
    std::set<std::string> words;
    for (const auto& d : corpus.documents)
        for (auto& w : split_words(d.text)) words.insert(std::move(w));
    for (const auto& [c, text] : corpus.class_texts)
        for (auto& w : split_words(text)) words.insert(std::move(w));
    return {words.begin(), words.end()};
}

/// Row i is the mean word vector of document i; documents without any
/// in-vocabulary word get the zero row.
inline Mat<double> build_node_features(const GraphTextCorpus& corpus, const WordEmbeddings& embedder, int d_in) {
    if (embedder.dim() != d_in)
        throw ParameterError("embedder dimension " + std::to_string(embedder.dim()) + " differs from d_in " + std::to_string(d_in));
    Mat<double> features = Mat<double>::Zero(static_cast<Eigen::Index>(corpus.size()), d_in);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto words = split_words(corpus.documents[i].text);
        if (words.empty()) continue;
        for (const auto& w : words) {
            auto it = embedder.index.find(w);
            if (it != embedder.index.end()) features.row(static_cast<Eigen::Index>(i)) += embedder.vectors.row(it->second);
        }
        // Out-of-vocabulary words count as zero vectors in the mean.
        features.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(words.size());
    }
    return features;
}

inline void attach_random_features(GraphTextCorpus& corpus, int d_in, std::uint64_t seed) {
    corpus.node_features = build_node_features(corpus, random_word_embeddings(corpus_words(corpus), d_in, seed), d_in);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticCorpusConfig {
    int n_classes = 5;
    int docs_per_class = 200;
    int vocab_size = 300;
    int keywords_per_class = 5;
    double homophily = 0.9;
    std::uint64_t seed = 1;
    int doc_length_min = 16;
    int doc_length_max = 32;
    double keyword_rate = 0.2;
    int edges_per_node = 2;
    int feature_dim = 32;
    std::uint64_t feature_seed = 0;
    /// Optional per-class override of keyword_rate (shifted class distributions).
    std::vector<double> class_keyword_rate;
};

/// Each document mixes its class's keywords with shared filler words. Each
/// node proposes `edges_per_node` edges whose far endpoint is same-class
/// with probability `homophily`. Class texts are the class keywords.
inline GraphTextCorpus generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
    if (cfg.n_classes < 2) throw ParameterError("n_classes must be at least 2");
    if (cfg.docs_per_class < 1) throw ParameterError("docs_per_class must be positive");
    if (cfg.keywords_per_class < 1) throw ParameterError("keywords_per_class must be positive");
    if (static_cast<long long>(cfg.keywords_per_class) * cfg.n_classes > cfg.vocab_size)
        throw ParameterError("keywords_per_class * n_classes exceeds vocab_size");
    if (!(cfg.homophily >= 0.0 && cfg.homophily <= 1.0)) throw ParameterError("homophily must lie in [0, 1]");
    if (cfg.doc_length_min < 1 || cfg.doc_length_max < cfg.doc_length_min) throw ParameterError("invalid document length range");
    if (!(cfg.keyword_rate >= 0.0 && cfg.keyword_rate <= 1.0)) throw ParameterError("keyword_rate must lie in [0, 1]");
    if (!cfg.class_keyword_rate.empty() && static_cast<int>(cfg.class_keyword_rate.size()) != cfg.n_classes)
        throw ParameterError("class_keyword_rate must have one entry per class");
    if (cfg.edges_per_node < 0) throw ParameterError("edges_per_node must be nonnegative");

    Rng rng(derive_seed(cfg.seed, "synthetic"));
    const int width = static_cast<int>(std::to_string(cfg.vocab_size - 1).size());
    std::vector<std::string> vocab;
    for (int i = 0; i < cfg.vocab_size; ++i) {
        std::string s = std::to_string(i);
        vocab.push_back("w" + std::string(static_cast<std::size_t>(width) - s.size(), '0') + s);
    }
    std::vector<std::string> shuffled = vocab;
    rng.shuffle(shuffled);
    const auto n_kw = static_cast<std::size_t>(cfg.keywords_per_class * cfg.n_classes);
    std::vector<std::vector<std::string>> keywords(static_cast<std::size_t>(cfg.n_classes));
    for (std::size_t i = 0; i < n_kw; ++i) keywords[i / static_cast<std::size_t>(cfg.keywords_per_class)].push_back(shuffled[i]);
    std::vector<std::string> filler(shuffled.begin() + static_cast<std::ptrdiff_t>(n_kw), shuffled.end());
    if (filler.empty()) filler = vocab;

    GraphTextCorpus corpus;
    for (int c = 0; c < cfg.n_classes; ++c) {
        std::string text;
        for (const auto& w : keywords[static_cast<std::size_t>(c)]) text += (text.empty() ? "" : " ") + w;
        corpus.class_texts[c] = text;
    }

    const int n = cfg.n_classes * cfg.docs_per_class;
    std::vector<std::vector<NodeId>> members(static_cast<std::size_t>(cfg.n_classes));
    for (NodeId i = 0; i < n; ++i) {
        const ClassId c = i % cfg.n_classes;
        members[static_cast<std::size_t>(c)].push_back(i);
        const double rate = cfg.class_keyword_rate.empty() ? cfg.keyword_rate : cfg.class_keyword_rate[static_cast<std::size_t>(c)];
        const int len = cfg.doc_length_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.doc_length_max - cfg.doc_length_min + 1)));
        std::string text;
        for (int t = 0; t < len; ++t) {
            const auto& kws = keywords[static_cast<std::size_t>(c)];
            const std::string& w = rng.uniform() < rate ? kws[rng.below(kws.size())] : filler[rng.below(filler.size())];
            if (!text.empty()) text.push_back(' ');
            text += w;
        }
        corpus.documents.push_back({i, std::move(text)});
        corpus.labels.emplace_back(c);
    }

    for (NodeId u = 0; u < n; ++u) {
        const ClassId cu = u % cfg.n_classes;
        for (int e = 0; e < cfg.edges_per_node; ++e) {
            NodeId v;
            if (rng.uniform() < cfg.homophily) {
                const auto& pool = members[static_cast<std::size_t>(cu)];
                v = pool[rng.below(pool.size())];
            } else {
                auto other = static_cast<ClassId>(rng.below(static_cast<std::uint64_t>(cfg.n_classes - 1)));
                if (other >= cu) ++other;
                const auto& pool = members[static_cast<std::size_t>(other)];
                v = pool[rng.below(pool.size())];
            }
            if (v != u) corpus.edges.emplace_back(u, v);
        }
    }
    corpus.finalize();
    attach_random_features(corpus, cfg.feature_dim, cfg.feature_seed);
    return corpus;
}

/// Fraction of stored edges joining two nodes of the same class.
inline double same_class_edge_fraction(const GraphTextCorpus& corpus) {
    if (corpus.edges.empty()) return 0.0;
    std::size_t same = 0;
    for (auto [u, v] : corpus.edges) {
        const auto& lu = corpus.labels[static_cast<std::size_t>(u)];
        const auto& lv = corpus.labels[static_cast<std::size_t>(v)];
        if (lu && lv && *lu == *lv) ++same;
    }
    return static_cast<double>(same) / static_cast<double>(corpus.edges.size());
}

// ---------------------------------------------------------------------------
// Sampling

/// min(eta, degree) distinct neighbours, uniformly without replacement.
inline std::vector<NodeId> sample_neighbors(const GraphTextCorpus& corpus, NodeId node, int eta, std::uint64_t seed) {
    if (eta < 0) throw ParameterError("eta must be nonnegative");
    const auto& adj = corpus.neighbors(node);
    if (adj.size() <= static_cast<std::size_t>(eta)) return adj;
    Rng rng(seed);
    return rng.sample(adj, static_cast<std::size_t>(eta));
}

enum class SplitMode { standard, inductive, base_unseen, continual, cross_domain };

inline std::string to_string(SplitMode m) {
    switch (m) {
        case SplitMode::standard: return "standard";
        case SplitMode::inductive: return "inductive";
        case SplitMode::base_unseen: return "base-unseen";
        case SplitMode::continual: return "continual";
        case SplitMode::cross_domain: return "cross-domain";
    }
    return "standard";
}

inline SplitMode parse_split_mode(const std::string& s) {
    if (s == "standard") return SplitMode::standard;
    if (s == "inductive") return SplitMode::inductive;
    if (s == "base-unseen") return SplitMode::base_unseen;
    if (s == "continual") return SplitMode::continual;
    if (s == "cross-domain") return SplitMode::cross_domain;
    throw ParameterError("unknown protocol '" + s + "'");
}

struct SplitSpec {
    std::set<ClassId> base_classes;
    std::set<ClassId> unseen_classes;
    SplitMode mode = SplitMode::standard;
};

struct FewShotTask {
    std::vector<ClassId> class_ids;
    std::vector<std::pair<NodeId, ClassId>> support;
    std::vector<std::pair<NodeId, ClassId>> validation;
    std::vector<std::pair<NodeId, ClassId>> query;
};

/// Samples N classes (from the base classes when the split names any,
/// otherwise from every labelled class), then K support and K validation
/// nodes per class. The remaining labelled nodes of those classes form the
/// query set.
inline FewShotTask sample_task(const GraphTextCorpus& corpus, const SplitSpec& split, int n_way, int k_shot, std::uint64_t seed) {
    if (n_way < 1) throw ParameterError("N must be positive");
    if (k_shot < 0) throw ParameterError("K must be nonnegative");
    const auto by_class = corpus.nodes_by_class();
    std::vector<ClassId> pool;
    for (const auto& [c, nodes] : by_class) {
        if (split.base_classes.empty() || split.base_classes.count(c)) pool.push_back(c);
    }
    if (static_cast<int>(pool.size()) < n_way)
        throw SamplingError("need " + std::to_string(n_way) + " classes but only " + std::to_string(pool.size()) + " are available");

    Rng rng(seed);
    FewShotTask task;
    task.class_ids = rng.sample(pool, static_cast<std::size_t>(n_way));
    const std::size_t need = k_shot == 0 ? 1 : static_cast<std::size_t>(2 * k_shot + 1);
    for (ClassId c : task.class_ids) {
        const auto& nodes = by_class.at(c);
        if (nodes.size() < need)
            throw SamplingError("class " + std::to_string(c) + " has " + std::to_string(nodes.size()) +
                                " labelled instances; need at least " + std::to_string(need));
    }
    for (ClassId c : task.class_ids) {
        auto perm = rng.sample(by_class.at(c), by_class.at(c).size());
        const auto k = static_cast<std::size_t>(k_shot);
        for (std::size_t i = 0; i < k; ++i) task.support.emplace_back(perm[i], c);
        for (std::size_t i = k; i < 2 * k; ++i) task.validation.emplace_back(perm[i], c);
        std::vector<NodeId> rest(perm.begin() + static_cast<std::ptrdiff_t>(2 * k), perm.end());
        std::sort(rest.begin(), rest.end());
        for (NodeId v : rest) task.query.emplace_back(v, c);
    }
    return task;
}

/// Picks n_base base classes and n_base disjoint unseen classes.
inline SplitSpec split_base_unseen(const GraphTextCorpus& corpus, int n_base, std::uint64_t seed) {
    if (n_base < 1) throw ParameterError("n_base must be positive");
    std::vector<ClassId> classes;
    for (const auto& [c, nodes] : corpus.nodes_by_class()) classes.push_back(c);
    if (classes.size() < static_cast<std::size_t>(2 * n_base))
        throw SamplingError("need " + std::to_string(2 * n_base) + " labelled classes for a base/unseen split, found " +
                            std::to_string(classes.size()));
    Rng rng(seed);
    const auto picked = rng.sample(classes, static_cast<std::size_t>(2 * n_base));
    SplitSpec split;
    split.mode = SplitMode::base_unseen;
    split.base_classes.insert(picked.begin(), picked.begin() + n_base);
    split.unseen_classes.insert(picked.begin() + n_base, picked.end());
    return split;
}

/// Induced sub-corpus on `nodes` (re-indexed densely in the given order).
inline GraphTextCorpus induced_subcorpus(const GraphTextCorpus& corpus, const std::vector<NodeId>& nodes) {
    GraphTextCorpus sub;
    std::unordered_map<NodeId, NodeId> remap;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const NodeId old = nodes[i];
        if (old < 0 || static_cast<std::size_t>(old) >= corpus.size()) throw LookupError("unknown node " + std::to_string(old));
        remap.emplace(old, static_cast<NodeId>(i));
        sub.documents.push_back({static_cast<NodeId>(i), corpus.documents[static_cast<std::size_t>(old)].text});
        sub.labels.push_back(corpus.labels[static_cast<std::size_t>(old)]);
    }
    for (auto [u, v] : corpus.edges) {
        auto iu = remap.find(u);
        auto iv = remap.find(v);
        if (iu != remap.end() && iv != remap.end()) sub.edges.emplace_back(iu->second, iv->second);
    }
    sub.class_texts = corpus.class_texts;
    if (corpus.node_features.rows() != 0) {
        sub.node_features.resize(static_cast<Eigen::Index>(nodes.size()), corpus.node_features.cols());
        for (std::size_t i = 0; i < nodes.size(); ++i) sub.node_features.row(static_cast<Eigen::Index>(i)) = corpus.node_features.row(nodes[i]);
    }
    sub.finalize();
    return sub;
}

// ---------------------------------------------------------------------------
// On-disk format: documents.jsonl, edges.tsv, classes.json

struct SerializedCorpus {
    std::string documents;
    std::string edges;
    std::string classes;

    bool operator==(const SerializedCorpus&) const = default;
};

inline SerializedCorpus serialize_corpus(const GraphTextCorpus& corpus) {
    SerializedCorpus out;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        nlohmann::json line = {{"id", corpus.documents[i].id}, {"text", corpus.documents[i].text}};
        if (corpus.labels[i]) line["label"] = *corpus.labels[i];
        out.documents += line.dump() + "\n";
    }
    for (auto [u, v] : corpus.edges) out.edges += std::to_string(u) + "\t" + std::to_string(v) + "\n";
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [c, text] : corpus.class_texts) classes[std::to_string(c)] = text;
    out.classes = classes.dump(2) + "\n";
    return out;
}

inline void save_corpus(const GraphTextCorpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto s = serialize_corpus(corpus);
    auto write = [](const std::filesystem::path& p, const std::string& body) {
        std::ofstream f(p, std::ios::binary);
        if (!f) throw DataError("cannot write " + p.string());
        f << body;
    };
    write(dir / "documents.jsonl", s.documents);
    write(dir / "edges.tsv", s.edges);
    write(dir / "classes.json", s.classes);
}

/// Loads a corpus directory; node features are attached from a seeded random
/// word table of dimension `d_in`.
inline GraphTextCorpus load_corpus(const std::filesystem::path& dir, int d_in, std::uint64_t feature_seed = 0) {
    GraphTextCorpus corpus;
    std::ifstream docs(dir / "documents.jsonl");
    if (!docs) throw DataError("cannot read " + (dir / "documents.jsonl").string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(docs, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            corpus.documents.push_back({j.at("id").get<NodeId>(), j.at("text").get<std::string>()});
            if (j.contains("label") && !j["label"].is_null()) corpus.labels.emplace_back(j["label"].get<ClassId>());
            else corpus.labels.emplace_back(std::nullopt);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("documents.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    std::ifstream edges(dir / "edges.tsv");
    if (!edges) throw DataError("cannot read " + (dir / "edges.tsv").string());
    lineno = 0;
    while (std::getline(edges, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        NodeId u, v;
        if (!(ss >> u >> v)) throw DataError("edges.tsv line " + std::to_string(lineno) + " is malformed");
        corpus.edges.emplace_back(u, v);
    }
    std::ifstream classes(dir / "classes.json");
    if (!classes) throw DataError("cannot read " + (dir / "classes.json").string());
    try {
        const auto j = nlohmann::json::parse(classes);
        for (auto it = j.begin(); it != j.end(); ++it) corpus.class_texts[std::stoi(it.key())] = it.value().get<std::string>();
    } catch (const std::exception& e) {
        throw DataError(std::string("classes.json: ") + e.what());
    }
    corpus.finalize();
    attach_random_features(corpus, d_in, feature_seed);
    return corpus;
}

}  // namespace g2p2
