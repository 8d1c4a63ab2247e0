// SPDX-License-Identifier: Apache-2.0
//
// Dual encoders: a word-level tokenizer, a pre-LN transformer text encoder
// pooled at the EOS position, and a two-layer GCN graph encoder.

#pragma once

#include "g2p2/autograd.hpp"
#include "g2p2/corpus.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace g2p2 {

// ---------------------------------------------------------------------------
// Tokenizer

using TokenSeq = std::vector<TokenId>;

/// Words take ids [0, n) in construction order; PAD, EOS and UNK follow.
class Vocabulary {
public:
    Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

    explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
        for (std::size_t i = 0; i < words_.size(); ++i) {
            if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second)
                throw ParameterError("duplicate vocabulary word '" + words_[i] + "'");
        }
    }

    TokenId pad() const { return static_cast<TokenId>(words_.size()); }
    TokenId eos() const { return pad() + 1; }
    TokenId unk() const { return pad() + 2; }
    int size() const { return static_cast<int>(words_.size()) + 3; }

    TokenId id(const std::string& word) const {
        auto it = index_.find(word);
        return it == index_.end() ? unk() : it->second;
    }

    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Lower-cased whitespace tokens, truncated to max_length - 1, then EOS.
inline TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, int max_length) {
    if (max_length < 2) throw ParameterError("max_length must be at least 2");
    const auto words = split_words(text);
    TokenSeq out;
    const auto keep = std::min(words.size(), static_cast<std::size_t>(max_length - 1));
    out.reserve(keep + 1);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(vocab.id(words[i]));
    out.push_back(vocab.eos());
    return out;
}

// ---------------------------------------------------------------------------
// Parameter binding

/// Maps parameter matrices onto graph leaves for one forward pass. A
/// trainable binder makes gradient-carrying leaves; a frozen one makes
/// constants. Leaves are cached by address, so a parameter used twice
/// accumulates into one gradient.
template <typename Scalar>
class ParamBinder {
public:
    explicit ParamBinder(bool trainable) : trainable_(trainable) {}

    ad::Var<Scalar> operator()(const Mat<Scalar>& p) {
        auto it = vars_.find(&p);
        if (it != vars_.end()) return it->second;
        auto v = trainable_ ? ad::variable<Scalar>(p) : ad::constant<Scalar>(p);
        vars_.emplace(&p, v);
        return v;
    }

    /// Gradient for p, or a zero matrix when p took no part in the graph.
    Mat<Scalar> grad(const Mat<Scalar>& p) const {
        auto it = vars_.find(&p);
        if (it == vars_.end() || it->second.grad().size() == 0) return Mat<Scalar>::Zero(p.rows(), p.cols());
        return it->second.grad();
    }

    bool trainable() const { return trainable_; }

private:
    bool trainable_;
    std::unordered_map<const Mat<Scalar>*, ad::Var<Scalar>> vars_;
};

// ---------------------------------------------------------------------------
// Text encoder

struct TextEncoderConfig {
    int vocab_size = 0;
    int width = 64;
    int layers = 2;
    int heads = 4;
    int embed_dim = 32;
    int max_length = 128;
    bool causal = true;
};

template <typename Scalar>
struct TransformerBlock {
    Mat<Scalar> ln1_gain, ln1_bias;
    Mat<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
    Mat<Scalar> ln2_gain, ln2_bias;
    Mat<Scalar> fc1, fc1_bias, fc2, fc2_bias;
};

template <typename Scalar>
struct TextEncoderState {
    TextEncoderConfig config;
    Mat<Scalar> token_embedding;      // vocab x width
    Mat<Scalar> positional_embedding; // max_length x width
    std::vector<TransformerBlock<Scalar>> blocks;
    Mat<Scalar> ln_final_gain, ln_final_bias;
    Mat<Scalar> projection;           // width x embed_dim
    Mat<Scalar> tau;                  // 1 x 1 log-scale of the similarity logits
};

/// Calls f(name, matrix) for every parameter in a fixed order.
template <typename State, typename F>
    requires requires(State& s) { s.blocks; s.token_embedding; }
void visit_parameters(State& s, F&& f) {
    f(std::string("text.token_embedding"), s.token_embedding);
    f(std::string("text.positional_embedding"), s.positional_embedding);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
        auto& b = s.blocks[i];
        const std::string p = "text.block" + std::to_string(i) + ".";
        f(p + "ln1_gain", b.ln1_gain);
        f(p + "ln1_bias", b.ln1_bias);
        f(p + "wq", b.wq);
        f(p + "bq", b.bq);
        f(p + "wk", b.wk);
        f(p + "bk", b.bk);
        f(p + "wv", b.wv);
        f(p + "bv", b.bv);
        f(p + "wo", b.wo);
        f(p + "bo", b.bo);
        f(p + "ln2_gain", b.ln2_gain);
        f(p + "ln2_bias", b.ln2_bias);
        f(p + "fc1", b.fc1);
        f(p + "fc1_bias", b.fc1_bias);
        f(p + "fc2", b.fc2);
        f(p + "fc2_bias", b.fc2_bias);
    }
    f(std::string("text.ln_final_gain"), s.ln_final_gain);
    f(std::string("text.ln_final_bias"), s.ln_final_bias);
    f(std::string("text.projection"), s.projection);
    f(std::string("text.tau"), s.tau);
}

inline double initial_tau() { return std::log(1.0 / 0.07); }

template <typename Scalar>
TextEncoderState<Scalar> init_text_encoder(const TextEncoderConfig& cfg, std::uint64_t seed) {
    if (cfg.vocab_size < 1) throw ParameterError("vocab_size must be positive");
    if (cfg.width < 1 || cfg.layers < 0 || cfg.heads < 1 || cfg.embed_dim < 1) throw ParameterError("invalid text encoder sizes");
    if (cfg.width % cfg.heads != 0) throw ParameterError("width must be divisible by the head count");
    if (cfg.max_length < 2) throw ParameterError("max_length must be at least 2");
    Rng rng(derive_seed(seed, "text-init"));
    const double w = cfg.width;
    const double attn_std = 1.0 / std::sqrt(w);
    const double proj_std = attn_std / std::sqrt(2.0 * std::max(cfg.layers, 1));
    const double fc_std = 1.0 / std::sqrt(2.0 * w);
    TextEncoderState<Scalar> s;
    s.config = cfg;
    s.token_embedding = random_normal<Scalar>(cfg.vocab_size, cfg.width, 0.02, rng);
    s.positional_embedding = random_normal<Scalar>(cfg.max_length, cfg.width, 0.01, rng);
    for (int l = 0; l < cfg.layers; ++l) {
        TransformerBlock<Scalar> b;
        b.ln1_gain = Mat<Scalar>::Ones(1, cfg.width);
        b.ln1_bias = Mat<Scalar>::Zero(1, cfg.width);
        b.wq = random_normal<Scalar>(cfg.width, cfg.width, attn_std, rng);
        b.wk = random_normal<Scalar>(cfg.width, cfg.width, attn_std, rng);
        b.wv = random_normal<Scalar>(cfg.width, cfg.width, attn_std, rng);
        b.wo = random_normal<Scalar>(cfg.width, cfg.width, proj_std, rng);
        b.bq = b.bk = b.bv = b.bo = Mat<Scalar>::Zero(1, cfg.width);
        b.ln2_gain = Mat<Scalar>::Ones(1, cfg.width);
        b.ln2_bias = Mat<Scalar>::Zero(1, cfg.width);
        b.fc1 = random_normal<Scalar>(cfg.width, 4 * cfg.width, fc_std, rng);
        b.fc1_bias = Mat<Scalar>::Zero(1, 4 * cfg.width);
        b.fc2 = random_normal<Scalar>(4 * cfg.width, cfg.width, proj_std, rng);
        b.fc2_bias = Mat<Scalar>::Zero(1, cfg.width);
        s.blocks.push_back(std::move(b));
    }
    s.ln_final_gain = Mat<Scalar>::Ones(1, cfg.width);
    s.ln_final_bias = Mat<Scalar>::Zero(1, cfg.width);
    s.projection = random_normal<Scalar>(cfg.width, cfg.embed_dim, attn_std, rng);
    s.tau = Mat<Scalar>::Constant(1, 1, static_cast<Scalar>(initial_tau()));
    return s;
}

/// Runs the transformer over already-embedded input rows. Each segment is
/// one sequence; its last row is the pooling (EOS) position. Returns one
/// d-dimensional row per segment, not normalised.
template <typename Scalar>
ad::Var<Scalar> encode_embedded(ParamBinder<Scalar>& bind, const TextEncoderState<Scalar>& st, const ad::Var<Scalar>& embedded,
                                const std::vector<ad::Segment>& segments) {
    const auto& cfg = st.config;
    if (embedded.cols() != cfg.width)
        throw ParameterError("input width " + std::to_string(embedded.cols()) + " differs from encoder width " + std::to_string(cfg.width));
    std::vector<int> positions;
    std::vector<int> pool_rows;
    positions.reserve(static_cast<std::size_t>(embedded.rows()));
    int expected_start = 0;
    for (const auto& s : segments) {
        if (s.length < 1 || s.length > cfg.max_length)
            throw ContractViolation("sequence length " + std::to_string(s.length) + " outside [1, " + std::to_string(cfg.max_length) + "]");
        if (s.start != expected_start) throw ContractViolation("segments must tile the input rows in order");
        for (int t = 0; t < s.length; ++t) positions.push_back(t);
        pool_rows.push_back(s.start + s.length - 1);
        expected_start += s.length;
    }
    if (expected_start != embedded.rows()) throw ContractViolation("segments do not cover the input rows");

    auto x = ad::add(embedded, ad::gather_rows(bind(st.positional_embedding), std::move(positions)));
    for (const auto& b : st.blocks) {
        auto h = ad::layer_norm(x, bind(b.ln1_gain), bind(b.ln1_bias));
        auto q = ad::add_row(ad::matmul(h, bind(b.wq)), bind(b.bq));
        auto k = ad::add_row(ad::matmul(h, bind(b.wk)), bind(b.bk));
        auto v = ad::add_row(ad::matmul(h, bind(b.wv)), bind(b.bv));
        auto a = ad::segment_attention(q, k, v, segments, cfg.heads, cfg.causal);
        x = ad::add(x, ad::add_row(ad::matmul(a, bind(b.wo)), bind(b.bo)));
        auto h2 = ad::layer_norm(x, bind(b.ln2_gain), bind(b.ln2_bias));
        auto m = ad::gelu(ad::add_row(ad::matmul(h2, bind(b.fc1)), bind(b.fc1_bias)));
        x = ad::add(x, ad::add_row(ad::matmul(m, bind(b.fc2)), bind(b.fc2_bias)));
    }
    // Layer norm is row-wise, so pooling first is equivalent and cheaper.
    auto pooled = ad::layer_norm(ad::gather_rows(x, std::move(pool_rows)), bind(st.ln_final_gain), bind(st.ln_final_bias));
    return ad::matmul(pooled, bind(st.projection));
}

/// Token-embedding rows for a batch of sequences plus their segments.
template <typename Scalar>
std::pair<ad::Var<Scalar>, std::vector<ad::Segment>> embed_tokens(ParamBinder<Scalar>& bind, const TextEncoderState<Scalar>& st,
                                                                  const std::vector<TokenSeq>& batch) {
    std::vector<int> ids;
    std::vector<ad::Segment> segments;
    for (const auto& seq : batch) {
        if (seq.empty()) throw ContractViolation("empty token sequence");
        if (static_cast<int>(seq.size()) > st.config.max_length)
            throw ContractViolation("sequence of length " + std::to_string(seq.size()) + " exceeds max_length " +
                                    std::to_string(st.config.max_length));
        segments.push_back({static_cast<int>(ids.size()), static_cast<int>(seq.size())});
        for (TokenId t : seq) {
            if (t < 0 || t >= st.config.vocab_size) throw LookupError("token id " + std::to_string(t) + " outside the vocabulary");
            ids.push_back(t);
        }
    }
    return {ad::gather_rows(bind(st.token_embedding), std::move(ids)), std::move(segments)};
}

template <typename Scalar>
ad::Var<Scalar> encode_text_batch(ParamBinder<Scalar>& bind, const TextEncoderState<Scalar>& st, const std::vector<TokenSeq>& batch) {
    if (batch.empty()) throw ParameterError("empty batch");
    auto [embedded, segments] = embed_tokens(bind, st, batch);
    return encode_embedded(bind, st, embedded, segments);
}

/// Inference-only batch encoding (n x d).
template <typename Scalar>
Mat<Scalar> encode_text_batch(const TextEncoderState<Scalar>& st, const std::vector<TokenSeq>& batch) {
    ParamBinder<Scalar> bind(false);
    return encode_text_batch(bind, st, batch).value();
}

/// Encodes one sequence given directly in input-embedding space (L x width).
template <typename Scalar>
Mat<Scalar> encode_text_sequence_embeddings(const TextEncoderState<Scalar>& st, const Mat<Scalar>& embedded) {
    ParamBinder<Scalar> bind(false);
    const std::vector<ad::Segment> seg{{0, static_cast<int>(embedded.rows())}};
    return encode_embedded(bind, st, ad::constant<Scalar>(embedded), seg).value().row(0);
}

/// Encodes many texts in chunks, inference only.
template <typename Scalar>
Mat<Scalar> encode_texts(const TextEncoderState<Scalar>& st, const Vocabulary& vocab, const std::vector<std::string>& texts,
                         std::size_t chunk = 256) {
    Mat<Scalar> out(static_cast<Eigen::Index>(texts.size()), st.config.embed_dim);
    for (std::size_t at = 0; at < texts.size(); at += chunk) {
        std::vector<TokenSeq> batch;
        for (std::size_t i = at; i < std::min(texts.size(), at + chunk); ++i) batch.push_back(tokenize(vocab, texts[i], st.config.max_length));
        out.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(batch.size())) = encode_text_batch(st, batch);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph encoder

struct GraphEncoderConfig {
    int input_dim = 32;
    int hidden_dim = 64;
    int output_dim = 32;
    double leaky_slope = 0.01;
};

template <typename Scalar>
struct GraphEncoderState {
    GraphEncoderConfig config;
    Mat<Scalar> w1;  // input_dim x hidden_dim
    Mat<Scalar> w2;  // hidden_dim x output_dim
};

template <typename State, typename F>
    requires requires(State& s) { s.w1; s.w2; }
void visit_parameters(State& s, F&& f) {
    f(std::string("graph.w1"), s.w1);
    f(std::string("graph.w2"), s.w2);
}

template <typename Scalar>
GraphEncoderState<Scalar> init_graph_encoder(const GraphEncoderConfig& cfg, std::uint64_t seed) {
    if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.output_dim < 1) throw ParameterError("invalid graph encoder sizes");
    Rng rng(derive_seed(seed, "graph-init"));
    GraphEncoderState<Scalar> s;
    s.config = cfg;
    s.w1 = random_uniform<Scalar>(cfg.input_dim, cfg.hidden_dim, std::sqrt(6.0 / (cfg.input_dim + cfg.hidden_dim)), rng);
    s.w2 = random_uniform<Scalar>(cfg.hidden_dim, cfg.output_dim, std::sqrt(6.0 / (cfg.hidden_dim + cfg.output_dim)), rng);
    return s;
}

/// Rows `rows` and columns `cols` of D^-1/2 (A + I) D^-1/2, where degrees
/// include the self-loop. Every neighbour of a row node must appear in cols.
template <typename Scalar>
std::shared_ptr<const ad::SparseMat<Scalar>> normalized_adjacency_block(const GraphTextCorpus& corpus, const std::vector<NodeId>& rows,
                                                                       const std::vector<NodeId>& cols) {
    std::unordered_map<NodeId, int> col_index;
    for (std::size_t j = 0; j < cols.size(); ++j) col_index.emplace(cols[j], static_cast<int>(j));
    std::vector<Eigen::Triplet<Scalar>> trips;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const NodeId u = rows[i];
        const double du = static_cast<double>(corpus.degree(u)) + 1.0;
        trips.emplace_back(static_cast<int>(i), col_index.at(u), static_cast<Scalar>(1.0 / du));
        for (NodeId v : corpus.neighbors(u)) {
            const double dv = static_cast<double>(corpus.degree(v)) + 1.0;
            trips.emplace_back(static_cast<int>(i), col_index.at(v), static_cast<Scalar>(1.0 / std::sqrt(du * dv)));
        }
    }
    auto m = std::make_shared<ad::SparseMat<Scalar>>(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    m->setFromTriplets(trips.begin(), trips.end());
    return m;
}

namespace detail {
inline std::vector<NodeId> with_neighbors(const GraphTextCorpus& corpus, const std::vector<NodeId>& nodes) {
    std::vector<NodeId> out = nodes;
    std::unordered_map<NodeId, bool> seen;
    for (NodeId v : nodes) seen.emplace(v, true);
    for (NodeId v : nodes)
        for (NodeId u : corpus.neighbors(v))
            if (seen.emplace(u, true).second) out.push_back(u);
    return out;
}
}  // namespace detail

/// Graph embeddings z for `targets` only, computed on their two-hop
/// receptive field: LeakyReLU(Â LeakyReLU(Â X W1) W2).
template <typename Scalar>
ad::Var<Scalar> gcn_forward_nodes(ParamBinder<Scalar>& bind, const GraphEncoderState<Scalar>& st, const GraphTextCorpus& corpus,
                                  const Mat<Scalar>& features, const std::vector<NodeId>& targets) {
    if (features.rows() != static_cast<Eigen::Index>(corpus.size()))
        throw ParameterError("feature rows " + std::to_string(features.rows()) + " differ from node count " + std::to_string(corpus.size()));
    if (features.cols() != st.config.input_dim) throw ParameterError("feature width differs from graph encoder input_dim");
    const auto hop1 = detail::with_neighbors(corpus, targets);
    const auto hop2 = detail::with_neighbors(corpus, hop1);
    Mat<Scalar> x(static_cast<Eigen::Index>(hop2.size()), features.cols());
    for (std::size_t i = 0; i < hop2.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = features.row(hop2[i]);
    const auto slope = static_cast<Scalar>(st.config.leaky_slope);
    auto h = ad::leaky_relu(ad::spmm(normalized_adjacency_block<Scalar>(corpus, hop1, hop2), ad::matmul(ad::constant<Scalar>(std::move(x)), bind(st.w1))), slope);
    return ad::leaky_relu(ad::spmm(normalized_adjacency_block<Scalar>(corpus, targets, hop1), ad::matmul(h, bind(st.w2))), slope);
}

template <typename Scalar>
ad::Var<Scalar> gcn_forward(ParamBinder<Scalar>& bind, const GraphEncoderState<Scalar>& st, const GraphTextCorpus& corpus,
                            const Mat<Scalar>& features) {
    if (features.rows() != static_cast<Eigen::Index>(corpus.size()))
        throw ParameterError("feature rows " + std::to_string(features.rows()) + " differ from node count " + std::to_string(corpus.size()));
    if (features.cols() != st.config.input_dim) throw ParameterError("feature width differs from graph encoder input_dim");
    std::vector<NodeId> all(corpus.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<NodeId>(i);
    const auto a_hat = normalized_adjacency_block<Scalar>(corpus, all, all);
    const auto slope = static_cast<Scalar>(st.config.leaky_slope);
    auto h = ad::leaky_relu(ad::spmm(a_hat, ad::matmul(ad::constant<Scalar>(features), bind(st.w1))), slope);
    return ad::leaky_relu(ad::spmm(a_hat, ad::matmul(h, bind(st.w2))), slope);
}

/// Whole-graph embeddings (|D| x d), inference only.
template <typename Scalar>
Mat<Scalar> gcn_forward(const GraphEncoderState<Scalar>& st, const GraphTextCorpus& corpus, const Mat<Scalar>& features) {
    ParamBinder<Scalar> bind(false);
    return gcn_forward(bind, st, corpus, features).value();
}

/// Builds a throwaway corpus view over a bare edge list so gcn_forward can
/// be driven without documents.
inline GraphTextCorpus graph_only(std::size_t n_nodes, const std::vector<std::pair<NodeId, NodeId>>& edges) {
    GraphTextCorpus g;
    for (std::size_t i = 0; i < n_nodes; ++i) g.documents.push_back({static_cast<NodeId>(i), "node"});
    g.edges = edges;
    g.finalize();
    return g;
}

// ---------------------------------------------------------------------------

/// Unit-norm rows; all-zero rows stay zero.
template <typename Scalar>
Mat<Scalar> row_l2_normalize(const Mat<Scalar>& m) {
    Mat<Scalar> out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const Scalar n = out.row(i).norm();
        if (n > Scalar(0)) out.row(i) /= n;
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> features_as(const Mat<double>& f) {
    return f.cast<Scalar>();
}

}  // namespace g2p2
