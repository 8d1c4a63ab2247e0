// SPDX-License-Identifier: Apache-2.0
//
// Graph-grounded contrastive pre-training. Three batch similarity matrices
// (node-text, text-summary, node-summary) each feed a symmetric N-pair
// cross-entropy; the objective is L1 + lambda * (L2 + L3).

#pragma once

#include "g2p2/encoders.hpp"
#include "g2p2/optim.hpp"

#include <cstdio>
#include <string>
#include <unordered_map>
#include <vector>

namespace g2p2 {

/// cos(a_i, b_j) * exp(tau); zero rows have cosine 0.
template <typename Scalar>
ad::Var<Scalar> similarity_matrix(const ad::Var<Scalar>& a, const ad::Var<Scalar>& b, const ad::Var<Scalar>& tau) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ParameterError("similarity_matrix: shape mismatch");
    return ad::mul_scalar(ad::matmul_nt(ad::row_normalize(a), ad::row_normalize(b)), ad::exp(tau));
}

template <typename Scalar>
Mat<Scalar> similarity_matrix(const Mat<Scalar>& a, const Mat<Scalar>& b, Scalar tau) {
    return similarity_matrix(ad::constant(a), ad::constant(b), ad::constant<Scalar>(Mat<Scalar>::Constant(1, 1, tau))).value();
}

/// 1/2 (CE(L, y) + CE(L^T, y)) with y_i = i and mean reduction.
template <typename Scalar>
ad::Var<Scalar> npair_contrastive_loss(const ad::Var<Scalar>& logits) {
    if (logits.rows() != logits.cols() || logits.rows() < 1) throw ParameterError("npair_contrastive_loss: matrix must be square and nonempty");
    std::vector<int> y(static_cast<std::size_t>(logits.rows()));
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i);
    auto rows = ad::softmax_cross_entropy(logits, y);
    auto cols = ad::softmax_cross_entropy(ad::transpose(logits), y);
    return ad::scale(ad::add(rows, cols), Scalar(0.5));
}

template <typename Scalar>
Scalar npair_contrastive_loss(const Mat<Scalar>& logits) {
    return npair_contrastive_loss(ad::constant(logits)).item();
}

template <typename Scalar>
struct PretrainLoss {
    ad::Var<Scalar> total;
    Scalar l1 = 0, l2 = 0, l3 = 0;
};

/// Rows of t, z, s belong to the same batch nodes in the same order.
/// `l1_weight` exists for ablations; the standard objective uses 1.
template <typename Scalar>
PretrainLoss<Scalar> pretrain_total_loss(const ad::Var<Scalar>& t, const ad::Var<Scalar>& z, const ad::Var<Scalar>& s,
                                         const ad::Var<Scalar>& tau, double lambda, double l1_weight = 1.0) {
    if (t.rows() != z.rows() || t.rows() != s.rows()) throw ParameterError("pretrain_total_loss: T, Z, S row counts differ");
    if (lambda < 0.0) throw ParameterError("lambda must be nonnegative");
    auto l1 = npair_contrastive_loss(similarity_matrix(z, t, tau));
    auto l2 = npair_contrastive_loss(similarity_matrix(t, s, tau));
    auto l3 = npair_contrastive_loss(similarity_matrix(z, s, tau));
    PretrainLoss<Scalar> out;
    out.l1 = l1.item();
    out.l2 = l2.item();
    out.l3 = l3.item();
    out.total = ad::add(ad::scale(l1, static_cast<Scalar>(l1_weight)), ad::scale(ad::add(l2, l3), static_cast<Scalar>(lambda)));
    return out;
}

/// Per-node neighbour sample used for summaries.
inline std::vector<NodeId> summary_neighbors(const GraphTextCorpus& corpus, NodeId node, int eta, std::uint64_t seed) {
    return sample_neighbors(corpus, node, eta, derive_seed(seed, "summary", node));
}

/// Row i is the mean text embedding of up to eta sampled neighbours of
/// batch_nodes[i]; isolated nodes fall back to their own text embedding.
/// `text_all` holds one row per node id.
template <typename Scalar>
Mat<Scalar> summary_embeddings(const Mat<Scalar>& text_all, const GraphTextCorpus& corpus, const std::vector<NodeId>& batch_nodes, int eta,
                               std::uint64_t seed) {
    Mat<Scalar> out(static_cast<Eigen::Index>(batch_nodes.size()), text_all.cols());
    for (std::size_t i = 0; i < batch_nodes.size(); ++i) {
        const auto nb = summary_neighbors(corpus, batch_nodes[i], eta, seed);
        if (nb.empty()) {
            out.row(static_cast<Eigen::Index>(i)) = text_all.row(batch_nodes[i]);
            continue;
        }
        out.row(static_cast<Eigen::Index>(i)).setZero();
        for (NodeId j : nb) {
            if (j < 0 || j >= text_all.rows()) throw LookupError("no text embedding for node " + std::to_string(j));
            out.row(static_cast<Eigen::Index>(i)) += text_all.row(j);
        }
        out.row(static_cast<Eigen::Index>(i)) /= static_cast<Scalar>(nb.size());
    }
    return out;
}

struct PretrainConfig {
    double lambda = 0.1;
    int eta = 3;
    int batch_size = 64;
    int epochs = 2;
    double learning_rate = 2e-5;
    std::uint64_t seed = 0;
    double l1_weight = 1.0;
    double max_exp_tau = 100.0;
    /// Resample summary neighbours every epoch; false fixes one sample per node.
    bool resample_neighbors = true;
};

struct LossRecord {
    int epoch = 0;
    int batch = 0;
    double l1 = 0, l2 = 0, l3 = 0, total = 0, exp_tau = 0;
};

template <typename Scalar>
struct PretrainResult {
    TextEncoderState<Scalar> text;
    GraphEncoderState<Scalar> graph;
    std::vector<LossRecord> history;
};

/// Batches of the shuffled node order; a trailing batch with fewer than two
/// rows is dropped.
inline std::vector<std::vector<NodeId>> make_batches(std::size_t n_nodes, int batch_size, std::uint64_t seed) {
    if (batch_size < 2) throw ParameterError("batch_size must be at least 2");
    std::vector<NodeId> order(n_nodes);
    for (std::size_t i = 0; i < n_nodes; ++i) order[i] = static_cast<NodeId>(i);
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<std::vector<NodeId>> batches;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
        if (end - at < 2) break;
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

/// One optimisation step on one batch. Returns the loss record (epoch and
/// batch fields are left for the caller).
template <typename Scalar>
LossRecord pretrain_step(TextEncoderState<Scalar>& text, GraphEncoderState<Scalar>& graph, Adam<Scalar>& optimizer,
                         const GraphTextCorpus& corpus, const Mat<Scalar>& features, const std::vector<TokenSeq>& tokens,
                         const std::vector<NodeId>& batch, const PretrainConfig& cfg, std::uint64_t neighbor_seed) {
    // Batch nodes first, then any sampled neighbours not already present.
    std::vector<NodeId> encoded = batch;
    std::unordered_map<NodeId, int> local;
    for (std::size_t i = 0; i < batch.size(); ++i) local.emplace(batch[i], static_cast<int>(i));
    std::vector<std::vector<int>> groups(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (NodeId j : summary_neighbors(corpus, batch[i], cfg.eta, neighbor_seed)) {
            auto [it, inserted] = local.emplace(j, static_cast<int>(encoded.size()));
            if (inserted) encoded.push_back(j);
            groups[i].push_back(it->second);
        }
        if (groups[i].empty()) groups[i].push_back(static_cast<int>(i));
    }
    std::vector<TokenSeq> seqs;
    seqs.reserve(encoded.size());
    for (NodeId v : encoded) seqs.push_back(tokens[static_cast<std::size_t>(v)]);

    ParamBinder<Scalar> tbind(true);
    ParamBinder<Scalar> gbind(true);
    auto t_all = encode_text_batch(tbind, text, seqs);
    std::vector<int> head(batch.size());
    for (std::size_t i = 0; i < head.size(); ++i) head[i] = static_cast<int>(i);
    auto t = ad::gather_rows(t_all, head);
    auto s = ad::segment_mean(t_all, std::move(groups));
    auto z = gcn_forward_nodes(gbind, graph, corpus, features, batch);
    auto tau = tbind(text.tau);
    auto loss = pretrain_total_loss(t, z, s, tau, cfg.lambda, cfg.l1_weight);

    LossRecord rec;
    rec.l1 = loss.l1;
    rec.l2 = loss.l2;
    rec.l3 = loss.l3;
    rec.total = loss.total.item();
    rec.exp_tau = std::exp(static_cast<double>(text.tau(0, 0)));
    if (!std::isfinite(rec.total)) return rec;

    ad::backward(loss.total);
    std::vector<Mat<Scalar>*> params;
    std::vector<Mat<Scalar>> grads;
    visit_parameters(text, [&](const std::string&, Mat<Scalar>& p) {
        params.push_back(&p);
        grads.push_back(tbind.grad(p));
    });
    visit_parameters(graph, [&](const std::string&, Mat<Scalar>& p) {
        params.push_back(&p);
        grads.push_back(gbind.grad(p));
    });
    optimizer.step(params, grads);
    const auto tau_cap = static_cast<Scalar>(std::log(cfg.max_exp_tau));
    if (text.tau(0, 0) > tau_cap) text.tau(0, 0) = tau_cap;
    return rec;
}

/// Shuffle, batch, embed (t, z, s), score the three similarity matrices and
/// take one Adam step per batch, for `epochs` passes.
template <typename Scalar>
PretrainResult<Scalar> pretrain(const GraphTextCorpus& corpus, const Vocabulary& vocab, TextEncoderState<Scalar> text,
                                GraphEncoderState<Scalar> graph, const PretrainConfig& cfg) {
    if (corpus.size() == 0) throw ParameterError("cannot pre-train on an empty corpus");
    if (cfg.eta < 0) throw ParameterError("eta must be nonnegative");
    if (cfg.batch_size < 2) throw ParameterError("batch_size must be at least 2");
    if (cfg.epochs < 0) throw ParameterError("epochs must be nonnegative");
    if (graph.config.output_dim != text.config.embed_dim) throw ParameterError("graph and text embedding dimensions differ");

    PretrainResult<Scalar> result{std::move(text), std::move(graph), {}};
    if (cfg.epochs == 0) return result;

    const Mat<Scalar> features = features_as<Scalar>(corpus.node_features);
    std::vector<TokenSeq> tokens;
    tokens.reserve(corpus.size());
    for (const auto& d : corpus.documents) tokens.push_back(tokenize(vocab, d.text, result.text.config.max_length));

    Adam<Scalar> optimizer(cfg.learning_rate);
    int global_batch = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = make_batches(corpus.size(), cfg.batch_size, derive_seed(cfg.seed, "batching", epoch));
        const auto nb_seed = derive_seed(cfg.seed, "neighbors", cfg.resample_neighbors ? epoch : 0);
        for (std::size_t b = 0; b < batches.size(); ++b, ++global_batch) {
            auto rec = pretrain_step(result.text, result.graph, optimizer, corpus, features, tokens, batches[b], cfg, nb_seed);
            rec.epoch = epoch;
            rec.batch = static_cast<int>(b);
            if (!std::isfinite(rec.total))
                throw NumericalError("non-finite pre-training loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                     " (global batch " + std::to_string(global_batch) + ")");
            result.history.push_back(rec);
        }
    }
    return result;
}

inline std::string loss_history_csv(const std::vector<LossRecord>& history) {
    std::string out = "epoch,batch,L1,L2,L3,total,exp_tau\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.batch, r.l1, r.l2, r.l3, r.total, r.exp_tau);
        out += buf;
    }
    return out;
}

}  // namespace g2p2
