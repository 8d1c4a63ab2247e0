// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <catch_amalgamated.hpp>

using namespace g2p2;
using namespace g2p2::testing;

TEST_CASE("vocabulary reserves PAD, EOS and UNK after the words") {
    Vocabulary v({"alpha", "beta"});
    CHECK(v.size() == 5);
    CHECK(v.id("beta") == 1);
    CHECK(v.pad() == 2);
    CHECK(v.eos() == 3);
    CHECK(v.unk() == 4);
    CHECK(v.id("gamma") == v.unk());
    CHECK_THROWS(Vocabulary({"a", "a"}));
}

TEST_CASE("tokenize lowercases, truncates and appends EOS") {
    Vocabulary v({"a", "b", "c"});
    CHECK(tokenize(v, "A b zz", 8) == TokenSeq{0, 1, v.unk(), v.eos()});
    CHECK(tokenize(v, "a b c a b", 4) == TokenSeq{0, 1, 2, v.eos()});
    CHECK(tokenize(v, "", 4) == TokenSeq{v.eos()});
    CHECK_THROWS(tokenize(v, "a", 0));
}

TEST_CASE("text encoder is deterministic and batch independent") {
    Vocabulary v({"a", "b", "c", "d"});
    TextEncoderConfig cfg;
    cfg.vocab_size = v.size();
    cfg.width = 16;
    cfg.heads = 4;
    cfg.embed_dim = 8;
    cfg.max_length = 16;
    const auto st = init_text_encoder<double>(cfg, 3);
    const auto again = init_text_encoder<double>(cfg, 3);
    CHECK(hash_matrix(st.token_embedding) == hash_matrix(again.token_embedding));
    const std::vector<TokenSeq> batch{tokenize(v, "a b c", 16), tokenize(v, "d", 16), tokenize(v, "c c a d b", 16)};
    const auto joint = encode_text_batch(st, batch);
    CHECK(joint.rows() == 3);
    CHECK(joint.cols() == 8);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto alone = encode_text_batch(st, std::vector<TokenSeq>{batch[i]});
        CHECK((alone.row(0) - joint.row(static_cast<Eigen::Index>(i))).norm() < 1e-12);
    }
    CHECK((joint.row(0) - joint.row(2)).norm() > 1e-6);
    const auto texts = encode_texts(st, v, {"a b c", "d", "c c a d b"}, 2);
    CHECK((texts - joint).norm() < 1e-12);
}

TEST_CASE("encoding pre-embedded rows equals token encoding") {
    Vocabulary v({"a", "b"});
    auto st = micro_text_encoder(v.size(), 4);
    const auto seq = tokenize(v, "b a b", 8);
    Mat<double> emb(static_cast<Eigen::Index>(seq.size()), 4);
    for (std::size_t i = 0; i < seq.size(); ++i) emb.row(static_cast<Eigen::Index>(i)) = st.token_embedding.row(seq[i]);
    const Mat<double> direct = encode_text_batch(st, std::vector<TokenSeq>{seq});
    const Mat<double> via = encode_text_sequence_embeddings(st, emb);
    CHECK((direct - via).norm() < 1e-12);
}

TEST_CASE("text encoder rejects sequences beyond max_length") {
    Vocabulary v({"a"});
    auto st = micro_text_encoder(v.size(), 1);
    CHECK_THROWS_AS(encode_text_batch(st, std::vector<TokenSeq>{TokenSeq(9, 0)}), ContractViolation);
    CHECK_THROWS_AS(encode_text_batch(st, std::vector<TokenSeq>{TokenSeq{}}), ContractViolation);
    CHECK_THROWS_AS(encode_text_batch(st, std::vector<TokenSeq>{TokenSeq{99}}), LookupError);
}

TEST_CASE("text encoder parameter gradients match finite differences") {
    Vocabulary v({"a", "b", "c"});
    auto st = micro_text_encoder(v.size(), 5);
    const std::vector<TokenSeq> batch{tokenize(v, "a b", 8), tokenize(v, "c a b c", 8), tokenize(v, "b", 8)};
    Rng rng(6);
    const Mat<double> r = random_normal<double>(3, 3, 1.0, rng);
    auto loss_of = [&](ParamBinder<double>& bind) {
        auto out = encode_text_batch(bind, st, batch);
        auto dots = ad::grouped_row_dots(out, ad::constant<double>(r), 1);
        return ad::matmul(ad::constant<double>(MatD::Ones(1, 3)), dots);
    };
    ParamBinder<double> bind(true);
    auto loss = loss_of(bind);
    ad::backward(loss);
    visit_parameters(st, [&](const std::string& name, Mat<double>& p) {
        if (name == "text.tau") return;
        const MatD analytic = bind.grad(p);
        const MatD numeric = numeric_gradient(&p, [&] {
            ParamBinder<double> frozen(false);
            return loss_of(frozen).item();
        });
        INFO(name);
        if (name.ends_with(".bk")) {
            // A key bias shifts every score of a query equally; softmax ignores it.
            CHECK(analytic.cwiseAbs().maxCoeff() < 1e-10);
            CHECK(numeric.cwiseAbs().maxCoeff() < 1e-6);
        } else {
            CHECK(relative_error(analytic, numeric) < 1e-6);
        }
    });
}

namespace {

/// Dense D^-1/2 (A + I) D^-1/2 built straight from the edge list.
MatD dense_a_hat(std::size_t n, const std::vector<std::pair<NodeId, NodeId>>& edges) {
    MatD a = MatD::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (auto [u, v] : edges) a(u, v) = a(v, u) = 1.0;
    const Eigen::VectorXd d = a.rowwise().sum();
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) /= std::sqrt(d(i) * d(j));
    return a;
}

MatD leaky(const MatD& x, double s) {
    return x.unaryExpr([s](double v) { return v > 0 ? v : s * v; });
}

}  // namespace

TEST_CASE("normalised adjacency of a 3-node path") {
    const auto g = graph_only(3, {{0, 1}, {1, 2}});
    const auto a = normalized_adjacency_block<double>(g, {0, 1, 2}, {0, 1, 2});
    const MatD dense = MatD(*a);
    // Degrees with self-loops are 2, 3, 2.
    CHECK(std::abs(dense(0, 0) - 0.5) < 1e-15);
    CHECK(std::abs(dense(1, 1) - 1.0 / 3.0) < 1e-15);
    CHECK(std::abs(dense(0, 1) - 1.0 / std::sqrt(6.0)) < 1e-15);
    CHECK(dense(0, 2) == 0.0);
    CHECK((dense - dense.transpose()).norm() == 0.0);
}

TEST_CASE("isolated node keeps only its self-loop") {
    const auto g = graph_only(3, {{0, 1}});
    const MatD dense = MatD(*normalized_adjacency_block<double>(g, {0, 1, 2}, {0, 1, 2}));
    CHECK(dense(2, 2) == 1.0);
    CHECK(dense.row(2).sum() == 1.0);
}

TEST_CASE("GCN forward matches a dense oracle") {
    const std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}, {1, 2}, {2, 3}, {0, 3}, {3, 4}};
    const auto g = graph_only(6, edges);
    GraphEncoderConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dim = 4;
    cfg.output_dim = 2;
    const auto st = init_graph_encoder<double>(cfg, 8);
    Rng rng(9);
    const MatD x = random_normal<double>(6, 3, 1.0, rng);
    const MatD a = dense_a_hat(6, edges);
    const MatD oracle = leaky(a * leaky(a * x * st.w1, 0.01) * st.w2, 0.01);
    const MatD z = gcn_forward(st, g, x);
    CHECK((z - oracle).norm() < 1e-12);

    ParamBinder<double> bind(false);
    const MatD some = gcn_forward_nodes(bind, st, g, x, {4, 1, 5}).value();
    CHECK((some.row(0) - oracle.row(4)).norm() < 1e-12);
    CHECK((some.row(1) - oracle.row(1)).norm() < 1e-12);
    CHECK((some.row(2) - oracle.row(5)).norm() < 1e-12);
    CHECK_THROWS_AS(gcn_forward(st, g, MatD(random_normal<double>(6, 4, 1.0, rng))), ParameterError);
}

TEST_CASE("GCN gradients match finite differences") {
    const auto g = graph_only(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {1, 4}});
    GraphEncoderConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dim = 4;
    cfg.output_dim = 3;
    auto st = init_graph_encoder<double>(cfg, 10);
    Rng rng(11);
    const MatD x = random_normal<double>(5, 3, 1.0, rng);
    const MatD r = random_normal<double>(2, 3, 1.0, rng);
    auto loss_of = [&](ParamBinder<double>& bind) {
        auto z = gcn_forward_nodes(bind, st, g, x, {2, 0});
        return ad::matmul(ad::constant<double>(MatD::Ones(1, 2)), ad::grouped_row_dots(z, ad::constant<double>(r), 1));
    };
    ParamBinder<double> bind(true);
    ad::backward(loss_of(bind));
    for (auto* p : {&st.w1, &st.w2}) {
        const MatD analytic = bind.grad(*p);
        const MatD numeric = numeric_gradient(p, [&] {
            ParamBinder<double> frozen(false);
            return loss_of(frozen).item();
        });
        CHECK(relative_error(analytic, numeric) < 1e-7);
    }
}

TEST_CASE("row_l2_normalize maps zero rows to zero") {
    MatD m(2, 2);
    m << 3, 4, 0, 0;
    const MatD n = row_l2_normalize(m);
    CHECK(n(0, 0) == 0.6);
    CHECK(n(0, 1) == 0.8);
    CHECK(n.row(1).isZero(0));
}
