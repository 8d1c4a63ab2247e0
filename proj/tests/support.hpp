// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit and acceptance tests.

#pragma once

#include "g2p2/g2p2.hpp"

#include <functional>

namespace g2p2::testing {

using MatD = Mat<double>;

/// Central differences of f with respect to every entry of *param.
inline MatD numeric_gradient(MatD* param, const std::function<double()>& f, double h = 1e-6) {
    MatD g(param->rows(), param->cols());
    for (Eigen::Index i = 0; i < param->size(); ++i) {
        const double keep = param->data()[i];
        param->data()[i] = keep + h;
        const double up = f();
        param->data()[i] = keep - h;
        const double down = f();
        param->data()[i] = keep;
        g.data()[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// ||a - b|| / max(||a|| + ||b||, floor).
inline double relative_error(const MatD& a, const MatD& b, double floor = 1e-8) {
    return (a - b).norm() / std::max(a.norm() + b.norm(), floor);
}

/// Encoder small enough for exhaustive finite differences.
inline TextEncoderState<double> micro_text_encoder(int vocab_size, std::uint64_t seed, int embed_dim = 3) {
    TextEncoderConfig c;
    c.vocab_size = vocab_size;
    c.width = 4;
    c.layers = 1;
    c.heads = 2;
    c.embed_dim = embed_dim;
    c.max_length = 8;
    auto st = init_text_encoder<double>(c, seed);
    // Larger embeddings keep the prompt gradients well above round-off.
    st.token_embedding *= 10.0;
    return st;
}

/// Words "a".."e" with class texts "a b" and "c d" / "e".
inline GraphTextCorpus tiny_corpus() {
    GraphTextCorpus c;
    const std::vector<std::string> texts{"a b c", "b a", "c d e", "d c", "e a d"};
    for (std::size_t i = 0; i < texts.size(); ++i) {
        c.documents.push_back({static_cast<NodeId>(i), texts[i]});
        c.labels.emplace_back(static_cast<ClassId>(i < 2 ? 0 : (i < 4 ? 1 : 2)));
    }
    c.edges = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {0, 4}};
    c.class_texts = {{0, "a b"}, {1, "c d"}, {2, "e"}};
    c.finalize();
    attach_random_features(c, 3, 7);
    return c;
}

}  // namespace g2p2::testing
