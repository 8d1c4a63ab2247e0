// SPDX-License-Identifier: Apache-2.0
//
// Node-conditioned prompts: a small two-layer network maps a node
// embedding to an offset added to every prompt token.

#pragma once

#include "g2p2/prompting.hpp"

namespace g2p2 {

template <typename Scalar>
struct MetaNetState {
    Mat<Scalar> w_in;   // d x hidden
    Mat<Scalar> b_in;   // 1 x hidden
    Mat<Scalar> w_out;  // hidden x width
    Mat<Scalar> b_out;  // 1 x width

    bool is_zero() const { return w_in.isZero(0) && b_in.isZero(0) && w_out.isZero(0) && b_out.isZero(0); }
};

template <typename State, typename F>
    requires requires(State& s) { s.w_in; s.b_out; }
void visit_parameters(State& s, F&& f) {
    f("meta.w_in", s.w_in);
    f("meta.b_in", s.b_in);
    f("meta.w_out", s.w_out);
    f("meta.b_out", s.b_out);
}

inline std::size_t meta_net_parameter_count(int embed_dim, int hidden, int width) {
    const auto d = static_cast<std::size_t>(embed_dim), h = static_cast<std::size_t>(hidden), w = static_cast<std::size_t>(width);
    return d * h + h + h * w + w;
}

inline std::size_t prompt_parameter_count(int prompt_length, int width) {
    return static_cast<std::size_t>(prompt_length) * static_cast<std::size_t>(width);
}

/// Fan-in scaled normal input layer; zero output layer, so tuning starts
/// from the unconditioned prompt.
template <typename Scalar>
MetaNetState<Scalar> init_meta_net(int embed_dim, int hidden, int width, std::uint64_t seed) {
    if (embed_dim < 1 || hidden < 1 || width < 1) throw ParameterError("meta-net dimensions must be positive");
    Rng rng(derive_seed(seed, "meta-net"));
    MetaNetState<Scalar> m;
    m.w_in = random_normal<Scalar>(embed_dim, hidden, 1.0 / std::sqrt(static_cast<double>(embed_dim)), rng);
    m.b_in = Mat<Scalar>::Zero(1, hidden);
    m.w_out = Mat<Scalar>::Zero(hidden, width);
    m.b_out = Mat<Scalar>::Zero(1, width);
    return m;
}

template <typename Scalar>
MetaNetState<Scalar> zero_meta_net(int embed_dim, int hidden, int width) {
    return {Mat<Scalar>::Zero(embed_dim, hidden), Mat<Scalar>::Zero(1, hidden), Mat<Scalar>::Zero(hidden, width), Mat<Scalar>::Zero(1, width)};
}

/// pi = W_out^T ReLU(W_in^T z + b_in) + b_out for every row of z (unnormalised).
template <typename Scalar>
ad::Var<Scalar> meta_net_forward(ParamBinder<Scalar>& bind, const MetaNetState<Scalar>& m, const ad::Var<Scalar>& z) {
    if (z.cols() != m.w_in.rows()) throw ParameterError("meta-net input width differs from the node embedding width");
    auto h = ad::relu(ad::add_row(ad::matmul(z, bind(m.w_in)), bind(m.b_in)));
    return ad::add_row(ad::matmul(h, bind(m.w_out)), bind(m.b_out));
}

template <typename Scalar>
Mat<Scalar> meta_net_forward(const MetaNetState<Scalar>& m, const Mat<Scalar>& z) {
    ParamBinder<Scalar> bind(false);
    return meta_net_forward(bind, m, ad::constant<Scalar>(z)).value();
}

/// Prompt rows h_m + pi(z) for one node.
template <typename Scalar>
Mat<Scalar> conditional_prompt_tokens(const PromptState<Scalar>& prompt, const MetaNetState<Scalar>& m, const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& z) {
    const Mat<Scalar> zr = z;
    const Mat<Scalar> pi = meta_net_forward(m, zr);
    Mat<Scalar> out = prompt.tokens;
    out.rowwise() += pi.row(0);
    return out;
}

/// Class weights for one node under its conditioned prompt.
template <typename Scalar>
Mat<Scalar> conditional_class_weights(const TextEncoderState<Scalar>& text, const PromptState<Scalar>& prompt, const MetaNetState<Scalar>& m,
                                      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& z, const std::vector<ClassId>& class_ids) {
    return prompt_class_weights(text, ad::constant<Scalar>(conditional_prompt_tokens(prompt, m, z)), prompt, class_ids).value();
}

template <typename Scalar>
Eigen::Matrix<Scalar, 1, Eigen::Dynamic> classify_conditional(const TextEncoderState<Scalar>& text, const PromptState<Scalar>& prompt,
                                                              const MetaNetState<Scalar>& m, const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& z,
                                                              const std::vector<ClassId>& class_ids) {
    return classify(z, conditional_class_weights(text, prompt, m, z, class_ids));
}

/// Probabilities for every row of zs; each row re-encodes its own N class sequences.
template <typename Scalar>
Mat<Scalar> classify_conditional_rows(const TextEncoderState<Scalar>& text, const PromptState<Scalar>& prompt, const MetaNetState<Scalar>& m,
                                      const Mat<Scalar>& zs, const std::vector<ClassId>& class_ids) {
    Mat<Scalar> out(zs.rows(), static_cast<Eigen::Index>(class_ids.size()));
    for (Eigen::Index i = 0; i < zs.rows(); ++i) {
        const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> z = zs.row(i);
        out.row(i) = classify_conditional(text, prompt, m, z, class_ids);
    }
    return out;
}

/// Support loss for conditioned prompts. The B x N class sequences are
/// encoded in one pass and each node is scored against its own N weights.
template <typename Scalar>
ad::Var<Scalar> conditional_prompt_loss(const TextEncoderState<Scalar>& text, ParamBinder<Scalar>& meta_bind, const ad::Var<Scalar>& prompt_rows,
                                        const PromptState<Scalar>& prompt, const MetaNetState<Scalar>& m, const std::vector<ClassId>& class_ids,
                                        const LabeledSet<Scalar>& data) {
    auto pi = meta_net_forward(meta_bind, m, ad::constant<Scalar>(data.z));
    std::vector<ad::Var<Scalar>> parts;
    std::vector<ad::Segment> segments;
    int at = 0;
    for (Eigen::Index b = 0; b < data.z.rows(); ++b) {
        auto rows = ad::add_row(prompt_rows, ad::gather_rows(pi, {static_cast<int>(b)}));
        auto [inputs, segs] = detail::prompt_inputs(rows, prompt, class_ids, text.config.max_length);
        parts.push_back(inputs);
        for (auto s : segs) segments.push_back({s.start + at, s.length});
        at += static_cast<int>(inputs.rows());
    }
    ParamBinder<Scalar> frozen(false);
    auto w = ad::row_normalize(encode_embedded(frozen, text, ad::vstack(parts), segments));
    auto logits = ad::grouped_row_dots(w, ad::constant<Scalar>(row_l2_normalize(data.z)), static_cast<Eigen::Index>(class_ids.size()));
    return ad::softmax_cross_entropy(logits, data.targets);
}

template <typename Scalar>
struct ConditionalTuneResult {
    PromptState<Scalar> prompt;
    MetaNetState<Scalar> meta;
    TuneTrace trace;
};

/// Joint Adam on the prompt tokens and the meta-net, with the same
/// validation-based selection as tune_prompt. With train_meta = false and a
/// zero meta-net every conditioned prompt equals the static one, so the
/// static tuner is run directly.
template <typename Scalar>
ConditionalTuneResult<Scalar> tune_conditional(const TextEncoderState<Scalar>& text, PromptState<Scalar> prompt, MetaNetState<Scalar> meta,
                                               const std::vector<ClassId>& class_ids, const LabeledSet<Scalar>& support,
                                               const LabeledSet<Scalar>& validation, const TuneOptions& opt, bool train_meta = true) {
    if (!train_meta && meta.is_zero()) {
        auto r = tune_prompt(text, std::move(prompt), class_ids, support, validation, opt);
        return {std::move(r.prompt), std::move(meta), std::move(r.trace)};
    }
    if (opt.steps < 0) throw ParameterError("steps must be nonnegative");
    ConditionalTuneResult<Scalar> result{prompt, meta, {}};
    if (opt.steps == 0) return result;
    if (support.size() == 0) throw ContractViolation("prompt tuning needs a nonempty support set");

    Adam<Scalar> adam(opt.learning_rate);
    detail::BestTracker best;
    auto consider = [&](int step) {
        if (validation.size() > 0) {
            const auto probs = classify_conditional_rows(text, prompt, meta, validation.z, class_ids);
            if (!best.offer(accuracy_of(probs, validation.targets), mean_nll(probs, validation.targets), step)) return;
        } else {
            best.step = step;
        }
        result.prompt.tokens = prompt.tokens;
        result.meta = meta;
    };
    for (int step = 0; step < opt.steps; ++step) {
        consider(step);
        ParamBinder<Scalar> mbind(train_meta);
        auto h = ad::variable<Scalar>(prompt.tokens);
        auto loss = conditional_prompt_loss(text, mbind, h, prompt, meta, class_ids, support);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericalError("non-finite prompt-tuning loss at step " + std::to_string(step));
        result.trace.support_loss.push_back(value);
        ad::backward(loss);
        std::vector<Mat<Scalar>*> params{&prompt.tokens};
        std::vector<Mat<Scalar>> grads{h.grad()};
        if (train_meta) {
            visit_parameters(meta, [&](const std::string&, Mat<Scalar>& p) {
                params.push_back(&p);
                grads.push_back(mbind.grad(p));
            });
        }
        adam.step(params, grads);
    }
    consider(opt.steps);
    result.trace.best_step = best.step;
    result.trace.best_validation_accuracy = std::max(best.acc, 0.0);
    return result;
}

}  // namespace g2p2
