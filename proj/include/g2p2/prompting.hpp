// SPDX-License-Identifier: Apache-2.0
//
// Prompt-based classification on a frozen pre-trained dual encoder:
// discrete templates for zero-shot, tuned continuous prompts for few-shot,
// and prompt initialisation from graph contexts.

#pragma once

#include "g2p2/encoders.hpp"
#include "g2p2/optim.hpp"

#include <map>
#include <string>
#include <vector>

namespace g2p2 {

inline constexpr std::string_view class_placeholder = "[CLASS]";

class DiscretePromptTemplate {
public:
    explicit DiscretePromptTemplate(std::string text) : text_(std::move(text)) {
        const auto first = text_.find(class_placeholder);
        if (first == std::string::npos) throw ParameterError("prompt template '" + text_ + "' has no [CLASS] placeholder");
        if (text_.find(class_placeholder, first + 1) != std::string::npos)
            throw ParameterError("prompt template '" + text_ + "' has more than one [CLASS] placeholder");
        pos_ = first;
    }

    std::string fill(const std::string& label_text) const {
        std::string out = text_;
        out.replace(pos_, class_placeholder.size(), label_text);
        return out;
    }

    const std::string& text() const { return text_; }

private:
    std::string text_;
    std::size_t pos_ = 0;
};

/// Class weights from label texts spliced into a template, L2-normalised.
template <typename Scalar>
Mat<Scalar> class_weights_discrete(const TextEncoderState<Scalar>& text, const Vocabulary& vocab, const DiscretePromptTemplate& tmpl,
                                   const std::vector<std::string>& label_texts) {
    std::vector<TokenSeq> batch;
    for (const auto& label : label_texts) {
        if (split_words(label).empty()) throw ParameterError("empty class label text");
        batch.push_back(tokenize(vocab, tmpl.fill(label), text.config.max_length));
    }
    return row_l2_normalize(encode_text_batch(text, batch));
}

/// softmax_y cos(z, w_y).
template <typename Scalar>
Eigen::Matrix<Scalar, 1, Eigen::Dynamic> classify(const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& z, const Mat<Scalar>& weights) {
    Mat<Scalar> zr = z;
    const Mat<Scalar> logits = row_l2_normalize(zr) * row_l2_normalize(weights).transpose();
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> p = (logits.row(0).array() - logits.row(0).maxCoeff()).exp();
    p /= p.sum();
    return p;
}

/// Probabilities for every row of zs, one row at a time so that each row
/// matches classify() bit for bit.
template <typename Scalar>
Mat<Scalar> classify_rows(const Mat<Scalar>& zs, const Mat<Scalar>& weights) {
    Mat<Scalar> out(zs.rows(), weights.rows());
    for (Eigen::Index i = 0; i < zs.rows(); ++i) {
        const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> z = zs.row(i);
        out.row(i) = classify(z, weights);
    }
    return out;
}

/// Argmax; ties go to the lowest index.
template <typename Derived>
int predict(const Eigen::MatrixBase<Derived>& probs) {
    int best = 0;
    for (Eigen::Index i = 1; i < probs.size(); ++i)
        if (probs(i) > probs(best)) best = static_cast<int>(i);
    return best;
}

// ---------------------------------------------------------------------------
// Continuous prompts

/// Global prompt tokens plus the frozen embedded label-token sequence of
/// each class (label words followed by EOS).
template <typename Scalar>
struct PromptState {
    Mat<Scalar> tokens;  // M x width
    std::map<ClassId, Mat<Scalar>> class_tokens;

    int length() const { return static_cast<int>(tokens.rows()); }
};

template <typename Scalar>
Mat<Scalar> embed_sequence(const TextEncoderState<Scalar>& text, const TokenSeq& seq) {
    Mat<Scalar> out(static_cast<Eigen::Index>(seq.size()), text.config.width);
    for (std::size_t i = 0; i < seq.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = text.token_embedding.row(seq[i]);
    return out;
}

/// Builds a PromptState with the given prompt tokens and every class's
/// embedded label text, truncated so that M + label length fits max_length.
template <typename Scalar>
PromptState<Scalar> make_prompt_state(const TextEncoderState<Scalar>& text, const Vocabulary& vocab, Mat<Scalar> tokens,
                                      const std::map<ClassId, std::string>& class_texts) {
    const int m = static_cast<int>(tokens.rows());
    if (m < 1) throw ParameterError("prompt needs at least one token");
    if (tokens.cols() != text.config.width) throw ParameterError("prompt token width differs from encoder width");
    if (m + 2 > text.config.max_length) throw ParameterError("prompt length leaves no room for the class label");
    PromptState<Scalar> p;
    p.tokens = std::move(tokens);
    for (const auto& [c, label] : class_texts) p.class_tokens[c] = embed_sequence(text, tokenize(vocab, label, text.config.max_length - m));
    return p;
}

namespace detail {

/// [h_1..h_M, h_CLASS(y)] for each class, stacked, plus segments.
template <typename Scalar>
std::pair<ad::Var<Scalar>, std::vector<ad::Segment>> prompt_inputs(const ad::Var<Scalar>& prompt_rows, const PromptState<Scalar>& prompt,
                                                                   const std::vector<ClassId>& class_ids, int max_length) {
    std::vector<ad::Var<Scalar>> parts;
    std::vector<ad::Segment> segments;
    int at = 0;
    for (ClassId c : class_ids) {
        auto it = prompt.class_tokens.find(c);
        if (it == prompt.class_tokens.end()) throw LookupError("no label tokens for class " + std::to_string(c));
        const int len = static_cast<int>(prompt_rows.rows() + it->second.rows());
        if (len > max_length) throw ContractViolation("prompt sequence of length " + std::to_string(len) + " exceeds max_length");
        parts.push_back(prompt_rows);
        parts.push_back(ad::constant<Scalar>(it->second));
        segments.push_back({at, len});
        at += len;
    }
    return {ad::vstack(parts), std::move(segments)};
}

}  // namespace detail

/// Class weights w_y = Phi_T([h_1..h_M, h_CLASS(y)]) on a frozen encoder, given
/// the prompt rows as a graph variable.
template <typename Scalar>
ad::Var<Scalar> prompt_class_weights(const TextEncoderState<Scalar>& text, const ad::Var<Scalar>& prompt_rows, const PromptState<Scalar>& prompt,
                                     const std::vector<ClassId>& class_ids) {
    if (class_ids.empty()) throw ParameterError("no classes");
    ParamBinder<Scalar> frozen(false);
    auto [inputs, segments] = detail::prompt_inputs(prompt_rows, prompt, class_ids, text.config.max_length);
    return encode_embedded(frozen, text, inputs, segments);
}

template <typename Scalar>
Mat<Scalar> class_weights_continuous(const TextEncoderState<Scalar>& text, const PromptState<Scalar>& prompt, const std::vector<ClassId>& class_ids) {
    return prompt_class_weights(text, ad::constant<Scalar>(prompt.tokens), prompt, class_ids).value();
}

/// Position-wise mean over support documents and up to eta sampled
/// neighbours of each, every document cut to its first M words and padded
/// with the PAD embedding. Returns the individual M x width sequences.
template <typename Scalar>
std::vector<Mat<Scalar>> context_sequences(const GraphTextCorpus& corpus, const FewShotTask& task, const TextEncoderState<Scalar>& text,
                                           const Vocabulary& vocab, int m, int eta, std::uint64_t seed) {
    if (task.support.empty()) throw ContractViolation("context initialisation needs a nonempty support set");
    if (m < 1) throw ParameterError("prompt length must be positive");
    std::vector<Mat<Scalar>> out;
    auto truncated = [&](NodeId v) {
        const auto words = split_words(corpus.documents.at(static_cast<std::size_t>(v)).text);
        Mat<Scalar> seq(m, text.config.width);
        for (int i = 0; i < m; ++i) {
            const TokenId id = i < static_cast<int>(words.size()) ? vocab.id(words[static_cast<std::size_t>(i)]) : vocab.pad();
            seq.row(i) = text.token_embedding.row(id);
        }
        return seq;
    };
    for (const auto& [v, c] : task.support) {
        out.push_back(truncated(v));
        for (NodeId u : sample_neighbors(corpus, v, eta, derive_seed(seed, "context", v))) out.push_back(truncated(u));
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> init_prompt_from_context(const GraphTextCorpus& corpus, const FewShotTask& task, const TextEncoderState<Scalar>& text,
                                     const Vocabulary& vocab, int m, int eta, std::uint64_t seed) {
    const auto seqs = context_sequences(corpus, task, text, vocab, m, eta, seed);
    Mat<Scalar> mean = Mat<Scalar>::Zero(m, text.config.width);
    for (const auto& s : seqs) mean += s;
    return mean / static_cast<Scalar>(seqs.size());
}

/// Gaussian prompt init matching the spread of the token embedding table.
template <typename Scalar>
Mat<Scalar> init_prompt_random(const TextEncoderState<Scalar>& text, int m, std::uint64_t seed) {
    const auto& e = text.token_embedding;
    const double mean = static_cast<double>(e.mean());
    const double var = static_cast<double>((e.array() - static_cast<Scalar>(mean)).square().mean());
    Rng rng(derive_seed(seed, "prompt-random"));
    return random_normal<Scalar>(m, text.config.width, std::sqrt(var), rng);
}

// ---------------------------------------------------------------------------
// Tuning

/// Node embeddings with targets given as positions in the task's class list.
template <typename Scalar>
struct LabeledSet {
    Mat<Scalar> z;
    std::vector<int> targets;

    std::size_t size() const { return targets.size(); }
};

template <typename Scalar>
LabeledSet<Scalar> make_labeled_set(const Mat<Scalar>& z_all, const std::vector<std::pair<NodeId, ClassId>>& items,
                                    const std::vector<ClassId>& class_ids) {
    std::map<ClassId, int> pos;
    for (std::size_t i = 0; i < class_ids.size(); ++i) pos.emplace(class_ids[i], static_cast<int>(i));
    LabeledSet<Scalar> s;
    s.z.resize(static_cast<Eigen::Index>(items.size()), z_all.cols());
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto [v, c] = items[i];
        if (v < 0 || v >= z_all.rows()) throw LookupError("no embedding for node " + std::to_string(v));
        auto it = pos.find(c);
        if (it == pos.end()) throw LookupError("class " + std::to_string(c) + " is not part of the task");
        s.z.row(static_cast<Eigen::Index>(i)) = z_all.row(v);
        s.targets.push_back(it->second);
    }
    return s;
}

struct TuneOptions {
    double learning_rate = 0.01;
    int steps = 100;
};

struct TuneTrace {
    std::vector<double> support_loss;  // loss before each step
    int best_step = 0;
    double best_validation_accuracy = 0.0;
};

template <typename Scalar>
struct PromptTuneResult {
    PromptState<Scalar> prompt;
    TuneTrace trace;
};

/// Support cross-entropy of softmax cos(z, w_y) as a function of the prompt rows.
template <typename Scalar>
ad::Var<Scalar> static_prompt_loss(const TextEncoderState<Scalar>& text, const ad::Var<Scalar>& prompt_rows, const PromptState<Scalar>& prompt,
                                   const std::vector<ClassId>& class_ids, const LabeledSet<Scalar>& data) {
    auto w = prompt_class_weights(text, prompt_rows, prompt, class_ids);
    auto logits = ad::matmul_nt(ad::constant<Scalar>(row_l2_normalize(data.z)), ad::row_normalize(w));
    return ad::softmax_cross_entropy(logits, data.targets);
}

template <typename Scalar>
double accuracy_of(const Mat<Scalar>& probs, const std::vector<int>& targets) {
    if (targets.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (predict(probs.row(static_cast<Eigen::Index>(i))) == targets[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(targets.size());
}

template <typename Scalar>
double mean_nll(const Mat<Scalar>& probs, const std::vector<int>& targets) {
    double s = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) s -= std::log(std::max(static_cast<double>(probs(static_cast<Eigen::Index>(i), targets[i])), 1e-300));
    return targets.empty() ? 0.0 : s / static_cast<double>(targets.size());
}

namespace detail {
/// Higher validation accuracy wins; equal accuracy falls back to lower loss.
struct BestTracker {
    double acc = -1.0;
    double loss = 0.0;
    int step = -1;

    bool offer(double a, double l, int s) {
        if (a > acc || (a == acc && l < loss)) {
            acc = a;
            loss = l;
            step = s;
            return true;
        }
        return false;
    }
};
}  // namespace detail

/// Adam on the prompt tokens only; the encoders are read-only. The returned
/// prompt is the step with the best validation accuracy (validation loss
/// breaks ties); with an empty validation set the final step is returned.
template <typename Scalar>
PromptTuneResult<Scalar> tune_prompt(const TextEncoderState<Scalar>& text, PromptState<Scalar> prompt, const std::vector<ClassId>& class_ids,
                                     const LabeledSet<Scalar>& support, const LabeledSet<Scalar>& validation, const TuneOptions& opt) {
    if (opt.steps < 0) throw ParameterError("steps must be nonnegative");
    PromptTuneResult<Scalar> result{prompt, {}};
    if (opt.steps == 0) return result;
    if (support.size() == 0) throw ContractViolation("prompt tuning needs a nonempty support set");

    Adam<Scalar> adam(opt.learning_rate);
    detail::BestTracker best;
    auto consider = [&](int step) {
        if (validation.size() == 0) {
            best.step = step;
            result.prompt.tokens = prompt.tokens;
            return;
        }
        const auto probs = classify_rows(validation.z, class_weights_continuous(text, prompt, class_ids));
        if (best.offer(accuracy_of(probs, validation.targets), mean_nll(probs, validation.targets), step)) result.prompt.tokens = prompt.tokens;
    };
    for (int step = 0; step < opt.steps; ++step) {
        consider(step);
        auto h = ad::variable<Scalar>(prompt.tokens);
        auto loss = static_prompt_loss(text, h, prompt, class_ids, support);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericalError("non-finite prompt-tuning loss at step " + std::to_string(step));
        result.trace.support_loss.push_back(value);
        ad::backward(loss);
        adam.step({&prompt.tokens}, {h.grad()});
    }
    consider(opt.steps);
    result.trace.best_step = best.step;
    result.trace.best_validation_accuracy = std::max(best.acc, 0.0);
    return result;
}

}  // namespace g2p2
