// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "g2p2/common.hpp"

#include <vector>

namespace g2p2 {

/// Adam over a fixed, ordered list of parameter matrices. The list passed
/// to step() must keep the same order and shapes across calls.
template <typename Scalar>
class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be positive");
    }

    void step(const std::vector<Mat<Scalar>*>& params, const std::vector<Mat<Scalar>>& grads) {
        if (params.size() != grads.size()) throw ParameterError("Adam::step: parameter/gradient count mismatch");
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
                v_.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
            }
        }
        if (m_.size() != params.size()) throw ParameterError("Adam::step: parameter list changed between steps");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        const auto b1 = static_cast<Scalar>(beta1_);
        const auto b2 = static_cast<Scalar>(beta2_);
        const auto step_size = static_cast<Scalar>(lr_ / c1);
        const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
        const auto eps = static_cast<Scalar>(eps_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& g = grads[i];
            m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
            v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
            params[i]->array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
        }
    }

    long steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Mat<Scalar>> m_, v_;
};

}  // namespace g2p2
