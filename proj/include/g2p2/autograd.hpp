// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every op records a closure that pushes its output gradient onto its
// parents. Nodes whose inputs are all constants record nothing, so frozen
// inference never retains a graph. Gradients accumulate; call backward()
// once per graph.

#pragma once

#include "g2p2/common.hpp"

#include <Eigen/Sparse>

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace g2p2::ad {

template <typename Scalar>
struct Node {
    Mat<Scalar> value;
    Mat<Scalar> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Mat<Scalar>&)> backward;
    bool requires_grad = false;

    Mat<Scalar>& grad_buffer() {
        if (grad.size() == 0) grad = Mat<Scalar>::Zero(value.rows(), value.cols());
        return grad;
    }
};

template <typename Scalar>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

    const Mat<Scalar>& value() const { return node_->value; }
    const Mat<Scalar>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    Scalar item() const { return node_->value(0, 0); }

    Node<Scalar>* get() const { return node_.get(); }
    const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node<Scalar>> node_;
};

template <typename Scalar>
Var<Scalar> constant(Mat<Scalar> value) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    return Var<Scalar>(std::move(n));
}

template <typename Scalar>
Var<Scalar> variable(Mat<Scalar> value) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var<Scalar>(std::move(n));
}

namespace detail {

template <typename Scalar, typename Backward>
Var<Scalar> record(Mat<Scalar> value, std::initializer_list<Var<Scalar>> parents, Backward&& backward) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (const auto& p : parents) n->parents.push_back(p.shared());
        n->backward = std::forward<Backward>(backward);
    }
    return Var<Scalar>(std::move(n));
}

template <typename Scalar, typename Expr>
void accumulate(Node<Scalar>* p, const Expr& g) {
    if (p->requires_grad) p->grad_buffer() += g;
}

inline void check(bool ok, const char* what) {
    if (!ok) throw ParameterError(what);
}

}  // namespace detail

/// Back-propagates from a 1x1 root. Leaves that require grad end up with
/// `grad()` populated.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
    detail::check(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> seen;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<Scalar>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.get()->grad_buffer().setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Scalar>* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(n->grad);
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
    auto* pa = a.get();
    auto* pb = b.get();
    return detail::record<Scalar>(a.value() * b.value(), {a, b}, [pa, pb](const Mat<Scalar>& g) {
        if (pa->requires_grad) pa->grad_buffer().noalias() += g * pb->value.transpose();
        if (pb->requires_grad) pb->grad_buffer().noalias() += pa->value.transpose() * g;
    });
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::check(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
    auto* pa = a.get();
    auto* pb = b.get();
    return detail::record<Scalar>(a.value() * b.value().transpose(), {a, b}, [pa, pb](const Mat<Scalar>& g) {
        if (pa->requires_grad) pa->grad_buffer().noalias() += g * pb->value;
        if (pb->requires_grad) pb->grad_buffer().noalias() += g.transpose() * pa->value;
    });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
    auto* pa = a.get();
    return detail::record<Scalar>(Mat<Scalar>(a.value().transpose()), {a},
                                  [pa](const Mat<Scalar>& g) { detail::accumulate(pa, g.transpose()); });
}

template <typename Scalar>
using SparseMat = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

/// Constant sparse matrix times a dense variable.
template <typename Scalar>
Var<Scalar> spmm(std::shared_ptr<const SparseMat<Scalar>> a, const Var<Scalar>& b) {
    detail::check(a->cols() == b.rows(), "spmm: inner dimensions differ");
    Mat<Scalar> out = (*a) * b.value();
    auto* pb = b.get();
    return detail::record<Scalar>(std::move(out), {b}, [a, pb](const Mat<Scalar>& g) {
        if (pb->requires_grad) pb->grad_buffer().noalias() += a->transpose() * g;
    });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    auto* pa = a.get();
    auto* pb = b.get();
    return detail::record<Scalar>(a.value() + b.value(), {a, b}, [pa, pb](const Mat<Scalar>& g) {
        detail::accumulate(pa, g);
        detail::accumulate(pb, g);
    });
}

/// Adds a 1 x c row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
    detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape mismatch");
    auto* pa = a.get();
    auto* pr = row.get();
    Mat<Scalar> out = a.value().rowwise() + row.value().row(0);
    return detail::record<Scalar>(std::move(out), {a, row}, [pa, pr](const Mat<Scalar>& g) {
        detail::accumulate(pa, g);
        if (pr->requires_grad) pr->grad_buffer() += g.colwise().sum();
    });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
    auto* pa = a.get();
    return detail::record<Scalar>(a.value() * s, {a}, [pa, s](const Mat<Scalar>& g) { detail::accumulate(pa, g * s); });
}

/// a scaled by the 1x1 variable t.
template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& a, const Var<Scalar>& t) {
    detail::check(t.rows() == 1 && t.cols() == 1, "mul_scalar: factor must be 1x1");
    auto* pa = a.get();
    auto* pt = t.get();
    return detail::record<Scalar>(a.value() * t.item(), {a, t}, [pa, pt](const Mat<Scalar>& g) {
        if (pa->requires_grad) pa->grad_buffer() += g * pt->value(0, 0);
        if (pt->requires_grad) pt->grad_buffer()(0, 0) += g.cwiseProduct(pa->value).sum();
    });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
    auto* pa = a.get();
    Mat<Scalar> out = a.value().array().exp().matrix();
    Mat<Scalar> saved = out;
    return detail::record<Scalar>(std::move(out), {a}, [pa, saved = std::move(saved)](const Mat<Scalar>& g) {
        detail::accumulate(pa, g.cwiseProduct(saved));
    });
}

// ---------------------------------------------------------------------------
// Activations and normalisation

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
    auto* pa = a.get();
    Mat<Scalar> out = a.value().unaryExpr([slope](Scalar x) { return x > Scalar(0) ? x : slope * x; });
    return detail::record<Scalar>(std::move(out), {a}, [pa, slope](const Mat<Scalar>& g) {
        if (!pa->requires_grad) return;
        pa->grad_buffer() += g.binaryExpr(pa->value, [slope](Scalar gi, Scalar x) { return x > Scalar(0) ? gi : slope * gi; });
    });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
    return leaky_relu(a, Scalar(0));
}

/// GELU, tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
    constexpr Scalar c = Scalar(0.7978845608028654);
    constexpr Scalar k = Scalar(0.044715);
    auto* pa = a.get();
    Mat<Scalar> out = a.value().unaryExpr([](Scalar x) {
        return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + k * x * x * x)));
    });
    return detail::record<Scalar>(std::move(out), {a}, [pa](const Mat<Scalar>& g) {
        if (!pa->requires_grad) return;
        pa->grad_buffer() += g.binaryExpr(pa->value, [](Scalar gi, Scalar x) {
            const Scalar t = std::tanh(c * (x + k * x * x * x));
            const Scalar dt = (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3) * k * x * x);
            return gi * (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * dt);
        });
    });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
    detail::check(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
                  "layer_norm: parameter shape mismatch");
    const Eigen::Index n = x.rows();
    const Eigen::Index c = x.cols();
    Mat<Scalar> xhat(n, c);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = x.value().row(i);
        const Scalar mean = row.mean();
        const Scalar var = (row.array() - mean).square().mean();
        inv_std(i) = Scalar(1) / std::sqrt(var + eps);
        xhat.row(i) = (row.array() - mean) * inv_std(i);
    }
    Mat<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    auto* px = x.get();
    auto* pg = gain.get();
    auto* pb = bias.get();
    return detail::record<Scalar>(std::move(out), {x, gain, bias},
                                  [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Mat<Scalar>& g) {
        if (pg->requires_grad) pg->grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
        if (pb->requires_grad) pb->grad_buffer() += g.colwise().sum();
        if (!px->requires_grad) return;
        Mat<Scalar> dxhat = g.array().rowwise() * pg->value.row(0).array();
        auto& dx = px->grad_buffer();
        for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const Scalar m1 = dxhat.row(i).mean();
            const Scalar m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
            dx.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
        }
    });
}

/// Row-wise L2 normalisation; all-zero rows pass through as zero.
template <typename Scalar>
Var<Scalar> row_normalize(const Var<Scalar>& a) {
    Mat<Scalar> out = a.value();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms(out.rows());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        norms(i) = out.row(i).norm();
        if (norms(i) > Scalar(0)) out.row(i) /= norms(i);
    }
    Mat<Scalar> saved = out;
    auto* pa = a.get();
    return detail::record<Scalar>(std::move(out), {a}, [pa, y = std::move(saved), norms = std::move(norms)](const Mat<Scalar>& g) {
        if (!pa->requires_grad) return;
        auto& da = pa->grad_buffer();
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            if (norms(i) <= Scalar(0)) continue;
            const Scalar proj = y.row(i).dot(g.row(i));
            da.row(i) += (g.row(i) - proj * y.row(i)) / norms(i);
        }
    });
}

// ---------------------------------------------------------------------------
// Row plumbing

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<int> index) {
    Mat<Scalar> out(static_cast<Eigen::Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= a.rows()) throw LookupError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
    }
    auto* pa = a.get();
    return detail::record<Scalar>(std::move(out), {a}, [pa, index = std::move(index)](const Mat<Scalar>& g) {
        if (!pa->requires_grad) return;
        auto& da = pa->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i) da.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

/// Row i of the output is the mean of rows `groups[i]` of a.
template <typename Scalar>
Var<Scalar> segment_mean(const Var<Scalar>& a, std::vector<std::vector<int>> groups) {
    Mat<Scalar> out = Mat<Scalar>::Zero(static_cast<Eigen::Index>(groups.size()), a.cols());
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i].empty()) throw ParameterError("segment_mean: empty group");
        for (int r : groups[i]) out.row(static_cast<Eigen::Index>(i)) += a.value().row(r);
        out.row(static_cast<Eigen::Index>(i)) /= static_cast<Scalar>(groups[i].size());
    }
    auto* pa = a.get();
    return detail::record<Scalar>(std::move(out), {a}, [pa, groups = std::move(groups)](const Mat<Scalar>& g) {
        if (!pa->requires_grad) return;
        auto& da = pa->grad_buffer();
        for (std::size_t i = 0; i < groups.size(); ++i) {
            const Scalar w = Scalar(1) / static_cast<Scalar>(groups[i].size());
            for (int r : groups[i]) da.row(r) += w * g.row(static_cast<Eigen::Index>(i));
        }
    });
}

template <typename Scalar>
Var<Scalar> vstack(const std::vector<Var<Scalar>>& parts) {
    detail::check(!parts.empty(), "vstack: no inputs");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        detail::check(p.cols() == cols, "vstack: column mismatch");
        rows += p.rows();
    }
    Mat<Scalar> out(rows, cols);
    Eigen::Index at = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
        any_grad = any_grad || p.requires_grad();
    }
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(out);
    if (any_grad) {
        n->requires_grad = true;
        std::vector<Node<Scalar>*> raw;
        for (const auto& p : parts) {
            n->parents.push_back(p.shared());
            raw.push_back(p.get());
        }
        n->backward = [raw = std::move(raw)](const Mat<Scalar>& g) {
            Eigen::Index off = 0;
            for (auto* p : raw) {
                if (p->requires_grad) p->grad_buffer() += g.middleRows(off, p->value.rows());
                off += p->value.rows();
            }
        };
    }
    return Var<Scalar>(std::move(n));
}

/// out(b, y) = dot(w.row(b * ways + y), z.row(b)).
template <typename Scalar>
Var<Scalar> grouped_row_dots(const Var<Scalar>& w, const Var<Scalar>& z, Eigen::Index ways) {
    detail::check(w.cols() == z.cols() && w.rows() == z.rows() * ways, "grouped_row_dots: shape mismatch");
    Mat<Scalar> out(z.rows(), ways);
    for (Eigen::Index b = 0; b < z.rows(); ++b)
        for (Eigen::Index y = 0; y < ways; ++y) out(b, y) = w.value().row(b * ways + y).dot(z.value().row(b));
    auto* pw = w.get();
    auto* pz = z.get();
    return detail::record<Scalar>(std::move(out), {w, z}, [pw, pz, ways](const Mat<Scalar>& g) {
        for (Eigen::Index b = 0; b < g.rows(); ++b) {
            for (Eigen::Index y = 0; y < ways; ++y) {
                if (pw->requires_grad) pw->grad_buffer().row(b * ways + y) += g(b, y) * pz->value.row(b);
                if (pz->requires_grad) pz->grad_buffer().row(b) += g(b, y) * pw->value.row(b * ways + y);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Attention

/// A contiguous run of rows forming one sequence.
struct Segment {
    int start = 0;
    int length = 0;
};

/// Multi-head scaled dot-product attention applied independently to each
/// segment of the stacked q/k/v rows. With `causal`, position t attends to
/// positions <= t only.
template <typename Scalar>
Var<Scalar> segment_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                              std::vector<Segment> segments, int heads, bool causal) {
    detail::check(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols() && q.cols() == v.cols(),
                  "segment_attention: q/k/v shapes differ");
    detail::check(heads > 0 && q.cols() % heads == 0, "segment_attention: width not divisible by heads");
    const int dh = static_cast<int>(q.cols()) / heads;
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    Mat<Scalar> out = Mat<Scalar>::Zero(q.rows(), q.cols());
    std::vector<Mat<Scalar>> probs;
    probs.reserve(segments.size() * static_cast<std::size_t>(heads));
    for (const auto& s : segments) {
        detail::check(s.start >= 0 && s.length > 0 && s.start + s.length <= q.rows(), "segment_attention: bad segment");
        for (int h = 0; h < heads; ++h) {
            const auto qh = q.value().block(s.start, h * dh, s.length, dh);
            const auto kh = k.value().block(s.start, h * dh, s.length, dh);
            const auto vh = v.value().block(s.start, h * dh, s.length, dh);
            Mat<Scalar> p = (qh * kh.transpose()) * inv_sqrt;
            for (int i = 0; i < s.length; ++i) {
                const int visible = causal ? i + 1 : s.length;
                const Scalar mx = p.row(i).head(visible).maxCoeff();
                Scalar sum = 0;
                for (int j = 0; j < s.length; ++j) {
                    const Scalar e = j < visible ? std::exp(p(i, j) - mx) : Scalar(0);
                    p(i, j) = e;
                    sum += e;
                }
                p.row(i) /= sum;
            }
            out.block(s.start, h * dh, s.length, dh).noalias() = p * vh;
            probs.push_back(std::move(p));
        }
    }

    auto* pq = q.get();
    auto* pk = k.get();
    auto* pv = v.get();
    return detail::record<Scalar>(std::move(out), {q, k, v},
                                  [pq, pk, pv, segments = std::move(segments), probs = std::move(probs), heads, dh,
                                   inv_sqrt](const Mat<Scalar>& g) {
        std::size_t idx = 0;
        for (const auto& s : segments) {
            for (int h = 0; h < heads; ++h, ++idx) {
                const Mat<Scalar>& p = probs[idx];
                const auto go = g.block(s.start, h * dh, s.length, dh);
                const auto qh = pq->value.block(s.start, h * dh, s.length, dh);
                const auto kh = pk->value.block(s.start, h * dh, s.length, dh);
                const auto vh = pv->value.block(s.start, h * dh, s.length, dh);
                if (pv->requires_grad) pv->grad_buffer().block(s.start, h * dh, s.length, dh).noalias() += p.transpose() * go;
                if (!pq->requires_grad && !pk->requires_grad) continue;
                Mat<Scalar> dp = go * vh.transpose();
                Mat<Scalar> ds = p.cwiseProduct(dp);
                const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
                ds -= p.cwiseProduct(rowdot.replicate(1, p.cols()));
                ds *= inv_sqrt;
                if (pq->requires_grad) pq->grad_buffer().block(s.start, h * dh, s.length, dh).noalias() += ds * kh;
                if (pk->requires_grad) pk->grad_buffer().block(s.start, h * dh, s.length, dh).noalias() += ds.transpose() * qh;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean row-wise cross-entropy with per-row integer targets.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::vector<int> targets) {
    detail::check(static_cast<Eigen::Index>(targets.size()) == logits.rows() && !targets.empty(),
                  "softmax_cross_entropy: target count mismatch");
    const Eigen::Index n = logits.rows();
    Mat<Scalar> probs(n, logits.cols());
    Scalar loss = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= logits.cols()) throw LookupError("softmax_cross_entropy: target out of range");
        const auto row = logits.value().row(i);
        const Scalar mx = row.maxCoeff();
        probs.row(i) = (row.array() - mx).exp();
        const Scalar sum = probs.row(i).sum();
        probs.row(i) /= sum;
        loss += std::log(sum) + mx - row(t);
    }
    loss /= static_cast<Scalar>(n);
    Mat<Scalar> out(1, 1);
    out(0, 0) = loss;
    auto* pl = logits.get();
    return detail::record<Scalar>(std::move(out), {logits}, [pl, probs = std::move(probs), targets = std::move(targets)](const Mat<Scalar>& g) {
        if (!pl->requires_grad) return;
        Mat<Scalar> d = probs;
        for (std::size_t i = 0; i < targets.size(); ++i) d(static_cast<Eigen::Index>(i), targets[i]) -= Scalar(1);
        pl->grad_buffer() += d * (g(0, 0) / static_cast<Scalar>(targets.size()));
    });
}

}  // namespace g2p2::ad
