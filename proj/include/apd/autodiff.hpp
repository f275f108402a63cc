#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "apd/errors.hpp"

// Small reverse-mode autodiff over Eigen matrices. Graphs are built per
// forward pass; frozen weights and learnable prompts live in persistent
// leaf nodes that are shared across graphs. Double precision throughout.
namespace apd::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    void accumulate(const Eigen::MatrixXd& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    const Eigen::MatrixXd& grad_or_zero() {
        if (grad.size() == 0) grad = Eigen::MatrixXd::Zero(value.rows(), value.cols());
        return grad;
    }
};

inline Var constant(Eigen::MatrixXd m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = false;
    return n;
}

inline Var leaf(Eigen::MatrixXd m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = true;
    return n;
}

inline Var make_op(Eigen::MatrixXd value, std::vector<Var> parents,
                   std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

// ---- elementwise / linear ops -------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw config_error("ad::add: shape mismatch");
    return make_op(a->value + b->value, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw config_error("ad::sub: shape mismatch");
    return make_op(a->value - b->value, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(-n.grad);
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw config_error("ad::mul: shape mismatch");
    return make_op(a->value.cwiseProduct(b->value), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->accumulate(n.grad.cwiseProduct(n.parents[1]->value));
        if (n.parents[1]->requires_grad)
            n.parents[1]->accumulate(n.grad.cwiseProduct(n.parents[0]->value));
    });
}

inline Var scale(const Var& a, double s) {
    return make_op(a->value * s, {a}, [s](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad * s);
    });
}

// Broadcast a 1-row vector across every row of a.
inline Var add_rowvec(const Var& a, const Var& row) {
    if (row->value.rows() != 1 || row->value.cols() != a->value.cols())
        throw config_error("ad::add_rowvec: shape mismatch");
    Eigen::MatrixXd v = a->value;
    v.rowwise() += row->value.row(0);
    return make_op(std::move(v), {a, row}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
    });
}

inline Var matmul(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.rows()) throw config_error("ad::matmul: shape mismatch");
    return make_op(a->value * b->value, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->accumulate(n.grad * n.parents[1]->value.transpose());
        if (n.parents[1]->requires_grad)
            n.parents[1]->accumulate(n.parents[0]->value.transpose() * n.grad);
    });
}

// a * b^T, used for cosine logits between two embedding batches.
inline Var matmul_nt(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.cols()) throw config_error("ad::matmul_nt: shape mismatch");
    return make_op(a->value * b->value.transpose(), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad * n.parents[1]->value);
        if (n.parents[1]->requires_grad)
            n.parents[1]->accumulate(n.grad.transpose() * n.parents[0]->value);
    });
}

// ---- shape ops ------------------------------------------------------------

inline Var concat_rows(const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.at(0)->value.cols();
    for (const auto& p : parts) {
        if (p->value.cols() != cols) throw config_error("ad::concat_rows: width mismatch");
        rows += p->value.rows();
    }
    Eigen::MatrixXd v(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleRows(at, p->value.rows()) = p->value;
        at += p->value.rows();
    }
    return make_op(std::move(v), parts, [](Node& n) {
        Eigen::Index at = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) p->accumulate(n.grad.middleRows(at, p->value.rows()));
            at += p->value.rows();
        }
    });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a->value.rows())
        throw config_error("ad::slice_rows: out of range");
    return make_op(a->value.middleRows(start, count), {a}, [start, count](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& p = *n.parents[0];
        if (p.grad.size() == 0) p.zero_grad();
        p.grad.middleRows(start, count) += n.grad;
    });
}

// Gathers a(i, idx[i]) into a column vector.
inline Var pick(const Var& a, const std::vector<int>& idx) {
    if (static_cast<Eigen::Index>(idx.size()) != a->value.rows())
        throw config_error("ad::pick: index count mismatch");
    Eigen::MatrixXd v(a->value.rows(), 1);
    for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        const int j = idx[static_cast<std::size_t>(i)];
        if (j < 0 || j >= a->value.cols()) throw input_error("ad::pick: index out of range");
        v(i, 0) = a->value(i, j);
    }
    return make_op(std::move(v), {a}, [idx](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& p = *n.parents[0];
        if (p.grad.size() == 0) p.zero_grad();
        for (Eigen::Index i = 0; i < n.value.rows(); ++i)
            p.grad(i, idx[static_cast<std::size_t>(i)]) += n.grad(i, 0);
    });
}

// ---- nonlinearities --------------------------------------------------------

inline Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    Eigen::MatrixXd v = a->value.unaryExpr(
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return make_op(std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        const Eigen::MatrixXd& x = n.parents[0]->value;
        Eigen::MatrixXd d = x.unaryExpr([](double t) {
            return 0.5 * (1.0 + std::erf(t * inv_sqrt2)) +
                   t * inv_sqrt2pi * std::exp(-0.5 * t * t);
        });
        n.parents[0]->accumulate(n.grad.cwiseProduct(d));
    });
}

inline Var softmax_rows(const Var& a) {
    Eigen::MatrixXd v = a->value;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        v.row(i) = (v.row(i).array() - m).exp();
        v.row(i) /= v.row(i).sum();
    }
    return make_op(std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Eigen::MatrixXd d(n.value.rows(), n.value.cols());
        for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
            const double dot = n.grad.row(i).dot(n.value.row(i));
            d.row(i) = n.value.row(i).cwiseProduct(((n.grad.row(i).array() - dot).matrix()).eval());
        }
        n.parents[0]->accumulate(d);
    });
}

inline Var log_softmax_rows(const Var& a) {
    Eigen::MatrixXd v = a->value;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        const double lse = m + std::log((v.row(i).array() - m).exp().sum());
        v.row(i).array() -= lse;
    }
    return make_op(std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Eigen::MatrixXd d(n.value.rows(), n.value.cols());
        for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
            const double s = n.grad.row(i).sum();
            d.row(i) = n.grad.row(i) - s * n.value.row(i).array().exp().matrix();
        }
        n.parents[0]->accumulate(d);
    });
}

// Row-wise layer norm with affine params (1 x cols each).
inline Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Eigen::Index cols = a->value.cols();
    if (gamma->value.cols() != cols || beta->value.cols() != cols)
        throw config_error("ad::layer_norm: affine shape mismatch");
    Eigen::MatrixXd xhat(a->value.rows(), cols);
    Eigen::VectorXd inv_sigma(a->value.rows());
    for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        const double mu = a->value.row(i).mean();
        const double var = (a->value.row(i).array() - mu).square().mean();
        inv_sigma(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (a->value.row(i).array() - mu) * inv_sigma(i);
    }
    Eigen::MatrixXd v = xhat;
    for (Eigen::Index i = 0; i < v.rows(); ++i)
        v.row(i) = v.row(i).cwiseProduct(gamma->value.row(0)) + beta->value.row(0);
    return make_op(std::move(v), {a, gamma, beta},
                   [xhat, inv_sigma](Node& n) {
                       auto& a = n.parents[0];
                       auto& gamma = n.parents[1];
                       auto& beta = n.parents[2];
                       if (a->requires_grad) {
                           Eigen::MatrixXd d(n.value.rows(), n.value.cols());
                           for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
                               Eigen::RowVectorXd g =
                                   n.grad.row(i).cwiseProduct(gamma->value.row(0));
                               const double mg = g.mean();
                               const double mgx = g.cwiseProduct(xhat.row(i)).mean();
                               d.row(i) = inv_sigma(i) *
                                          (g.array() - mg - xhat.row(i).array() * mgx);
                           }
                           a->accumulate(d);
                       }
                       if (gamma->requires_grad)
                           gamma->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
                       if (beta->requires_grad) beta->accumulate(n.grad.colwise().sum());
                   });
}

inline Var l2_normalize_rows(const Var& a) {
    Eigen::VectorXd norms(a->value.rows());
    Eigen::MatrixXd v = a->value;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        norms(i) = v.row(i).norm();
        if (norms(i) == 0.0) throw input_error("ad::l2_normalize_rows: zero-norm row");
        v.row(i) /= norms(i);
    }
    return make_op(std::move(v), {a}, [norms](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Eigen::MatrixXd d(n.value.rows(), n.value.cols());
        for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
            const double dot = n.grad.row(i).dot(n.value.row(i));
            d.row(i) = (n.grad.row(i) - dot * n.value.row(i)) / norms(i);
        }
        n.parents[0]->accumulate(d);
    });
}

// ---- reductions ------------------------------------------------------------

inline Var sum_all(const Var& a) {
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = a->value.sum();
    return make_op(std::move(v), {a}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->accumulate(Eigen::MatrixXd::Constant(
                n.parents[0]->value.rows(), n.parents[0]->value.cols(), n.grad(0, 0)));
    });
}

inline Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

inline Var sum_rows(const Var& a) {  // (R x C) -> (R x 1)
    Eigen::MatrixXd v = a->value.rowwise().sum();
    return make_op(std::move(v), {a}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->accumulate(n.grad.col(0).replicate(1, n.parents[0]->value.cols()));
    });
}

// ---- image patching --------------------------------------------------------

// Pixel layout: a row vector of length channels*H*W, index c*H*W + y*W + x.
// Output: one row per patch (row-major over the patch grid), columns
// c*p*p + dy*p + dx.
inline std::vector<Eigen::Index> patch_index_map(int channels, int height, int width,
                                                 int patch) {
    if (height % patch != 0 || width % patch != 0)
        throw config_error("extract_patches: resolution not divisible by patch size");
    const int gy = height / patch, gx = width / patch;
    std::vector<Eigen::Index> map;
    map.reserve(static_cast<std::size_t>(gy) * gx * channels * patch * patch);
    for (int py = 0; py < gy; ++py)
        for (int px = 0; px < gx; ++px)
            for (int c = 0; c < channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        map.push_back(static_cast<Eigen::Index>(c) * height * width +
                                      static_cast<Eigen::Index>(py * patch + dy) * width +
                                      (px * patch + dx));
    return map;
}

inline Var extract_patches(const Var& pixels_row, int channels, int height, int width,
                           int patch) {
    if (pixels_row->value.rows() != 1 ||
        pixels_row->value.cols() != static_cast<Eigen::Index>(channels) * height * width)
        throw config_error("extract_patches: pixel row shape mismatch");
    const auto map = patch_index_map(channels, height, width, patch);
    const Eigen::Index n_patches = (height / patch) * static_cast<Eigen::Index>(width / patch);
    const Eigen::Index patch_dim = static_cast<Eigen::Index>(channels) * patch * patch;
    Eigen::MatrixXd v(n_patches, patch_dim);
    for (Eigen::Index r = 0; r < n_patches; ++r)
        for (Eigen::Index c = 0; c < patch_dim; ++c)
            v(r, c) = pixels_row->value(0, map[static_cast<std::size_t>(r * patch_dim + c)]);
    return make_op(std::move(v), {pixels_row}, [map, patch_dim](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& p = *n.parents[0];
        if (p.grad.size() == 0) p.zero_grad();
        for (Eigen::Index r = 0; r < n.value.rows(); ++r)
            for (Eigen::Index c = 0; c < patch_dim; ++c)
                p.grad(0, map[static_cast<std::size_t>(r * patch_dim + c)]) += n.grad(r, c);
    });
}

// ---- backward --------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Fresh interior nodes start with
// empty grads; persistent leaves accumulate, so callers zero them between
// optimizer steps.
inline void backward(const Var& root) {
    if (root->value.size() != 1) throw config_error("ad::backward: root must be scalar");
    if (!root->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->accumulate(Eigen::MatrixXd::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.size() != 0) n->backprop(*n);
    }
}

}  // namespace apd::ad
