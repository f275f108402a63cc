#pragma once

#include <Eigen/Dense>
#include <vector>

#include "apd/autodiff.hpp"
#include "apd/errors.hpp"
#include "apd/model.hpp"

namespace apd {

// Mean cross-entropy over the batch.
inline ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits->value.rows())
        throw input_error("cross_entropy: label count mismatch");
    ad::Var logp = ad::log_softmax_rows(logits);
    return ad::scale(ad::mean_all(ad::pick(logp, labels)), -1.0);
}

inline Eigen::MatrixXd log_softmax_values(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd v = logits;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        const double lse = m + std::log((v.row(i).array() - m).exp().sum());
        v.row(i).array() -= lse;
    }
    return v;
}

// mean_i KL( softmax(p_i/tau) || softmax(q_i/tau) ) * tau^2, with q held
// constant. The tau^2 factor keeps gradient magnitudes comparable across
// temperatures.
inline ad::Var kl_to_const(const ad::Var& p_logits, const Eigen::MatrixXd& q_logits,
                           double tau = 1.0) {
    if (p_logits->value.rows() != q_logits.rows() || p_logits->value.cols() != q_logits.cols())
        throw input_error("kl_to_const: logit shape mismatch");
    if (!q_logits.allFinite()) throw train_error("kl_to_const: non-finite reference logits");
    if (tau <= 0.0) throw config_error("kl_to_const: temperature must be > 0");
    ad::Var s = ad::scale(p_logits, 1.0 / tau);
    ad::Var p = ad::softmax_rows(s);
    ad::Var lp = ad::log_softmax_rows(s);
    ad::Var diff = ad::sub(lp, ad::constant(log_softmax_values(q_logits / tau)));
    ad::Var per_row = ad::sum_rows(ad::mul(p, diff));
    return ad::scale(ad::mean_all(per_row), tau * tau);
}

// mean_i KL( softmax(p_i/tau) || softmax(q_i/tau) ) * tau^2 with the first
// argument held constant; gradient flows through q. Used when the KL
// direction ablation switch is flipped.
inline ad::Var kl_from_const(const Eigen::MatrixXd& p_logits, const ad::Var& q_logits,
                             double tau = 1.0) {
    if (q_logits->value.rows() != p_logits.rows() || q_logits->value.cols() != p_logits.cols())
        throw input_error("kl_from_const: logit shape mismatch");
    if (!p_logits.allFinite()) throw train_error("kl_from_const: non-finite reference logits");
    if (tau <= 0.0) throw config_error("kl_from_const: temperature must be > 0");
    Eigen::MatrixXd lp = log_softmax_values(p_logits / tau);
    Eigen::MatrixXd p = lp.array().exp();
    ad::Var lq = ad::log_softmax_rows(ad::scale(q_logits, 1.0 / tau));
    ad::Var diff = ad::sub(ad::constant(lp), lq);
    ad::Var per_row = ad::sum_rows(ad::mul(ad::constant(p), diff));
    return ad::scale(ad::mean_all(per_row), tau * tau);
}

// Carlini-Wagner style margin: logit of the runner-up class minus logit of
// the true class, averaged over the batch. Maximizing it drives
// misclassification. Runner-up indices are recomputed from the current
// values and treated as constants.
inline ad::Var cw_margin(const ad::Var& logits, const std::vector<int>& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits->value.rows())
        throw input_error("cw_margin: label count mismatch");
    if (logits->value.cols() < 2) throw input_error("cw_margin: needs at least 2 classes");
    std::vector<int> runner_up(labels.size());
    for (Eigen::Index i = 0; i < logits->value.rows(); ++i) {
        int best = -1;
        for (Eigen::Index j = 0; j < logits->value.cols(); ++j) {
            if (static_cast<int>(j) == labels[static_cast<std::size_t>(i)]) continue;
            if (best < 0 || logits->value(i, j) > logits->value(i, best))
                best = static_cast<int>(j);
        }
        runner_up[static_cast<std::size_t>(i)] = best;
    }
    return ad::mean_all(ad::sub(ad::pick(logits, runner_up), ad::pick(logits, labels)));
}

// Per-example plain-value losses, used for restart selection and reporting.
inline Eigen::VectorXd per_example_ce(const Eigen::MatrixXd& logits,
                                      const std::vector<int>& labels) {
    Eigen::MatrixXd logp = log_softmax_values(logits);
    Eigen::VectorXd out(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        out(i) = -logp(i, labels[static_cast<std::size_t>(i)]);
    return out;
}

inline Eigen::VectorXd per_example_margin(const Eigen::MatrixXd& logits,
                                          const std::vector<int>& labels) {
    Eigen::VectorXd out(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        double best = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < logits.cols(); ++j)
            if (static_cast<int>(j) != y) best = std::max(best, logits(i, j));
        out(i) = best - logits(i, y);
    }
    return out;
}

}  // namespace apd
