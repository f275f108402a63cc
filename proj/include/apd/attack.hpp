#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "apd/autodiff.hpp"
#include "apd/errors.hpp"
#include "apd/losses.hpp"
#include "apd/model.hpp"
#include "apd/rng.hpp"

namespace apd {

enum class LossKind { cross_entropy, cw_margin };

inline std::string to_string(LossKind k) {
    return k == LossKind::cross_entropy ? "cross_entropy" : "cw_margin";
}

// L-infinity attack budget, epsilon in normalized [0,1] pixel units.
struct AttackBudget {
    double epsilon = 1.0 / 255.0;
    int steps = 3;
    double step_size = 2.0 / (3.0 * 255.0);
    bool random_start = false;
    LossKind loss_kind = LossKind::cross_entropy;
    int restarts = 1;

    void validate() const {
        if (epsilon < 0.0) throw config_error("attack budget: epsilon must be >= 0");
        if (steps < 0) throw config_error("attack budget: steps must be >= 0");
        if (steps > 0 && step_size <= 0.0)
            throw config_error("attack budget: step_size must be > 0 when steps > 0");
        if (restarts < 1) throw config_error("attack budget: restarts must be >= 1");
    }
};

struct AdversarialBatch {
    Eigen::MatrixXd images;
    Eigen::MatrixXd clean_images;
    AttackBudget budget;

    double max_deviation() const { return (images - clean_images).cwiseAbs().maxCoeff(); }
    bool satisfies_budget() const {
        return max_deviation() <= budget.epsilon && images.minCoeff() >= 0.0 &&
               images.maxCoeff() <= 1.0;
    }
};

// Differentiable image classifier: pixels (B x P) -> logits (B x C).
class ImageClassifier {
public:
    virtual ~ImageClassifier() = default;
    virtual ad::Var logits(const ad::Var& pixels) const = 0;
    virtual int num_classes() const = 0;

    Eigen::MatrixXd logits_values(const Eigen::MatrixXd& pixels) const {
        return logits(ad::constant(pixels))->value;
    }
};

// The prompted bimodal model viewed as an image classifier with fixed
// class text embeddings. Prompts are detached: attacks differentiate only
// w.r.t. pixels and never touch parameters.
class PromptedClassifier : public ImageClassifier {
public:
    PromptedClassifier(const BimodalEncoder& model, const PromptSet& prompts,
                       const std::vector<std::vector<int>>& class_prompts)
        : model_(model), prompts_(prompts.detached()) {
        text_embeds_ = model.encode_text(class_prompts, prompts_)->value;
    }

    ad::Var logits(const ad::Var& pixels) const override {
        ad::Var img = model_.encode_image(pixels, prompts_);
        return ad::scale(ad::matmul_nt(img, ad::constant(text_embeds_)),
                         model_.config().logit_scale);
    }
    int num_classes() const override { return static_cast<int>(text_embeds_.rows()); }
    const Eigen::MatrixXd& text_embeds() const { return text_embeds_; }

private:
    const BimodalEncoder& model_;
    PromptSet prompts_;
    Eigen::MatrixXd text_embeds_;
};

namespace detail {

inline double sign0(double t) { return t > 0.0 ? 1.0 : (t < 0.0 ? -1.0 : 0.0); }

// Projects a onto the eps-ball around x intersected with [0,1], exact in
// floating point: nudges the last ulp inward when rounding pushes the
// difference past eps.
inline void exact_project(Eigen::MatrixXd& a, const Eigen::MatrixXd& x, double eps) {
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, a(i)));
        const double c = x(i);
        if (v > c + eps) v = c + eps;
        if (v < c - eps) v = c - eps;
        while (v - c > eps) v = std::nextafter(v, c);
        while (c - v > eps) v = std::nextafter(v, c);
        a(i) = v;
    }
}

// Scalar objective on a pixel leaf plus matching per-example scores for
// restart selection.
struct AttackObjective {
    std::function<ad::Var(const ad::Var&)> graph;
    std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> per_example;
};

inline AdversarialBatch pgd_core(const AttackObjective& obj, const Eigen::MatrixXd& x,
                                 const AttackBudget& budget, std::uint64_t seed) {
    budget.validate();
    if (!x.allFinite()) throw input_error("pgd: non-finite input batch");
    if (x.minCoeff() < 0.0 || x.maxCoeff() > 1.0)
        throw input_error("pgd: input pixels outside [0,1]");

    Eigen::MatrixXd best = x;
    Eigen::VectorXd best_score =
        Eigen::VectorXd::Constant(x.rows(), -std::numeric_limits<double>::infinity());

    for (int r = 0; r < budget.restarts; ++r) {
        Eigen::MatrixXd adv = x;
        if (budget.random_start && budget.epsilon > 0.0) {
            auto rng = make_rng(seed, "pgd_restart", static_cast<std::uint64_t>(r));
            std::uniform_real_distribution<double> u(-budget.epsilon, budget.epsilon);
            for (Eigen::Index i = 0; i < adv.size(); ++i) adv(i) += u(rng);
            exact_project(adv, x, budget.epsilon);
        }
        for (int s = 0; s < budget.steps; ++s) {
            ad::Var px = ad::leaf(adv);
            ad::Var loss = obj.graph(px);
            if (!std::isfinite(loss->value(0, 0)))
                throw attack_error("pgd: non-finite loss at step " + std::to_string(s));
            ad::backward(loss);
            const Eigen::MatrixXd& g = px->grad_or_zero();
            adv += budget.step_size * g.unaryExpr(&sign0);
            exact_project(adv, x, budget.epsilon);
        }
        Eigen::VectorXd score = obj.per_example(adv);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (score(i) > best_score(i)) {
                best_score(i) = score(i);
                best.row(i) = adv.row(i);
            }
        }
    }
    AdversarialBatch out{std::move(best), x, budget};
    return out;
}

inline AttackObjective single_model_objective(const ImageClassifier& model,
                                              const std::vector<int>& labels, LossKind kind) {
    AttackObjective obj;
    obj.graph = [&model, labels, kind](const ad::Var& px) {
        ad::Var z = model.logits(px);
        return kind == LossKind::cross_entropy ? cross_entropy(z, labels)
                                               : cw_margin(z, labels);
    };
    obj.per_example = [&model, labels, kind](const Eigen::MatrixXd& px) {
        Eigen::MatrixXd z = model.logits_values(px);
        return kind == LossKind::cross_entropy ? per_example_ce(z, labels)
                                               : per_example_margin(z, labels);
    };
    return obj;
}

}  // namespace detail

// PGD inner maximization against a single model. Model parameters are
// never modified; sign(0) := 0.
inline AdversarialBatch pgd_attack(const ImageClassifier& model, const Eigen::MatrixXd& x,
                                   const std::vector<int>& labels, const AttackBudget& budget,
                                   std::uint64_t seed = 0) {
    if (static_cast<Eigen::Index>(labels.size()) != x.rows())
        throw input_error("pgd_attack: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= model.num_classes()) throw input_error("pgd_attack: label out of range");
    return detail::pgd_core(detail::single_model_objective(model, labels, budget.loss_kind), x,
                            budget, seed);
}

// Adaptive attack: CE on the student plus a KL term pulling the student's
// adversarial output away from the teacher's output on the clean batch.
// Teacher logits are computed once on clean x and held fixed.
inline AdversarialBatch kl_attack(const ImageClassifier& student, const ImageClassifier& teacher,
                                  const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                  const AttackBudget& budget, double kl_weight,
                                  std::uint64_t seed = 0) {
    if (kl_weight < 0.0) throw config_error("kl_attack: kl_weight must be >= 0");
    if (kl_weight == 0.0) return pgd_attack(student, x, labels, budget, seed);
    const Eigen::MatrixXd teacher_clean = teacher.logits_values(x);
    detail::AttackObjective obj;
    obj.graph = [&student, &labels, &teacher_clean, kl_weight](const ad::Var& px) {
        ad::Var z = student.logits(px);
        return ad::add(cross_entropy(z, labels),
                       ad::scale(kl_to_const(z, teacher_clean), kl_weight));
    };
    obj.per_example = [&student, &labels, &teacher_clean, kl_weight](const Eigen::MatrixXd& px) {
        Eigen::MatrixXd z = student.logits_values(px);
        Eigen::MatrixXd lp = log_softmax_values(z);
        Eigen::MatrixXd lq = log_softmax_values(teacher_clean);
        Eigen::VectorXd score = per_example_ce(z, labels);
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const Eigen::ArrayXd p = lp.row(i).array().exp();
            score(i) += kl_weight * (p * (lp.row(i).array() - lq.row(i).array())).sum();
        }
        return score;
    };
    return detail::pgd_core(obj, x, budget, seed);
}

// Adaptive attack jointly maximizing CE on both the student and the
// teacher; teacher logits are recomputed on the perturbed input each step.
inline AdversarialBatch ja_attack(const ImageClassifier& student, const ImageClassifier& teacher,
                                  const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                  const AttackBudget& budget, double student_weight,
                                  double teacher_weight, std::uint64_t seed = 0) {
    if (student_weight < 0.0 || teacher_weight < 0.0)
        throw config_error("ja_attack: weights must be >= 0");
    if (teacher_weight == 0.0) return pgd_attack(student, x, labels, budget, seed);
    if (student_weight == 0.0) return pgd_attack(teacher, x, labels, budget, seed);
    detail::AttackObjective obj;
    obj.graph = [&, student_weight, teacher_weight](const ad::Var& px) {
        return ad::add(ad::scale(cross_entropy(student.logits(px), labels), student_weight),
                       ad::scale(cross_entropy(teacher.logits(px), labels), teacher_weight));
    };
    obj.per_example = [&, student_weight, teacher_weight](const Eigen::MatrixXd& px) {
        Eigen::VectorXd s = per_example_ce(student.logits_values(px), labels);
        Eigen::VectorXd t = per_example_ce(teacher.logits_values(px), labels);
        return (student_weight * s + teacher_weight * t).eval();
    };
    return detail::pgd_core(obj, x, budget, seed);
}

// Evaluation-strength attack: multi-restart PGD under both cross-entropy
// and CW-margin losses, keeping the per-example worst case (a successful
// attack wins outright; otherwise the highest CE loss does).
inline AdversarialBatch strong_eval_attack(const ImageClassifier& model, const Eigen::MatrixXd& x,
                                           const std::vector<int>& labels,
                                           const AttackBudget& eval_budget,
                                           std::uint64_t seed = 0) {
    if (eval_budget.restarts < 2)
        throw config_error("strong_eval_attack: restarts must be >= 2");
    AttackBudget ce_budget = eval_budget;
    ce_budget.loss_kind = LossKind::cross_entropy;
    AttackBudget cw_budget = eval_budget;
    cw_budget.loss_kind = LossKind::cw_margin;

    AdversarialBatch a = pgd_attack(model, x, labels, ce_budget, derive_seed(seed, "strong_ce"));
    AdversarialBatch b = pgd_attack(model, x, labels, cw_budget, derive_seed(seed, "strong_cw"));

    auto preds_a = argmax_rows(model.logits_values(a.images));
    auto preds_b = argmax_rows(model.logits_values(b.images));
    Eigen::VectorXd ce_a = per_example_ce(model.logits_values(a.images), labels);
    Eigen::VectorXd ce_b = per_example_ce(model.logits_values(b.images), labels);

    AdversarialBatch out = a;
    out.budget = eval_budget;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        const bool hit_a = preds_a[static_cast<std::size_t>(i)] != y;
        const bool hit_b = preds_b[static_cast<std::size_t>(i)] != y;
        const bool take_b = (hit_b && !hit_a) || (hit_a == hit_b && ce_b(i) > ce_a(i));
        if (take_b) out.images.row(i) = b.images.row(i);
    }
    return out;
}

}  // namespace apd
