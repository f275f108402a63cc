#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "apd/attack.hpp"
#include "apd/losses.hpp"

namespace {

// Plain differentiable linear model, small enough for exact oracles.
class LinearClassifier : public apd::ImageClassifier {
public:
    LinearClassifier(Eigen::MatrixXd w, Eigen::RowVectorXd b) : w_(std::move(w)), b_(1, b.size()) {
        b_.row(0) = b;
    }
    static LinearClassifier random(int dim, int classes, std::uint64_t seed, double scale = 1.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> dist(0.0, scale);
        Eigen::MatrixXd w(dim, classes);
        Eigen::RowVectorXd b(classes);
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = dist(rng);
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = dist(rng);
        return LinearClassifier(std::move(w), b);
    }
    apd::ad::Var logits(const apd::ad::Var& px) const override {
        return apd::ad::add_rowvec(apd::ad::matmul(px, apd::ad::constant(w_)),
                                   apd::ad::constant(b_));
    }
    int num_classes() const override { return static_cast<int>(w_.cols()); }
    const Eigen::MatrixXd& w() const { return w_; }

private:
    Eigen::MatrixXd w_;
    Eigen::MatrixXd b_;
};

Eigen::MatrixXd random_unit_box(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = u(rng);
    return m;
}

double ce_of(const apd::ImageClassifier& model, const Eigen::MatrixXd& x, int label) {
    return apd::per_example_ce(model.logits_values(x), {label})(0);
}

}  // namespace

TEST(Attack, OneStepMatchesClosedFormOnBinaryLinear) {
    // For a binary linear model, CE is monotone in (w1 - w0) . x when the
    // label is 0, so one full-epsilon signed step hits the optimum exactly.
    for (std::uint64_t trial = 0; trial < 25; ++trial) {
        const int dim = 2 + static_cast<int>(trial % 11);
        LinearClassifier model = LinearClassifier::random(dim, 2, 1000 + trial);
        Eigen::MatrixXd x = random_unit_box(1, dim, 2000 + trial);
        const double eps = 0.05 + 0.01 * static_cast<double>(trial % 5);
        apd::AttackBudget budget{eps, 1, 1.0, false, apd::LossKind::cross_entropy, 1};

        apd::AdversarialBatch adv = apd::pgd_attack(model, x, {0}, budget);

        Eigen::VectorXd dir = model.w().col(1) - model.w().col(0);
        Eigen::MatrixXd expect = x;
        for (int i = 0; i < dim; ++i)
            expect(0, i) += dir(i) > 0 ? 1.0 : (dir(i) < 0 ? -1.0 : 0.0);
        apd::detail::exact_project(expect, x, eps);
        EXPECT_EQ((adv.images - expect).cwiseAbs().maxCoeff(), 0.0) << "trial " << trial;
    }
}

TEST(Attack, StrongAttackMatchesVertexEnumerationOnBinaryLinear) {
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        const int dim = 4 + static_cast<int>(trial % 5);
        LinearClassifier model = LinearClassifier::random(dim, 2, 3000 + trial);
        Eigen::MatrixXd x = random_unit_box(1, dim, 4000 + trial);
        const double eps = 0.08;
        apd::AttackBudget budget{eps, 40, eps / 4.0, true, apd::LossKind::cross_entropy, 2};

        apd::AdversarialBatch adv = apd::pgd_attack(model, x, {0}, budget);
        apd::AdversarialBatch strong = apd::strong_eval_attack(model, x, {0}, budget, trial);

        double best = -1e300;
        for (int mask = 0; mask < (1 << dim); ++mask) {
            Eigen::MatrixXd v = x;
            for (int i = 0; i < dim; ++i) v(0, i) += (mask >> i & 1) ? eps : -eps;
            apd::detail::exact_project(v, x, eps);
            best = std::max(best, ce_of(model, v, 0));
        }
        EXPECT_NEAR(ce_of(model, adv.images, 0), best, 1e-6) << "trial " << trial;
        EXPECT_NEAR(ce_of(model, strong.images, 0), best, 1e-6) << "trial " << trial;
    }
}

TEST(Attack, ZeroEpsilonReturnsInputBitwise) {
    LinearClassifier model = LinearClassifier::random(6, 3, 1);
    Eigen::MatrixXd x = random_unit_box(4, 6, 2);
    apd::AttackBudget budget{0.0, 5, 0.1, true, apd::LossKind::cross_entropy, 2};
    apd::AdversarialBatch adv = apd::pgd_attack(model, x, {0, 1, 2, 0}, budget, 7);
    EXPECT_EQ((adv.images - x).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_TRUE(adv.satisfies_budget());
}

TEST(Attack, RandomizedBudgetSoundness) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> ueps(0.0, 0.3);
    for (int trial = 0; trial < 300; ++trial) {
        LinearClassifier model = LinearClassifier::random(8, 3, 500 + trial, 3.0);
        Eigen::MatrixXd x = random_unit_box(2, 8, 600 + trial);
        apd::AttackBudget budget{ueps(rng), 1 + trial % 4, 0.05 + 0.1 * ueps(rng),
                                 trial % 2 == 0, trial % 3 == 0 ? apd::LossKind::cw_margin
                                                                : apd::LossKind::cross_entropy,
                                 1 + trial % 2};
        apd::AdversarialBatch adv =
            apd::pgd_attack(model, x, {trial % 3, (trial + 1) % 3}, budget, trial);
        ASSERT_TRUE(adv.satisfies_budget()) << "trial " << trial << " dev " << adv.max_deviation();
    }
}

TEST(Attack, ExactProjectionProperty) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-0.5, 1.5);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int trial = 0; trial < 2000; ++trial) {
        Eigen::MatrixXd x(1, 4), a(1, 4);
        for (int i = 0; i < 4; ++i) x(0, i) = u01(rng), a(0, i) = u(rng);
        const double eps = 0.17 * u01(rng);
        apd::detail::exact_project(a, x, eps);
        EXPECT_LE((a - x).cwiseAbs().maxCoeff(), eps);
        EXPECT_GE(a.minCoeff(), 0.0);
        EXPECT_LE(a.maxCoeff(), 1.0);
    }
}

TEST(Attack, ZeroGradientMeansNoMovement) {
    // sign(0) is 0, so a model with zero weights never perturbs anything.
    LinearClassifier model(Eigen::MatrixXd::Zero(6, 3), Eigen::RowVectorXd::Zero(3));
    Eigen::MatrixXd x = random_unit_box(3, 6, 8);
    apd::AttackBudget budget{0.1, 10, 0.05, false, apd::LossKind::cross_entropy, 1};
    apd::AdversarialBatch adv = apd::pgd_attack(model, x, {0, 1, 2}, budget);
    EXPECT_EQ((adv.images - x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Attack, KlAttackWithZeroWeightEqualsPgdBitwise) {
    LinearClassifier student = LinearClassifier::random(6, 3, 11);
    LinearClassifier teacher = LinearClassifier::random(6, 3, 12);
    Eigen::MatrixXd x = random_unit_box(3, 6, 13);
    apd::AttackBudget budget{0.1, 5, 0.03, true, apd::LossKind::cross_entropy, 2};
    apd::AdversarialBatch a = apd::kl_attack(student, teacher, x, {0, 1, 2}, budget, 0.0, 21);
    apd::AdversarialBatch b = apd::pgd_attack(student, x, {0, 1, 2}, budget, 21);
    EXPECT_EQ((a.images - b.images).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Attack, JaAttackDegenerateWeightsEqualPgdBitwise) {
    LinearClassifier student = LinearClassifier::random(6, 3, 14);
    LinearClassifier teacher = LinearClassifier::random(6, 3, 15);
    Eigen::MatrixXd x = random_unit_box(3, 6, 16);
    apd::AttackBudget budget{0.1, 5, 0.03, true, apd::LossKind::cross_entropy, 1};
    apd::AdversarialBatch s_only = apd::ja_attack(student, teacher, x, {0, 1, 2}, budget, 1.0,
                                                  0.0, 31);
    apd::AdversarialBatch s_ref = apd::pgd_attack(student, x, {0, 1, 2}, budget, 31);
    EXPECT_EQ((s_only.images - s_ref.images).cwiseAbs().maxCoeff(), 0.0);
    apd::AdversarialBatch t_only = apd::ja_attack(student, teacher, x, {0, 1, 2}, budget, 0.0,
                                                  1.0, 31);
    apd::AdversarialBatch t_ref = apd::pgd_attack(teacher, x, {0, 1, 2}, budget, 31);
    EXPECT_EQ((t_only.images - t_ref.images).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Attack, AdaptiveAttacksRespectBudget) {
    LinearClassifier student = LinearClassifier::random(6, 3, 17, 2.0);
    LinearClassifier teacher = LinearClassifier::random(6, 3, 18, 2.0);
    Eigen::MatrixXd x = random_unit_box(3, 6, 19);
    apd::AttackBudget budget{0.07, 8, 0.02, true, apd::LossKind::cross_entropy, 2};
    EXPECT_TRUE(apd::kl_attack(student, teacher, x, {0, 1, 2}, budget, 1.5, 1).satisfies_budget());
    EXPECT_TRUE(
        apd::ja_attack(student, teacher, x, {0, 1, 2}, budget, 1.0, 1.0, 1).satisfies_budget());
}

TEST(Attack, SeedsControlRandomStarts) {
    LinearClassifier model = LinearClassifier::random(6, 3, 20);
    Eigen::MatrixXd x = random_unit_box(2, 6, 21);
    apd::AttackBudget budget{0.1, 1, 0.01, true, apd::LossKind::cross_entropy, 1};
    apd::AdversarialBatch a = apd::pgd_attack(model, x, {0, 1}, budget, 5);
    apd::AdversarialBatch b = apd::pgd_attack(model, x, {0, 1}, budget, 5);
    apd::AdversarialBatch c = apd::pgd_attack(model, x, {0, 1}, budget, 6);
    EXPECT_EQ((a.images - b.images).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT((a.images - c.images).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Attack, StrongSelectionRuleIsFaithful) {
    // Rebuild both branches with the same derived seeds and check that the
    // combined result prefers a misclassifying branch, else the higher CE.
    LinearClassifier model = LinearClassifier::random(8, 4, 22, 2.0);
    Eigen::MatrixXd x = random_unit_box(6, 8, 23);
    std::vector<int> labels = {0, 1, 2, 3, 0, 1};
    apd::AttackBudget budget{0.1, 10, 0.03, true, apd::LossKind::cross_entropy, 3};
    const std::uint64_t seed = 77;
    apd::AdversarialBatch strong = apd::strong_eval_attack(model, x, labels, budget, seed);

    apd::AttackBudget ce_b = budget, cw_b = budget;
    cw_b.loss_kind = apd::LossKind::cw_margin;
    apd::AdversarialBatch a =
        apd::pgd_attack(model, x, labels, ce_b, apd::derive_seed(seed, "strong_ce"));
    apd::AdversarialBatch b =
        apd::pgd_attack(model, x, labels, cw_b, apd::derive_seed(seed, "strong_cw"));
    auto pa = apd::argmax_rows(model.logits_values(a.images));
    auto pb = apd::argmax_rows(model.logits_values(b.images));
    Eigen::VectorXd ca = apd::per_example_ce(model.logits_values(a.images), labels);
    Eigen::VectorXd cb = apd::per_example_ce(model.logits_values(b.images), labels);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        const bool hit_a = pa[static_cast<std::size_t>(i)] != y;
        const bool hit_b = pb[static_cast<std::size_t>(i)] != y;
        const bool take_b = (hit_b && !hit_a) || (hit_a == hit_b && cb(i) > ca(i));
        const Eigen::RowVectorXd& want = take_b ? b.images.row(i) : a.images.row(i);
        EXPECT_EQ((strong.images.row(i) - want).cwiseAbs().maxCoeff(), 0.0) << "row " << i;
    }
}

TEST(Attack, ValidationErrors) {
    LinearClassifier model = LinearClassifier::random(4, 2, 30);
    Eigen::MatrixXd x = random_unit_box(1, 4, 31);
    apd::AttackBudget bad_eps{-0.1, 1, 0.1, false, apd::LossKind::cross_entropy, 1};
    EXPECT_THROW(apd::pgd_attack(model, x, {0}, bad_eps), apd::config_error);
    apd::AttackBudget ok{0.1, 1, 0.1, false, apd::LossKind::cross_entropy, 1};
    EXPECT_THROW(apd::pgd_attack(model, x, {5}, ok), apd::input_error);
    EXPECT_THROW(apd::pgd_attack(model, x, {0, 1}, ok), apd::input_error);
    Eigen::MatrixXd out_of_range = x;
    out_of_range(0, 0) = 1.5;
    EXPECT_THROW(apd::pgd_attack(model, out_of_range, {0}, ok), apd::input_error);
    EXPECT_THROW(apd::strong_eval_attack(model, x, {0}, ok), apd::config_error);  // restarts < 2
    EXPECT_THROW(apd::kl_attack(model, model, x, {0}, ok, -1.0), apd::config_error);
}

TEST(Attack, NonFiniteLossRaisesAttackError) {
    Eigen::MatrixXd w(4, 2);
    w.setConstant(std::numeric_limits<double>::quiet_NaN());
    LinearClassifier model(w, Eigen::RowVectorXd::Zero(2));
    Eigen::MatrixXd x = random_unit_box(1, 4, 32);
    apd::AttackBudget budget{0.1, 2, 0.05, false, apd::LossKind::cross_entropy, 1};
    EXPECT_THROW(apd::pgd_attack(model, x, {0}, budget), apd::attack_error);
}
