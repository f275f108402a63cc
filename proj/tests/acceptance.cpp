// End-to-end acceptance suite. Property checks run against exact oracles;
// behavioural checks train small prompted models on the synthetic-shapes
// dataset and compare methods on paired evaluation subsets.

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <thread>
#include <tuple>

#include "apd/attack.hpp"
#include "apd/checkpoint.hpp"
#include "apd/experiment.hpp"
#include "apd/losses.hpp"

namespace {

// ---- shared toy setup -------------------------------------------------------

apd::ExperimentConfig toy_config() {
    apd::ExperimentConfig c;
    c.backbone.embed_dim = 64;
    c.backbone.image_layers = 3;
    c.backbone.text_layers = 3;
    c.backbone.image_width = 32;
    c.backbone.text_width = 32;
    c.backbone.image_heads = 4;
    c.backbone.text_heads = 4;
    c.backbone.patch_size = 8;
    c.backbone.image_resolution = 16;
    c.backbone.context_length = 8;
    c.backbone.mlp_ratio = 2;
    c.backbone.logit_scale = 10.0;
    c.backbone_seed = 7;
    c.shapes.resolution = 16;
    c.shapes.train_per_class = 32;
    c.shapes.test_per_class = 64;
    c.shapes.noise = 0.1;
    c.shapes.seed = 7;
    c.prompts = {3, 8};
    c.train.epochs = 300;
    c.train.batch_size = 8;
    c.train.shots = 8;
    c.train.learning_rate = 0.02;
    c.train.beta = 0.1;
    c.train.distill_temperature = 0.7;
    c.train.train_budget = {4.0 / 255.0, 3, 8.0 / 765.0, false,
                            apd::LossKind::cross_entropy, 1};
    c.train.static_budget = {4.0 / 255.0, 20, 1.0 / 255.0, true,
                             apd::LossKind::cross_entropy, 1};
    c.eval.subset_size = 512;
    c.eval.batch_size = 16;
    c.eval.workers = 4;
    c.eval.pgd100 = {3.25 / 255.0, 100, 1.0 / 255.0, true, apd::LossKind::cross_entropy, 1};
    c.eval.pgd10 = c.eval.pgd100;
    c.eval.pgd10.steps = 10;
    c.eval.strong = c.eval.pgd100;
    c.eval.strong.restarts = 2;
    c.eval.kl_weight = 0.25;
    c.eval.ja_student_weight = 1.0;
    c.eval.ja_teacher_weight = 0.05;
    c.eval_attacks = {"none", "pgd100"};
    c.validate();
    return c;
}

struct LabRun {
    apd::TrainedDefense defense;
    apd::EvalReport report;
};

// Trains lazily and memoizes, so criteria share checkpoints.
class Lab {
public:
    static Lab& instance() {
        static Lab lab;
        return lab;
    }

    const apd::ExperimentConfig& config() const { return cfg_; }
    const apd::ExperimentEnv& env() const { return env_; }

    const LabRun& run(apd::Method method, double beta, std::uint64_t seed) {
        ensure_prewarmed();
        return compute(method, beta, seed);
    }

    double mean(apd::Method method, double beta, const std::string& metric) {
        double sum = 0.0;
        for (std::uint64_t seed : seeds_) {
            const LabRun& r = run(method, beta, seed);
            sum += metric == "natural" ? r.report.natural_acc
                   : metric == "sum"   ? r.report.sum_metric
                                       : r.report.robust_acc.at(metric);
        }
        return sum / static_cast<double>(seeds_.size());
    }

    const std::vector<std::uint64_t>& seeds() const { return seeds_; }

private:
    Lab() : cfg_(toy_config()), env_(apd::ExperimentEnv::build_synthetic(cfg_)) {}

    static std::string key_of(apd::Method method, double beta, std::uint64_t seed) {
        return apd::to_string(method) + "|" + std::to_string(beta) + "|" + std::to_string(seed);
    }

    const LabRun& compute(apd::Method method, double beta, std::uint64_t seed) {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            auto it = cache_.find(key_of(method, beta, seed));
            if (it != cache_.end()) return it->second;
        }
        apd::ExperimentConfig cfg = cfg_;
        cfg.method = method;
        cfg.train.beta = beta;
        LabRun r;
        r.defense = apd::run_training(env_, cfg, seed);
        r.report = apd::run_evaluation(env_, cfg, r.defense);
        std::lock_guard<std::mutex> lock(mutex_);
        std::cout << "[lab] " << apd::to_string(method) << " beta=" << beta << " seed=" << seed
                  << "  nat=" << r.report.natural_acc
                  << "  adv=" << r.report.robust_acc.at("pgd100") << "\n";
        return cache_.emplace(key_of(method, beta, seed), std::move(r)).first->second;
    }

    // Runs every (method, beta, seed) combination the suite needs across a
    // small thread pool the first time any result is requested. Each run is
    // internally deterministic, so concurrency cannot change results.
    void ensure_prewarmed() {
        std::call_once(prewarm_once_, [this] {
            struct Combo {
                apd::Method method;
                double beta;
            };
            const double beta = cfg_.train.beta;
            std::vector<Combo> combos = {{apd::Method::APD, 0.0},         {apd::Method::APD, 0.1},
                                         {apd::Method::APD, 0.2},         {apd::Method::APD, 0.4},
                                         {apd::Method::APD, 1.0},         {apd::Method::APD_V, beta},
                                         {apd::Method::APD_T, beta},      {apd::Method::APT_VL, beta},
                                         {apd::Method::APD_OFFLINE, 0.0}};
            std::vector<std::tuple<apd::Method, double, std::uint64_t>> jobs;
            for (const auto& c : combos)
                for (std::uint64_t seed : seeds_) jobs.emplace_back(c.method, c.beta, seed);
            std::atomic<std::size_t> next{0};
            const unsigned n =
                std::max(1u, std::min(4u, std::thread::hardware_concurrency()));
            std::vector<std::thread> pool;
            for (unsigned t = 0; t < n; ++t)
                pool.emplace_back([&] {
                    for (std::size_t i = next.fetch_add(1); i < jobs.size();
                         i = next.fetch_add(1)) {
                        auto [m, b, s] = jobs[i];
                        compute(m, b, s);
                    }
                });
            for (auto& th : pool) th.join();
        });
    }

    apd::ExperimentConfig cfg_;
    apd::ExperimentEnv env_;
    std::vector<std::uint64_t> seeds_ = {0, 1, 2};
    std::map<std::string, LabRun> cache_;
    std::mutex mutex_;
    std::once_flag prewarm_once_;
};

// ---- linear helpers for attack oracles ---------------------------------------

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

}  // namespace

// 10,000 randomized attack invocations, every result exactly inside the
// epsilon ball and the pixel box.
TEST(Acceptance, BudgetSoundnessTenThousandAttacks) {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> ueps(0.0, 0.25);
    std::uniform_real_distribution<double> uw(0.2, 2.0);
    int count = 0;
    for (int trial = 0; trial < 2500; ++trial) {
        const int dim = 4 + trial % 7;
        const int classes = 2 + trial % 3;
        LinearClassifier student = LinearClassifier::random(dim, classes, 10000 + trial, uw(rng));
        LinearClassifier teacher = LinearClassifier::random(dim, classes, 20000 + trial, uw(rng));
        Eigen::MatrixXd x = random_unit_box(2, dim, 30000 + trial);
        std::vector<int> y = {trial % classes, (trial + 1) % classes};
        apd::AttackBudget budget{ueps(rng), 1 + trial % 3, 0.02 + 0.1 * ueps(rng),
                                 trial % 2 == 0,
                                 trial % 5 == 0 ? apd::LossKind::cw_margin
                                                : apd::LossKind::cross_entropy,
                                 1 + trial % 2};
        apd::AdversarialBatch a = apd::pgd_attack(student, x, y, budget, trial);
        apd::AdversarialBatch b = apd::kl_attack(student, teacher, x, y, budget, 0.7, trial);
        apd::AdversarialBatch c = apd::ja_attack(student, teacher, x, y, budget, 1.0, 0.5, trial);
        apd::AttackBudget strong = budget;
        strong.restarts = 2;
        apd::AdversarialBatch d = apd::strong_eval_attack(student, x, y, strong, trial);
        for (const auto* adv : {&a, &b, &c, &d}) {
            ASSERT_TRUE(adv->satisfies_budget())
                << "trial " << trial << " deviation " << adv->max_deviation() << " eps "
                << adv->budget.epsilon;
            ++count;
        }
    }
    EXPECT_EQ(count, 10000);
}

// Binary linear models: one full-epsilon signed step must match the
// closed-form optimum, and the multi-restart attack must match exhaustive
// corner enumeration of the feasible box.
TEST(Acceptance, LinearModelAttackOracles) {
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        const int dim = 2 + static_cast<int>(trial % 11);  // up to 12
        LinearClassifier model = LinearClassifier::random(dim, 2, 40000 + trial);
        Eigen::MatrixXd x = random_unit_box(1, dim, 50000 + trial);
        const double eps = 0.03 + 0.012 * static_cast<double>(trial % 10);

        // closed form for one signed step of size >= eps
        apd::AttackBudget one{eps, 1, 1.0, false, apd::LossKind::cross_entropy, 1};
        apd::AdversarialBatch adv = apd::pgd_attack(model, x, {0}, one);
        Eigen::VectorXd dir = model.w().col(1) - model.w().col(0);
        Eigen::MatrixXd expect = x;
        for (int i = 0; i < dim; ++i)
            expect(0, i) += dir(i) > 0 ? 1.0 : (dir(i) < 0 ? -1.0 : 0.0);
        apd::detail::exact_project(expect, x, eps);
        ASSERT_LE((adv.images - expect).cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;

        // exhaustive corner enumeration vs the evaluation-strength attack
        double best = -1e300;
        for (int mask = 0; mask < (1 << dim); ++mask) {
            Eigen::MatrixXd v = x;
            for (int i = 0; i < dim; ++i) v(0, i) += (mask >> i & 1) ? eps : -eps;
            apd::detail::exact_project(v, x, eps);
            best = std::max(best, apd::per_example_ce(model.logits_values(v), {0})(0));
        }
        apd::AttackBudget strong{eps, 30, eps / 4.0, true, apd::LossKind::cross_entropy, 2};
        apd::AdversarialBatch sb = apd::strong_eval_attack(model, x, {0}, strong, trial);
        const double got = apd::per_example_ce(model.logits_values(sb.images), {0})(0);
        ASSERT_NEAR(got, best, 1e-6) << "trial " << trial;
    }
}

// Analytic gradients of the adversarial CE objective, the combined teacher
// loss, and the distillation KL match central finite differences on a
// micro model, for both prompt tokens and pixels.
TEST(Acceptance, GradientsMatchFiniteDifferences) {
    apd::EncoderConfig cfg;
    cfg.embed_dim = 8;
    cfg.image_layers = 2;
    cfg.text_layers = 2;
    cfg.image_width = 8;
    cfg.text_width = 8;
    cfg.image_heads = 2;
    cfg.text_heads = 2;
    cfg.patch_size = 4;
    cfg.image_resolution = 8;
    cfg.context_length = 8;
    cfg.mlp_ratio = 2;
    cfg.logit_scale = 20.0;

    apd::SyntheticShapesConfig shapes;
    shapes.resolution = 8;
    shapes.train_per_class = 1;
    shapes.test_per_class = 1;
    apd::Dataset data = apd::load_synthetic_shapes(shapes).first;
    apd::Tokenizer tok = apd::Tokenizer::build("a photo of a {}", data.class_names);
    apd::BimodalEncoder model(cfg, tok.vocab_size(), 3);
    auto class_prompts = apd::build_class_prompts(data.class_names, tok, cfg.context_length);

    Eigen::MatrixXd images = data.images.topRows(2);
    std::vector<int> labels = {data.labels[0], data.labels[1]};
    Eigen::MatrixXd teacher_logits = Eigen::MatrixXd::Random(2, 8) * 2.0;

    apd::PromptSet prompts = apd::PromptSet::init(cfg, 2, 2, true, true, 11);
    apd::ad::Var pixels = apd::ad::leaf(images);
    auto build = [&](int which) {
        apd::ad::Var img = model.encode_image(pixels, prompts);
        apd::ad::Var txt = model.encode_text(class_prompts, prompts);
        apd::ad::Var logits = model.compute_logits(img, txt);
        if (which == 0) return apd::cross_entropy(logits, labels);
        if (which == 1)
            return apd::ad::add(apd::cross_entropy(logits, labels),
                                apd::ad::scale(apd::kl_to_const(logits, teacher_logits), 0.2));
        return apd::kl_to_const(logits, teacher_logits, 1.5);
    };

    const double h = 1e-5;
    for (int which = 0; which < 3; ++which) {
        for (auto& v : prompts.trainable()) v->grad.resize(0, 0);
        pixels->grad.resize(0, 0);
        apd::ad::backward(build(which));
        auto check_entry = [&](apd::ad::Var leaf_var, Eigen::Index i) {
            const double analytic = leaf_var->grad_or_zero()(i);
            const double orig = leaf_var->value(i);
            leaf_var->value(i) = orig + h;
            const double fp = build(which)->value(0, 0);
            leaf_var->value(i) = orig - h;
            const double fm = build(which)->value(0, 0);
            leaf_var->value(i) = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double rel = std::abs(analytic - numeric) /
                               std::max(1e-6, std::abs(analytic) + std::abs(numeric));
            ASSERT_LE(rel, 1e-4) << "loss " << which << " entry " << i;
        };
        for (auto& v : prompts.trainable())
            for (Eigen::Index i = 0; i < v->value.size(); ++i) check_entry(v, i);
        for (Eigen::Index i = 0; i < pixels->value.size(); i += 7) check_entry(pixels, i);
    }
}

// KL term is non-negative, vanishes exactly when the two logit rows induce
// the same distribution, and the beta = 0 teacher update is bitwise plain
// CE tuning.
TEST(Acceptance, DistillationLossProperties) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> dist(0.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::MatrixXd p(2, 5), q(2, 5);
        for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = dist(rng), q(i) = dist(rng);
        const double tau = 0.5 + 0.1 * (trial % 20);
        EXPECT_GE(apd::kl_to_const(apd::ad::constant(p), q, tau)->value(0, 0), 0.0);
        EXPECT_GE(apd::kl_from_const(p, apd::ad::constant(q), tau)->value(0, 0), 0.0);
        EXPECT_LE(apd::kl_to_const(apd::ad::constant(p), p, tau)->value(0, 0), 1e-9);
        // constant logit shifts induce identical distributions
        Eigen::MatrixXd shifted = p.array() + static_cast<double>(trial % 9);
        EXPECT_LE(apd::kl_to_const(apd::ad::constant(p), shifted, tau)->value(0, 0), 1e-9);
    }

    Lab& lab = Lab::instance();
    apd::ExperimentConfig cfg = lab.config();
    auto batch = apd::batches(apd::sample_few_shot(lab.env().train_set(), 2, 3), 16, 0)[0];
    apd::TrainContext ctx = lab.env().train_context();
    apd::DistillConfig train = cfg.train;
    train.beta = 0.0;
    Eigen::MatrixXd dummy = Eigen::MatrixXd::Zero(batch.images.rows(), 8);

    apd::PromptSet a = apd::PromptSet::init(cfg.backbone, 2, 4, true, true, 5);
    apd::PromptSet b = apd::PromptSet::init(cfg.backbone, 2, 4, true, true, 5);
    apd::SgdMomentum oa(a.trainable(), train.momentum);
    apd::teacher_step(ctx, a, oa, batch.images, batch.labels, dummy, train, 0.01);
    apd::SgdMomentum ob(b.trainable(), train.momentum);
    apd::ad::Var loss =
        apd::cross_entropy(apd::detail::classifier_logits(ctx, b, batch.images), batch.labels);
    ob.zero_grad();
    apd::ad::backward(loss);
    ob.step(0.01);
    EXPECT_EQ(a.hash(), b.hash());
}

// Visual prompting is what buys robustness: the text-only variant collapses
// under attack while staying competitive on clean data.
TEST(Acceptance, TextOnlyDefenseFails) {
    Lab& lab = Lab::instance();
    const double beta = lab.config().train.beta;
    const double v_adv = lab.mean(apd::Method::APD_V, beta, "pgd100");
    const double t_adv = lab.mean(apd::Method::APD_T, beta, "pgd100");
    const double v_nat = lab.mean(apd::Method::APD_V, beta, "natural");
    const double t_nat = lab.mean(apd::Method::APD_T, beta, "natural");
    std::cout << "[trend] visual-prompt robust " << v_adv << " vs text-prompt robust " << t_adv
              << "; natural " << v_nat << " vs " << t_nat << "\n";
    EXPECT_GE(v_adv, t_adv + 20.0);
    EXPECT_GE(t_nat, v_nat - 5.0);
}

// Teacher-student training beats single-model adversarial prompt tuning on
// the combined natural + robust score.
TEST(Acceptance, DistillationHelps) {
    Lab& lab = Lab::instance();
    const double beta = lab.config().train.beta;
    const double apd_sum = lab.mean(apd::Method::APD, beta, "sum");
    const double apt_sum = lab.mean(apd::Method::APT_VL, beta, "sum");
    std::cout << "[trend] distilled sum " << apd_sum << " vs tuned sum " << apt_sum << "\n";
    EXPECT_GT(apd_sum, apt_sum + 1.0);
}

// The online teacher (updated alongside the student) is at least as good
// as distilling from a clean pre-tuned frozen teacher.
TEST(Acceptance, OnlineBeatsOffline) {
    Lab& lab = Lab::instance();
    const double online = lab.mean(apd::Method::APD, lab.config().train.beta, "sum");
    const double offline = lab.mean(apd::Method::APD_OFFLINE, 0.0, "sum");
    std::cout << "[trend] online sum " << online << " vs offline sum " << offline << "\n";
    EXPECT_GE(online, offline);
}

// The teacher-feedback weight trades robustness for clean accuracy, with
// the best robustness at an interior value.
TEST(Acceptance, BetaTradeoff) {
    Lab& lab = Lab::instance();
    const std::vector<double> betas = {0.0, 0.1, 0.2, 0.4, 1.0};
    std::vector<double> nat, adv;
    for (double beta : betas) {
        nat.push_back(lab.mean(apd::Method::APD, beta, "natural"));
        adv.push_back(lab.mean(apd::Method::APD, beta, "pgd100"));
        std::cout << "[trend] beta " << beta << "  nat " << nat.back() << "  adv " << adv.back()
                  << "\n";
    }
    EXPECT_LE(nat.back(), nat.front());
    std::size_t best = 0;
    for (std::size_t i = 1; i < adv.size(); ++i)
        if (adv[i] > adv[best]) best = i;
    EXPECT_GT(best, 0u);
    EXPECT_LT(best, adv.size() - 1);
}

// Attacks that exploit the teacher do not meaningfully beat plain PGD-100.
TEST(Acceptance, AdaptiveAttacksAreNotStronger) {
    Lab& lab = Lab::instance();
    double pgd = 0.0, kl = 0.0, ja = 0.0;
    for (std::uint64_t seed : lab.seeds()) {
        const LabRun& r = lab.run(apd::Method::APD, lab.config().train.beta, seed);
        pgd += r.report.robust_acc.at("pgd100");
        apd::EvalReport adaptive = apd::evaluate_adaptive(
            lab.env().model(), r.defense, lab.env().test_set(), lab.env().class_prompts(),
            lab.config().eval);
        kl += adaptive.robust_acc.at("kl_attack");
        ja += adaptive.robust_acc.at("ja_attack");
    }
    const double n = static_cast<double>(lab.seeds().size());
    pgd /= n, kl /= n, ja /= n;
    std::cout << "[trend] pgd100 " << pgd << "  kl-attack " << kl << "  ja-attack " << ja << "\n";
    EXPECT_LE(std::abs(kl - pgd), 5.0);
    EXPECT_LE(std::abs(ja - pgd), 5.0);
}

// Identical config and seed: identical prompts, identical reports.
TEST(Acceptance, EndToEndDeterminism) {
    Lab& lab = Lab::instance();
    apd::ExperimentConfig cfg = lab.config();
    apd::TrainedDefense a = apd::run_training(lab.env(), cfg, 0);
    apd::TrainedDefense b = apd::run_training(lab.env(), cfg, 0);
    EXPECT_EQ(a.student_prompts.hash(), b.student_prompts.hash());
    EXPECT_EQ(a.teacher_prompts->hash(), b.teacher_prompts->hash());
    apd::EvalReport ra = apd::run_evaluation(lab.env(), cfg, a);
    apd::EvalReport rb = apd::run_evaluation(lab.env(), cfg, b);
    EXPECT_EQ(ra.natural_acc, rb.natural_acc);
    EXPECT_EQ(ra.robust_acc, rb.robust_acc);
    EXPECT_EQ(ra.sum_metric, rb.sum_metric);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].teacher_loss, b.history[i].teacher_loss);
        EXPECT_EQ(a.history[i].student_loss, b.history[i].student_loss);
    }
}

// Every training method leaves the backbone bit-identical and touches only
// its own prompt parameters.
TEST(Acceptance, BackboneStaysFrozenUnderEveryTrainer) {
    Lab& lab = Lab::instance();
    apd::ExperimentConfig cfg = lab.config();
    cfg.train.epochs = 2;
    apd::TrainContext ctx = lab.env().train_context();
    for (apd::Method m : {apd::Method::APD, apd::Method::APD_OFFLINE, apd::Method::APD_T,
                          apd::Method::APD_V, apd::Method::APT_T, apd::Method::APT_V,
                          apd::Method::APT_VL, apd::Method::ADVPT}) {
        const std::uint64_t before = lab.env().model().parameter_hash();
        apd::DistillConfig train = cfg.train;
        if (m == apd::Method::APD_OFFLINE) train.beta = 0.0;
        apd::TrainedDefense d = apd::train_defense(ctx, train, cfg.prompts, m);
        EXPECT_EQ(lab.env().model().parameter_hash(), before) << apd::to_string(m);
        EXPECT_EQ(d.teacher_prompts.has_value(), apd::is_distillation(m)) << apd::to_string(m);
        if (d.teacher_prompts)
            EXPECT_NE(d.teacher_prompts->hash(), d.student_prompts.hash()) << apd::to_string(m);
        d.student_prompts.check_finite();
    }
}
