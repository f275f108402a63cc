#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "apd/attack.hpp"
#include "apd/autodiff.hpp"
#include "apd/data.hpp"
#include "apd/errors.hpp"
#include "apd/losses.hpp"
#include "apd/model.hpp"
#include "apd/optimizer.hpp"

namespace apd {

enum class Method { APD, APD_OFFLINE, APD_T, APD_V, APT_T, APT_V, APT_VL, ADVPT };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::APD: return "apd";
        case Method::APD_OFFLINE: return "apd_offline";
        case Method::APD_T: return "apd_t";
        case Method::APD_V: return "apd_v";
        case Method::APT_T: return "apt_t";
        case Method::APT_V: return "apt_v";
        case Method::APT_VL: return "apt_vl";
        case Method::ADVPT: return "advpt";
    }
    throw config_error("unknown method");
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::APD, Method::APD_OFFLINE, Method::APD_T, Method::APD_V,
                     Method::APT_T, Method::APT_V, Method::APT_VL, Method::ADVPT})
        if (to_string(m) == s) return m;
    throw config_error("unknown method '" + s + "'");
}

inline bool is_distillation(Method m) {
    return m == Method::APD || m == Method::APD_OFFLINE || m == Method::APD_T ||
           m == Method::APD_V;
}

struct PromptConfig {
    int depth = 4;
    int length = 8;
};

struct DistillConfig {
    double beta = 0.2;
    double distill_temperature = 1.0;
    int epochs = 50;
    int batch_size = 4;
    double learning_rate = 0.0035;
    double momentum = 0.9;
    int shots = 16;
    std::uint64_t seed = 0;
    AttackBudget train_budget{1.0 / 255.0, 3, 2.0 / (3.0 * 255.0), false,
                              LossKind::cross_entropy, 1};
    // AdvPT pre-generates its static set at evaluation strength.
    AttackBudget static_budget{1.0 / 255.0, 100, 1.0 / (4.0 * 255.0), true,
                               LossKind::cross_entropy, 1};
    bool kl_student_first = true;          // student term KL(S||T), teacher term KL(T||S)
    bool teacher_post_update_logits = false;

    void validate() const {
        if (beta < 0.0) throw config_error("beta must be >= 0");
        if (distill_temperature <= 0.0) throw config_error("distill_temperature must be > 0");
        if (epochs < 1) throw config_error("epochs must be >= 1");
        if (batch_size < 1) throw config_error("batch_size must be >= 1");
        if (learning_rate <= 0.0) throw config_error("learning_rate must be > 0");
        if (momentum < 0.0 || momentum >= 1.0) throw config_error("momentum must be in [0,1)");
        if (shots < 1) throw config_error("shots must be >= 1");
        train_budget.validate();
        static_budget.validate();
    }
};

struct EpochStats {
    double teacher_loss = 0.0;  // NaN-free; 0 for methods without a teacher
    double student_loss = 0.0;
    double lr = 0.0;
};

struct TrainedDefense {
    Method method = Method::APD;
    PromptSet student_prompts;
    std::optional<PromptSet> teacher_prompts;
    std::string config_hash;
    std::vector<EpochStats> history;
    PromptConfig prompt_config;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;
};

struct TrainContext {
    const BimodalEncoder& model;
    std::vector<std::vector<int>> class_prompts;
    const Dataset& train_set;
};

namespace detail {

inline ad::Var classifier_logits(const TrainContext& ctx, const PromptSet& prompts,
                                 const Eigen::MatrixXd& x) {
    ad::Var img = ctx.model.encode_image(ad::constant(x), prompts);
    ad::Var txt = ctx.model.encode_text(ctx.class_prompts, prompts);
    return ctx.model.compute_logits(img, txt);
}

inline void check_loss(double v, const std::string& where) {
    if (!std::isfinite(v)) throw train_error("training diverged (" + where + ")");
}

}  // namespace detail

struct StepResult {
    double loss = 0.0;
    Eigen::MatrixXd logits;  // pre-update logits of the stepped model
};

// One teacher update: CE on clean images plus beta-weighted feedback KL
// against the student's (detached) adversarial logits. Only teacher
// prompts change.
inline StepResult teacher_step(const TrainContext& ctx, const PromptSet& teacher_prompts,
                               SgdMomentum& opt, const Eigen::MatrixXd& x,
                               const std::vector<int>& y,
                               const Eigen::MatrixXd& student_adv_logits,
                               const DistillConfig& cfg, double lr) {
    if (cfg.beta < 0.0) throw config_error("teacher_step: beta must be >= 0");
    ad::Var logits = detail::classifier_logits(ctx, teacher_prompts, x);
    ad::Var loss = cross_entropy(logits, y);
    if (cfg.beta > 0.0) {
        ad::Var kl = cfg.kl_student_first
                         ? kl_to_const(logits, student_adv_logits, cfg.distill_temperature)
                         : kl_from_const(student_adv_logits, logits, cfg.distill_temperature);
        loss = ad::add(loss, ad::scale(kl, cfg.beta));
    }
    detail::check_loss(loss->value(0, 0), "teacher loss");
    opt.zero_grad();
    ad::backward(loss);
    StepResult r{loss->value(0, 0), logits->value};
    opt.step(lr);
    return r;
}

// One student update: temperature-scaled KL between the student's output
// on adversarial images and the teacher's (detached) clean-image output.
// Only student prompts change.
inline StepResult student_step(const TrainContext& ctx, const PromptSet& student_prompts,
                               SgdMomentum& opt, const Eigen::MatrixXd& x_adv,
                               const Eigen::MatrixXd& teacher_clean_logits,
                               const DistillConfig& cfg, double lr) {
    ad::Var logits = detail::classifier_logits(ctx, student_prompts, x_adv);
    ad::Var loss = cfg.kl_student_first
                       ? kl_to_const(logits, teacher_clean_logits, cfg.distill_temperature)
                       : kl_from_const(teacher_clean_logits, logits, cfg.distill_temperature);
    detail::check_loss(loss->value(0, 0), "student loss");
    opt.zero_grad();
    ad::backward(loss);
    StepResult r{loss->value(0, 0), logits->value};
    opt.step(lr);
    return r;
}

namespace detail {

inline PromptSet init_prompts(const TrainContext& ctx, const PromptConfig& pcfg,
                              bool with_visual, bool with_textual, std::uint64_t seed,
                              const std::string& role) {
    return PromptSet::init(ctx.model.config(), pcfg.depth, pcfg.length, with_visual,
                           with_textual, derive_seed(seed, "prompts_" + role));
}

inline void modality_flags(Method m, bool& with_visual, bool& with_textual) {
    switch (m) {
        case Method::APD:
        case Method::APD_OFFLINE:
        case Method::APT_VL: with_visual = true, with_textual = true; break;
        case Method::APD_V:
        case Method::APT_V: with_visual = true, with_textual = false; break;
        case Method::APD_T:
        case Method::APT_T:
        case Method::ADVPT: with_visual = false, with_textual = true; break;
    }
}

}  // namespace detail

// Online adversarial prompt distillation (bimodal by default; APD_T/APD_V
// run the same loop with a unimodal prompt set). Per batch: PGD on the
// student, teacher update, then student update against the teacher's
// pre-update logits.
inline TrainedDefense train_apd(const TrainContext& ctx, const DistillConfig& cfg,
                                const PromptConfig& pcfg, Method method = Method::APD,
                                const std::string& config_hash = "") {
    cfg.validate();
    bool with_visual = true, with_textual = true;
    detail::modality_flags(method, with_visual, with_textual);

    TrainedDefense out;
    out.method = method;
    out.config_hash = config_hash;
    out.prompt_config = pcfg;
    out.seed = cfg.seed;
    PromptSet teacher = detail::init_prompts(ctx, pcfg, with_visual, with_textual, cfg.seed,
                                             "teacher");
    PromptSet student = detail::init_prompts(ctx, pcfg, with_visual, with_textual, cfg.seed,
                                             "student");
    SgdMomentum teacher_opt(teacher.trainable(), cfg.momentum);
    SgdMomentum student_opt(student.trainable(), cfg.momentum);

    FewShotSubset subset =
        sample_few_shot(ctx.train_set, cfg.shots, derive_seed(cfg.seed, "few_shot"));
    LrSchedule schedule{cfg.learning_rate, cfg.epochs,
                        static_cast<int>((subset.indices.size() + cfg.batch_size - 1) /
                                         cfg.batch_size)};

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto epoch_batches = batches(subset, cfg.batch_size, static_cast<std::uint64_t>(epoch));
        double tl = 0.0, sl = 0.0, lr = 0.0;
        for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
            const Batch& batch = epoch_batches[b];
            lr = schedule.at(epoch, static_cast<int>(b));
            PromptedClassifier student_view(ctx.model, student, ctx.class_prompts);
            AdversarialBatch adv = pgd_attack(
                student_view, batch.images, batch.labels, cfg.train_budget,
                derive_seed(cfg.seed, "train_attack",
                            static_cast<std::uint64_t>(epoch) * 1000000 + b));
            Eigen::MatrixXd student_adv_logits = student_view.logits_values(adv.images);
            StepResult t;
            try {
                t = teacher_step(ctx, teacher, teacher_opt, batch.images, batch.labels,
                                 student_adv_logits, cfg, lr);
                Eigen::MatrixXd teacher_logits =
                    cfg.teacher_post_update_logits
                        ? detail::classifier_logits(ctx, teacher.detached(), batch.images)->value
                        : t.logits;
                StepResult s =
                    student_step(ctx, student, student_opt, adv.images, teacher_logits, cfg, lr);
                tl += t.loss;
                sl += s.loss;
            } catch (const train_error& e) {
                throw train_error(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(b));
            }
        }
        out.history.push_back({tl / static_cast<double>(epoch_batches.size()),
                               sl / static_cast<double>(epoch_batches.size()), lr});
    }
    teacher.check_finite();
    student.check_finite();
    out.teacher_prompts = std::move(teacher);
    out.student_prompts = std::move(student);
    return out;
}

// Offline variant: phase 1 tunes the teacher on clean data with plain CE;
// phase 2 freezes it and distills the student against dynamic PGD examples.
inline TrainedDefense train_apd_offline(const TrainContext& ctx, const DistillConfig& cfg,
                                        const PromptConfig& pcfg,
                                        const std::string& config_hash = "") {
    cfg.validate();
    TrainedDefense out;
    out.method = Method::APD_OFFLINE;
    out.config_hash = config_hash;
    out.prompt_config = pcfg;
    out.seed = cfg.seed;
    if (cfg.beta != 0.0)
        out.warnings.push_back("apd_offline ignores beta (no teacher feedback term)");

    PromptSet teacher = detail::init_prompts(ctx, pcfg, true, true, cfg.seed, "teacher");
    PromptSet student = detail::init_prompts(ctx, pcfg, true, true, cfg.seed, "student");
    SgdMomentum teacher_opt(teacher.trainable(), cfg.momentum);
    SgdMomentum student_opt(student.trainable(), cfg.momentum);

    FewShotSubset subset =
        sample_few_shot(ctx.train_set, cfg.shots, derive_seed(cfg.seed, "few_shot"));
    LrSchedule schedule{cfg.learning_rate, cfg.epochs,
                        static_cast<int>((subset.indices.size() + cfg.batch_size - 1) /
                                         cfg.batch_size)};

    // phase 1: clean teacher tuning
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto epoch_batches = batches(subset, cfg.batch_size, static_cast<std::uint64_t>(epoch));
        for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
            const Batch& batch = epoch_batches[b];
            const double lr = schedule.at(epoch, static_cast<int>(b));
            ad::Var logits = detail::classifier_logits(ctx, teacher, batch.images);
            ad::Var loss = cross_entropy(logits, batch.labels);
            detail::check_loss(loss->value(0, 0), "offline teacher loss");
            teacher_opt.zero_grad();
            ad::backward(loss);
            teacher_opt.step(lr);
        }
    }

    // phase 2: teacher frozen, student distillation on fresh PGD examples
    const std::uint64_t teacher_hash_before = teacher.hash();
    PromptSet frozen_teacher = teacher.detached();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto epoch_batches =
            batches(subset, cfg.batch_size, static_cast<std::uint64_t>(epoch) + 7000000);
        double sl = 0.0, lr = 0.0;
        for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
            const Batch& batch = epoch_batches[b];
            lr = schedule.at(epoch, static_cast<int>(b));
            PromptedClassifier student_view(ctx.model, student, ctx.class_prompts);
            AdversarialBatch adv = pgd_attack(
                student_view, batch.images, batch.labels, cfg.train_budget,
                derive_seed(cfg.seed, "offline_attack",
                            static_cast<std::uint64_t>(epoch) * 1000000 + b));
            Eigen::MatrixXd teacher_logits =
                detail::classifier_logits(ctx, frozen_teacher, batch.images)->value;
            StepResult s =
                student_step(ctx, student, student_opt, adv.images, teacher_logits, cfg, lr);
            sl += s.loss;
        }
        out.history.push_back({0.0, sl / static_cast<double>(epoch_batches.size()), lr});
    }
    if (teacher.hash() != teacher_hash_before)
        throw train_error("apd_offline: frozen teacher was mutated in phase 2");
    out.teacher_prompts = std::move(teacher);
    out.student_prompts = std::move(student);
    return out;
}

// Single-model adversarial prompt tuning (APT-T / APT-V / APT-VL):
// dynamic PGD examples, plain adversarial CE over the selected prompts.
inline TrainedDefense train_apt(const TrainContext& ctx, const DistillConfig& cfg,
                                const PromptConfig& pcfg, Method method,
                                const std::string& config_hash = "") {
    cfg.validate();
    if (method != Method::APT_T && method != Method::APT_V && method != Method::APT_VL)
        throw config_error("train_apt: method must be apt_t, apt_v or apt_vl");
    bool with_visual = false, with_textual = false;
    detail::modality_flags(method, with_visual, with_textual);

    TrainedDefense out;
    out.method = method;
    out.config_hash = config_hash;
    out.prompt_config = pcfg;
    out.seed = cfg.seed;
    PromptSet prompts = detail::init_prompts(ctx, pcfg, with_visual, with_textual, cfg.seed,
                                             "student");
    SgdMomentum opt(prompts.trainable(), cfg.momentum);

    FewShotSubset subset =
        sample_few_shot(ctx.train_set, cfg.shots, derive_seed(cfg.seed, "few_shot"));
    LrSchedule schedule{cfg.learning_rate, cfg.epochs,
                        static_cast<int>((subset.indices.size() + cfg.batch_size - 1) /
                                         cfg.batch_size)};

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto epoch_batches = batches(subset, cfg.batch_size, static_cast<std::uint64_t>(epoch));
        double sl = 0.0, lr = 0.0;
        for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
            const Batch& batch = epoch_batches[b];
            lr = schedule.at(epoch, static_cast<int>(b));
            PromptedClassifier view(ctx.model, prompts, ctx.class_prompts);
            AdversarialBatch adv = pgd_attack(
                view, batch.images, batch.labels, cfg.train_budget,
                derive_seed(cfg.seed, "train_attack",
                            static_cast<std::uint64_t>(epoch) * 1000000 + b));
            ad::Var logits = detail::classifier_logits(ctx, prompts, adv.images);
            ad::Var loss = cross_entropy(logits, batch.labels);
            detail::check_loss(loss->value(0, 0), "apt loss");
            opt.zero_grad();
            ad::backward(loss);
            opt.step(lr);
            sl += loss->value(0, 0);
        }
        out.history.push_back({0.0, sl / static_cast<double>(epoch_batches.size()), lr});
    }
    prompts.check_finite();
    out.student_prompts = std::move(prompts);
    return out;
}

// AdvPT: one evaluation-strength adversarial set is generated up front
// against the untrained prompts, then text prompts are tuned with CE on
// those fixed images. The adversarial images are never regenerated.
inline TrainedDefense train_advpt(const TrainContext& ctx, const DistillConfig& cfg,
                                  const PromptConfig& pcfg,
                                  const std::string& config_hash = "") {
    cfg.validate();
    TrainedDefense out;
    out.method = Method::ADVPT;
    out.config_hash = config_hash;
    out.prompt_config = pcfg;
    out.seed = cfg.seed;
    PromptSet prompts = detail::init_prompts(ctx, pcfg, false, true, cfg.seed, "student");
    SgdMomentum opt(prompts.trainable(), cfg.momentum);

    FewShotSubset subset =
        sample_few_shot(ctx.train_set, cfg.shots, derive_seed(cfg.seed, "few_shot"));

    // static set, generated once with the untrained prompts
    Dataset adv_set;
    adv_set.name = ctx.train_set.name + "-advpt-static";
    adv_set.split = "train";
    adv_set.class_names = ctx.train_set.class_names;
    adv_set.images.resize(static_cast<Eigen::Index>(subset.indices.size()),
                          ctx.train_set.images.cols());
    {
        PromptedClassifier view(ctx.model, prompts, ctx.class_prompts);
        Eigen::MatrixXd clean(static_cast<Eigen::Index>(subset.indices.size()),
                              ctx.train_set.images.cols());
        std::vector<int> labels(subset.indices.size());
        for (std::size_t i = 0; i < subset.indices.size(); ++i) {
            clean.row(static_cast<Eigen::Index>(i)) = ctx.train_set.images.row(subset.indices[i]);
            labels[i] = ctx.train_set.labels[static_cast<std::size_t>(subset.indices[i])];
        }
        AdversarialBatch adv = pgd_attack(view, clean, labels, cfg.static_budget,
                                          derive_seed(cfg.seed, "advpt_static"));
        adv_set.images = adv.images;
        adv_set.labels = labels;
    }
    adv_set.validate();
    const std::uint64_t static_hash = hash_matrix(adv_set.images);

    FewShotSubset adv_subset{&adv_set, {}, cfg.shots, derive_seed(cfg.seed, "advpt_batches")};
    adv_subset.indices.resize(static_cast<std::size_t>(adv_set.size()));
    std::iota(adv_subset.indices.begin(), adv_subset.indices.end(), 0);

    LrSchedule schedule{cfg.learning_rate, cfg.epochs,
                        static_cast<int>((adv_subset.indices.size() + cfg.batch_size - 1) /
                                         cfg.batch_size)};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto epoch_batches =
            batches(adv_subset, cfg.batch_size, static_cast<std::uint64_t>(epoch));
        double sl = 0.0, lr = 0.0;
        for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
            const Batch& batch = epoch_batches[b];
            lr = schedule.at(epoch, static_cast<int>(b));
            ad::Var logits = detail::classifier_logits(ctx, prompts, batch.images);
            ad::Var loss = cross_entropy(logits, batch.labels);
            detail::check_loss(loss->value(0, 0), "advpt loss");
            opt.zero_grad();
            ad::backward(loss);
            opt.step(lr);
            sl += loss->value(0, 0);
        }
        out.history.push_back({0.0, sl / static_cast<double>(epoch_batches.size()), lr});
        if (hash_matrix(adv_set.images) != static_hash)
            throw train_error("advpt: static adversarial set changed during training");
    }
    prompts.check_finite();
    out.student_prompts = std::move(prompts);
    return out;
}

// Dispatch on method; the entry point the CLI uses.
inline TrainedDefense train_defense(const TrainContext& ctx, const DistillConfig& cfg,
                                    const PromptConfig& pcfg, Method method,
                                    const std::string& config_hash = "") {
    switch (method) {
        case Method::APD:
        case Method::APD_T:
        case Method::APD_V: return train_apd(ctx, cfg, pcfg, method, config_hash);
        case Method::APD_OFFLINE: return train_apd_offline(ctx, cfg, pcfg, config_hash);
        case Method::APT_T:
        case Method::APT_V:
        case Method::APT_VL: return train_apt(ctx, cfg, pcfg, method, config_hash);
        case Method::ADVPT: return train_advpt(ctx, cfg, pcfg, config_hash);
    }
    throw config_error("unknown method");
}

}  // namespace apd
