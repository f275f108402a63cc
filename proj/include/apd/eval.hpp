#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cstdint>
#include <json.hpp>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "apd/attack.hpp"
#include "apd/data.hpp"
#include "apd/errors.hpp"
#include "apd/model.hpp"
#include "apd/trainer.hpp"

namespace apd {

struct EvalSettings {
    int subset_size = 512;  // <= 0 evaluates the full test set
    std::uint64_t subset_seed = 0;
    int batch_size = 32;
    int workers = 1;
    AttackBudget pgd100{1.0 / 255.0, 100, 1.0 / (4.0 * 255.0), true, LossKind::cross_entropy, 1};
    AttackBudget pgd10{1.0 / 255.0, 10, 1.0 / (4.0 * 255.0), true, LossKind::cross_entropy, 1};
    AttackBudget strong{1.0 / 255.0, 100, 1.0 / (4.0 * 255.0), true, LossKind::cross_entropy, 5};
    double kl_weight = 1.0;
    double ja_student_weight = 1.0;
    double ja_teacher_weight = 1.0;
};

struct EvalReport {
    std::string method;
    std::string dataset;
    std::uint64_t seed = 0;
    double natural_acc = 0.0;                  // percent
    std::map<std::string, double> robust_acc;  // attack id -> percent
    double sum_metric = 0.0;                   // natural + primary-attack robust
    std::string config_hash;
    double runtime_seconds = 0.0;
    bool subset_used = false;
    int subset_size = 0;
};

inline nlohmann::json report_to_json(const EvalReport& r) {
    return {{"method", r.method},
            {"dataset", r.dataset},
            {"seed", r.seed},
            {"natural_acc", r.natural_acc},
            {"robust_acc", r.robust_acc},
            {"sum_metric", r.sum_metric},
            {"config_hash", r.config_hash},
            {"runtime_seconds", r.runtime_seconds},
            {"subset_used", r.subset_used},
            {"subset_size", r.subset_size}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.method = j.at("method").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.natural_acc = j.at("natural_acc").get<double>();
    r.robust_acc = j.at("robust_acc").get<std::map<std::string, double>>();
    r.sum_metric = j.at("sum_metric").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    r.subset_used = j.at("subset_used").get<bool>();
    r.subset_size = j.at("subset_size").get<int>();
    return r;
}

namespace detail {

struct EvalBatch {
    Eigen::MatrixXd images;
    std::vector<int> labels;
};

inline std::vector<EvalBatch> make_eval_batches(const Dataset& test_set,
                                                const std::vector<Eigen::Index>& indices,
                                                int batch_size) {
    std::vector<EvalBatch> out;
    for (std::size_t at = 0; at < indices.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t n =
            std::min<std::size_t>(static_cast<std::size_t>(batch_size), indices.size() - at);
        EvalBatch b;
        b.images.resize(static_cast<Eigen::Index>(n), test_set.images.cols());
        b.labels.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            b.images.row(static_cast<Eigen::Index>(k)) = test_set.images.row(indices[at + k]);
            b.labels[k] = test_set.labels[static_cast<std::size_t>(indices[at + k])];
        }
        out.push_back(std::move(b));
    }
    return out;
}

// Batches are independent, so they shard across workers; per-batch seeds
// are fixed by batch index, keeping results identical at any worker count.
template <typename Fn>
inline double sharded_accuracy(const std::vector<EvalBatch>& eval_batches, int workers, Fn&& fn) {
    std::vector<int> correct(eval_batches.size(), 0);
    auto run = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < eval_batches.size(); i += stride)
            correct[i] = fn(eval_batches[i], i);
    };
    if (workers <= 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back(run, static_cast<std::size_t>(w), static_cast<std::size_t>(workers));
        for (auto& t : pool) t.join();
    }
    long total = 0, hits = 0;
    for (std::size_t i = 0; i < eval_batches.size(); ++i) {
        total += static_cast<long>(eval_batches[i].labels.size());
        hits += correct[i];
    }
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

inline int count_correct(const std::vector<int>& preds, const std::vector<int>& labels) {
    int c = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++c;
    return c;
}

}  // namespace detail

// Natural accuracy plus robust accuracy per requested attack id. The same
// seeded stratified subset (and the same attack seeds) are used for every
// method, so comparisons are paired.
inline EvalReport evaluate(const BimodalEncoder& model, const TrainedDefense& defense,
                           const Dataset& test_set,
                           const std::vector<std::vector<int>>& class_prompts,
                           const std::vector<std::string>& attacks, const EvalSettings& settings) {
    const auto t0 = std::chrono::steady_clock::now();
    PromptedClassifier clf(model, defense.student_prompts, class_prompts);

    auto indices = stratified_subset(test_set, settings.subset_size, settings.subset_seed);
    auto eval_batches = detail::make_eval_batches(test_set, indices, settings.batch_size);

    EvalReport r;
    r.method = to_string(defense.method);
    r.dataset = test_set.name;
    r.seed = defense.seed;
    r.config_hash = defense.config_hash;
    r.subset_used = static_cast<Eigen::Index>(indices.size()) < test_set.size();
    r.subset_size = static_cast<int>(indices.size());

    r.natural_acc = detail::sharded_accuracy(
        eval_batches, settings.workers, [&](const detail::EvalBatch& b, std::size_t) {
            return detail::count_correct(argmax_rows(clf.logits_values(b.images)), b.labels);
        });

    for (const auto& id : attacks) {
        double acc = 0.0;
        if (id == "none") {
            acc = r.natural_acc;
        } else if (id == "pgd100" || id == "pgd10" || id == "strong") {
            const AttackBudget& budget = id == "pgd100" ? settings.pgd100
                                         : id == "pgd10" ? settings.pgd10
                                                         : settings.strong;
            acc = detail::sharded_accuracy(
                eval_batches, settings.workers, [&](const detail::EvalBatch& b, std::size_t i) {
                    const std::uint64_t seed =
                        derive_seed(settings.subset_seed, "eval_" + id, i);
                    AdversarialBatch adv =
                        id == "strong"
                            ? strong_eval_attack(clf, b.images, b.labels, budget, seed)
                            : pgd_attack(clf, b.images, b.labels, budget, seed);
                    return detail::count_correct(argmax_rows(clf.logits_values(adv.images)),
                                                 b.labels);
                });
        } else {
            throw eval_error("unknown attack id '" + id + "' (use evaluate_adaptive for kl/ja)");
        }
        r.robust_acc[id] = acc;
    }
    if (r.robust_acc.count("pgd100"))
        r.sum_metric = r.natural_acc + r.robust_acc.at("pgd100");
    else
        r.sum_metric = r.natural_acc;
    r.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// Adaptive attacks that exploit the trained teacher. Refuses checkpoints
// without teacher prompts instead of silently falling back.
inline EvalReport evaluate_adaptive(const BimodalEncoder& model, const TrainedDefense& defense,
                                    const Dataset& test_set,
                                    const std::vector<std::vector<int>>& class_prompts,
                                    const EvalSettings& settings) {
    if (!defense.teacher_prompts)
        throw eval_error("evaluate_adaptive: checkpoint has no teacher prompts (method " +
                         to_string(defense.method) + ")");
    const auto t0 = std::chrono::steady_clock::now();
    PromptedClassifier student(model, defense.student_prompts, class_prompts);
    PromptedClassifier teacher(model, *defense.teacher_prompts, class_prompts);

    auto indices = stratified_subset(test_set, settings.subset_size, settings.subset_seed);
    auto eval_batches = detail::make_eval_batches(test_set, indices, settings.batch_size);

    EvalReport r;
    r.method = to_string(defense.method);
    r.dataset = test_set.name;
    r.seed = defense.seed;
    r.config_hash = defense.config_hash;
    r.subset_used = static_cast<Eigen::Index>(indices.size()) < test_set.size();
    r.subset_size = static_cast<int>(indices.size());
    r.natural_acc = detail::sharded_accuracy(
        eval_batches, settings.workers, [&](const detail::EvalBatch& b, std::size_t) {
            return detail::count_correct(argmax_rows(student.logits_values(b.images)), b.labels);
        });

    r.robust_acc["kl_attack"] = detail::sharded_accuracy(
        eval_batches, settings.workers, [&](const detail::EvalBatch& b, std::size_t i) {
            AdversarialBatch adv =
                kl_attack(student, teacher, b.images, b.labels, settings.pgd100,
                          settings.kl_weight, derive_seed(settings.subset_seed, "eval_kl", i));
            return detail::count_correct(argmax_rows(student.logits_values(adv.images)), b.labels);
        });
    r.robust_acc["ja_attack"] = detail::sharded_accuracy(
        eval_batches, settings.workers, [&](const detail::EvalBatch& b, std::size_t i) {
            AdversarialBatch adv = ja_attack(
                student, teacher, b.images, b.labels, settings.pgd100, settings.ja_student_weight,
                settings.ja_teacher_weight, derive_seed(settings.subset_seed, "eval_ja", i));
            return detail::count_correct(argmax_rows(student.logits_values(adv.images)), b.labels);
        });
    r.sum_metric = r.natural_acc;
    r.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace apd
