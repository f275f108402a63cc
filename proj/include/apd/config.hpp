#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "apd/attack.hpp"
#include "apd/data.hpp"
#include "apd/errors.hpp"
#include "apd/eval.hpp"
#include "apd/hash.hpp"
#include "apd/model.hpp"
#include "apd/trainer.hpp"

namespace apd {

namespace detail {

inline int edit_distance(const std::string& a, const std::string& b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1,
                               prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline void check_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                       const std::string& path) {
    if (!obj.is_object()) throw config_error("config section '" + path + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) != allowed.end()) continue;
        std::string best;
        int best_d = 1 << 20;
        for (const auto& a : allowed) {
            const int d = edit_distance(key, a);
            if (d < best_d) best_d = d, best = a;
        }
        std::string msg = "unknown key '" + (path.empty() ? key : path + "." + key) + "'";
        if (best_d <= 3) msg += " (did you mean '" + best + "'?)";
        throw config_error(msg);
    }
}

// Numbers may be given as JSON numbers, decimal strings, or fraction
// strings like "1/255" (the attack-budget convention).
inline double parse_real(const nlohmann::json& v, const std::string& path) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        try {
            const auto slash = s.find('/');
            if (slash != std::string::npos) {
                const double num = std::stod(s.substr(0, slash));
                const double den = std::stod(s.substr(slash + 1));
                if (den == 0.0) throw config_error(path + ": division by zero");
                return num / den;
            }
            return std::stod(s);
        } catch (const std::exception&) {
            throw config_error(path + ": cannot parse number '" + s + "'");
        }
    }
    throw config_error(path + ": expected a number or fraction string");
}

template <typename T>
inline T get_or(const nlohmann::json& obj, const std::string& key, const T& fallback) {
    if (!obj.contains(key)) return fallback;
    return obj.at(key).get<T>();
}

inline double real_or(const nlohmann::json& obj, const std::string& key, double fallback,
                      const std::string& path) {
    if (!obj.contains(key)) return fallback;
    return parse_real(obj.at(key), path + "." + key);
}

inline AttackBudget budget_from_json(const nlohmann::json& j, const AttackBudget& defaults,
                                     const std::string& path) {
    check_keys(j, {"epsilon", "steps", "step_size", "random_start", "loss_kind", "restarts"},
               path);
    AttackBudget b = defaults;
    b.epsilon = real_or(j, "epsilon", b.epsilon, path);
    b.steps = get_or(j, "steps", b.steps);
    b.step_size = real_or(j, "step_size", b.step_size, path);
    b.random_start = get_or(j, "random_start", b.random_start);
    b.restarts = get_or(j, "restarts", b.restarts);
    if (j.contains("loss_kind")) {
        const std::string k = j.at("loss_kind").get<std::string>();
        if (k == "cross_entropy")
            b.loss_kind = LossKind::cross_entropy;
        else if (k == "cw_margin")
            b.loss_kind = LossKind::cw_margin;
        else
            throw config_error(path + ".loss_kind: unknown value '" + k + "'");
    }
    return b;
}

inline nlohmann::json budget_to_json(const AttackBudget& b) {
    return {{"epsilon", b.epsilon},       {"steps", b.steps},
            {"step_size", b.step_size},   {"random_start", b.random_start},
            {"loss_kind", to_string(b.loss_kind)}, {"restarts", b.restarts}};
}

}  // namespace detail

// The single source of truth for a run: everything needed to rebuild the
// dataset, backbone, prompts, trainer and evaluation, hashed canonically.
struct ExperimentConfig {
    Method method = Method::APD;
    std::vector<std::uint64_t> seeds = {0};
    std::string output_dir = "runs";
    std::string prompt_template = "a photo of a {}";

    // dataset
    std::string dataset_name = "synthetic-shapes";
    std::string dataset_root;
    SyntheticShapesConfig shapes;

    EncoderConfig backbone;
    std::uint64_t backbone_seed = 0;
    PromptConfig prompts;
    DistillConfig train;
    EvalSettings eval;
    std::vector<std::string> eval_attacks = {"none", "pgd100"};

    void validate() const {
        if (seeds.empty()) throw config_error("seeds must be non-empty");
        if (output_dir.empty()) throw config_error("output_dir must be non-empty");
        backbone.validate();
        train.validate();
        eval.pgd100.validate();
        eval.pgd10.validate();
        eval.strong.validate();
        if (eval.batch_size < 1) throw config_error("eval.batch_size must be >= 1");
        if (eval.workers < 1) throw config_error("eval.workers must be >= 1");
        if (eval.kl_weight < 0.0) throw config_error("eval.kl_weight must be >= 0");
        if (prompts.length < 1) throw config_error("prompts.length must be >= 1");
        if (prompts.depth < 1 ||
            prompts.depth > std::min(backbone.image_layers, backbone.text_layers))
            throw config_error("prompts.depth must be in [1, min(image_layers, text_layers)]");
        if (shapes.resolution != backbone.image_resolution && dataset_name == "synthetic-shapes")
            throw config_error("dataset.resolution must match backbone.image_resolution");
        if (shapes.noise < 0.0 || shapes.noise > 1.0)
            throw config_error("dataset.noise must be in [0, 1]");
        for (const auto& a : eval_attacks)
            if (a != "none" && a != "pgd100" && a != "pgd10" && a != "strong")
                throw config_error("eval.attacks: unknown attack id '" + a + "'");
    }

    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    std::string canonical() const { return to_json().dump(); }
    std::string config_hash() const { return to_hex(fnv1a64(canonical())); }
};

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::get_or;
    using detail::real_or;
    check_keys(j, {"method", "seeds", "output_dir", "template", "dataset", "backbone", "prompts",
                   "train", "eval"},
               "");
    ExperimentConfig c;
    if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir);
    c.prompt_template = get_or<std::string>(j, "template", c.prompt_template);

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"name", "root", "resolution", "train_per_class", "test_per_class",
                       "noise", "generator_seed"},
                   "dataset");
        c.dataset_name = get_or<std::string>(d, "name", c.dataset_name);
        c.dataset_root = get_or<std::string>(d, "root", c.dataset_root);
        c.shapes.resolution = get_or(d, "resolution", c.shapes.resolution);
        c.shapes.train_per_class = get_or(d, "train_per_class", c.shapes.train_per_class);
        c.shapes.test_per_class = get_or(d, "test_per_class", c.shapes.test_per_class);
        c.shapes.noise = real_or(d, "noise", c.shapes.noise, "dataset.noise");
        c.shapes.seed = get_or(d, "generator_seed", c.shapes.seed);
    }
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        check_keys(b, {"embed_dim", "image_layers", "text_layers", "image_width", "text_width",
                       "image_heads", "text_heads", "patch_size", "image_resolution",
                       "context_length", "mlp_ratio", "logit_scale", "backbone_seed"},
                   "backbone");
        c.backbone.embed_dim = get_or(b, "embed_dim", c.backbone.embed_dim);
        c.backbone.image_layers = get_or(b, "image_layers", c.backbone.image_layers);
        c.backbone.text_layers = get_or(b, "text_layers", c.backbone.text_layers);
        c.backbone.image_width = get_or(b, "image_width", c.backbone.image_width);
        c.backbone.text_width = get_or(b, "text_width", c.backbone.text_width);
        c.backbone.image_heads = get_or(b, "image_heads", c.backbone.image_heads);
        c.backbone.text_heads = get_or(b, "text_heads", c.backbone.text_heads);
        c.backbone.patch_size = get_or(b, "patch_size", c.backbone.patch_size);
        c.backbone.image_resolution = get_or(b, "image_resolution", c.backbone.image_resolution);
        c.backbone.context_length = get_or(b, "context_length", c.backbone.context_length);
        c.backbone.mlp_ratio = get_or(b, "mlp_ratio", c.backbone.mlp_ratio);
        c.backbone.logit_scale = real_or(b, "logit_scale", c.backbone.logit_scale, "backbone");
        c.backbone_seed = get_or(b, "backbone_seed", c.backbone_seed);
    }
    if (j.contains("prompts")) {
        const auto& p = j.at("prompts");
        check_keys(p, {"depth", "length"}, "prompts");
        c.prompts.depth = get_or(p, "depth", c.prompts.depth);
        c.prompts.length = get_or(p, "length", c.prompts.length);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, {"beta", "distill_temperature", "epochs", "batch_size", "learning_rate",
                       "momentum", "shots", "kl_student_first", "teacher_post_update_logits",
                       "attack", "static_attack"},
                   "train");
        c.train.beta = real_or(t, "beta", c.train.beta, "train");
        c.train.distill_temperature =
            real_or(t, "distill_temperature", c.train.distill_temperature, "train");
        c.train.epochs = get_or(t, "epochs", c.train.epochs);
        c.train.batch_size = get_or(t, "batch_size", c.train.batch_size);
        c.train.learning_rate = real_or(t, "learning_rate", c.train.learning_rate, "train");
        c.train.momentum = real_or(t, "momentum", c.train.momentum, "train");
        c.train.shots = get_or(t, "shots", c.train.shots);
        c.train.kl_student_first = get_or(t, "kl_student_first", c.train.kl_student_first);
        c.train.teacher_post_update_logits =
            get_or(t, "teacher_post_update_logits", c.train.teacher_post_update_logits);
        if (t.contains("attack"))
            c.train.train_budget =
                detail::budget_from_json(t.at("attack"), c.train.train_budget, "train.attack");
        if (t.contains("static_attack"))
            c.train.static_budget = detail::budget_from_json(t.at("static_attack"),
                                                             c.train.static_budget,
                                                             "train.static_attack");
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, {"subset_size", "batch_size", "workers", "attacks", "attack",
                       "strong_restarts", "kl_weight", "ja_weights"},
                   "eval");
        c.eval.subset_size = get_or(e, "subset_size", c.eval.subset_size);
        c.eval.batch_size = get_or(e, "batch_size", c.eval.batch_size);
        c.eval.workers = get_or(e, "workers", c.eval.workers);
        if (e.contains("attacks"))
            c.eval_attacks = e.at("attacks").get<std::vector<std::string>>();
        if (e.contains("attack"))
            c.eval.pgd100 = detail::budget_from_json(e.at("attack"), c.eval.pgd100, "eval.attack");
        c.eval.pgd10 = c.eval.pgd100;
        c.eval.pgd10.steps = 10;
        c.eval.strong = c.eval.pgd100;
        c.eval.strong.restarts = get_or(e, "strong_restarts", 5);
        c.eval.kl_weight = real_or(e, "kl_weight", c.eval.kl_weight, "eval");
        if (e.contains("ja_weights")) {
            const auto w = e.at("ja_weights");
            if (!w.is_array() || w.size() != 2)
                throw config_error("eval.ja_weights must be a pair");
            c.eval.ja_student_weight = detail::parse_real(w[0], "eval.ja_weights[0]");
            c.eval.ja_teacher_weight = detail::parse_real(w[1], "eval.ja_weights[1]");
        }
    }
    c.validate();
    return c;
}

inline nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["method"] = to_string(method);
    j["seeds"] = seeds;
    j["output_dir"] = output_dir;
    j["template"] = prompt_template;
    j["dataset"] = {{"name", dataset_name},
                    {"root", dataset_root},
                    {"resolution", shapes.resolution},
                    {"train_per_class", shapes.train_per_class},
                    {"test_per_class", shapes.test_per_class},
                    {"noise", shapes.noise},
                    {"generator_seed", shapes.seed}};
    j["backbone"] = {{"embed_dim", backbone.embed_dim},
                     {"image_layers", backbone.image_layers},
                     {"text_layers", backbone.text_layers},
                     {"image_width", backbone.image_width},
                     {"text_width", backbone.text_width},
                     {"image_heads", backbone.image_heads},
                     {"text_heads", backbone.text_heads},
                     {"patch_size", backbone.patch_size},
                     {"image_resolution", backbone.image_resolution},
                     {"context_length", backbone.context_length},
                     {"mlp_ratio", backbone.mlp_ratio},
                     {"logit_scale", backbone.logit_scale},
                     {"backbone_seed", backbone_seed}};
    j["prompts"] = {{"depth", prompts.depth}, {"length", prompts.length}};
    j["train"] = {{"beta", train.beta},
                  {"distill_temperature", train.distill_temperature},
                  {"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"momentum", train.momentum},
                  {"shots", train.shots},
                  {"kl_student_first", train.kl_student_first},
                  {"teacher_post_update_logits", train.teacher_post_update_logits},
                  {"attack", detail::budget_to_json(train.train_budget)},
                  {"static_attack", detail::budget_to_json(train.static_budget)}};
    j["eval"] = {{"subset_size", eval.subset_size},
                 {"batch_size", eval.batch_size},
                 {"workers", eval.workers},
                 {"attacks", eval_attacks},
                 {"attack", detail::budget_to_json(eval.pgd100)},
                 {"strong_restarts", eval.strong.restarts},
                 {"kl_weight", eval.kl_weight},
                 {"ja_weights", {eval.ja_student_weight, eval.ja_teacher_weight}}};
    return j;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("malformed config " + path + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// Dotted-path override: "train.beta=0.4". Values parse as JSON when
// possible, else as strings.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw config_error("override must look like section.key=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    nlohmann::json* cur = &j;
    std::size_t at = 0;
    while (true) {
        const auto dot = path.find('.', at);
        const std::string key = path.substr(at, dot == std::string::npos ? dot : dot - at);
        if (key.empty()) throw config_error("bad override path: " + path);
        if (dot == std::string::npos) {
            (*cur)[key] = value;
            return;
        }
        cur = &(*cur)[key];
        at = dot + 1;
    }
}

}  // namespace apd
