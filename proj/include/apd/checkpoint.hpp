#pragma once

#include <fstream>
#include <json.hpp>
#include <map>
#include <string>

#include "apd/errors.hpp"
#include "apd/hash.hpp"
#include "apd/trainer.hpp"

namespace apd {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    TrainedDefense defense;
    std::uint64_t architecture_hash = 0;
    std::map<std::string, double> metrics;
};

namespace detail {

inline nlohmann::json prompt_list_to_json(const std::vector<ad::Var>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& v : list)
        arr.push_back({{"rows", v->value.rows()},
                       {"cols", v->value.cols()},
                       {"data", matrix_to_hex(v->value)}});
    return arr;
}

inline std::vector<ad::Var> prompt_list_from_json(const nlohmann::json& arr) {
    std::vector<ad::Var> out;
    for (const auto& e : arr)
        out.push_back(ad::leaf(matrix_from_hex(e.at("data").get<std::string>(),
                                               e.at("rows").get<Eigen::Index>(),
                                               e.at("cols").get<Eigen::Index>())));
    return out;
}

inline nlohmann::json prompts_to_json(const PromptSet& p) {
    return {{"depth", p.depth},
            {"length", p.length},
            {"visual", prompt_list_to_json(p.visual)},
            {"textual", prompt_list_to_json(p.textual)}};
}

inline PromptSet prompts_from_json(const nlohmann::json& j) {
    PromptSet p;
    p.depth = j.at("depth").get<int>();
    p.length = j.at("length").get<int>();
    p.visual = prompt_list_from_json(j.at("visual"));
    p.textual = prompt_list_from_json(j.at("textual"));
    return p;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const TrainedDefense& d = ckpt.defense;
    nlohmann::json j;
    j["format_version"] = kCheckpointFormatVersion;
    j["manifest"] = {{"method", to_string(d.method)},
                     {"config_hash", d.config_hash},
                     {"seed", d.seed},
                     {"epochs", d.history.size()},
                     {"metrics", ckpt.metrics},
                     {"warnings", d.warnings}};
    j["architecture_hash"] = to_hex(ckpt.architecture_hash);
    j["prompt_depth"] = d.prompt_config.depth;
    j["prompt_length"] = d.prompt_config.length;
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : d.history)
        hist.push_back({{"teacher_loss", h.teacher_loss},
                        {"student_loss", h.student_loss},
                        {"lr", h.lr}});
    j["history"] = hist;
    j["student_prompts"] = detail::prompts_to_json(d.student_prompts);
    if (d.teacher_prompts)
        j["teacher_prompts"] = detail::prompts_to_json(*d.teacher_prompts);
    else
        j["teacher_prompts"] = nullptr;

    std::ofstream f(path);
    if (!f) throw load_error("cannot write checkpoint: " + path);
    f << j.dump(1) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw load_error("cannot read checkpoint: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw load_error("malformed checkpoint " + path + ": " + e.what());
    }
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw load_error("unsupported checkpoint format version in " + path);
    Checkpoint ckpt;
    TrainedDefense& d = ckpt.defense;
    const auto& man = j.at("manifest");
    d.method = method_from_string(man.at("method").get<std::string>());
    d.config_hash = man.at("config_hash").get<std::string>();
    d.seed = man.at("seed").get<std::uint64_t>();
    for (const auto& w : man.at("warnings")) d.warnings.push_back(w.get<std::string>());
    ckpt.metrics = man.at("metrics").get<std::map<std::string, double>>();
    ckpt.architecture_hash = std::stoull(j.at("architecture_hash").get<std::string>(), nullptr, 16);
    d.prompt_config.depth = j.at("prompt_depth").get<int>();
    d.prompt_config.length = j.at("prompt_length").get<int>();
    for (const auto& h : j.at("history"))
        d.history.push_back({h.at("teacher_loss").get<double>(),
                             h.at("student_loss").get<double>(), h.at("lr").get<double>()});
    d.student_prompts = detail::prompts_from_json(j.at("student_prompts"));
    if (!j.at("teacher_prompts").is_null())
        d.teacher_prompts = detail::prompts_from_json(j.at("teacher_prompts"));
    return ckpt;
}

}  // namespace apd
