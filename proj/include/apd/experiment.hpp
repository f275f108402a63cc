#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "apd/checkpoint.hpp"
#include "apd/config.hpp"
#include "apd/data.hpp"
#include "apd/eval.hpp"
#include "apd/model.hpp"
#include "apd/plot.hpp"
#include "apd/tokenizer.hpp"
#include "apd/trainer.hpp"

namespace apd {

// Everything a run needs that is derived from the config once: datasets,
// tokenizer, frozen backbone and tokenized class prompts.
class ExperimentEnv {
public:
    ExperimentEnv(const ExperimentConfig& cfg, Dataset train_set, Dataset test_set)
        : train_set_(std::move(train_set)),
          test_set_(std::move(test_set)),
          tokenizer_(Tokenizer::build(cfg.prompt_template, train_set_.class_names)),
          model_(cfg.backbone, tokenizer_.vocab_size(), cfg.backbone_seed),
          class_prompts_(
              build_class_prompts(train_set_.class_names, tokenizer_, cfg.backbone.context_length)) {
        train_set_.validate();
        test_set_.validate();
    }

    // Synthetic-shapes path; folder datasets are loaded by the caller.
    static ExperimentEnv build_synthetic(const ExperimentConfig& cfg) {
        auto [train, test] = load_synthetic_shapes(cfg.shapes);
        return ExperimentEnv(cfg, std::move(train), std::move(test));
    }

    const Dataset& train_set() const { return train_set_; }
    const Dataset& test_set() const { return test_set_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const BimodalEncoder& model() const { return model_; }
    const std::vector<std::vector<int>>& class_prompts() const { return class_prompts_; }

    TrainContext train_context() const { return {model_, class_prompts_, train_set_}; }

private:
    Dataset train_set_;
    Dataset test_set_;
    Tokenizer tokenizer_;
    BimodalEncoder model_;
    std::vector<std::vector<int>> class_prompts_;
};

inline TrainedDefense run_training(const ExperimentEnv& env, const ExperimentConfig& cfg,
                                   std::uint64_t seed) {
    DistillConfig train = cfg.train;
    train.seed = seed;
    return train_defense(env.train_context(), train, cfg.prompts, cfg.method,
                         cfg.config_hash());
}

inline EvalReport run_evaluation(const ExperimentEnv& env, const ExperimentConfig& cfg,
                                 const TrainedDefense& defense) {
    return evaluate(env.model(), defense, env.test_set(), env.class_prompts(), cfg.eval_attacks,
                    cfg.eval);
}

// ---- sweeps -----------------------------------------------------------------

struct SweepRun {
    double value = 0.0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;
};

struct SweepResult {
    std::string axis;
    std::vector<double> values;
    std::vector<SweepRun> runs;  // one per (value, seed)

    double mean(double value, const std::string& metric) const {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : runs) {
            if (r.value != value || !r.ok) continue;
            sum += metric == "natural" ? r.report.natural_acc
                   : metric == "sum"   ? r.report.sum_metric
                                       : r.report.robust_acc.at(metric);
            ++n;
        }
        if (n == 0) throw eval_error("sweep: no successful runs at value " +
                                     std::to_string(value));
        return sum / n;
    }
};

inline ExperimentConfig with_axis_value(const ExperimentConfig& base, const std::string& axis,
                                        double value) {
    ExperimentConfig cfg = base;
    if (axis == "prompt_depth")
        cfg.prompts.depth = static_cast<int>(value);
    else if (axis == "prompt_length")
        cfg.prompts.length = static_cast<int>(value);
    else if (axis == "beta")
        cfg.train.beta = value;
    else
        throw config_error("unknown sweep axis '" + axis +
                           "' (expected prompt_depth, prompt_length or beta)");
    cfg.validate();
    return cfg;
}

// Trains and evaluates one defense per (value, seed); failed runs are
// recorded and the sweep continues.
inline SweepResult run_sweep(const ExperimentEnv& env, const ExperimentConfig& base,
                             const std::string& axis, const std::vector<double>& values,
                             const std::vector<std::uint64_t>& seeds) {
    if (values.empty()) throw config_error("sweep: values must be non-empty");
    if (seeds.empty()) throw config_error("sweep: seeds must be non-empty");
    SweepResult out;
    out.axis = axis;
    out.values = values;
    for (double v : values) {
        const ExperimentConfig cfg = with_axis_value(base, axis, v);
        for (std::uint64_t seed : seeds) {
            SweepRun run;
            run.value = v;
            run.seed = seed;
            try {
                TrainedDefense defense = run_training(env, cfg, seed);
                run.report = run_evaluation(env, cfg, defense);
                run.ok = true;
            } catch (const std::exception& e) {
                run.error = e.what();
            }
            out.runs.push_back(std::move(run));
        }
    }
    return out;
}

inline void write_sweep_plot(const SweepResult& sweep, const std::string& path,
                             const std::string& robust_metric = "pgd100") {
    PlotSeries nat{"natural", {}, {}}, adv{"robust (" + robust_metric + ")", {}, {}};
    for (double v : sweep.values) {
        nat.x.push_back(v);
        nat.y.push_back(sweep.mean(v, "natural"));
        adv.x.push_back(v);
        adv.y.push_back(sweep.mean(v, robust_metric));
    }
    write_svg_plot(path, "accuracy vs " + sweep.axis, sweep.axis, "accuracy (%)", {nat, adv});
}

// ---- manifests and tables ----------------------------------------------------

struct RunManifest {
    std::string config_hash;
    std::string started_at;
    std::string finished_at;
    std::string status;  // "ok" or "failed"
    std::vector<std::string> artifacts;
};

inline std::string timestamp_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

// Written atomically: temp file then rename.
inline void write_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json j = {{"config_hash", m.config_hash},
                        {"started_at", m.started_at},
                        {"finished_at", m.finished_at},
                        {"status", m.status},
                        {"artifacts", m.artifacts}};
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw load_error("cannot write manifest: " + tmp);
        f << j.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

inline RunManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw load_error("cannot read manifest: " + path);
    nlohmann::json j;
    f >> j;
    RunManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.status = j.at("status").get<std::string>();
    for (const auto& a : j.at("artifacts")) m.artifacts.push_back(a.get<std::string>());
    return m;
}

inline void append_report_jsonl(const std::string& path, const EvalReport& r) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw load_error("cannot write report file: " + path);
    f << report_to_json(r).dump() << "\n";
}

// Comparison table with Nat./Adv./Sum columns, methods in the paper's
// row order. Accuracies to 0.1%.
inline std::string render_table(const std::vector<EvalReport>& reports,
                                const std::string& robust_metric = "pgd100") {
    static const std::vector<std::string> order = {"advpt", "apt_t",      "apt_v", "apt_vl",
                                                   "apd_t", "apd_v",      "apd",   "apd_offline"};
    std::vector<const EvalReport*> sorted;
    for (const auto& name : order)
        for (const auto& r : reports)
            if (r.method == name) sorted.push_back(&r);
    for (const auto& r : reports) {
        bool known = std::find(order.begin(), order.end(), r.method) != order.end();
        if (!known) sorted.push_back(&r);
    }
    std::ostringstream os;
    os << std::left << std::setw(14) << "method" << std::right << std::setw(8) << "Nat."
       << std::setw(8) << "Adv." << std::setw(9) << "Sum" << "\n";
    os << std::string(39, '-') << "\n";
    os << std::fixed << std::setprecision(1);
    for (const auto* r : sorted) {
        const double adv = r->robust_acc.count(robust_metric) ? r->robust_acc.at(robust_metric)
                                                              : 0.0;
        os << std::left << std::setw(14) << r->method << std::right << std::setw(8)
           << r->natural_acc << std::setw(8) << adv << std::setw(9) << r->natural_acc + adv
           << "\n";
    }
    return os.str();
}

}  // namespace apd
