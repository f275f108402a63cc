// Command-line driver: train / eval / sweep / report.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "apd/checkpoint.hpp"
#include "apd/config.hpp"
#include "apd/data_folder.hpp"
#include "apd/experiment.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;
constexpr int kExitEvaluation = 4;
constexpr int kExitIo = 5;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string output_root;  // overrides config output_dir; env APD_OUTPUT_ROOT also honored
};

apd::ExperimentConfig load_with_overrides(const CommonOpts& o) {
    std::ifstream f(o.config_path);
    if (!f) throw apd::config_error("cannot open config file: " + o.config_path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw apd::config_error("malformed config " + o.config_path + ": " + e.what());
    }
    for (const auto& ov : o.overrides) apd::apply_override(j, ov);
    apd::ExperimentConfig cfg = apd::ExperimentConfig::from_json(j);
    if (!o.output_root.empty()) {
        cfg.output_dir = o.output_root;
    } else if (const char* env = std::getenv("APD_OUTPUT_ROOT"); env && *env) {
        cfg.output_dir = env;
    }
    return cfg;
}

apd::ExperimentEnv build_env(const apd::ExperimentConfig& cfg) {
    if (cfg.dataset_name == "synthetic-shapes") return apd::ExperimentEnv::build_synthetic(cfg);
    if (cfg.dataset_root.empty())
        throw apd::config_error("dataset.root is required for dataset '" + cfg.dataset_name + "'");
    auto [train, test] =
        apd::load_folder_dataset(cfg.dataset_root, cfg.backbone.image_resolution);
    return apd::ExperimentEnv(cfg, std::move(train), std::move(test));
}

fs::path run_dir_for(const apd::ExperimentConfig& cfg) {
    return fs::path(cfg.output_dir) / (apd::to_string(cfg.method) + "_" + cfg.config_hash());
}

int cmd_train(const CommonOpts& opts, bool force) {
    apd::ExperimentConfig cfg = load_with_overrides(opts);
    const fs::path dir = run_dir_for(cfg);
    const fs::path manifest_path = dir / "manifest.json";

    if (!force && fs::exists(manifest_path)) {
        apd::RunManifest prev = apd::read_manifest(manifest_path.string());
        if (prev.status == "ok" && prev.config_hash == cfg.config_hash()) {
            std::cout << "run already complete at " << dir.string()
                      << " (use --force to redo)\n";
            return kExitOk;
        }
    }
    fs::create_directories(dir);
    {  // record the exact resolved config next to the artifacts
        std::ofstream f(dir / "config.json");
        f << cfg.to_json().dump(1) << "\n";
    }

    apd::RunManifest manifest;
    manifest.config_hash = cfg.config_hash();
    manifest.started_at = apd::timestamp_now();
    manifest.status = "failed";
    apd::write_manifest(manifest_path.string(), manifest);

    apd::ExperimentEnv env = build_env(cfg);
    const fs::path reports_path = dir / "reports.jsonl";
    if (force && fs::exists(reports_path)) fs::remove(reports_path);
    std::vector<apd::EvalReport> reports;
    for (std::uint64_t seed : cfg.seeds) {
        std::cout << "training " << apd::to_string(cfg.method) << " seed " << seed << "...\n";
        apd::TrainedDefense defense = apd::run_training(env, cfg, seed);
        apd::EvalReport report = apd::run_evaluation(env, cfg, defense);

        apd::Checkpoint ckpt;
        ckpt.defense = std::move(defense);
        ckpt.architecture_hash = env.model().parameter_hash();
        ckpt.metrics["natural_acc"] = report.natural_acc;
        for (const auto& [k, v] : report.robust_acc) ckpt.metrics["robust_" + k] = v;
        ckpt.metrics["sum"] = report.sum_metric;
        const fs::path ckpt_path = dir / ("seed" + std::to_string(seed) + ".ckpt.json");
        apd::save_checkpoint(ckpt_path.string(), ckpt);
        manifest.artifacts.push_back(ckpt_path.string());

        apd::append_report_jsonl(reports_path.string(), report);
        reports.push_back(report);
        std::cout << "  natural " << report.natural_acc;
        for (const auto& [k, v] : report.robust_acc)
            if (k != "none") std::cout << "  " << k << " " << v;
        std::cout << "\n";
    }
    manifest.artifacts.push_back(reports_path.string());
    manifest.finished_at = apd::timestamp_now();
    manifest.status = "ok";
    apd::write_manifest(manifest_path.string(), manifest);
    std::cout << apd::render_table(reports);
    std::cout << "artifacts in " << dir.string() << "\n";
    return kExitOk;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint_path, bool adaptive) {
    apd::ExperimentConfig cfg = load_with_overrides(opts);
    apd::Checkpoint ckpt = apd::load_checkpoint(checkpoint_path);
    apd::ExperimentEnv env = build_env(cfg);
    if (ckpt.architecture_hash != env.model().parameter_hash())
        throw apd::eval_error(
            "checkpoint was trained against a different backbone (architecture hash mismatch); "
            "refusing to evaluate");
    apd::EvalReport report =
        adaptive ? apd::evaluate_adaptive(env.model(), ckpt.defense, env.test_set(),
                                          env.class_prompts(), cfg.eval)
                 : apd::run_evaluation(env, cfg, ckpt.defense);
    std::cout << apd::report_to_json(report).dump(1) << "\n";
    return kExitOk;
}

int cmd_sweep(const CommonOpts& opts, const std::string& axis, std::vector<double> values) {
    apd::ExperimentConfig cfg = load_with_overrides(opts);
    apd::ExperimentEnv env = build_env(cfg);
    apd::SweepResult sweep = apd::run_sweep(env, cfg, axis, values, cfg.seeds);

    const fs::path dir = run_dir_for(cfg);
    fs::create_directories(dir);
    const fs::path jsonl = dir / ("sweep_" + axis + ".jsonl");
    if (fs::exists(jsonl)) fs::remove(jsonl);
    int failures = 0;
    for (const auto& run : sweep.runs) {
        if (run.ok) {
            apd::append_report_jsonl(jsonl.string(), run.report);
        } else {
            ++failures;
            std::cerr << "sweep run failed (value " << run.value << ", seed " << run.seed
                      << "): " << run.error << "\n";
        }
    }
    const fs::path svg = dir / ("sweep_" + axis + ".svg");
    apd::write_sweep_plot(sweep, svg.string());

    std::cout << std::fixed << std::setprecision(1);
    std::cout << axis << "    Nat.    Adv.    Sum\n";
    for (double v : sweep.values)
        std::cout << v << "    " << sweep.mean(v, "natural") << "    "
                  << sweep.mean(v, "pgd100") << "    " << sweep.mean(v, "sum") << "\n";
    std::cout << "plot: " << svg.string() << "\n";
    return failures == 0 ? kExitOk : kExitTraining;
}

int cmd_report(const std::string& root) {
    // Aggregates reports.jsonl files under root, averaging over seeds per method.
    std::vector<apd::EvalReport> all;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() == "reports.jsonl") {
            std::ifstream f(e.path());
            std::string line;
            while (std::getline(f, line)) {
                if (line.empty()) continue;
                all.push_back(apd::report_from_json(nlohmann::json::parse(line)));
            }
        }
    if (all.empty()) throw apd::load_error("no reports.jsonl files found under " + root);

    std::map<std::string, std::vector<apd::EvalReport>> by_method;
    for (const auto& r : all) by_method[r.method].push_back(r);
    std::vector<apd::EvalReport> means;
    for (const auto& [method, rs] : by_method) {
        apd::EvalReport m;
        m.method = method;
        m.dataset = rs.front().dataset;
        for (const auto& r : rs) {
            m.natural_acc += r.natural_acc / static_cast<double>(rs.size());
            m.sum_metric += r.sum_metric / static_cast<double>(rs.size());
            for (const auto& [k, v] : r.robust_acc)
                m.robust_acc[k] += v / static_cast<double>(rs.size());
        }
        means.push_back(std::move(m));
    }
    std::cout << apd::render_table(means);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial prompt distillation experiments"};
    app.require_subcommand(1);

    CommonOpts opts;
    bool force = false, adaptive = false;
    std::string checkpoint_path, axis, report_root = "runs";
    std::vector<double> values;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", opts.config_path, "experiment config (JSON)")->required();
        sub->add_option("--set", opts.overrides, "override, e.g. train.beta=0.4");
        sub->add_option("--output-root", opts.output_root,
                        "artifact root (also via APD_OUTPUT_ROOT)");
    };

    CLI::App* train = app.add_subcommand("train", "train and evaluate one defense per seed");
    add_common(train);
    train->add_flag("--force", force, "redo a completed run");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
    eval->add_flag("--adaptive", adaptive, "run teacher-aware attacks instead");

    CLI::App* sweep = app.add_subcommand("sweep", "train across one axis and plot the trend");
    add_common(sweep);
    sweep->add_option("--axis", axis, "prompt_depth, prompt_length or beta")->required();
    sweep->add_option("--values", values, "axis values")->required()->delimiter(',');

    CLI::App* report = app.add_subcommand("report", "print a comparison table from saved runs");
    report->add_option("--root", report_root, "directory scanned for reports.jsonl files");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(opts, force);
        if (eval->parsed()) return cmd_eval(opts, checkpoint_path, adaptive);
        if (sweep->parsed()) return cmd_sweep(opts, axis, values);
        if (report->parsed()) return cmd_report(report_root);
    } catch (const apd::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const apd::train_error& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const apd::eval_error& e) {
        std::cerr << "evaluation error: " << e.what() << "\n";
        return kExitEvaluation;
    } catch (const apd::load_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
