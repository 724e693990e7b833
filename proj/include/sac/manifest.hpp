#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sac/augment.hpp"
#include "sac/data.hpp"
#include "sac/error.hpp"
#include "sac/models.hpp"

namespace sac {

using nlohmann::json;

// Everything a run needs, hashed into every produced report. Re-running the
// same manifest reproduces byte-identical checkpoints and reports.
struct ExperimentManifest {
    std::string version = "sac-lab/1";
    std::uint64_t master_seed = 20220817;
    std::size_t workers = 0; // 0 = hardware concurrency (capped at 8)

    // benchmark
    TaskSpec task = [] {
        TaskSpec t;
        t.sigma = 0.8;
        return t;
    }();
    std::size_t n_samples = 6000;
    std::size_t transfer_samples = 4000;

    // zoo composition
    std::vector<std::string> architectures = {"mlp-s", "mlp-w", "cnn-s", "cnn-p"};
    std::string source_arch = "cnn-p";
    std::size_t irrelevant_seeds = 5; // per architecture
    std::size_t per_attack = 5;
    std::size_t surrogate_count = 5;

    // training configs
    TrainConfig train_base{.epochs = 12, .batch = 32, .lr = 0.04, .momentum = 0.9};
    TrainConfig finetune_cfg{.epochs = 5, .batch = 32, .lr = 0.01, .momentum = 0.9};
    TrainConfig extract_cfg{.epochs = 25, .batch = 32, .lr = 0.03, .momentum = 0.9};
    TrainConfig surrogate_cfg{.epochs = 25, .batch = 32, .lr = 0.02, .momentum = 0.9};
    TrainConfig transfer_cfg{.epochs = 10, .batch = 32, .lr = 0.02, .momentum = 0.9};
    double prune_ratio = 0.3;
    std::size_t prune_probe = 256;
    AdvConfig attack_adv{8.0 / 255.0, 8.0 / 255.0, 1, false, 0};
    int adv_epochs = 4;

    // fingerprinting
    std::size_t sacw_budget = 128;
    SacmConfig sacm{200, 1, true, false};
    std::size_t sacm_pool = 100;
    std::size_t baseline_n_adv = 64;
    AdvConfig baseline_adv{0.10, 0.02, 10, true, 0};
    double smooth_eps = 0.1;
    std::string rbf_delta = "median"; // or a positive number

    // sweeps
    std::vector<double> prune_sweep_ratios = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<std::size_t> sample_sweep_counts = {10, 25, 50, 100};
};

namespace detail {

inline json train_cfg_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},   {"batch", c.batch},
                {"lr", c.lr},           {"momentum", c.momentum},
                {"clip_norm", c.clip_norm}, {"alpha", c.distill_alpha},
                {"temperature", c.temperature}};
}

inline TrainConfig train_cfg_from(const json& j, TrainConfig base) {
    base.epochs = j.value("epochs", base.epochs);
    base.batch = j.value("batch", base.batch);
    base.lr = j.value("lr", base.lr);
    base.momentum = j.value("momentum", base.momentum);
    base.clip_norm = j.value("clip_norm", base.clip_norm);
    base.distill_alpha = j.value("alpha", base.distill_alpha);
    base.temperature = j.value("temperature", base.temperature);
    return base;
}

inline json adv_cfg_json(const AdvConfig& c) {
    return json{{"eps", c.eps}, {"step", c.step}, {"steps", c.steps}, {"targeted", c.targeted}};
}

inline AdvConfig adv_cfg_from(const json& j, AdvConfig base) {
    base.eps = j.value("eps", base.eps);
    base.step = j.value("step", base.step);
    base.steps = j.value("steps", base.steps);
    base.targeted = j.value("targeted", base.targeted);
    return base;
}

} // namespace detail

inline json manifest_to_json(const ExperimentManifest& m) {
    json j;
    j["version"] = m.version;
    j["master_seed"] = m.master_seed;
    j["workers"] = m.workers;
    j["task"] = json{{"k", m.task.k},         {"c", m.task.c},
                     {"h", m.task.h},         {"w", m.task.w},
                     {"family", m.task.family}, {"template_base", m.task.template_base},
                     {"sigma", m.task.sigma},  {"jitter", m.task.jitter},
                     {"task_id", m.task.task_id}};
    j["n_samples"] = m.n_samples;
    j["transfer_samples"] = m.transfer_samples;
    j["architectures"] = m.architectures;
    j["source_arch"] = m.source_arch;
    j["irrelevant_seeds"] = m.irrelevant_seeds;
    j["per_attack"] = m.per_attack;
    j["surrogate_count"] = m.surrogate_count;
    j["train_base"] = detail::train_cfg_json(m.train_base);
    j["finetune"] = detail::train_cfg_json(m.finetune_cfg);
    j["extract"] = detail::train_cfg_json(m.extract_cfg);
    j["surrogate"] = detail::train_cfg_json(m.surrogate_cfg);
    j["transfer"] = detail::train_cfg_json(m.transfer_cfg);
    j["prune_ratio"] = m.prune_ratio;
    j["prune_probe"] = m.prune_probe;
    j["attack_adv"] = detail::adv_cfg_json(m.attack_adv);
    j["adv_epochs"] = m.adv_epochs;
    j["sacw_budget"] = m.sacw_budget;
    j["sacm"] = json{{"n_out", m.sacm.n_out},
                     {"rounds", m.sacm.rounds},
                     {"use_flip", m.sacm.use_flip},
                     {"mirror", m.sacm.mirror},
                     {"pool", m.sacm_pool}};
    j["baseline"] = detail::adv_cfg_json(m.baseline_adv);
    j["baseline_n_adv"] = m.baseline_n_adv;
    j["smooth_eps"] = m.smooth_eps;
    j["rbf_delta"] = m.rbf_delta;
    j["prune_sweep_ratios"] = m.prune_sweep_ratios;
    j["sample_sweep_counts"] = m.sample_sweep_counts;
    return j;
}

inline ExperimentManifest manifest_from_json(const json& j) {
    ExperimentManifest m;
    m.version = j.value("version", m.version);
    m.master_seed = j.value("master_seed", m.master_seed);
    m.workers = j.value("workers", m.workers);
    if (j.contains("task")) {
        const auto& t = j["task"];
        m.task.k = t.value("k", m.task.k);
        m.task.c = t.value("c", m.task.c);
        m.task.h = t.value("h", m.task.h);
        m.task.w = t.value("w", m.task.w);
        m.task.family = t.value("family", m.task.family);
        m.task.template_base = t.value("template_base", m.task.template_base);
        m.task.sigma = t.value("sigma", m.task.sigma);
        m.task.jitter = t.value("jitter", m.task.jitter);
        m.task.task_id = t.value("task_id", m.task.task_id);
    }
    m.n_samples = j.value("n_samples", m.n_samples);
    m.transfer_samples = j.value("transfer_samples", m.transfer_samples);
    if (j.contains("architectures")) m.architectures = j["architectures"].get<std::vector<std::string>>();
    m.source_arch = j.value("source_arch", m.source_arch);
    m.irrelevant_seeds = j.value("irrelevant_seeds", m.irrelevant_seeds);
    m.per_attack = j.value("per_attack", m.per_attack);
    m.surrogate_count = j.value("surrogate_count", m.surrogate_count);
    if (j.contains("train_base")) m.train_base = detail::train_cfg_from(j["train_base"], m.train_base);
    if (j.contains("finetune")) m.finetune_cfg = detail::train_cfg_from(j["finetune"], m.finetune_cfg);
    if (j.contains("extract")) m.extract_cfg = detail::train_cfg_from(j["extract"], m.extract_cfg);
    if (j.contains("surrogate")) m.surrogate_cfg = detail::train_cfg_from(j["surrogate"], m.surrogate_cfg);
    if (j.contains("transfer")) m.transfer_cfg = detail::train_cfg_from(j["transfer"], m.transfer_cfg);
    m.prune_ratio = j.value("prune_ratio", m.prune_ratio);
    m.prune_probe = j.value("prune_probe", m.prune_probe);
    if (j.contains("attack_adv")) m.attack_adv = detail::adv_cfg_from(j["attack_adv"], m.attack_adv);
    m.adv_epochs = j.value("adv_epochs", m.adv_epochs);
    m.sacw_budget = j.value("sacw_budget", m.sacw_budget);
    if (j.contains("sacm")) {
        const auto& s = j["sacm"];
        m.sacm.n_out = s.value("n_out", m.sacm.n_out);
        m.sacm.rounds = s.value("rounds", m.sacm.rounds);
        m.sacm.use_flip = s.value("use_flip", m.sacm.use_flip);
        m.sacm.mirror = s.value("mirror", m.sacm.mirror);
        m.sacm_pool = s.value("pool", m.sacm_pool);
    }
    if (j.contains("baseline")) m.baseline_adv = detail::adv_cfg_from(j["baseline"], m.baseline_adv);
    m.baseline_n_adv = j.value("baseline_n_adv", m.baseline_n_adv);
    m.smooth_eps = j.value("smooth_eps", m.smooth_eps);
    m.rbf_delta = j.value("rbf_delta", m.rbf_delta);
    if (j.contains("prune_sweep_ratios"))
        m.prune_sweep_ratios = j["prune_sweep_ratios"].get<std::vector<double>>();
    if (j.contains("sample_sweep_counts"))
        m.sample_sweep_counts = j["sample_sweep_counts"].get<std::vector<std::size_t>>();
    return m;
}

inline std::string manifest_dump(const ExperimentManifest& m) { return manifest_to_json(m).dump(2); }

inline std::uint64_t manifest_hash(const ExperimentManifest& m) { return fnv1a64(manifest_dump(m)); }

inline ExperimentManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open manifest " + path.string());
    json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw io_error("manifest parse error: " + std::string(e.what()));
    }
    return manifest_from_json(j);
}

inline void save_manifest(const ExperimentManifest& m, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write manifest " + path.string());
    os << manifest_dump(m) << "\n";
}

} // namespace sac
