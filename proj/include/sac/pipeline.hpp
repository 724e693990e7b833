#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sac/augment.hpp"
#include "sac/data.hpp"
#include "sac/error.hpp"
#include "sac/eval.hpp"
#include "sac/fingerprint.hpp"
#include "sac/manifest.hpp"
#include "sac/models.hpp"

namespace sac {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Atomic file helpers and run state
// ---------------------------------------------------------------------------

namespace detail {

inline void atomic_write_text(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw io_error("cannot open " + tmp.string() + " for writing");
        os << text;
    }
    fs::rename(tmp, path);
}

template <typename Fn>
void atomic_write_file(const fs::path& path, Fn writer) {
    fs::path tmp = path;
    tmp += ".tmp";
    writer(tmp);
    fs::rename(tmp, path);
}

inline std::uint64_t file_hash(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace detail

// Per-job bookkeeping: content hash, wall seconds, accuracies, query counts.
class RunState {
public:
    struct Entry {
        std::string hash;
        double seconds = 0.0;
        double train_acc = 0.0;
        double heldout_acc = 0.0;
        std::uint64_t queries = 0;
    };

    void load(const fs::path& path) {
        std::lock_guard lk(mu_);
        entries_.clear();
        if (!fs::exists(path)) return;
        std::ifstream is(path);
        json j;
        is >> j;
        for (auto& [id, e] : j["jobs"].items()) {
            Entry en;
            en.hash = e.value("hash", "");
            en.seconds = e.value("seconds", 0.0);
            en.train_acc = e.value("train_acc", 0.0);
            en.heldout_acc = e.value("heldout_acc", 0.0);
            en.queries = e.value("queries", std::uint64_t(0));
            entries_[id] = en;
        }
    }

    void save(const fs::path& path) const {
        std::lock_guard lk(mu_);
        json jobs = json::object();
        for (const auto& [id, e] : entries_) {
            jobs[id] = json{{"hash", e.hash},
                            {"seconds", e.seconds},
                            {"train_acc", e.train_acc},
                            {"heldout_acc", e.heldout_acc},
                            {"queries", e.queries}};
        }
        detail::atomic_write_text(path, json{{"jobs", jobs}}.dump(1) + "\n");
    }

    void put(const std::string& id, Entry e) {
        std::lock_guard lk(mu_);
        entries_[id] = std::move(e);
    }

    std::optional<Entry> get(const std::string& id) const {
        std::lock_guard lk(mu_);
        auto it = entries_.find(id);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

private:
    mutable std::mutex mu_;
    std::map<std::string, Entry> entries_;
};

// Bounded worker pool over a fixed job list. The first exception wins and is
// rethrown after all workers drain.
inline void run_parallel(std::size_t workers, const std::vector<std::function<void()>>& jobs) {
    if (jobs.empty()) return;
    workers = std::max<std::size_t>(1, std::min(workers, jobs.size()));
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto body = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            try {
                jobs[i]();
            } catch (...) {
                std::lock_guard lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// The laboratory: datasets, zoo, fingerprints, sweeps, reports
// ---------------------------------------------------------------------------

struct FingerprintOptions {
    std::string mode = "sac-w"; // sac-w | sac-m | baseline-asr
    KernelId::Kind kernel = KernelId::Kind::cosine;
    bool smooth = false;
};

struct LoadedModel {
    std::string id;
    Model model;
    std::unique_ptr<LocalOracle> oracle;
};

class Lab {
public:
    Lab(fs::path root, ExperimentManifest manifest) : root_(std::move(root)), m_(std::move(manifest)) {
        fs::create_directories(root_ / "data");
        fs::create_directories(root_ / "models");
        fs::create_directories(root_ / "fingerprints");
        fs::create_directories(root_ / "reports");
        fs::create_directories(root_ / "curves");
        if (!fs::exists(manifest_path())) save_manifest(m_, manifest_path());
        state_.load(state_path());
    }

    const ExperimentManifest& manifest() const { return m_; }
    fs::path root() const { return root_; }
    fs::path manifest_path() const { return root_ / "manifest.json"; }
    fs::path state_path() const { return root_ / "state.json"; }
    fs::path model_path(const std::string& id) const { return root_ / "models" / (id + ".sacmodl"); }

    std::size_t workers() const {
        if (m_.workers > 0) return m_.workers;
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 2 : std::min<unsigned>(hw, 8);
    }

    // ---- datasets -----------------------------------------------------

    void ensure_data() {
        if (data_ready_) return;
        fs::path src = root_ / "data" / "source.sacdata";
        if (!fs::exists(src)) {
            Dataset full = gen_synthetic(m_.task, m_.n_samples, seed_of("data:source"));
            DataSplit split = split_defender_attacker(full, seed_of("data:split"));
            detail::atomic_write_file(src, [&](const fs::path& p) { save_dataset(full, p); });
            detail::atomic_write_file(root_ / "data" / "defender.sacdata",
                                      [&](const fs::path& p) { save_dataset(split.defender, p); });
            detail::atomic_write_file(root_ / "data" / "attacker.sacdata",
                                      [&](const fs::path& p) { save_dataset(split.attacker, p); });
            detail::atomic_write_file(root_ / "data" / "validation.sacdata",
                                      [&](const fs::path& p) { save_dataset(split.validation, p); });
        }
        fs::path tr = root_ / "data" / "transfer_train.sacdata";
        if (!fs::exists(tr)) {
            Dataset transfer = derive_transfer_task(m_.task, m_.transfer_samples, seed_of("data:transfer"));
            auto [train_part, heldout] = stratified_holdout(transfer, 0.1, seed_of("data:transfer-split"));
            detail::atomic_write_file(tr, [&](const fs::path& p) { save_dataset(train_part, p); });
            detail::atomic_write_file(root_ / "data" / "transfer_heldout.sacdata",
                                      [&](const fs::path& p) { save_dataset(heldout, p); });
        }
        defender_ = load_dataset(root_ / "data" / "defender.sacdata");
        attacker_ = load_dataset(root_ / "data" / "attacker.sacdata");
        validation_ = load_dataset(root_ / "data" / "validation.sacdata");
        transfer_train_ = load_dataset(root_ / "data" / "transfer_train.sacdata");
        transfer_heldout_ = load_dataset(root_ / "data" / "transfer_heldout.sacdata");
        data_ready_ = true;
    }

    const Dataset& defender() {
        ensure_data();
        return defender_;
    }
    const Dataset& attacker() {
        ensure_data();
        return attacker_;
    }
    const Dataset& validation() {
        ensure_data();
        return validation_;
    }
    const Dataset& transfer_train() {
        ensure_data();
        return transfer_train_;
    }
    const Dataset& transfer_heldout() {
        ensure_data();
        return transfer_heldout_;
    }

    // ---- zoo -----------------------------------------------------------

    struct ZooJob {
        std::string id;
        std::function<Model()> build;
    };

    std::vector<std::string> zoo_model_ids() const {
        std::vector<std::string> ids;
        ids.push_back("source");
        for (const auto& arch : m_.architectures)
            for (std::size_t i = 0; i < m_.irrelevant_seeds; ++i)
                ids.push_back("irrelevant-" + arch + "-" + std::to_string(i));
        for (std::size_t i = 0; i < m_.surrogate_count; ++i) ids.push_back("surrogate-" + std::to_string(i));
        for (const char* tag : {"finetuneA", "finetuneL", "pruned", "extractL", "extractP", "extractAdv",
                                "transferA", "transferL"})
            for (std::size_t i = 0; i < m_.per_attack; ++i)
                ids.push_back(std::string(tag) + "-" + std::to_string(i));
        for (std::size_t i = 0; i < m_.per_attack; ++i) ids.push_back("irrelevant-new-" + std::to_string(i));
        return ids;
    }

    // Trains everything the manifest asks for; skips jobs whose checkpoint
    // already exists. Returns the number of jobs actually executed.
    std::size_t run_zoo() {
        ensure_data();
        std::size_t executed = 0;

        // the source model gates every attack job
        executed += run_model_job("source", [&] {
            TrainConfig cfg = m_.train_base;
            cfg.seed = seed_of("job:source");
            ModelSpec spec = spec_for(m_.source_arch);
            return train(defender_, spec, cfg, "source", &validation_);
        });

        Model source = load_model(model_path("source"));

        std::vector<ZooJob> jobs;
        for (const auto& arch : m_.architectures) {
            for (std::size_t i = 0; i < m_.irrelevant_seeds; ++i) {
                std::string id = "irrelevant-" + arch + "-" + std::to_string(i);
                jobs.push_back({id, [this, id, arch] {
                                    TrainConfig cfg = m_.train_base;
                                    cfg.seed = seed_of("job:" + id);
                                    return train(attacker_, spec_for(arch), cfg, "irrelevant", &validation_);
                                }});
            }
        }
        for (std::size_t i = 0; i < m_.surrogate_count; ++i) {
            std::string id = "surrogate-" + std::to_string(i);
            std::string arch = m_.architectures[i % m_.architectures.size()];
            jobs.push_back({id, [this, id, arch, &source] {
                                TrainConfig cfg = m_.surrogate_cfg;
                                cfg.seed = seed_of("job:" + id);
                                LocalOracle oracle(source);
                                return extract(oracle, defender_, spec_for(arch), cfg, ExtractMode::prob,
                                               "surrogate");
                            }});
        }
        for (std::size_t i = 0; i < m_.per_attack; ++i) {
            std::string si = std::to_string(i);
            std::string arch = m_.architectures[i % m_.architectures.size()];
            jobs.push_back({"finetuneA-" + si, [this, si, &source] {
                                TrainConfig cfg = m_.finetune_cfg;
                                cfg.seed = seed_of("job:finetuneA-" + si);
                                return finetune(source, attacker_, TuneMode::all, cfg);
                            }});
            jobs.push_back({"finetuneL-" + si, [this, si, &source] {
                                TrainConfig cfg = m_.finetune_cfg;
                                cfg.seed = seed_of("job:finetuneL-" + si);
                                return finetune(source, attacker_, TuneMode::last, cfg);
                            }});
            jobs.push_back({"pruned-" + si, [this, si, &source] {
                                Dataset probe = probe_subset(seed_of("job:pruned-probe-" + si));
                                return prune_by_activation(source, probe, m_.prune_ratio);
                            }});
            jobs.push_back({"extractL-" + si, [this, si, arch, &source] {
                                TrainConfig cfg = m_.extract_cfg;
                                cfg.seed = seed_of("job:extractL-" + si);
                                LocalOracle oracle(source);
                                return extract(oracle, attacker_, spec_for(arch), cfg, ExtractMode::label);
                            }});
            jobs.push_back({"extractP-" + si, [this, si, arch, &source] {
                                TrainConfig cfg = m_.extract_cfg;
                                cfg.seed = seed_of("job:extractP-" + si);
                                LocalOracle oracle(source);
                                return extract(oracle, attacker_, spec_for(arch), cfg, ExtractMode::prob);
                            }});
            jobs.push_back({"extractAdv-" + si, [this, si, arch, &source] {
                                TrainConfig cfg = m_.extract_cfg;
                                cfg.seed = seed_of("job:extractAdv-" + si);
                                AdvConfig adv = m_.attack_adv;
                                adv.seed = seed_of("job:extractAdv-adv-" + si);
                                LocalOracle oracle(source);
                                return extract_adv(oracle, attacker_, spec_for(arch), cfg, adv, m_.adv_epochs);
                            }});
            jobs.push_back({"transferA-" + si, [this, si, &source] {
                                TrainConfig cfg = m_.transfer_cfg;
                                cfg.seed = seed_of("job:transferA-" + si);
                                return transfer(source, transfer_train_, TuneMode::all, cfg);
                            }});
            jobs.push_back({"transferL-" + si, [this, si, &source] {
                                TrainConfig cfg = m_.transfer_cfg;
                                cfg.seed = seed_of("job:transferL-" + si);
                                return transfer(source, transfer_train_, TuneMode::last, cfg);
                            }});
            jobs.push_back({"irrelevant-new-" + si, [this, si] {
                                TrainConfig cfg = m_.train_base;
                                cfg.seed = seed_of("job:irrelevant-new-" + si);
                                ModelSpec spec = spec_for(m_.source_arch);
                                spec.k = transfer_train_.k;
                                return train(transfer_train_, spec, cfg, "irrelevant", &transfer_heldout_);
                            }});
        }

        std::vector<std::function<void()>> fns;
        std::atomic<std::size_t> ran{0};
        for (auto& j : jobs)
            fns.push_back([this, j, &ran] { ran += run_model_job(j.id, j.build); });
        run_parallel(workers(), fns);
        state_.save(state_path());
        return executed + ran.load();
    }

    // ---- suspects -------------------------------------------------------

    // Loads the whole zoo. Suspects exclude the source and the surrogates.
    // Surrogates may be absent (SAC-m never touches them); anything else
    // missing is an incomplete zoo.
    void load_zoo() {
        if (!models_.empty()) return;
        ensure_data();
        for (const auto& id : zoo_model_ids()) {
            fs::path p = model_path(id);
            if (!fs::exists(p)) {
                if (id.rfind("surrogate-", 0) == 0) continue;
                throw config_error("zoo incomplete: missing checkpoint " + id);
            }
            auto lm = std::make_unique<LoadedModel>();
            lm->id = id;
            lm->model = load_model(p);
            lm->oracle = std::make_unique<LocalOracle>(lm->model);
            models_.push_back(std::move(lm));
        }
    }

    const Model& source_model() {
        load_zoo();
        return find_model("source").model;
    }

    LoadedModel& find_model(const std::string& id) {
        load_zoo();
        for (auto& lm : models_)
            if (lm->id == id) return *lm;
        throw config_error("model not found: " + id);
    }

    std::vector<Suspect> suspects() {
        load_zoo();
        std::vector<Suspect> out;
        for (const auto& lm : models_) {
            if (lm->id == "source" || lm->model.provenance == "surrogate") continue;
            Suspect s;
            s.model_id = lm->id;
            s.tag = lm->model.provenance;
            s.task = lm->model.train_task;
            s.oracle = lm->oracle.get();
            out.push_back(s);
        }
        return out;
    }

    std::vector<const ModelOracle*> surrogate_oracles() {
        load_zoo();
        std::vector<const ModelOracle*> out;
        for (const auto& lm : models_)
            if (lm->model.provenance == "surrogate") out.push_back(lm->oracle.get());
        return out;
    }

    std::vector<const ModelOracle*> irrelevant_oracles_source_task() {
        load_zoo();
        std::vector<const ModelOracle*> out;
        for (const auto& lm : models_)
            if (lm->model.provenance == "irrelevant" && lm->model.train_task == m_.task.task_id)
                out.push_back(lm->oracle.get());
        return out;
    }

    // ---- fingerprint inputs ----------------------------------------------

    Tensor build_sacw_inputs() {
        load_zoo();
        auto surrogates = surrogate_oracles();
        if (surrogates.size() < m_.surrogate_count)
            throw config_error("zoo incomplete: sac-w needs " + std::to_string(m_.surrogate_count) +
                               " surrogates, found " + std::to_string(surrogates.size()));
        std::vector<const ModelOracle*> family;
        family.push_back(find_model("source").oracle.get());
        for (const auto* o : surrogates) family.push_back(o);
        return select_misclassified(defender_, family, {}, m_.sacw_budget);
    }

    Tensor build_sacm_input_set() {
        ensure_data();
        Rng rng = Rng(seed_of("sacm-pool"));
        std::vector<std::size_t> idx = rng.permutation(defender_.size());
        idx.resize(std::min(m_.sacm_pool, defender_.size()));
        std::sort(idx.begin(), idx.end());
        Dataset pool = defender_.select(idx);
        return build_sacm_inputs(pool, m_.sacm, seed_of("sacm-build"));
    }

    // ---- fingerprint + scoring -------------------------------------------

    ScoreReport run_fingerprint(const FingerprintOptions& opt) {
        load_zoo();
        auto t0 = std::chrono::steady_clock::now();

        ScoreReport report;
        report.mode = opt.mode;
        report.kernel = opt.kernel == KernelId::Kind::cosine ? "cosine" : "rbf";
        report.labels = opt.smooth ? "smooth" : "prob";
        report.manifest_hash = manifest_hash(m_);

        LabelMode lm{opt.smooth, m_.smooth_eps};
        std::vector<Suspect> sus = suspects();

        if (opt.mode == "baseline-asr") {
            report.score_kind = "asr";
            const Model& src = source_model();
            AdvConfig adv = m_.baseline_adv;
            adv.seed = seed_of("baseline-adv");
            AsrProbe probe = build_asr_probe(src, defender_.images, m_.baseline_n_adv, adv,
                                             seed_of("baseline-pool"));
            report.entries = baseline_asr_scores(src, probe, sus);
            std::sort(report.entries.begin(), report.entries.end(),
                      [](const ScoreEntry& a, const ScoreEntry& b) { return a.model_id < b.model_id; });
            report.rows = build_auc_rows(report.entries, Orientation::higher_is_stolen);
        } else if (opt.mode == "sac-w" || opt.mode == "sac-m") {
            report.score_kind = "corr-distance";
            bool sacw = opt.mode == "sac-w";
            Tensor inputs = sacw ? build_sacw_inputs() : build_sacm_input_set();
            fs::path input_path = root_ / "fingerprints" / (opt.mode + "_inputs.sacinp");
            detail::atomic_write_file(input_path, [&](const fs::path& p) { save_inputs(inputs, p); });

            const ModelOracle& src_oracle = *find_model("source").oracle;
            OutputSet src_out = collect_outputs(src_oracle, inputs, lm);
            KernelChoice kc;
            kc.kind = opt.kernel;
            CorrelationMatrix c_src;
            if (opt.kernel == KernelId::Kind::rbf) {
                RbfDelta d = m_.rbf_delta == "median" ? RbfDelta::median() : RbfDelta::fixed(std::stod(m_.rbf_delta));
                c_src = rbf_corr(src_out, d);
                kc.delta = RbfDelta::fixed(c_src.kernel.delta); // one bandwidth for every suspect
            } else {
                c_src = cosine_corr(src_out);
            }

            std::vector<ScoreEntry> entries(sus.size());
            std::vector<std::function<void()>> fns;
            for (std::size_t i = 0; i < sus.size(); ++i)
                fns.push_back([&, i] {
                    ScoreEntry e;
                    e.model_id = sus[i].model_id;
                    e.tag = sus[i].tag;
                    e.task = sus[i].task;
                    e.score = corr_distance(c_src, fingerprint_model(*sus[i].oracle, inputs, kc, lm));
                    entries[i] = std::move(e);
                });
            run_parallel(workers(), fns);

            // the source against its own record, for the report
            ScoreEntry self;
            self.model_id = "source";
            self.tag = "source";
            self.task = m_.task.task_id;
            self.score = corr_distance(c_src, fingerprint_model(src_oracle, inputs, kc, lm));
            entries.push_back(std::move(self));
            std::sort(entries.begin(), entries.end(),
                      [](const ScoreEntry& a, const ScoreEntry& b) { return a.model_id < b.model_id; });
            report.entries = std::move(entries);
            report.rows = build_auc_rows(report.entries, Orientation::lower_is_stolen);

            // threshold rule: midpoint of irrelevant and extract-adv means
            std::vector<double> irr, adv;
            for (const auto& e : report.entries) {
                if (e.tag == "irrelevant" && e.task == m_.task.task_id) irr.push_back(e.score);
                if (e.tag == "extractAdv") adv.push_back(e.score);
            }
            if (!irr.empty() && !adv.empty()) report.threshold = choose_threshold(irr, adv);

            FingerprintRecord rec;
            rec.kernel_id = c_src.kernel.str();
            rec.input_hash = content_hash(inputs);
            rec.input_path = input_path.filename().string();
            rec.source = c_src;
            json man{{"mode", opt.mode},
                     {"kernel", report.kernel},
                     {"labels", lm.str()},
                     {"master_seed", m_.master_seed},
                     {"manifest_hash", detail::hex64(report.manifest_hash)},
                     {"n_inputs", inputs.dim(0)}};
            rec.manifest = man.dump();
            detail::atomic_write_file(fingerprint_path(opt),
                                      [&](const fs::path& p) { save_fingerprint_record(rec, p); });
        } else {
            throw config_error("unknown fingerprint mode: " + opt.mode);
        }

        report.average_auc = average_main_auc(report.rows);
        double measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.phase_seconds = measured;
        if (opt.mode == "sac-w") {
            // surrogate training belongs to the SAC-w phase; its cost is
            // recorded by the zoo jobs
            for (std::size_t i = 0; i < m_.surrogate_count; ++i)
                if (auto e = state_.get("surrogate-" + std::to_string(i))) report.phase_seconds += e->seconds;
        }

        write_report(report, opt);
        return report;
    }

    fs::path fingerprint_path(const FingerprintOptions& opt) const {
        return root_ / "fingerprints" / (opt.mode + "_" + report_suffix(opt) + ".sacfpr");
    }

    fs::path report_path(const FingerprintOptions& opt, const char* ext) const {
        return root_ / "reports" / ("report_" + opt.mode + "_" + report_suffix(opt) + ext);
    }

    // Checks a stored fingerprint record against its input file.
    bool verify_fingerprint_record(const FingerprintOptions& opt) {
        FingerprintRecord rec = load_fingerprint_record(fingerprint_path(opt));
        Tensor inputs = load_inputs(root_ / "fingerprints" / rec.input_path);
        return content_hash(inputs) == rec.input_hash;
    }

    // ---- sweeps -----------------------------------------------------------

    struct PruningCurve {
        PruningSweep sweep;
        fs::path file;
    };

    PruningCurve run_pruning_sweep(const FingerprintOptions& opt) {
        load_zoo();
        LabelMode lm{opt.smooth, m_.smooth_eps};
        KernelChoice kc = resolve_kernel(opt);
        Tensor inputs = sacw_inputs_cached();
        Dataset probe = probe_subset(seed_of("sweep:prune-probe"));
        PruningCurve out;
        out.sweep = pruning_sweep(source_model(), m_.prune_sweep_ratios, probe, validation_, inputs, kc,
                                  lm, irrelevant_oracles_source_task());
        std::ostringstream os;
        os << std::setprecision(17);
        os << "# ratio\taccuracy\tdistance\tirrelevant_mean\n";
        for (const auto& r : out.sweep.rows)
            os << r.ratio << "\t" << r.accuracy << "\t" << r.distance << "\t" << out.sweep.irrelevant_mean
               << "\n";
        out.file = root_ / "curves" / ("pruning_" + report_suffix(opt) + ".tsv");
        detail::atomic_write_text(out.file, os.str());
        return out;
    }

    struct SampleCurve {
        std::vector<SampleSweepRow> rows;
        fs::path file;
    };

    SampleCurve run_sample_sweep(const FingerprintOptions& opt) {
        load_zoo();
        LabelMode lm{opt.smooth, m_.smooth_eps};
        KernelChoice kc = resolve_kernel(opt);
        Tensor inputs = sacw_inputs_cached();
        std::vector<std::size_t> counts = m_.sample_sweep_counts;
        for (std::size_t c : counts)
            if (c > inputs.dim(0))
                throw config_error("sample sweep count " + std::to_string(c) +
                                   " exceeds the misclassified pool " + std::to_string(inputs.dim(0)));
        // the full pool is always swept: its row must reproduce the headline
        if (std::find(counts.begin(), counts.end(), inputs.dim(0)) == counts.end())
            counts.push_back(inputs.dim(0));

        OutputSet src_out = collect_outputs(*find_model("source").oracle, inputs, lm);
        std::vector<Suspect> sus = suspects();
        std::vector<SuspectOutputs> outs(sus.size());
        std::vector<std::function<void()>> fns;
        for (std::size_t i = 0; i < sus.size(); ++i)
            fns.push_back([&, i] {
                outs[i].model_id = sus[i].model_id;
                outs[i].tag = sus[i].tag;
                outs[i].task = sus[i].task;
                outs[i].outputs = collect_outputs(*sus[i].oracle, inputs, lm);
            });
        run_parallel(workers(), fns);

        SampleCurve out;
        out.rows = sample_count_sweep(counts, src_out, outs, kc);
        std::ostringstream os;
        os << std::setprecision(17);
        os << "# count\ttag\tauc\n";
        for (const auto& row : out.rows)
            for (const auto& [tag, value] : row.auc_by_tag)
                os << row.count << "\t" << tag << "\t" << value << "\n";
        out.file = root_ / "curves" / ("samples_" + report_suffix(opt) + ".tsv");
        detail::atomic_write_text(out.file, os.str());
        return out;
    }

    // ---- report verification ----------------------------------------------

    // Recomputes every AUC cell from the persisted raw scores and compares to
    // the stored cells. Returns the recomputed report text.
    std::string verify_report(const FingerprintOptions& opt) {
        fs::path tsv = report_path(opt, ".tsv");
        std::ifstream is(tsv);
        if (!is) throw io_error("missing report " + tsv.string());
        std::vector<ScoreEntry> entries;
        std::map<std::string, double> stored_auc;
        std::string score_kind = "corr-distance";
        std::string line;
        while (std::getline(is, line)) {
            std::vector<std::string> f;
            std::size_t pos = 0;
            while (true) {
                std::size_t tab = line.find('\t', pos);
                f.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
                if (tab == std::string::npos) break;
                pos = tab + 1;
            }
            if (f.size() >= 3 && f[0] == "meta" && f[1] == "score_kind") score_kind = f[2];
            if (f.size() >= 6 && f[0] == "score" && f[5] == "1") {
                ScoreEntry e;
                e.model_id = f[1];
                e.tag = f[2];
                e.task = f[3];
                e.score = std::stod(f[4]);
                entries.push_back(e);
            }
            if (f.size() >= 3 && f[0] == "auc" && f[1] != "Average" && f[2] != "-")
                stored_auc[f[1]] = std::stod(f[2]);
        }
        Orientation orient =
            score_kind == "asr" ? Orientation::higher_is_stolen : Orientation::lower_is_stolen;
        auto rows = build_auc_rows(entries, orient);
        std::ostringstream os;
        os << "recomputed AUC from " << entries.size() << " raw scores:\n";
        for (const auto& r : rows) {
            if (!r.applicable) continue;
            auto it = stored_auc.find(r.attack_tag);
            if (it == stored_auc.end()) throw config_error("report missing AUC row " + r.attack_tag);
            if (std::abs(it->second - r.value) > 1e-12)
                throw config_error("report AUC mismatch on " + r.attack_tag + ": stored " +
                                   std::to_string(it->second) + " recomputed " + std::to_string(r.value));
            os << "  " << r.attack_tag << " = " << r.value << " (matches stored)\n";
        }
        return os.str();
    }

    RunState& state() { return state_; }

    std::uint64_t seed_of(const std::string& label) const {
        return Rng(m_.master_seed).derive(label).seed();
    }

    ModelSpec spec_for(const std::string& arch) const {
        ModelSpec s;
        s.arch = arch_from_name(arch);
        s.c = m_.task.c;
        s.h = m_.task.h;
        s.w = m_.task.w;
        s.k = m_.task.k;
        return s;
    }

private:
    static std::string report_suffix(const FingerprintOptions& opt) {
        std::string k = opt.kernel == KernelId::Kind::cosine ? "cosine" : "rbf";
        return k + "_" + (opt.smooth ? "smooth" : "prob");
    }

    KernelChoice resolve_kernel(const FingerprintOptions& opt) {
        KernelChoice kc;
        kc.kind = opt.kernel;
        if (opt.kernel == KernelId::Kind::rbf)
            kc.delta = m_.rbf_delta == "median" ? RbfDelta::median() : RbfDelta::fixed(std::stod(m_.rbf_delta));
        return kc;
    }

    Tensor sacw_inputs_cached() {
        fs::path p = root_ / "fingerprints" / "sac-w_inputs.sacinp";
        if (fs::exists(p)) return load_inputs(p);
        Tensor inputs = build_sacw_inputs();
        detail::atomic_write_file(p, [&](const fs::path& q) { save_inputs(inputs, q); });
        return inputs;
    }

    Dataset probe_subset(std::uint64_t seed) {
        ensure_data();
        Rng rng(seed);
        std::vector<std::size_t> idx = rng.permutation(validation_.size());
        idx.resize(std::min(m_.prune_probe, validation_.size()));
        std::sort(idx.begin(), idx.end());
        return validation_.select(idx);
    }

    // Runs one checkpoint-producing job unless its output already exists.
    bool run_model_job(const std::string& id, const std::function<Model()>& build) {
        fs::path p = model_path(id);
        if (fs::exists(p)) return false;
        auto t0 = std::chrono::steady_clock::now();
        Model m = build();
        if (m.train_task == m_.task.task_id)
            m.record.heldout_acc = accuracy(m, validation_);
        else if (m.train_task == transfer_train_.task_id)
            m.record.heldout_acc = accuracy(m, transfer_heldout_);
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        detail::atomic_write_file(p, [&](const fs::path& q) { save_model(m, q); });
        RunState::Entry e;
        e.hash = detail::hex64(params_hash(m));
        e.seconds = secs;
        e.train_acc = m.record.train_acc;
        e.heldout_acc = m.record.heldout_acc;
        e.queries = m.record.teacher_queries;
        state_.put(id, e);
        return true;
    }

    void write_report(const ScoreReport& report, const FingerprintOptions& opt) {
        detail::atomic_write_text(report_path(opt, ".txt"), render_report_text(report));
        detail::atomic_write_text(report_path(opt, ".tsv"), render_report_tsv(report));
    }

    fs::path root_;
    ExperimentManifest m_;
    RunState state_;
    bool data_ready_ = false;
    Dataset defender_, attacker_, validation_, transfer_train_, transfer_heldout_;
    std::vector<std::unique_ptr<LoadedModel>> models_;
};

} // namespace sac
