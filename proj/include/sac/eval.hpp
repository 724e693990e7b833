#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sac/error.hpp"
#include "sac/fingerprint.hpp"
#include "sac/models.hpp"

namespace sac {

enum class Orientation { lower_is_stolen, higher_is_stolen };

// Mann-Whitney AUC: fraction of (stolen, irrelevant) pairs ordered the right
// way, ties counted 1/2. Exact for the small model populations used here.
inline double auc(const std::vector<double>& irrelevant, const std::vector<double>& stolen,
                  Orientation orient) {
    if (irrelevant.empty() || stolen.empty()) throw config_error("auc: empty score group");
    double good = 0.0;
    for (double s : stolen)
        for (double r : irrelevant) {
            if (s == r)
                good += 0.5;
            else if ((orient == Orientation::lower_is_stolen) ? (s < r) : (s > r))
                good += 1.0;
        }
    return good / (static_cast<double>(stolen.size()) * static_cast<double>(irrelevant.size()));
}

// ---------------------------------------------------------------------------
// Score reports
// ---------------------------------------------------------------------------

struct ScoreEntry {
    std::string model_id;
    std::string tag;   // provenance tag
    std::string task;  // training task id
    double score = 0.0;
    bool applicable = true; // false: structurally impossible (label-space mismatch)
};

struct AucRow {
    std::string attack_tag;
    double value = 0.0;
    bool applicable = true;
    bool inverted = false; // stolen scored on the wrong side of irrelevant
    std::size_t n_stolen = 0, n_irrelevant = 0;
};

struct ScoreReport {
    std::string mode;       // sac-w | sac-m | baseline-asr
    std::string score_kind; // corr-distance | asr
    std::string kernel;
    std::string labels;
    std::uint64_t manifest_hash = 0;
    std::vector<ScoreEntry> entries;
    std::vector<AucRow> rows;
    double average_auc = 0.0; // over applicable non-transfer rows
    std::optional<double> threshold;
    double phase_seconds = 0.0;
};

inline bool is_transfer_tag(const std::string& tag) {
    return tag == "transferA" || tag == "transferL";
}

// Negatives come from irrelevant models trained on the same task as the
// scored group (transfer attacks are judged against irrelevant models
// freshly trained on the transfer task).
inline std::vector<AucRow> build_auc_rows(const std::vector<ScoreEntry>& entries, Orientation orient) {
    std::map<std::string, std::vector<double>> irrelevant_by_task;
    for (const auto& e : entries)
        if (e.tag == "irrelevant" && e.applicable) irrelevant_by_task[e.task].push_back(e.score);

    std::vector<std::string> tag_order;
    std::map<std::string, std::vector<const ScoreEntry*>> by_tag;
    for (const auto& e : entries) {
        if (e.tag == "irrelevant" || e.tag == "source" || e.tag == "surrogate") continue;
        if (!by_tag.count(e.tag)) tag_order.push_back(e.tag);
        by_tag[e.tag].push_back(&e);
    }

    std::vector<AucRow> rows;
    for (const auto& tag : tag_order) {
        AucRow row;
        row.attack_tag = tag;
        const auto& group = by_tag[tag];
        std::vector<double> stolen;
        std::string task = group.front()->task;
        for (const auto* e : group)
            if (e->applicable) stolen.push_back(e->score);
        auto it = irrelevant_by_task.find(task);
        if (stolen.empty() || it == irrelevant_by_task.end() || it->second.empty()) {
            row.applicable = false;
        } else {
            row.n_stolen = stolen.size();
            row.n_irrelevant = it->second.size();
            row.value = auc(it->second, stolen, orient);
            row.inverted = row.value < 0.5;
        }
        rows.push_back(row);
    }
    return rows;
}

inline double average_main_auc(const std::vector<AucRow>& rows) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (!r.applicable || is_transfer_tag(r.attack_tag)) continue;
        s += r.value;
        ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Point-wise adversarial-example baseline
// ---------------------------------------------------------------------------

struct Suspect {
    std::string model_id;
    std::string tag;
    std::string task;
    const ModelOracle* oracle = nullptr;
};

struct AsrProbe {
    Tensor examples;                    // [n_adv, c, h, w]
    std::vector<std::uint16_t> targets; // wrong class the source now predicts
};

// Craft targeted adversarial examples on the source (PGD toward the second
// most likely class) and keep only those that actually fool the source.
inline AsrProbe build_asr_probe(const Model& source, const Tensor& candidate_pool, std::size_t n_adv,
                                const AdvConfig& adv, std::uint64_t seed) {
    if (n_adv < 20) throw config_error("baseline_asr: n_adv must be >= 20");
    std::size_t pool = candidate_pool.dim(0);
    std::size_t k = source.spec.k;
    std::size_t plane = candidate_pool.size() / pool;

    Rng rng = Rng(seed).derive("asr-candidates");
    std::vector<std::size_t> order(pool);
    for (std::size_t i = 0; i < pool; ++i) order[i] = i;
    rng.shuffle(order);

    AdvConfig cfg = adv;
    cfg.targeted = true;

    std::vector<std::size_t> kept;
    std::vector<std::uint16_t> targets;
    Tensor kept_imgs({n_adv, candidate_pool.dim(1), candidate_pool.dim(2), candidate_pool.dim(3)});

    const std::size_t chunk = 64;
    std::size_t found = 0;
    for (std::size_t b = 0; b < pool && found < n_adv; b += chunk) {
        std::size_t e = std::min(pool, b + chunk);
        std::vector<std::size_t> sub(order.begin() + b, order.begin() + e);
        Tensor x = detail::gather_rows(candidate_pool, sub, 0, sub.size());
        Tensor p = source.probs(x);
        // target = second most likely class on the clean input
        Tensor tgt({sub.size(), k});
        std::vector<std::uint16_t> tcls(sub.size());
        for (std::size_t i = 0; i < sub.size(); ++i) {
            const float* row = p.data() + i * k;
            std::size_t best = argmax_row(row, k);
            std::size_t second = best == 0 ? 1 : 0;
            for (std::size_t j = 0; j < k; ++j)
                if (j != best && row[j] > row[second]) second = j;
            tcls[i] = static_cast<std::uint16_t>(second);
            tgt.at2(i, second) = 1.f;
        }
        Tensor x_adv = adv_example(source, x, tgt, cfg);
        Tensor p_adv = source.probs(x_adv);
        for (std::size_t i = 0; i < sub.size() && found < n_adv; ++i) {
            if (argmax_row(p_adv.data() + i * k, k) != tcls[i]) continue;
            std::copy(x_adv.v.begin() + i * plane, x_adv.v.begin() + (i + 1) * plane,
                      kept_imgs.v.begin() + found * plane);
            targets.push_back(tcls[i]);
            ++found;
        }
    }
    if (found < n_adv)
        throw error("baseline_asr: only " + std::to_string(found) + " of " + std::to_string(n_adv) +
                    " source-fooling examples found in the candidate pool");
    AsrProbe probe;
    probe.examples = std::move(kept_imgs);
    probe.targets = std::move(targets);
    return probe;
}

// Score = fraction of kept examples on which the suspect predicts the same
// wrong class as the source. Suspects over a different label space are
// structurally out of reach and marked inapplicable.
inline std::vector<ScoreEntry> baseline_asr_scores(const Model& source, const AsrProbe& probe,
                                                   const std::vector<Suspect>& suspects) {
    std::vector<ScoreEntry> entries;
    for (const auto& s : suspects) {
        ScoreEntry e;
        e.model_id = s.model_id;
        e.tag = s.tag;
        e.task = s.task;
        if (s.oracle->num_classes() != source.spec.k || s.task != source.train_task) {
            e.applicable = false;
            e.score = std::numeric_limits<double>::quiet_NaN();
        } else {
            auto labels = s.oracle->query_labels(probe.examples);
            std::size_t hit = 0;
            for (std::size_t i = 0; i < labels.size(); ++i)
                if (labels[i] == probe.targets[i]) ++hit;
            e.score = static_cast<double>(hit) / static_cast<double>(labels.size());
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct PruningSweepRow {
    double ratio = 0.0;
    double accuracy = 0.0;
    double distance = 0.0;
};

struct PruningSweep {
    std::vector<PruningSweepRow> rows;
    double irrelevant_mean = 0.0; // reference line
};

inline PruningSweep pruning_sweep(const Model& source, const std::vector<double>& ratios,
                                  const Dataset& probe, const Dataset& acc_ds, const Tensor& inputs,
                                  const KernelChoice& kernel, const LabelMode& labels,
                                  const std::vector<const ModelOracle*>& irrelevant) {
    for (std::size_t i = 1; i < ratios.size(); ++i)
        if (ratios[i] < ratios[i - 1]) throw config_error("pruning_sweep: ratios must be ascending");
    if (!ratios.empty() && ratios.back() >= 1.0) throw config_error("pruning_sweep: ratios must be < 1");

    LocalOracle src_oracle(source);
    CorrelationMatrix c_src = fingerprint_model(src_oracle, inputs, kernel, labels);

    PruningSweep out;
    for (double r : ratios) {
        Model pruned = prune_by_activation(source, probe, r);
        LocalOracle o(pruned);
        PruningSweepRow row;
        row.ratio = r;
        row.accuracy = accuracy(pruned, acc_ds);
        row.distance = corr_distance(c_src, fingerprint_model(o, inputs, kernel, labels));
        out.rows.push_back(row);
    }
    double s = 0.0;
    for (const auto* o : irrelevant)
        s += corr_distance(c_src, fingerprint_model(*o, inputs, kernel, labels));
    out.irrelevant_mean = irrelevant.empty() ? 0.0 : s / static_cast<double>(irrelevant.size());
    return out;
}

struct SuspectOutputs {
    std::string model_id;
    std::string tag;
    std::string task;
    OutputSet outputs;
};

struct SampleSweepRow {
    std::size_t count = 0;
    std::map<std::string, double> auc_by_tag;
};

// SAC-w AUC as a function of the fingerprint input budget. Outputs were
// collected once on the full input set; a truncated input set corresponds to
// a row prefix of every OutputSet.
inline std::vector<SampleSweepRow> sample_count_sweep(const std::vector<std::size_t>& counts,
                                                      const OutputSet& source_outputs,
                                                      const std::vector<SuspectOutputs>& suspects,
                                                      const KernelChoice& kernel) {
    std::size_t full = source_outputs.n();
    std::vector<SampleSweepRow> out;
    for (std::size_t c : counts) {
        if (c < 10) throw config_error("sample_count_sweep: counts must be >= 10");
        if (c > full)
            throw config_error("sample_count_sweep: count " + std::to_string(c) +
                               " exceeds available pool " + std::to_string(full));
        auto truncate = [&](const OutputSet& o) {
            OutputSet t;
            t.flag = o.flag;
            t.outputs = Tensor({c, o.k()});
            std::copy(o.outputs.v.begin(), o.outputs.v.begin() + c * o.k(), t.outputs.v.begin());
            return t;
        };
        CorrelationMatrix c_src = corr_from_outputs(truncate(source_outputs), kernel);
        std::vector<ScoreEntry> entries;
        for (const auto& s : suspects) {
            ScoreEntry e;
            e.model_id = s.model_id;
            e.tag = s.tag;
            e.task = s.task;
            e.score = corr_distance(c_src, corr_from_outputs(truncate(s.outputs), kernel));
            entries.push_back(std::move(e));
        }
        SampleSweepRow row;
        row.count = c;
        for (const auto& r : build_auc_rows(entries, Orientation::lower_is_stolen))
            if (r.applicable) row.auc_by_tag[r.attack_tag] = r.value;
        out.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string render_report_text(const ScoreReport& r) {
    std::ostringstream os;
    os << "# fingerprint score report\n";
    os << "mode: " << r.mode << "   kernel: " << r.kernel << "   labels: " << r.labels << "\n";
    os << "score kind: " << r.score_kind
       << (r.score_kind == "asr" ? " (higher = stolen)" : " (lower = stolen)") << "\n";
    os << "manifest hash: " << std::hex << std::setw(16) << std::setfill('0') << r.manifest_hash
       << std::dec << std::setfill(' ') << "\n";
    if (r.threshold) os << "threshold d: " << std::setprecision(6) << *r.threshold << "\n";
    os << "phase seconds: " << std::fixed << std::setprecision(3) << r.phase_seconds << "\n\n";

    os << "AUC by attack:\n";
    os << "  " << std::left << std::setw(14) << "attack" << std::right << std::setw(8) << "AUC"
       << std::setw(10) << "stolen" << std::setw(12) << "irrelevant" << "  flags\n";
    for (const auto& row : r.rows) {
        os << "  " << std::left << std::setw(14) << row.attack_tag << std::right;
        if (!row.applicable) {
            os << std::setw(8) << "-" << std::setw(10) << "-" << std::setw(12) << "-" << "  n/a\n";
        } else {
            os << std::setw(8) << std::fixed << std::setprecision(3) << row.value << std::setw(10)
               << row.n_stolen << std::setw(12) << row.n_irrelevant << "  "
               << (row.inverted ? "inverted" : "") << "\n";
        }
    }
    os << "  " << std::left << std::setw(14) << "Average" << std::right << std::setw(8) << std::fixed
       << std::setprecision(3) << r.average_auc << "\n\n";

    os << "per-model scores:\n";
    os << "  " << std::left << std::setw(26) << "model" << std::setw(14) << "tag" << std::setw(26)
       << "task" << std::right << std::setw(10) << "score";
    if (r.threshold) os << "  verdict";
    os << "\n";
    for (const auto& e : r.entries) {
        os << "  " << std::left << std::setw(26) << e.model_id << std::setw(14) << e.tag << std::setw(26)
           << e.task << std::right << std::setw(10);
        if (!e.applicable) {
            os << "-";
        } else {
            os << std::fixed << std::setprecision(5) << e.score;
            if (r.threshold && r.score_kind == "corr-distance")
                os << (e.score < *r.threshold ? "  stolen" : "  clean");
        }
        os << "\n";
    }
    return os.str();
}

inline std::string render_report_tsv(const ScoreReport& r) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "meta\tmode\t" << r.mode << "\n";
    os << "meta\tscore_kind\t" << r.score_kind << "\n";
    os << "meta\tkernel\t" << r.kernel << "\n";
    os << "meta\tlabels\t" << r.labels << "\n";
    os << "meta\tmanifest_hash\t" << r.manifest_hash << "\n";
    if (r.threshold) os << "meta\tthreshold\t" << *r.threshold << "\n";
    // wall-clock timings stay out of the machine table so reruns of one
    // manifest produce byte-identical files
    for (const auto& e : r.entries) {
        os << "score\t" << e.model_id << "\t" << e.tag << "\t" << e.task << "\t";
        if (e.applicable)
            os << e.score;
        else
            os << "-";
        os << "\t" << (e.applicable ? "1" : "0") << "\n";
    }
    for (const auto& row : r.rows) {
        os << "auc\t" << row.attack_tag << "\t";
        if (row.applicable)
            os << row.value << "\t" << row.n_stolen << "\t" << row.n_irrelevant << "\t"
               << (row.inverted ? "inverted" : "ok");
        else
            os << "-\t0\t0\tn/a";
        os << "\n";
    }
    os << "auc\tAverage\t" << r.average_auc << "\t\t\t\n";
    return os.str();
}

} // namespace sac
