#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "sac/data.hpp"
#include "sac/error.hpp"
#include "sac/models.hpp"
#include "sac/rng.hpp"
#include "sac/tensor.hpp"

namespace sac {

// ---------------------------------------------------------------------------
// Output sets and correlation matrices
// ---------------------------------------------------------------------------

enum class OutputFlag { probability, smooth_label };

// Outputs of one model on the fingerprint input set, one row per input.
struct OutputSet {
    Tensor outputs; // [n, k]
    OutputFlag flag = OutputFlag::probability;

    std::size_t n() const { return outputs.dim(0); }
    std::size_t k() const { return outputs.dim(1); }

    void validate_rows(double tol = 1e-5) const {
        for (std::size_t i = 0; i < n(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < k(); ++j) s += static_cast<double>(outputs.v[i * k() + j]);
            if (std::abs(s - 1.0) > tol)
                throw invalid_input_error("OutputSet: row " + std::to_string(i) + " sums to " +
                                          std::to_string(s));
        }
    }
};

struct KernelId {
    enum class Kind { cosine, rbf } kind = Kind::cosine;
    double delta = 0.0; // resolved RBF bandwidth; unused for cosine

    bool operator==(const KernelId& o) const {
        return kind == o.kind && (kind == Kind::cosine || delta == o.delta);
    }

    std::string str() const {
        if (kind == Kind::cosine) return "cosine";
        return "rbf(" + std::to_string(delta) + ")";
    }
};

struct CorrelationMatrix {
    Tensor m; // [n, n], symmetric, unit diagonal
    KernelId kernel;

    std::size_t n() const { return m.dim(0); }
};

// C_ij = <o_i, o_j> / (|o_i| |o_j|). Zero rows are rejected.
inline CorrelationMatrix cosine_corr(const OutputSet& o) {
    std::size_t n = o.n(), k = o.k();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        const float* row = o.outputs.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) s += static_cast<double>(row[j]) * row[j];
        if (s <= 0.0) throw invalid_input_error("cosine_corr: all-zero output row " + std::to_string(i));
        norms[i] = std::sqrt(s);
    }
    CorrelationMatrix cm;
    cm.kernel = KernelId{KernelId::Kind::cosine, 0.0};
    cm.m = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        cm.m.v[i * n + i] = 1.f;
        const float* ri = o.outputs.data() + i * k;
        for (std::size_t j = i + 1; j < n; ++j) {
            const float* rj = o.outputs.data() + j * k;
            double dot = 0.0;
            for (std::size_t q = 0; q < k; ++q) dot += static_cast<double>(ri[q]) * rj[q];
            float v = static_cast<float>(dot / (norms[i] * norms[j]));
            cm.m.v[i * n + j] = v;
            cm.m.v[j * n + i] = v;
        }
    }
    return cm;
}

struct RbfDelta {
    // fixed positive bandwidth, or resolve to the median pairwise L2 distance
    bool use_median = true;
    double value = 0.0;

    static RbfDelta median() { return RbfDelta{true, 0.0}; }
    static RbfDelta fixed(double v) { return RbfDelta{false, v}; }
};

// C_ij = exp(-|o_i - o_j|^2 / (2 delta^2)).
inline CorrelationMatrix rbf_corr(const OutputSet& o, const RbfDelta& delta = RbfDelta::median()) {
    std::size_t n = o.n(), k = o.k();
    Tensor sq({n, n});
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        const float* ri = o.outputs.data() + i * k;
        for (std::size_t j = i + 1; j < n; ++j) {
            const float* rj = o.outputs.data() + j * k;
            double s = 0.0;
            for (std::size_t q = 0; q < k; ++q) {
                double d = static_cast<double>(ri[q]) - rj[q];
                s += d * d;
            }
            sq.v[i * n + j] = static_cast<float>(s);
            dists.push_back(std::sqrt(s));
        }
    }
    double dv;
    if (delta.use_median) {
        if (dists.empty()) throw config_error("rbf_corr: need at least 2 rows for the median heuristic");
        std::vector<double> sorted = dists;
        std::sort(sorted.begin(), sorted.end());
        dv = sorted.size() % 2 ? sorted[sorted.size() / 2]
                               : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
        if (dv <= 0.0)
            throw config_error("rbf_corr: median pairwise distance is zero (identical outputs)");
    } else {
        dv = delta.value;
        if (dv <= 0.0) throw config_error("rbf_corr: delta must be > 0");
    }
    CorrelationMatrix cm;
    cm.kernel = KernelId{KernelId::Kind::rbf, dv};
    cm.m = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        cm.m.v[i * n + i] = 1.f;
        for (std::size_t j = i + 1; j < n; ++j) {
            float v = static_cast<float>(std::exp(-static_cast<double>(sq.v[i * n + j]) / (2.0 * dv * dv)));
            cm.m.v[i * n + j] = v;
            cm.m.v[j * n + i] = v;
        }
    }
    return cm;
}

// Mean absolute entrywise difference: |Ca - Cb|_1 / n^2.
inline double corr_distance(const CorrelationMatrix& a, const CorrelationMatrix& b) {
    if (a.n() != b.n()) throw config_error("corr_distance: matrix sizes differ");
    if (!(a.kernel == b.kernel)) throw config_error("corr_distance: kernel mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.m.size(); ++i)
        s += std::abs(static_cast<double>(a.m.v[i]) - b.m.v[i]);
    return s / static_cast<double>(a.m.size());
}

// (1-eps) * onehot(pred) + eps * uniform(k).
inline Tensor smooth_label(std::size_t pred, std::size_t k, double eps) {
    if (pred >= k) throw index_error("smooth_label: pred out of range");
    if (eps < 0.0 || eps > 1.0) throw invalid_input_error("smooth_label: eps in [0,1]");
    Tensor t({k});
    float u = static_cast<float>(eps / static_cast<double>(k));
    for (std::size_t i = 0; i < k; ++i) t[i] = u;
    t[pred] += static_cast<float>(1.0 - eps);
    return t;
}

// ---------------------------------------------------------------------------
// Fingerprint pipeline pieces
// ---------------------------------------------------------------------------

struct LabelMode {
    bool smooth = false;
    double eps = 0.1;

    std::string str() const { return smooth ? "smooth(" + std::to_string(eps) + ")" : "probability"; }
};

struct KernelChoice {
    KernelId::Kind kind = KernelId::Kind::cosine;
    RbfDelta delta = RbfDelta::median();
};

// Query a suspect black-box on every input and build its OutputSet.
inline OutputSet collect_outputs(const ModelOracle& suspect, const Tensor& inputs, const LabelMode& mode) {
    OutputSet o;
    Tensor p = suspect.query_probs(inputs);
    if (p.rank() != 2 || p.dim(0) != inputs.dim(0)) throw query_error("suspect returned malformed outputs");
    if (mode.smooth) {
        std::size_t n = p.dim(0), k = p.dim(1);
        Tensor sm({n, k});
        for (std::size_t i = 0; i < n; ++i) {
            Tensor row = smooth_label(argmax_row(p.data() + i * k, k), k, mode.eps);
            std::copy(row.v.begin(), row.v.end(), sm.v.begin() + i * k);
        }
        o.outputs = std::move(sm);
        o.flag = OutputFlag::smooth_label;
    } else {
        o.outputs = std::move(p);
        o.flag = OutputFlag::probability;
    }
    return o;
}

inline CorrelationMatrix corr_from_outputs(const OutputSet& o, const KernelChoice& kc) {
    return kc.kind == KernelId::Kind::cosine ? cosine_corr(o) : rbf_corr(o, kc.delta);
}

// Full suspect fingerprint: query on every input, optionally smooth, kernel.
inline CorrelationMatrix fingerprint_model(const ModelOracle& suspect, const Tensor& inputs,
                                           const KernelChoice& kernel, const LabelMode& mode) {
    if (inputs.dim(0) == 0) throw config_error("fingerprint_model: empty input set");
    return corr_from_outputs(collect_outputs(suspect, inputs, mode), kernel);
}

// Defender-side surrogates: prob-mode extraction from the source on defender
// data, m independent seeds.
inline std::vector<Model> train_surrogates(const ModelOracle& source, const Dataset& defender,
                                           const std::vector<ModelSpec>& specs, const TrainConfig& base_cfg,
                                           std::uint64_t seed, std::size_t m) {
    if (m < 1) throw config_error("train_surrogates: m must be >= 1");
    if (specs.empty()) throw config_error("train_surrogates: need at least one spec");
    std::vector<Model> out;
    out.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        TrainConfig cfg = base_cfg;
        cfg.seed = Rng(seed).derive("surrogate", i).seed();
        out.push_back(extract(source, defender, specs[i % specs.size()], cfg, ExtractMode::prob, "surrogate"));
    }
    return out;
}

// Samples every model in `family` (source + surrogates) misclassifies; when
// filter oracles are given, each must additionally classify the sample
// correctly. Ordering is the dataset order; truncated to n_max.
inline std::vector<std::size_t> select_misclassified_indices(
    const Dataset& defender, const std::vector<const ModelOracle*>& family,
    const std::vector<const ModelOracle*>& filters, std::size_t n_max) {
    if (family.size() < 2)
        throw config_error("select_misclassified: need the source and at least one surrogate");
    std::vector<std::vector<std::uint16_t>> fam_preds, fil_preds;
    for (const auto* m : family) fam_preds.push_back(m->query_labels(defender.images));
    for (const auto* m : filters) fil_preds.push_back(m->query_labels(defender.images));

    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < defender.size(); ++i) {
        bool all_wrong = true;
        for (const auto& preds : fam_preds)
            if (preds[i] == defender.labels[i]) {
                all_wrong = false;
                break;
            }
        if (!all_wrong) continue;
        bool filters_ok = true;
        for (const auto& preds : fil_preds)
            if (preds[i] != defender.labels[i]) {
                filters_ok = false;
                break;
            }
        if (filters_ok) picked.push_back(i);
    }
    if (picked.size() < 10)
        throw insufficient_samples_error("select_misclassified: only " + std::to_string(picked.size()) +
                                             " qualifying samples (need >= 10)",
                                         picked.size());
    if (picked.size() > n_max) picked.resize(n_max);
    return picked;
}

inline Tensor select_misclassified(const Dataset& defender, const std::vector<const ModelOracle*>& family,
                                   const std::vector<const ModelOracle*>& filters, std::size_t n_max) {
    auto idx = select_misclassified_indices(defender, family, filters, n_max);
    return defender.select(idx).images;
}

// Threshold rule: midpoint of the two group means.
inline double choose_threshold(const std::vector<double>& irrelevant_scores,
                               const std::vector<double>& extract_adv_scores) {
    if (irrelevant_scores.empty() || extract_adv_scores.empty())
        throw config_error("choose_threshold: both score lists must be nonempty");
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    return 0.5 * (mean(irrelevant_scores) + mean(extract_adv_scores));
}

// ---------------------------------------------------------------------------
// Records and interchange files
// ---------------------------------------------------------------------------

// Reference fingerprint of the source model against a stored input set.
struct FingerprintRecord {
    std::string kernel_id;       // "cosine" or "rbf(<delta>)"
    std::uint64_t input_hash = 0;
    std::string input_path;
    CorrelationMatrix source;
    std::string manifest; // creation parameters as structured text
};

inline void save_fingerprint_record(const FingerprintRecord& r, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path.string() + " for writing");
    os.write("SACFPR01", 8);
    detail::write_string(os, r.kernel_id);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(r.source.n()));
    detail::write_pod<std::uint64_t>(os, r.input_hash);
    detail::write_string(os, r.input_path);
    detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(r.source.kernel.kind));
    detail::write_pod<double>(os, r.source.kernel.delta);
    detail::write_bytes(os, r.source.m.data(), r.source.m.size() * sizeof(float));
    detail::write_string(os, r.manifest);
    if (!os) throw io_error("write failed for " + path.string());
}

inline FingerprintRecord load_fingerprint_record(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    detail::check_magic(is, "SACFPR01", "fingerprint record");
    FingerprintRecord r;
    r.kernel_id = detail::read_string(is, "fingerprint kernel id");
    auto n = detail::read_pod<std::uint32_t>(is, "fingerprint n");
    r.input_hash = detail::read_pod<std::uint64_t>(is, "fingerprint input hash");
    r.input_path = detail::read_string(is, "fingerprint input path");
    r.source.kernel.kind = static_cast<KernelId::Kind>(detail::read_pod<std::uint64_t>(is, "kernel kind"));
    r.source.kernel.delta = detail::read_pod<double>(is, "kernel delta");
    r.source.m = Tensor({n, n});
    detail::read_bytes(is, r.source.m.data(), r.source.m.size() * sizeof(float), "fingerprint matrix");
    r.manifest = detail::read_string(is, "fingerprint manifest");
    return r;
}

// Fingerprint input set on disk: a dataset file whose labels are all zero is
// wasteful, so inputs are stored via the OutputSet-style raw block:
// "SACINP01" | u32 n,c,h,w | f32 data.
inline void save_inputs(const Tensor& inputs, const std::filesystem::path& path) {
    if (inputs.rank() != 4) throw shape_error("save_inputs: expected [n,c,h,w]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path.string() + " for writing");
    os.write("SACINP01", 8);
    for (std::size_t d = 0; d < 4; ++d)
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(inputs.dim(d)));
    detail::write_bytes(os, inputs.data(), inputs.size() * sizeof(float));
    if (!os) throw io_error("write failed for " + path.string());
}

inline Tensor load_inputs(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    detail::check_magic(is, "SACINP01", "fingerprint inputs");
    std::vector<std::size_t> s(4);
    for (auto& d : s) d = detail::read_pod<std::uint32_t>(is, "input dim");
    Tensor t(s);
    detail::read_bytes(is, t.data(), t.size() * sizeof(float), "input data");
    return t;
}

// OutputSet interchange for externally produced outputs:
// "SACOUT01" | u32 n | u32 k | row-major f32.
inline void save_output_set(const OutputSet& o, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path.string() + " for writing");
    os.write("SACOUT01", 8);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(o.n()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(o.k()));
    detail::write_bytes(os, o.outputs.data(), o.outputs.size() * sizeof(float));
    if (!os) throw io_error("write failed for " + path.string());
}

inline OutputSet load_output_set(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    detail::check_magic(is, "SACOUT01", "output set");
    auto n = detail::read_pod<std::uint32_t>(is, "output set n");
    auto k = detail::read_pod<std::uint32_t>(is, "output set k");
    OutputSet o;
    o.outputs = Tensor({n, k});
    detail::read_bytes(is, o.outputs.data(), o.outputs.size() * sizeof(float), "output set data");
    return o;
}

} // namespace sac
