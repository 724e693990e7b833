#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sac/data.hpp"
#include "sac/error.hpp"
#include "sac/nn.hpp"
#include "sac/rng.hpp"
#include "sac/tensor.hpp"

namespace sac {

// ---------------------------------------------------------------------------
// Model zoo
// ---------------------------------------------------------------------------

enum class Arch { mlp_s, mlp_w, cnn_s, cnn_p };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::mlp_s: return "mlp-s";
        case Arch::mlp_w: return "mlp-w";
        case Arch::cnn_s: return "cnn-s";
        case Arch::cnn_p: return "cnn-p";
    }
    return "?";
}

inline Arch arch_from_name(const std::string& s) {
    if (s == "mlp-s") return Arch::mlp_s;
    if (s == "mlp-w") return Arch::mlp_w;
    if (s == "cnn-s") return Arch::cnn_s;
    if (s == "cnn-p") return Arch::cnn_p;
    throw config_error("unknown architecture id: " + s);
}

struct ModelSpec {
    Arch arch = Arch::mlp_s;
    std::size_t c = 1, h = 16, w = 16, k = 10;
};

// Four structurally distinct stacks (layer counts/kinds differ pairwise),
// all ending in a k-logit dense head.
inline std::vector<LayerDef> layers_for(const ModelSpec& s) {
    std::size_t d = s.c * s.h * s.w;
    switch (s.arch) {
        case Arch::mlp_s:
            return {{LayerKind::flatten}, {LayerKind::dense, d, 64}, {LayerKind::relu},
                    {LayerKind::dense, 64, s.k}};
        case Arch::mlp_w:
            return {{LayerKind::flatten}, {LayerKind::dense, d, 96}, {LayerKind::relu},
                    {LayerKind::dense, 96, 48}, {LayerKind::relu}, {LayerKind::dense, 48, s.k}};
        case Arch::cnn_s:
            return {{LayerKind::conv3x3, s.c, 8},
                    {LayerKind::relu},
                    {LayerKind::maxpool2},
                    {LayerKind::flatten},
                    {LayerKind::dense, 8 * (s.h / 2) * (s.w / 2), s.k}};
        case Arch::cnn_p:
            return {{LayerKind::conv3x3, s.c, 6},
                    {LayerKind::relu},
                    {LayerKind::maxpool2},
                    {LayerKind::conv3x3, 6, 12},
                    {LayerKind::relu},
                    {LayerKind::maxpool2},
                    {LayerKind::flatten},
                    {LayerKind::dense, 12 * (s.h / 4) * (s.w / 4), 32},
                    {LayerKind::relu},
                    {LayerKind::dense, 32, s.k}};
    }
    throw config_error("layers_for: bad arch");
}

struct TrainRecord {
    double train_acc = 0.0;
    double heldout_acc = 0.0;
    int epochs = 0;
    std::uint64_t teacher_queries = 0;
};

struct Model {
    ModelSpec spec;
    std::string provenance = "source";
    std::string train_task;
    std::vector<ParamList<float>> params; // aligned with layers_for(spec)
    TrainRecord record;

    std::vector<LayerDef> layers() const { return layers_for(spec); }

    Tensor forward(const Tensor& x) const {
        Tensor cur = x;
        auto defs = layers();
        for (std::size_t i = 0; i < defs.size(); ++i) cur = layer_forward(defs[i], cur, params[i]);
        return cur;
    }

    // Row-wise softmax probabilities on a batch [n,c,h,w] -> [n,k].
    Tensor probs(const Tensor& x) const;
};

inline Model init_model(const ModelSpec& spec, const std::string& provenance, const std::string& task,
                        std::uint64_t seed) {
    Model m;
    m.spec = spec;
    m.provenance = provenance;
    m.train_task = task;
    Rng rng = Rng(seed).derive("init");
    for (const auto& def : layers_for(spec)) m.params.push_back(init_layer_params<float>(def, rng));
    return m;
}

inline bool params_equal(const Model& a, const Model& b) {
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t l = 0; l < a.params.size(); ++l) {
        if (a.params[l].size() != b.params[l].size()) return false;
        for (std::size_t t = 0; t < a.params[l].size(); ++t) {
            if (a.params[l][t].shape != b.params[l][t].shape) return false;
            if (std::memcmp(a.params[l][t].data(), b.params[l][t].data(),
                            a.params[l][t].size() * sizeof(float)) != 0)
                return false;
        }
    }
    return true;
}

inline std::uint64_t params_hash(const Model& m) {
    std::uint64_t h = fnv1a64(m.provenance);
    h = fnv1a64(m.train_task.data(), m.train_task.size(), h);
    for (const auto& pl : m.params)
        for (const auto& t : pl) h = fnv1a64(t.data(), t.size() * sizeof(float), h);
    return h;
}

// ---------------------------------------------------------------------------
// Batch heads
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& logits, double temp) {
    if (logits.rank() != 2) throw shape_error("softmax_rows: expected [n,k]");
    std::size_t n = logits.dim(0), k = logits.dim(1);
    Tensor out({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        const float* z = logits.data() + i * k;
        float* p = out.data() + i * k;
        double mx = z[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[j]));
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            double e = std::exp((z[j] - mx) / temp);
            p[j] = static_cast<float>(e);
            sum += e;
        }
        for (std::size_t j = 0; j < k; ++j) p[j] = static_cast<float>(p[j] / sum);
    }
    return out;
}

inline Tensor Model::probs(const Tensor& x) const { return softmax_rows(forward(x), 1.0); }

// Temperature-soften a probability row set: softmax(log p / T). Probabilities
// are shift-invariant images of the logits, so this equals softmax(z/T).
inline Tensor soften_rows(const Tensor& probs, double temp) {
    if (probs.rank() != 2) throw shape_error("soften_rows: expected [n,k]");
    std::size_t n = probs.dim(0), k = probs.dim(1);
    Tensor logp({n, k});
    for (std::size_t i = 0; i < n * k; ++i)
        logp[i] = static_cast<float>(std::log(std::max(static_cast<double>(probs[i]), 1e-12)));
    return softmax_rows(logp, temp);
}

struct BatchLoss {
    double loss = 0.0;
    Tensor dlogits; // gradient of the batch-mean loss
};

// Mean cross entropy against hard labels; dlogits = (softmax - onehot)/n.
inline BatchLoss ce_head(const Tensor& logits, const std::vector<std::uint16_t>& labels) {
    std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) throw shape_error("ce_head: label count mismatch");
    BatchLoss out;
    Tensor p = softmax_rows(logits, 1.0);
    out.dlogits = Tensor({n, k});
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t y = labels[i];
        if (y >= k) throw index_error("ce_head: label out of range");
        const float* pi = p.data() + i * k;
        total += -std::log(std::max(static_cast<double>(pi[y]), 1e-12));
        float* d = out.dlogits.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) d[j] = pi[j] / static_cast<float>(n);
        d[y] -= 1.0f / static_cast<float>(n);
    }
    out.loss = total / static_cast<double>(n);
    return out;
}

// Distillation head:
//   L = alpha * T^2 * KL(student^T, teacher^T) + (1-alpha) * CE(student, argmax teacher)
// The T^2 factor keeps the soft term's gradients on the same scale as CE, the
// usual convention when distilling at high temperature.
inline BatchLoss distill_head(const Tensor& logits, const Tensor& teacher_probs, double alpha, double temp) {
    std::size_t n = logits.dim(0), k = logits.dim(1);
    if (teacher_probs.shape != logits.shape) throw shape_error("distill_head: teacher shape mismatch");
    BatchLoss out;
    out.dlogits = Tensor({n, k});
    Tensor p1 = softmax_rows(logits, 1.0);
    Tensor s = softmax_rows(logits, temp);
    Tensor t = soften_rows(teacher_probs, temp);
    double total = 0.0;
    double invn = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float* si = s.data() + i * k;
        const float* ti = t.data() + i * k;
        const float* pi = p1.data() + i * k;
        const float* tp = teacher_probs.data() + i * k;
        float* d = out.dlogits.data() + i * k;
        std::size_t hard = argmax_row(tp, k);

        double kl = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            double sj = std::max(static_cast<double>(si[j]), 1e-12);
            double tj = std::max(static_cast<double>(ti[j]), 1e-12);
            kl += static_cast<double>(si[j]) * (std::log(sj) - std::log(tj));
        }
        double ce = -std::log(std::max(static_cast<double>(pi[hard]), 1e-12));
        total += alpha * temp * temp * kl + (1.0 - alpha) * ce;

        for (std::size_t j = 0; j < k; ++j) {
            double sj = std::max(static_cast<double>(si[j]), 1e-12);
            double tj = std::max(static_cast<double>(ti[j]), 1e-12);
            // d/dz_j of KL(s,t) = (1/T) * s_j * ((log s_j - log t_j) - KL)
            double dkl = (1.0 / temp) * static_cast<double>(si[j]) * ((std::log(sj) - std::log(tj)) - kl);
            double dce = static_cast<double>(pi[j]) - (j == hard ? 1.0 : 0.0);
            d[j] = static_cast<float>((alpha * temp * temp * dkl + (1.0 - alpha) * dce) * invn);
        }
    }
    out.loss = total * invn;
    return out;
}

// ---------------------------------------------------------------------------
// Black-box query interface. Attack and fingerprint code paths touch suspect
// and source models only through this surface.
// ---------------------------------------------------------------------------

class ModelOracle {
public:
    virtual ~ModelOracle() = default;
    virtual std::size_t num_classes() const = 0;
    virtual Tensor query_probs(const Tensor& images) const = 0; // [n, k']

    std::vector<std::uint16_t> query_labels(const Tensor& images) const {
        Tensor p = query_probs(images);
        std::vector<std::uint16_t> out(p.dim(0));
        for (std::size_t i = 0; i < p.dim(0); ++i)
            out[i] = static_cast<std::uint16_t>(argmax_row(p.data() + i * p.dim(1), p.dim(1)));
        return out;
    }

    std::uint64_t query_count() const { return queries_.load(); }

protected:
    void count(std::uint64_t n) const { queries_.fetch_add(n); }

private:
    mutable std::atomic<std::uint64_t> queries_{0};
};

class LocalOracle : public ModelOracle {
public:
    explicit LocalOracle(const Model& m) : model_(&m) {}

    std::size_t num_classes() const override { return model_->spec.k; }

    Tensor query_probs(const Tensor& images) const override {
        count(images.dim(0));
        return model_->probs(images);
    }

private:
    const Model* model_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 20;
    std::size_t batch = 32;
    double lr = 0.05;
    double momentum = 0.9;
    double clip_norm = 5.0;     // global gradient-norm clip per batch; 0 disables
    double distill_alpha = 0.9; // soft/hard mixing weight for prob-mode extraction
    double temperature = 20.0;  // distillation temperature
    std::uint64_t seed = 0;

    void validate() const {
        if (distill_alpha < 0.0 || distill_alpha > 1.0) throw config_error("TrainConfig: alpha in [0,1]");
        if (temperature <= 0.0) throw config_error("TrainConfig: temperature > 0");
        if (batch == 0) throw config_error("TrainConfig: batch must be >= 1");
        if (epochs < 0) throw config_error("TrainConfig: epochs must be >= 0");
        if (clip_norm < 0.0) throw config_error("TrainConfig: clip_norm must be >= 0");
    }
};

struct AdvConfig {
    double eps = 8.0 / 255.0;
    double step = 8.0 / 255.0;
    int steps = 1; // 1 = FGSM, >1 = PGD
    bool targeted = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (eps <= 0.0) throw config_error("AdvConfig: eps must be > 0");
        if (step <= 0.0 || step > eps + 1e-12) throw config_error("AdvConfig: need 0 < step <= eps");
        if (steps < 1) throw config_error("AdvConfig: steps must be >= 1");
    }
};

namespace detail {

struct ForwardCache {
    std::vector<Tensor> inputs; // input to each layer
    Tensor logits;
};

inline ForwardCache forward_cached(const Model& m, const std::vector<LayerDef>& defs, const Tensor& x) {
    ForwardCache fc;
    Tensor cur = x;
    for (std::size_t i = 0; i < defs.size(); ++i) {
        fc.inputs.push_back(cur);
        cur = layer_forward(defs[i], cur, m.params[i]);
    }
    fc.logits = std::move(cur);
    return fc;
}

// Backpropagate dlogits. Returns parameter grads for layers >= first_trainable
// (empty lists below) and, when requested, the gradient at the network input.
inline std::vector<ParamList<float>> backward_through(const Model& m, const std::vector<LayerDef>& defs,
                                                      const ForwardCache& fc, const Tensor& dlogits,
                                                      std::size_t first_trainable, bool need_input_grad,
                                                      Tensor* input_grad) {
    std::vector<ParamList<float>> grads(defs.size());
    Tensor d = dlogits;
    for (std::size_t ri = defs.size(); ri-- > 0;) {
        if (!need_input_grad && ri < first_trainable) break;
        auto g = layer_backward(defs[ri], fc.inputs[ri], m.params[ri], d);
        if (ri >= first_trainable) grads[ri] = std::move(g.dparams);
        d = std::move(g.dx);
        if (ri == 0 && need_input_grad && input_grad) *input_grad = d;
    }
    // frozen layers contribute zero grads so optimizer state shapes line up
    for (std::size_t i = 0; i < defs.size(); ++i)
        if (grads[i].empty())
            for (const auto& t : m.params[i]) grads[i].emplace_back(t.shape);
    return grads;
}

inline Tensor gather_batch(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t begin,
                           std::size_t end) {
    std::vector<std::size_t> s = ds.images.shape;
    s[0] = end - begin;
    Tensor x(s);
    std::size_t plane = ds.images.size() / ds.images.dim(0);
    for (std::size_t i = begin; i < end; ++i)
        std::copy(ds.images.v.begin() + order[i] * plane, ds.images.v.begin() + (order[i] + 1) * plane,
                  x.v.begin() + (i - begin) * plane);
    return x;
}

inline void clip_gradients(std::vector<ParamList<float>>& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& pl : grads)
        for (const auto& t : pl)
            for (float v : t.v) sq += static_cast<double>(v) * v;
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    float scale = static_cast<float>(max_norm / norm);
    for (auto& pl : grads)
        for (auto& t : pl)
            for (float& v : t.v) v *= scale;
}

inline Tensor gather_rows(const Tensor& images, const std::vector<std::size_t>& order, std::size_t begin,
                          std::size_t end) {
    std::vector<std::size_t> s = images.shape;
    s[0] = end - begin;
    Tensor x(s);
    std::size_t plane = images.size() / images.dim(0);
    for (std::size_t i = begin; i < end; ++i)
        std::copy(images.v.begin() + order[i] * plane, images.v.begin() + (order[i] + 1) * plane,
                  x.v.begin() + (i - begin) * plane);
    return x;
}

} // namespace detail

inline double accuracy(const Model& m, const Dataset& ds, std::size_t batch = 256) {
    std::size_t n = ds.size(), correct = 0;
    for (std::size_t b = 0; b < n; b += batch) {
        std::size_t e = std::min(n, b + batch);
        std::vector<std::size_t> idx(e - b);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = b + i;
        Tensor logits = m.forward(detail::gather_batch(ds, idx, 0, idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (argmax_row(logits.data() + i * m.spec.k, m.spec.k) == ds.labels[b + i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

// Fraction of inputs on which two oracles predict the same class.
inline double agreement(const ModelOracle& a, const ModelOracle& b, const Tensor& images) {
    auto la = a.query_labels(images);
    auto lb = b.query_labels(images);
    std::size_t same = 0;
    for (std::size_t i = 0; i < la.size(); ++i)
        if (la[i] == lb[i]) ++same;
    return static_cast<double>(same) / static_cast<double>(la.size());
}

namespace detail {

// Shared SGD loop. `teacher_probs` (aligned with ds rows) switches the head
// to distillation; `first_trainable` freezes everything below that layer.
inline void train_loop(Model& m, const Dataset& ds, const TrainConfig& cfg, std::size_t first_trainable,
                       const Tensor* teacher_probs, const std::vector<std::uint16_t>* hard_labels) {
    cfg.validate();
    auto defs = m.layers();
    SgdOptimizer<float> opt(cfg.lr, cfg.momentum);
    std::size_t n = ds.size();
    Rng shuffle_root = Rng(cfg.seed).derive("epoch-shuffle");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    const std::vector<std::uint16_t>& labels = hard_labels ? *hard_labels : ds.labels;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = shuffle_root.derive("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t nb = 0;
        for (std::size_t b = 0; b < n; b += cfg.batch) {
            std::size_t e = std::min(n, b + cfg.batch);
            Tensor x = gather_batch(ds, order, b, e);
            auto fc = forward_cached(m, defs, x);
            BatchLoss head;
            if (teacher_probs) {
                std::vector<std::size_t> sub(order.begin() + b, order.begin() + e);
                Tensor tp = gather_rows(*teacher_probs, sub, 0, sub.size());
                head = distill_head(fc.logits, tp, cfg.distill_alpha, cfg.temperature);
            } else {
                std::vector<std::uint16_t> y(e - b);
                for (std::size_t i = b; i < e; ++i) y[i - b] = labels[order[i]];
                head = ce_head(fc.logits, y);
            }
            epoch_loss += head.loss;
            ++nb;
            auto grads = backward_through(m, defs, fc, head.dlogits, first_trainable, false, nullptr);
            clip_gradients(grads, cfg.clip_norm);
            opt.step(m.params, grads);
        }
        if (nb && !std::isfinite(epoch_loss))
            throw train_error("training diverged (non-finite loss) at epoch " + std::to_string(epoch), epoch);
    }
    m.record.epochs += cfg.epochs;
    m.record.train_acc = accuracy(m, ds);
}

inline std::size_t last_dense_index(const std::vector<LayerDef>& defs) {
    for (std::size_t i = defs.size(); i-- > 0;)
        if (defs[i].kind == LayerKind::dense) return i;
    throw config_error("model has no dense head");
}

} // namespace detail

// Supervised training from scratch on ground-truth labels.
inline Model train(const Dataset& ds, const ModelSpec& spec, const TrainConfig& cfg,
                   const std::string& provenance = "source", const Dataset* heldout = nullptr) {
    if (ds.k != spec.k) throw config_error("train: dataset k != spec k");
    Model m = init_model(spec, provenance, ds.task_id, cfg.seed);
    detail::train_loop(m, ds, cfg, 0, nullptr, nullptr);
    if (heldout) m.record.heldout_acc = accuracy(m, *heldout);
    return m;
}

enum class TuneMode { all, last };

// Fine-tune an existing model on (attacker) data with ground-truth labels.
inline Model finetune(const Model& src, const Dataset& ds, TuneMode mode, const TrainConfig& cfg) {
    if (ds.k != src.spec.k) throw config_error("finetune: label space mismatch");
    Model m = src;
    m.provenance = mode == TuneMode::all ? "finetuneA" : "finetuneL";
    auto defs = m.layers();
    std::size_t first = mode == TuneMode::all ? 0 : detail::last_dense_index(defs);
    detail::train_loop(m, ds, cfg, first, nullptr, nullptr);
    return m;
}

// Zero out the `ratio` fraction of hidden units with the lowest mean
// activation over the probe set (weights and bias of each pruned unit).
// Exactly floor(ratio * units) units go per prunable layer; the dense head
// is never pruned.
inline Model prune_by_activation(const Model& src, const Dataset& probe, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0) throw config_error("prune_by_activation: ratio must be in [0,1)");
    Model m = src;
    m.provenance = [&] {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "pruned(%.2f)", ratio);
        return std::string(buf);
    }();
    if (ratio == 0.0) return m;

    auto defs = m.layers();
    std::size_t head = detail::last_dense_index(defs);

    // capture post-ReLU activations per layer over the probe set
    std::vector<std::size_t> all(probe.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Tensor x = detail::gather_batch(probe, all, 0, all.size());
    std::vector<Tensor> outputs;
    Tensor cur = x;
    for (std::size_t i = 0; i < defs.size(); ++i) {
        cur = layer_forward(defs[i], cur, m.params[i]);
        outputs.push_back(cur);
    }

    for (std::size_t li = 0; li < defs.size(); ++li) {
        bool prunable = (defs[li].kind == LayerKind::dense && li != head) || defs[li].kind == LayerKind::conv3x3;
        if (!prunable) continue;
        // activation is measured after the following ReLU when present
        std::size_t act_at = (li + 1 < defs.size() && defs[li + 1].kind == LayerKind::relu) ? li + 1 : li;
        const Tensor& act = outputs[act_at];
        std::size_t units = defs[li].out;
        std::vector<double> mean_abs(units, 0.0);
        if (defs[li].kind == LayerKind::dense) {
            std::size_t n = act.dim(0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t u = 0; u < units; ++u)
                    mean_abs[u] += std::abs(static_cast<double>(act.v[i * units + u]));
            for (auto& v : mean_abs) v /= static_cast<double>(n);
        } else {
            std::size_t n = act.dim(0), hh = act.dim(2), ww = act.dim(3);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t u = 0; u < units; ++u) {
                    const float* p = act.data() + (i * units + u) * hh * ww;
                    double s = 0.0;
                    for (std::size_t q = 0; q < hh * ww; ++q) s += std::abs(static_cast<double>(p[q]));
                    mean_abs[u] += s;
                }
            for (auto& v : mean_abs) v /= static_cast<double>(n * hh * ww);
        }
        std::size_t kill = static_cast<std::size_t>(ratio * static_cast<double>(units));
        std::vector<std::size_t> idx(units);
        for (std::size_t u = 0; u < units; ++u) idx[u] = u;
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return mean_abs[a] < mean_abs[b]; });
        Tensor& W = m.params[li][0];
        Tensor& bias = m.params[li][1];
        std::size_t row = W.size() / units; // dense: in; conv: in*3*3
        for (std::size_t q = 0; q < kill; ++q) {
            std::size_t u = idx[q];
            std::fill(W.v.begin() + u * row, W.v.begin() + (u + 1) * row, 0.f);
            bias[u] = 0.f;
        }
    }
    return m;
}

enum class ExtractMode { label, prob };

// Black-box extraction: train a fresh model on the attacker's images with the
// source oracle's answers. Label mode uses predicted classes; prob mode mixes
// tempered-KL distillation with CE on the predicted class.
inline Model extract(const ModelOracle& source, const Dataset& attacker_images, const ModelSpec& spec,
                     const TrainConfig& cfg, ExtractMode mode, const char* provenance = nullptr) {
    if (source.num_classes() != spec.k) throw config_error("extract: spec k != source classes");
    Model m = init_model(spec, provenance ? provenance : (mode == ExtractMode::label ? "extractL" : "extractP"),
                         attacker_images.task_id, cfg.seed);
    // one query per unique attacker image; answers are reused across epochs
    std::uint64_t q0 = source.query_count();
    Tensor teacher = source.query_probs(attacker_images.images);
    m.record.teacher_queries = source.query_count() - q0;

    if (mode == ExtractMode::label) {
        std::vector<std::uint16_t> labels(attacker_images.size());
        for (std::size_t i = 0; i < labels.size(); ++i)
            labels[i] = static_cast<std::uint16_t>(argmax_row(teacher.data() + i * spec.k, spec.k));
        detail::train_loop(m, attacker_images, cfg, 0, nullptr, &labels);
    } else {
        detail::train_loop(m, attacker_images, cfg, 0, &teacher, nullptr);
    }
    return m;
}

// FGSM / PGD inside the L-inf ball, clipped to [0,1]. Untargeted calls ascend
// the loss against `target_probs`; targeted calls descend toward them.
inline Tensor adv_example(const Model& m, const Tensor& x, const Tensor& target_probs, const AdvConfig& cfg) {
    cfg.validate();
    if (x.dim(0) != target_probs.dim(0)) throw shape_error("adv_example: batch size mismatch");
    auto defs = m.layers();
    std::size_t n = x.dim(0), k = m.spec.k;
    Tensor adv = x;
    double sgn = cfg.targeted ? -1.0 : 1.0;
    double step = cfg.steps == 1 ? cfg.eps : cfg.step;
    for (int it = 0; it < cfg.steps; ++it) {
        auto fc = detail::forward_cached(m, defs, adv);
        Tensor p = softmax_rows(fc.logits, 1.0);
        Tensor dlogits({n, k});
        for (std::size_t i = 0; i < n * k; ++i)
            dlogits[i] = (p[i] - target_probs[i]) / static_cast<float>(n);
        Tensor dx;
        detail::backward_through(m, defs, fc, dlogits, defs.size(), true, &dx);
        for (std::size_t i = 0; i < adv.size(); ++i) {
            double g = static_cast<double>(dx[i]);
            double v = static_cast<double>(adv[i]) + sgn * step * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
            v = std::clamp(v, static_cast<double>(x[i]) - cfg.eps, static_cast<double>(x[i]) + cfg.eps);
            adv[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return adv;
}

// Label-based extraction followed by adversarial fine-tuning: minimize the
// loss on perturbations crafted against the current stolen model, supervised
// by the source's predicted labels.
inline Model extract_adv(const ModelOracle& source, const Dataset& attacker_images, const ModelSpec& spec,
                         const TrainConfig& cfg, const AdvConfig& adv, int adv_epochs) {
    Model m = extract(source, attacker_images, spec, cfg, ExtractMode::label, "extractAdv");
    if (adv_epochs <= 0) return m;
    adv.validate();

    std::uint64_t q0 = source.query_count();
    auto src_labels = source.query_labels(attacker_images.images);
    m.record.teacher_queries += source.query_count() - q0;

    auto defs = m.layers();
    std::size_t n = attacker_images.size(), k = spec.k;
    SgdOptimizer<float> opt(cfg.lr, cfg.momentum);
    Rng shuffle_root = Rng(cfg.seed).derive("adv-epoch-shuffle");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < adv_epochs; ++epoch) {
        Rng erng = shuffle_root.derive("epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < n; b += cfg.batch) {
            std::size_t e = std::min(n, b + cfg.batch);
            Tensor x = detail::gather_rows(attacker_images.images, order, b, e);
            Tensor targets({e - b, k});
            std::vector<std::uint16_t> y(e - b);
            for (std::size_t i = b; i < e; ++i) {
                y[i - b] = src_labels[order[i]];
                targets.at2(i - b, src_labels[order[i]]) = 1.f;
            }
            Tensor x_adv = adv_example(m, x, targets, adv);
            auto fc = detail::forward_cached(m, defs, x_adv);
            BatchLoss head = ce_head(fc.logits, y);
            epoch_loss += head.loss;
            auto grads = detail::backward_through(m, defs, fc, head.dlogits, 0, false, nullptr);
            detail::clip_gradients(grads, cfg.clip_norm);
            opt.step(m.params, grads);
        }
        if (!std::isfinite(epoch_loss))
            throw train_error("adversarial fine-tuning diverged at epoch " + std::to_string(epoch), epoch);
    }
    m.record.epochs += adv_epochs;
    m.record.train_acc = accuracy(m, attacker_images);
    return m;
}

// Transfer to a new label space: fresh k'-way head, then fine-tune all layers
// or only the head.
inline Model transfer(const Model& src, const Dataset& new_ds, TuneMode mode, const TrainConfig& cfg) {
    if (new_ds.task_id == src.train_task)
        throw config_error("transfer: new dataset has the same task id as the model");
    Model m = src;
    m.spec.k = new_ds.k;
    m.provenance = mode == TuneMode::all ? "transferA" : "transferL";
    m.train_task = new_ds.task_id;
    auto defs = m.layers();
    std::size_t head = detail::last_dense_index(defs);
    Rng rng = Rng(cfg.seed).derive("transfer-head");
    m.params[head] = init_layer_params<float>(defs[head], rng);
    detail::train_loop(m, new_ds, cfg, mode == TuneMode::all ? 0 : head, nullptr, nullptr);
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: "SACMODL1" | arch | u32 c,h,w,k | provenance | train_task |
// u32 layer count | per layer: u32 tensor count | per tensor: u32 rank,
// u32 dims..., u32 element count, f32 data.
// ---------------------------------------------------------------------------

inline void save_model(const Model& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path.string() + " for writing");
    os.write("SACMODL1", 8);
    detail::write_string(os, arch_name(m.spec.arch));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.spec.c));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.spec.h));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.spec.w));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.spec.k));
    detail::write_string(os, m.provenance);
    detail::write_string(os, m.train_task);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.params.size()));
    for (const auto& pl : m.params) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(pl.size()));
        for (const auto& t : pl) {
            detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
            detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.size()));
            detail::write_bytes(os, t.data(), t.size() * sizeof(float));
        }
    }
    if (!os) throw io_error("write failed for " + path.string());
}

inline Model load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    detail::check_magic(is, "SACMODL1", "model");
    Model m;
    m.spec.arch = arch_from_name(detail::read_string(is, "model arch"));
    m.spec.c = detail::read_pod<std::uint32_t>(is, "model c");
    m.spec.h = detail::read_pod<std::uint32_t>(is, "model h");
    m.spec.w = detail::read_pod<std::uint32_t>(is, "model w");
    m.spec.k = detail::read_pod<std::uint32_t>(is, "model k");
    m.provenance = detail::read_string(is, "model provenance");
    m.train_task = detail::read_string(is, "model train_task");
    auto nl = detail::read_pod<std::uint32_t>(is, "model layer count");
    auto defs = m.layers();
    if (nl != defs.size()) throw io_error("model layer count does not match architecture");
    for (std::size_t l = 0; l < nl; ++l) {
        auto nt = detail::read_pod<std::uint32_t>(is, "model tensor count");
        ParamList<float> pl;
        for (std::size_t t = 0; t < nt; ++t) {
            auto rank = detail::read_pod<std::uint32_t>(is, "tensor rank");
            std::vector<std::size_t> shape(rank);
            for (auto& d : shape) d = detail::read_pod<std::uint32_t>(is, "tensor dim");
            auto cnt = detail::read_pod<std::uint32_t>(is, "tensor count");
            Tensor tt(shape);
            if (tt.size() != cnt) throw io_error("tensor element count mismatch");
            detail::read_bytes(is, tt.data(), cnt * sizeof(float), "tensor data");
            pl.push_back(std::move(tt));
        }
        m.params.push_back(std::move(pl));
    }
    // shape-check against the architecture
    Rng probe(0);
    for (std::size_t l = 0; l < defs.size(); ++l) {
        auto expect = init_layer_params<float>(defs[l], probe);
        if (expect.size() != m.params[l].size()) throw io_error("layer parameter count mismatch");
        for (std::size_t t = 0; t < expect.size(); ++t)
            if (expect[t].shape != m.params[l][t].shape) throw io_error("layer parameter shape mismatch");
    }
    return m;
}

} // namespace sac
