#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "sac/data.hpp"
#include "sac/models.hpp"
#include "support/oracles.hpp"

using sac::Arch;
using sac::Dataset;
using sac::Model;
using sac::ModelSpec;
using sac::Rng;
using sac::TaskSpec;
using sac::Tensor;
using sac::TrainConfig;

namespace {

TaskSpec tiny_task() {
    TaskSpec s;
    s.k = 3;
    s.h = 8;
    s.w = 8;
    s.sigma = 0.2;
    s.task_id = "shapes-v1/tiny3";
    return s;
}

ModelSpec tiny_spec(Arch a = Arch::mlp_s) {
    ModelSpec s;
    s.arch = a;
    s.c = 1;
    s.h = 8;
    s.w = 8;
    s.k = 3;
    return s;
}

TrainConfig quick_cfg(std::uint64_t seed, int epochs = 6) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch = 16;
    c.lr = 0.05;
    c.momentum = 0.9;
    c.seed = seed;
    return c;
}

// Oracle that answers every query with one fixed distribution.
class ConstOracle : public sac::ModelOracle {
public:
    explicit ConstOracle(Tensor row) : row_(std::move(row)) {}
    std::size_t num_classes() const override { return row_.size(); }
    Tensor query_probs(const Tensor& images) const override {
        count(images.dim(0));
        Tensor out({images.dim(0), row_.size()});
        for (std::size_t i = 0; i < images.dim(0); ++i)
            std::copy(row_.v.begin(), row_.v.end(), out.v.begin() + i * row_.size());
        return out;
    }

private:
    Tensor row_;
};

} // namespace

TEST_CASE("the four architectures are structurally distinct") {
    std::set<std::size_t> layer_counts;
    for (Arch a : {Arch::mlp_s, Arch::mlp_w, Arch::cnn_s, Arch::cnn_p}) {
        ModelSpec s = tiny_spec(a);
        auto defs = sac::layers_for(s);
        layer_counts.insert(defs.size());
        REQUIRE(defs.back().kind == sac::LayerKind::dense);
        REQUIRE(defs.back().out == s.k);
    }
    REQUIRE(layer_counts.size() == 4);
}

TEST_CASE("training basics") {
    Dataset ds = sac::gen_synthetic(tiny_task(), 120, 7);

    SECTION("zero epochs returns the initialization") {
        TrainConfig cfg = quick_cfg(11, 0);
        Model trained = sac::train(ds, tiny_spec(), cfg);
        Model fresh = sac::init_model(tiny_spec(), "source", ds.task_id, cfg.seed);
        REQUIRE(sac::params_equal(trained, fresh));
    }
    SECTION("same seed reproduces bit-identical parameters") {
        Model a = sac::train(ds, tiny_spec(), quick_cfg(5));
        Model b = sac::train(ds, tiny_spec(), quick_cfg(5));
        REQUIRE(sac::params_equal(a, b));
        Model c = sac::train(ds, tiny_spec(), quick_cfg(6));
        REQUIRE_FALSE(sac::params_equal(a, c));
    }
    SECTION("label-space mismatch is rejected") {
        ModelSpec wrong = tiny_spec();
        wrong.k = 5;
        REQUIRE_THROWS_AS(sac::train(ds, wrong, quick_cfg(1)), sac::config_error);
    }
}

TEST_CASE("finetune contracts") {
    Dataset ds = sac::gen_synthetic(tiny_task(), 120, 8);
    Model src = sac::train(ds, tiny_spec(Arch::mlp_w), quick_cfg(3));

    SECTION("mode=last leaves every non-head layer bit-identical") {
        Model ft = sac::finetune(src, ds, sac::TuneMode::last, quick_cfg(9, 3));
        REQUIRE(ft.provenance == "finetuneL");
        auto defs = ft.layers();
        bool head_changed = false;
        for (std::size_t l = 0; l < defs.size(); ++l) {
            for (std::size_t t = 0; t < ft.params[l].size(); ++t) {
                bool same = ft.params[l][t].v == src.params[l][t].v;
                if (l == 5) { // mlp-w head layer
                    if (!same) head_changed = true;
                } else {
                    REQUIRE(same);
                }
            }
        }
        REQUIRE(head_changed);
    }
    SECTION("lr=0 changes nothing") {
        TrainConfig cfg = quick_cfg(2, 3);
        cfg.lr = 0.0;
        Model ft = sac::finetune(src, ds, sac::TuneMode::all, cfg);
        REQUIRE(sac::params_equal(ft, src));
    }
    SECTION("label-space mismatch is rejected") {
        Dataset other = ds;
        other.k = 7;
        REQUIRE_THROWS_AS(sac::finetune(src, other, sac::TuneMode::all, quick_cfg(1)), sac::config_error);
    }
}

TEST_CASE("pruning zeroes exactly the floor count per prunable layer") {
    TaskSpec task = tiny_task();
    Dataset ds = sac::gen_synthetic(task, 120, 9);
    ModelSpec spec = tiny_spec(Arch::mlp_s); // hidden dense layer has 64 units
    Model src = sac::train(ds, spec, quick_cfg(4));

    SECTION("ratio zero is the identity") {
        Model p = sac::prune_by_activation(src, ds, 0.0);
        REQUIRE(sac::params_equal(p, src));
        REQUIRE(p.provenance == "pruned(0.00)");
    }
    SECTION("ratio 0.3 on 64 units kills 19") {
        Model p = sac::prune_by_activation(src, ds, 0.3);
        REQUIRE(p.provenance == "pruned(0.30)");
        const Tensor& w = p.params[1][0]; // [64, 64] hidden weights
        const Tensor& b = p.params[1][1];
        std::size_t zeroed = 0;
        for (std::size_t u = 0; u < 64; ++u) {
            bool all_zero = b[u] == 0.f;
            for (std::size_t j = 0; j < w.dim(1) && all_zero; ++j)
                if (w.v[u * w.dim(1) + j] != 0.f) all_zero = false;
            if (all_zero) ++zeroed;
        }
        REQUIRE(zeroed == 19);
    }
    SECTION("bad ratio rejected") {
        REQUIRE_THROWS_AS(sac::prune_by_activation(src, ds, 1.0), sac::config_error);
    }
}

TEST_CASE("extraction") {
    TaskSpec task = tiny_task();
    Dataset ds = sac::gen_synthetic(task, 150, 10);

    SECTION("a constant teacher produces a constant student") {
        Tensor row({3}, {0.05f, 0.9f, 0.05f});
        ConstOracle teacher(row);
        Model stolen = sac::extract(teacher, ds, tiny_spec(), quick_cfg(12, 8), sac::ExtractMode::label);
        Tensor logits = stolen.forward(ds.images);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (sac::argmax_row(logits.data() + i * 3, 3) == 1) ++hits;
        REQUIRE(hits >= ds.size() * 99 / 100);
        REQUIRE(stolen.provenance == "extractL");
        REQUIRE(stolen.record.teacher_queries == ds.size());
    }
    SECTION("prob mode with alpha=0 reduces to the label-mode loss") {
        Rng rng(77);
        Tensor logits({4, 3});
        Tensor teacher({4, 3});
        for (auto& v : logits.v) v = static_cast<float>(rng.uniform(-2, 2));
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 3; ++j) {
                teacher.at2(i, j) = static_cast<float>(0.1 + rng.uniform());
                s += teacher.at2(i, j);
            }
            for (std::size_t j = 0; j < 3; ++j) teacher.at2(i, j) = static_cast<float>(teacher.at2(i, j) / s);
        }
        std::vector<std::uint16_t> hard(4);
        for (std::size_t i = 0; i < 4; ++i)
            hard[i] = static_cast<std::uint16_t>(sac::argmax_row(teacher.data() + i * 3, 3));
        auto kd = sac::distill_head(logits, teacher, 0.0, 20.0);
        auto ce = sac::ce_head(logits, hard);
        REQUIRE(kd.loss == Catch::Approx(ce.loss).margin(1e-9));
        for (std::size_t i = 0; i < kd.dlogits.size(); ++i)
            REQUIRE(kd.dlogits[i] == Catch::Approx(ce.dlogits[i]).margin(1e-7));
    }
    SECTION("spec k mismatch is rejected") {
        Tensor row({5}, {0.2f, 0.2f, 0.2f, 0.2f, 0.2f});
        ConstOracle teacher(row);
        REQUIRE_THROWS_AS(sac::extract(teacher, ds, tiny_spec(), quick_cfg(1), sac::ExtractMode::label),
                          sac::config_error);
    }
}

TEST_CASE("distillation head gradient matches finite differences") {
    Rng rng(123);
    std::size_t n = 3, k = 5;
    sac::TensorT<double> base({n, k});
    Tensor teacher({n, k});
    for (auto& v : base.v) v = rng.uniform(-2, 2);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) {
            teacher.at2(i, j) = static_cast<float>(0.05 + rng.uniform());
            s += teacher.at2(i, j);
        }
        for (std::size_t j = 0; j < k; ++j) teacher.at2(i, j) = static_cast<float>(teacher.at2(i, j) / s);
    }
    // independent double-precision restatement of the loss; finite
    // differences of this reference stay clean even at temperature 20
    auto reference_loss = [&](const sac::TensorT<double>& z, double alpha, double temp) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<long double> zi(k), ti(k);
            for (std::size_t j = 0; j < k; ++j) {
                zi[j] = z.at2(i, j);
                ti[j] = std::log(static_cast<long double>(teacher.at2(i, j)));
            }
            auto s = oracles::softmax_ld(zi, temp);
            auto t = oracles::softmax_ld(ti, temp);
            long double kl = oracles::kl_ld(s, t);
            auto p1 = oracles::softmax_ld(zi, 1.0L);
            std::size_t hard = sac::argmax_row(teacher.data() + i * k, k);
            long double ce = -std::log(p1[hard]);
            total += static_cast<double>(alpha * temp * temp * kl + (1.0 - alpha) * ce);
        }
        return total / static_cast<double>(n);
    };
    for (double alpha : {0.0, 0.5, 0.9, 1.0}) {
        for (double temp : {1.0, 4.0, 20.0}) {
            Tensor zf({n, k});
            for (std::size_t i = 0; i < base.size(); ++i) zf[i] = static_cast<float>(base[i]);
            auto head = sac::distill_head(zf, teacher, alpha, temp);
            REQUIRE(head.loss == Catch::Approx(reference_loss(base, alpha, temp)).margin(1e-4));
            sac::TensorT<double> analytic({n, k});
            for (std::size_t i = 0; i < head.dlogits.size(); ++i) analytic[i] = head.dlogits[i];
            auto numeric = oracles::fd_grad(
                base, [&](const sac::TensorT<double>& z) { return reference_loss(z, alpha, temp); }, 1e-3);
            INFO("alpha=" << alpha << " temp=" << temp);
            REQUIRE(oracles::max_rel_err(analytic, numeric) < 1e-3);
        }
    }
}

TEST_CASE("adversarial examples") {
    TaskSpec task = tiny_task();
    Dataset ds = sac::gen_synthetic(task, 80, 30);
    Model m = sac::train(ds, tiny_spec(), quick_cfg(21, 4));

    SECTION("vanishing epsilon returns the input") {
        sac::AdvConfig cfg{1e-9, 1e-9, 1, false, 0};
        Tensor targets({ds.size(), 3});
        for (std::size_t i = 0; i < ds.size(); ++i) targets.at2(i, ds.labels[i]) = 1.f;
        Tensor adv = sac::adv_example(m, ds.images, targets, cfg);
        for (std::size_t i = 0; i < adv.size(); ++i)
            REQUIRE(std::abs(adv[i] - ds.images[i]) < 1e-8);
    }
    SECTION("output stays inside the eps ball and [0,1] on 100 samples") {
        sac::AdvConfig cfg{0.05, 0.02, 5, false, 0};
        Rng rng(31);
        Tensor x({100, 1, 8, 8});
        for (auto& v : x.v) v = static_cast<float>(rng.uniform());
        Tensor targets({100, 3});
        for (std::size_t i = 0; i < 100; ++i) targets.at2(i, rng.next_below(3)) = 1.f;
        Tensor adv = sac::adv_example(m, x, targets, cfg);
        for (std::size_t i = 0; i < adv.size(); ++i) {
            REQUIRE(std::abs(adv[i] - x[i]) <= 0.05 + 1e-6);
            REQUIRE(adv[i] >= 0.f);
            REQUIRE(adv[i] <= 1.f);
        }
    }
    SECTION("FGSM strictly increases the loss of an affine model on 100/100 samples") {
        // positive hidden weights + large bias keep every ReLU active, so the
        // network is affine over [0,1]^d and the sign step is exactly optimal
        ModelSpec spec = tiny_spec();
        Model lin = sac::init_model(spec, "source", "lin", 1);
        Rng rng(41);
        for (auto& v : lin.params[1][0].v) v = static_cast<float>(rng.uniform(0.05, 0.3));
        for (auto& v : lin.params[1][1].v) v = 5.f;
        // small head keeps logits in a few-nat range so the loss never
        // saturates against its log clamp
        for (auto& v : lin.params[3][0].v) v = static_cast<float>(rng.uniform(-0.05, 0.05));

        sac::AdvConfig cfg{0.05, 0.05, 1, false, 0};
        for (int trial = 0; trial < 100; ++trial) {
            Tensor x({1, 1, 8, 8});
            for (auto& v : x.v) v = static_cast<float>(rng.uniform(0.2, 0.8));
            Tensor target({1, 3});
            target.at2(0, rng.next_below(3)) = 1.f;
            Tensor adv = sac::adv_example(lin, x, target, cfg);

            auto loss_at = [&](const Tensor& img) {
                Tensor logits = lin.forward(img);
                Tensor p = sac::softmax_rows(logits, 1.0);
                std::size_t y = sac::argmax_row(target.data(), 3);
                return -std::log(std::max(1e-12, static_cast<double>(p[y])));
            };
            REQUIRE(loss_at(adv) > loss_at(x));
        }
    }
    SECTION("targeted steps decrease the loss toward the target") {
        sac::AdvConfig cfg{0.1, 0.02, 8, true, 0};
        Tensor x = ds.images.slice_row(0);
        Tensor batch({1, 1, 8, 8});
        std::copy(x.v.begin(), x.v.end(), batch.v.begin());
        Tensor p0 = m.probs(batch);
        std::size_t worst = 0;
        for (std::size_t j = 1; j < 3; ++j)
            if (p0[j] < p0[worst]) worst = j;
        Tensor target({1, 3});
        target.at2(0, worst) = 1.f;
        Tensor adv = sac::adv_example(m, batch, target, cfg);
        Tensor p1 = m.probs(adv);
        REQUIRE(p1[worst] > p0[worst]);
    }
}

TEST_CASE("adversarial extraction pipeline") {
    TaskSpec task = tiny_task();
    Dataset ds = sac::gen_synthetic(task, 150, 50);
    Model src = sac::train(ds, tiny_spec(), quick_cfg(60, 8));
    sac::LocalOracle oracle(src);

    SECTION("zero adversarial epochs equals plain label extraction") {
        TrainConfig cfg = quick_cfg(61, 4);
        sac::AdvConfig adv{0.03, 0.03, 1, false, 0};
        Model a = sac::extract_adv(oracle, ds, tiny_spec(), cfg, adv, 0);
        Model b = sac::extract(oracle, ds, tiny_spec(), cfg, sac::ExtractMode::label);
        REQUIRE(sac::params_equal(a, b));
        REQUIRE(a.provenance == "extractAdv");
    }
    SECTION("adversarial epochs change the parameters") {
        TrainConfig cfg = quick_cfg(61, 4);
        sac::AdvConfig adv{0.03, 0.03, 1, false, 0};
        Model a = sac::extract_adv(oracle, ds, tiny_spec(), cfg, adv, 2);
        Model b = sac::extract(oracle, ds, tiny_spec(), cfg, sac::ExtractMode::label);
        REQUIRE_FALSE(sac::params_equal(a, b));
    }
}

TEST_CASE("transfer") {
    TaskSpec task = tiny_task();
    Dataset ds = sac::gen_synthetic(task, 150, 70);
    TaskSpec derived = sac::derive_transfer_spec(task);
    Dataset nds = sac::gen_synthetic(derived, 150, 71);
    Model src = sac::train(ds, tiny_spec(Arch::cnn_s), quick_cfg(80, 6));

    SECTION("same task id is rejected") {
        REQUIRE_THROWS_AS(sac::transfer(src, ds, sac::TuneMode::all, quick_cfg(1)), sac::config_error);
    }
    SECTION("mode=last keeps feature layers bit-identical") {
        Model tr = sac::transfer(src, nds, sac::TuneMode::last, quick_cfg(81, 3));
        REQUIRE(tr.provenance == "transferL");
        REQUIRE(tr.train_task == nds.task_id);
        auto defs = tr.layers();
        for (std::size_t l = 0; l + 1 < defs.size(); ++l)
            for (std::size_t t = 0; t < tr.params[l].size(); ++t)
                REQUIRE(tr.params[l][t].v == src.params[l][t].v);
    }
    SECTION("mode=all updates feature layers too") {
        Model tr = sac::transfer(src, nds, sac::TuneMode::all, quick_cfg(82, 3));
        REQUIRE(tr.provenance == "transferA");
        bool any_changed = false;
        for (std::size_t t = 0; t < tr.params[0].size(); ++t)
            if (tr.params[0][t].v != src.params[0][t].v) any_changed = true;
        REQUIRE(any_changed);
    }
}

TEST_CASE("model checkpoints round-trip bit-exactly") {
    namespace fs = std::filesystem;
    TaskSpec task = tiny_task();
    Dataset ds = sac::gen_synthetic(task, 120, 90);
    Model m = sac::train(ds, tiny_spec(Arch::cnn_p), quick_cfg(91, 2));
    m.provenance = "extractP";

    fs::path p1 = fs::temp_directory_path() / "sac_model_a.sacmodl";
    fs::path p2 = fs::temp_directory_path() / "sac_model_b.sacmodl";
    sac::save_model(m, p1);
    Model back = sac::load_model(p1);
    REQUIRE(sac::params_equal(m, back));
    REQUIRE(back.provenance == "extractP");
    REQUIRE(back.train_task == m.train_task);
    REQUIRE(back.spec.arch == Arch::cnn_p);
    sac::save_model(back, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("oracle query counting") {
    Tensor row({3}, {0.3f, 0.3f, 0.4f});
    ConstOracle oracle(row);
    Tensor batch({7, 1, 4, 4});
    oracle.query_probs(batch);
    oracle.query_labels(batch);
    REQUIRE(oracle.query_count() == 14);
}
