// Acceptance suite: runs the default manifest end to end (twice, for the
// determinism criterion) and prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sac/augment.hpp"
#include "sac/pipeline.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using sac::FingerprintOptions;
using sac::KernelId;
using sac::Rng;
using sac::ScoreReport;
using sac::Tensor;

namespace {

int g_failures = 0;

void report(int criterion, bool ok, const std::string& detail) {
    std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double row_auc(const ScoreReport& r, const std::string& tag) {
    for (const auto& row : r.rows)
        if (row.attack_tag == tag && row.applicable) return row.value;
    return -1.0;
}

const sac::AucRow* find_row(const ScoreReport& r, const std::string& tag) {
    for (const auto& row : r.rows)
        if (row.attack_tag == tag) return &row;
    return nullptr;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

struct RunArtifacts {
    ScoreReport sacw, sacm, baseline, sacw_smooth;
    sac::Lab::PruningCurve pruning;
    sac::Lab::SampleCurve samples;
    double wall_seconds = 0.0;
};

RunArtifacts run_recipe(sac::Lab& lab) {
    auto t0 = std::chrono::steady_clock::now();
    lab.run_zoo();
    RunArtifacts out;
    out.sacw = lab.run_fingerprint({"sac-w", KernelId::Kind::cosine, false});
    out.sacm = lab.run_fingerprint({"sac-m", KernelId::Kind::cosine, false});
    out.baseline = lab.run_fingerprint({"baseline-asr", KernelId::Kind::cosine, false});
    out.sacw_smooth = lab.run_fingerprint({"sac-w", KernelId::Kind::cosine, true});
    out.pruning = lab.run_pruning_sweep({"sac-w", KernelId::Kind::cosine, false});
    out.samples = lab.run_sample_sweep({"sac-w", KernelId::Kind::cosine, false});
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// criterion 7 property suites --------------------------------------------

bool property_gradients(std::string& msg) {
    for (auto kind : gradcheck::all_layer_kinds()) {
        double worst = gradcheck::run_layer_checks(kind, 100, 424242);
        if (worst >= 1e-3) {
            msg += std::string(sac::layer_kind_name(kind)) + " worst rel err " + std::to_string(worst);
            return false;
        }
    }
    msg += "gradients ok on 5x100 instances";
    return true;
}

sac::OutputSet random_output_set(Rng& rng, std::size_t n, std::size_t k) {
    sac::OutputSet o;
    o.outputs = Tensor({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) {
            o.outputs.at2(i, j) = static_cast<float>(0.02 + rng.uniform());
            s += o.outputs.at2(i, j);
        }
        for (std::size_t j = 0; j < k; ++j)
            o.outputs.at2(i, j) = static_cast<float>(o.outputs.at2(i, j) / s);
    }
    return o;
}

bool property_correlation(std::string& msg) {
    Rng rng(777);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 4 + rng.next_below(8), k = 2 + rng.next_below(8);
        sac::OutputSet o = random_output_set(rng, n, k);
        sac::CorrelationMatrix c =
            trial % 2 ? sac::rbf_corr(o, sac::RbfDelta::median()) : sac::cosine_corr(o);
        for (std::size_t i = 0; i < n; ++i) {
            if (std::abs(c.m.at2(i, i) - 1.0) > 1e-6) {
                msg += "diagonal off";
                return false;
            }
            for (std::size_t j = 0; j < n; ++j)
                if (std::abs(c.m.at2(i, j) - c.m.at2(j, i)) > 1e-6) {
                    msg += "asymmetry";
                    return false;
                }
        }
        // pseudometric triple
        sac::OutputSet o2 = random_output_set(rng, n, k), o3 = random_output_set(rng, n, k);
        auto ca = sac::cosine_corr(o), cb = sac::cosine_corr(o2), cc = sac::cosine_corr(o3);
        double ab = sac::corr_distance(ca, cb), bc = sac::corr_distance(cb, cc),
               ac = sac::corr_distance(ca, cc);
        if (ab < 0 || std::abs(ab - sac::corr_distance(cb, ca)) > 1e-12 || ac > ab + bc + 1e-9) {
            msg += "pseudometric violation";
            return false;
        }
        if (sac::corr_distance(ca, ca) != 0.0) {
            msg += "self distance nonzero";
            return false;
        }
    }
    msg += "correlation invariants ok on 100 output sets";
    return true;
}

bool property_auc(std::string& msg) {
    Rng rng(778);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> irr(3 + rng.next_below(20)), sto(3 + rng.next_below(20));
        for (auto& v : irr) v = rng.uniform();
        for (auto& v : sto) v = rng.uniform();
        if (trial % 4 == 0) sto.push_back(irr.front());
        double a = sac::auc(irr, sto, sac::Orientation::lower_is_stolen);
        double b = oracles::auc_ranksum(irr, sto, true);
        if (std::abs(a - b) > 1e-12) {
            msg += "rank-sum oracle mismatch";
            return false;
        }
        auto mono = [&](auto f) {
            std::vector<double> i2 = irr, s2 = sto;
            for (auto& v : i2) v = f(v);
            for (auto& v : s2) v = f(v);
            return sac::auc(i2, s2, sac::Orientation::lower_is_stolen);
        };
        if (std::abs(mono([](double x) { return 2 * x + 1; }) - a) > 1e-12 ||
            std::abs(mono([](double x) { return x * x * x; }) - a) > 1e-12) {
            msg += "monotone transform changed AUC";
            return false;
        }
    }
    msg += "AUC oracle + invariance ok on 50 score sets";
    return true;
}

bool property_cutmix(std::string& msg) {
    Rng rng(779);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x0({1, 16, 16}), x1({1, 16, 16});
        for (auto& v : x0.v) v = static_cast<float>(rng.uniform());
        for (auto& v : x1.v) v = static_cast<float>(rng.uniform());
        std::size_t a = rng.next_below(10), b = rng.next_below(10);
        Tensor y0({10}), y1({10});
        y0[a] = 1.f;
        y1[b] = 1.f;
        auto r = sac::cutmix_random(x0, y0, x1, y1, rng);
        double ones = 0;
        for (float v : r.record.mask.v) ones += v;
        if (r.record.alpha != ones / 256.0) {
            msg += "alpha not exact";
            return false;
        }
        for (std::size_t p = 0; p < 256; ++p) {
            float want = r.record.mask.v[p] > 0.5f ? x0.v[p] : x1.v[p];
            if (r.image.v[p] != want) {
                msg += "pixel not conserved";
                return false;
            }
        }
        double s = 0;
        for (std::size_t i = 0; i < 10; ++i) {
            s += r.label[i];
            if (i != a && i != b && r.label[i] != 0.f) {
                msg += "label support leaked";
                return false;
            }
        }
        if (std::abs(s - 1.0) > 1e-6) {
            msg += "label sum off";
            return false;
        }
    }
    msg += "cutmix conservation ok on 100 pairs";
    return true;
}

bool property_smooth(std::string& msg) {
    for (double eps : {0.0, 0.1, 0.5, 0.99}) {
        for (std::size_t k : {2ul, 5ul, 10ul}) {
            for (std::size_t pred = 0; pred < k; ++pred) {
                Tensor t = sac::smooth_label(pred, k, eps);
                if (sac::argmax_row(t.data(), k) != pred) {
                    msg += "argmax lost at eps " + std::to_string(eps);
                    return false;
                }
            }
        }
    }
    msg += "smooth-label argmax preserved for eps {0,0.1,0.5,0.99}";
    return true;
}

bool property_fgsm(std::string& msg, sac::Lab& lab) {
    const sac::Model& src = lab.source_model();
    Rng rng(781);
    Tensor x({100, 1, 16, 16});
    for (auto& v : x.v) v = static_cast<float>(rng.uniform());
    Tensor targets({100, src.spec.k});
    for (std::size_t i = 0; i < 100; ++i) targets.at2(i, rng.next_below(src.spec.k)) = 1.f;
    for (int steps : {1, 5}) {
        sac::AdvConfig cfg{0.06, steps == 1 ? 0.06 : 0.015, steps, false, 0};
        Tensor adv = sac::adv_example(src, x, targets, cfg);
        for (std::size_t i = 0; i < adv.size(); ++i) {
            if (std::abs(adv[i] - x[i]) > 0.06 + 1e-6) {
                msg += "eps ball violated";
                return false;
            }
            if (adv[i] < 0.f || adv[i] > 1.f) {
                msg += "clip violated";
                return false;
            }
        }
    }
    msg += "FGSM/PGD containment ok on 100 samples";
    return true;
}

std::uint64_t report_hash(sac::Lab& lab, const FingerprintOptions& opt) {
    return sac::detail::file_hash(lab.report_path(opt, ".tsv"));
}

} // namespace

int main() {
    std::printf("== acceptance: default manifest, two clean runs ==\n");
    sac::ExperimentManifest manifest; // defaults ARE the acceptance configuration

    fs::path wsA = fs::temp_directory_path() / "sac_accept_a";
    fs::path wsB = fs::temp_directory_path() / "sac_accept_b";
    fs::remove_all(wsA);
    fs::remove_all(wsB);

    sac::Lab labA(wsA, manifest);
    sac::Lab labB(wsB, manifest);

    RunArtifacts A = run_recipe(labA);
    std::printf("run A finished in %.1f s\n", A.wall_seconds);
    RunArtifacts B = run_recipe(labB);
    std::printf("run B finished in %.1f s\n", B.wall_seconds);

    const char* kMainFive[] = {"finetuneA", "finetuneL", "pruned(0.30)", "extractL", "extractP"};

    // 1. detection headline
    {
        bool ok = true;
        std::ostringstream d;
        for (const char* tag : kMainFive) {
            double w = row_auc(A.sacw, tag), m = row_auc(A.sacm, tag);
            ok = ok && w >= 0.95 && m >= 0.95;
            d << tag << " w=" << fmt(w) << " m=" << fmt(m) << "  ";
        }
        double madv = row_auc(A.sacm, "extractAdv");
        ok = ok && madv >= 0.85;
        d << "extractAdv m=" << fmt(madv);
        bool time_ok = A.wall_seconds < 900.0;
        ok = ok && time_ok;
        d << "  recipe " << fmt(A.wall_seconds) << "s";
        report(1, ok, d.str());
    }

    // 2. baseline collapse under adversarial extraction
    {
        double el = row_auc(A.baseline, "extractL");
        double ea = row_auc(A.baseline, "extractAdv");
        bool ok = el >= 0.85 && ea <= 0.70 && (el - ea) >= 0.15;
        report(2, ok,
               "baseline extractL=" + fmt(el) + " extractAdv=" + fmt(ea) + " gap=" + fmt(el - ea));
    }

    // 3. transfer detection; baseline structurally inapplicable
    {
        double wa = row_auc(A.sacw, "transferA"), wl = row_auc(A.sacw, "transferL");
        double ma = row_auc(A.sacm, "transferA"), ml = row_auc(A.sacm, "transferL");
        const sac::AucRow* ba = find_row(A.baseline, "transferA");
        const sac::AucRow* bl = find_row(A.baseline, "transferL");
        bool marked = ba && bl && !ba->applicable && !bl->applicable;
        bool ok = wa >= 0.9 && wl >= 0.9 && ma >= 0.9 && ml >= 0.9 && marked;
        report(3, ok,
               "sac-w A/L=" + fmt(wa) + "/" + fmt(wl) + " sac-m A/L=" + fmt(ma) + "/" + fmt(ml) +
                   (marked ? " baseline rows marked n/a" : " baseline rows NOT marked"));
    }

    // 4. smooth-label robustness
    {
        bool ok = true;
        std::ostringstream d;
        for (const char* tag : {"finetuneA", "finetuneL", "pruned(0.30)", "extractL", "extractP",
                                "extractAdv"}) {
            double v = row_auc(A.sacw_smooth, tag);
            ok = ok && v >= 0.9;
            d << tag << "=" << fmt(v) << " ";
        }
        const sac::AucRow* ta = find_row(A.sacw_smooth, "transferA");
        bool transfer_ok = ta && ta->applicable && (ta->value <= 0.5 || ta->inverted);
        d << "transferA=" << (ta && ta->applicable ? fmt(ta->value) : "-")
          << (ta && ta->inverted ? " (inverted)" : "");
        ok = ok && transfer_ok;
        report(4, ok, d.str());
    }

    // 5. pruning sweep stays under the irrelevant mean through ratio 0.5
    {
        bool ok = !A.pruning.sweep.rows.empty();
        std::ostringstream d;
        for (const auto& row : A.pruning.sweep.rows) {
            if (row.ratio <= 0.5 && row.distance >= A.pruning.sweep.irrelevant_mean) ok = false;
            d << fmt(row.ratio) << ":" << fmt(row.distance) << " ";
        }
        d << "vs irrelevant mean " << fmt(A.pruning.sweep.irrelevant_mean);
        report(5, ok, d.str());
    }

    // 6. 50 misclassified samples suffice for extraction attacks
    {
        double el = -1, ep = -1;
        for (const auto& row : A.samples.rows)
            if (row.count == 50) {
                if (row.auc_by_tag.count("extractL")) el = row.auc_by_tag.at("extractL");
                if (row.auc_by_tag.count("extractP")) ep = row.auc_by_tag.at("extractP");
            }
        bool ok = el >= 0.95 && ep >= 0.95;
        report(6, ok, "sac-w@50 extractL=" + fmt(el) + " extractP=" + fmt(ep));
    }

    // 7. property suites
    {
        std::string msg;
        bool ok = true;
        ok = property_gradients(msg) && ok;
        msg += "; ";
        ok = property_correlation(msg) && ok;
        msg += "; ";
        ok = property_auc(msg) && ok;
        msg += "; ";
        ok = property_cutmix(msg) && ok;
        msg += "; ";
        ok = property_smooth(msg) && ok;
        msg += "; ";
        ok = property_fgsm(msg, labA) && ok;
        report(7, ok, msg);
    }

    // 8. determinism across two clean runs + bit-exact checkpoints
    {
        bool reports_equal = true;
        for (const FingerprintOptions& opt :
             {FingerprintOptions{"sac-w", KernelId::Kind::cosine, false},
              FingerprintOptions{"sac-m", KernelId::Kind::cosine, false},
              FingerprintOptions{"baseline-asr", KernelId::Kind::cosine, false},
              FingerprintOptions{"sac-w", KernelId::Kind::cosine, true}})
            reports_equal = reports_equal && report_hash(labA, opt) == report_hash(labB, opt);
        bool curves_equal =
            sac::detail::file_hash(A.pruning.file) == sac::detail::file_hash(B.pruning.file) &&
            sac::detail::file_hash(A.samples.file) == sac::detail::file_hash(B.samples.file);
        bool checkpoints_equal = true;
        for (const auto& id : labA.zoo_model_ids())
            checkpoints_equal = checkpoints_equal && sac::detail::file_hash(labA.model_path(id)) ==
                                                         sac::detail::file_hash(labB.model_path(id));
        // round-trip: load + save the source checkpoint, bytes must not move
        sac::Model src = sac::load_model(labA.model_path("source"));
        fs::path rt = wsA / "models" / "roundtrip.sacmodl";
        sac::save_model(src, rt);
        bool roundtrip = sac::detail::file_hash(rt) == sac::detail::file_hash(labA.model_path("source"));
        bool ok = reports_equal && curves_equal && checkpoints_equal && roundtrip;
        report(8, ok,
               std::string("reports ") + (reports_equal ? "identical" : "DIFFER") + ", curves " +
                   (curves_equal ? "identical" : "DIFFER") + ", checkpoints " +
                   (checkpoints_equal ? "identical" : "DIFFER") + ", round-trip " +
                   (roundtrip ? "bit-exact" : "DIFFERS"));
    }

    // 9. SAC-m phase cost < 5% of the SAC-w phase (surrogate training included)
    {
        double w = A.sacw.phase_seconds, m = A.sacm.phase_seconds;
        bool ok = w > 0 && m < 0.05 * w;
        report(9, ok, "sac-m " + fmt(m) + "s vs sac-w " + fmt(w) + "s (" + fmt(100.0 * m / w) + "%)");
    }

    std::printf("== acceptance %s ==\n", g_failures == 0 ? "PASSED" : "FAILED");
    return g_failures == 0 ? 0 : 1;
}
