// Command-line front end for the correlation-fingerprinting laboratory.
//
//   sac zoo          train the full model zoo (source, irrelevant, attacks)
//   sac fingerprint  score every suspect with SAC-w / SAC-m / the ASR baseline
//   sac sweep        pruning-ratio and sample-count curves
//   sac report       re-render a report and cross-check its AUC cells
//
// The workspace directory comes from --workspace or $SAC_WORKSPACE.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sac/pipeline.hpp"

namespace {

std::string workspace_from_env() {
    const char* env = std::getenv("SAC_WORKSPACE");
    return env ? env : "sac_workspace";
}

sac::ExperimentManifest resolve_manifest(const std::string& workspace, const std::string& manifest_file) {
    namespace fs = std::filesystem;
    if (!manifest_file.empty()) return sac::load_manifest(manifest_file);
    fs::path existing = fs::path(workspace) / "manifest.json";
    if (fs::exists(existing)) return sac::load_manifest(existing);
    return sac::ExperimentManifest{};
}

sac::FingerprintOptions make_options(const std::string& mode, const std::string& kernel,
                                     const std::string& labels) {
    sac::FingerprintOptions opt;
    opt.mode = mode;
    opt.kernel = kernel == "rbf" ? sac::KernelId::Kind::rbf : sac::KernelId::Kind::cosine;
    opt.smooth = labels == "smooth";
    return opt;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sample-correlation model-stealing detection laboratory"};
    app.require_subcommand(1);

    std::string workspace = workspace_from_env();
    std::string manifest_file;
    app.add_option("--workspace", workspace, "workspace root (default $SAC_WORKSPACE or ./sac_workspace)");
    app.add_option("--manifest", manifest_file, "manifest JSON to run (default: workspace manifest)");

    auto* zoo = app.add_subcommand("zoo", "train source, irrelevant, surrogate and attack models");

    std::string mode = "sac-w", kernel = "cosine", labels = "prob";
    auto* fp = app.add_subcommand("fingerprint", "build fingerprint inputs and score every suspect");
    fp->add_option("--mode", mode, "sac-w | sac-m | baseline-asr")
        ->check(CLI::IsMember({"sac-w", "sac-m", "baseline-asr"}));
    fp->add_option("--kernel", kernel, "cosine | rbf")->check(CLI::IsMember({"cosine", "rbf"}));
    fp->add_option("--labels", labels, "prob | smooth")->check(CLI::IsMember({"prob", "smooth"}));

    std::string sweep_kind = "pruning";
    auto* sweep = app.add_subcommand("sweep", "pruning-ratio or sample-count curves");
    sweep->add_option("--kind", sweep_kind, "pruning | samples")
        ->check(CLI::IsMember({"pruning", "samples"}));
    sweep->add_option("--kernel", kernel, "cosine | rbf")->check(CLI::IsMember({"cosine", "rbf"}));
    sweep->add_option("--labels", labels, "prob | smooth")->check(CLI::IsMember({"prob", "smooth"}));

    auto* rep = app.add_subcommand("report", "re-render a stored report and verify its AUC cells");
    rep->add_option("--mode", mode, "sac-w | sac-m | baseline-asr")
        ->check(CLI::IsMember({"sac-w", "sac-m", "baseline-asr"}));
    rep->add_option("--kernel", kernel, "cosine | rbf")->check(CLI::IsMember({"cosine", "rbf"}));
    rep->add_option("--labels", labels, "prob | smooth")->check(CLI::IsMember({"prob", "smooth"}));

    CLI11_PARSE(app, argc, argv);

    try {
        sac::ExperimentManifest manifest = resolve_manifest(workspace, manifest_file);
        sac::Lab lab(workspace, manifest);

        if (zoo->parsed()) {
            auto t0 = std::chrono::steady_clock::now();
            std::size_t ran = lab.run_zoo();
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::cout << "zoo complete: " << ran << " jobs executed, "
                      << lab.zoo_model_ids().size() << " checkpoints present (" << secs << " s)\n";
        } else if (fp->parsed()) {
            sac::ScoreReport report = lab.run_fingerprint(make_options(mode, kernel, labels));
            std::cout << sac::render_report_text(report);
            std::cout << "report written to " << lab.report_path(make_options(mode, kernel, labels), ".txt")
                      << "\n";
        } else if (sweep->parsed()) {
            auto opt = make_options("sac-w", kernel, labels);
            if (sweep_kind == "pruning") {
                auto curve = lab.run_pruning_sweep(opt);
                std::cout << "# ratio  accuracy  distance (irrelevant mean "
                          << curve.sweep.irrelevant_mean << ")\n";
                for (const auto& r : curve.sweep.rows)
                    std::cout << "  " << r.ratio << "\t" << r.accuracy << "\t" << r.distance << "\n";
                std::cout << "curve written to " << curve.file << "\n";
            } else {
                auto curve = lab.run_sample_sweep(opt);
                for (const auto& row : curve.rows)
                    for (const auto& [tag, value] : row.auc_by_tag)
                        std::cout << "  " << row.count << "\t" << tag << "\t" << value << "\n";
                std::cout << "curve written to " << curve.file << "\n";
            }
        } else if (rep->parsed()) {
            std::cout << lab.verify_report(make_options(mode, kernel, labels));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
