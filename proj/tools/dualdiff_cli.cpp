#include "dualdiff/harness.h"
#include "dualdiff/kernels.h"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace dualdiff;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::optional<long long> seed;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("-c,--config", c.config, "config file (key = value lines)")->check(CLI::ExistingFile);
    app->add_option("--set", c.sets, "override, e.g. --set train.alpha=0.2")->take_all();
    app->add_option("-o,--out", c.out, "output directory");
    app->add_option("--seed", c.seed, "run seed (same as --set seed=N)");
}

ExperimentConfig resolve(const Common& c, std::vector<std::string> extra = {}) {
    std::vector<std::string> sets = c.sets;
    if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
    sets.insert(sets.end(), extra.begin(), extra.end());
    return ExperimentConfig::resolve(c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config), sets);
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg, const std::string& command) {
    if (!c.out.empty()) return c.out;
    if (!cfg.get_string("out_dir").empty()) return cfg.get_string("out_dir");
    return default_output_root() / command;
}

void print_scores(const AggregateScores& a, double fad) {
    std::printf("BCS %.2f  CSD %.2f  BHS %.2f  HSD %.2f  F1 %.2f  FAD %.4f\n", a.bcs, a.csd, a.bhs, a.hsd, a.f1, fad);
}

}  // namespace

int main(int argc, char** argv) {
    kernels::keep_large_allocations();
    CLI::App app{"dualdiff: dual-conditioned latent diffusion for rhythm-synchronised audio"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Common synth_c, vae_c, diff_c, gen_c, eval_c, sweep_c;
    std::optional<long long> synth_n;
    std::string synth_bpms;
    auto* synth = app.add_subcommand("synth-data", "write a manifest of synthetic dance/click-track clips");
    add_common(synth, synth_c);
    synth->add_option("--n", synth_n, "number of clips");
    synth->add_option("--bpms", synth_bpms, "comma-separated tempo choices");

    std::string vae_data, vae_val;
    auto* tvae = app.add_subcommand("train-vae", "train the spectrogram autoencoder");
    add_common(tvae, vae_c);
    tvae->add_option("--data", vae_data, "training manifest")->required()->check(CLI::ExistingFile);
    tvae->add_option("--val", vae_val, "held-out manifest for reconstruction MSE")->check(CLI::ExistingFile);

    std::string diff_data, diff_vae;
    bool diff_resume = false;
    auto* tdiff = app.add_subcommand("train-diffusion", "train the conditional denoiser");
    add_common(tdiff, diff_c);
    tdiff->add_option("--data", diff_data, "training manifest")->required()->check(CLI::ExistingFile);
    tdiff->add_option("--vae", diff_vae, "VAE checkpoint")->required()->check(CLI::ExistingFile);
    tdiff->add_flag("--resume", diff_resume, "continue from <out>/diffusion.ckpt");

    std::string gen_ckpt, gen_data;
    auto* gen = app.add_subcommand("generate", "generate WAVs for the clips of a manifest");
    add_common(gen, gen_c);
    gen->add_option("--ckpt", gen_ckpt, "diffusion checkpoint")->required()->check(CLI::ExistingFile);
    gen->add_option("--data", gen_data, "manifest with features")->required()->check(CLI::ExistingFile);

    std::string eval_ref, eval_gen;
    auto* eval = app.add_subcommand("evaluate", "score generated clips against references");
    add_common(eval, eval_c);
    eval->add_option("--reference", eval_ref, "reference manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--generated", eval_gen, "generated manifest")->required()->check(CLI::ExistingFile);

    std::string sw_train, sw_eval, sw_vae;
    auto* sweep = app.add_subcommand("sweep-alpha", "train, generate and evaluate over an alpha grid");
    add_common(sweep, sweep_c);
    sweep->add_option("--data", sw_train, "training manifest")->required()->check(CLI::ExistingFile);
    sweep->add_option("--eval", sw_eval, "evaluation manifest")->required()->check(CLI::ExistingFile);
    sweep->add_option("--vae", sw_vae, "VAE checkpoint")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            std::vector<std::string> extra;
            if (synth_n) extra.push_back("synth.n=" + std::to_string(*synth_n));
            if (!synth_bpms.empty()) extra.push_back("synth.bpms=" + synth_bpms);
            const auto cfg = resolve(synth_c, extra);
            const auto s = synth_data(cfg, out_dir(synth_c, cfg, "synth-data"));
            std::printf("wrote %d clips: %s\n", s.clips, s.manifest.c_str());
        } else if (tvae->parsed()) {
            const auto cfg = resolve(vae_c);
            const auto s = train_vae_run(cfg, vae_data, vae_val.empty() ? std::nullopt : std::optional<fs::path>(vae_val),
                                         out_dir(vae_c, cfg, "train-vae"));
            const auto& last = s.history.back();
            std::printf("epochs %d  train mse %.5f", last.epoch, last.mse);
            if (s.validation_mse) std::printf("  held-out mse %.5f", *s.validation_mse);
            std::printf("\ncheckpoint: %s\n", s.checkpoint.c_str());
        } else if (tdiff->parsed()) {
            const auto cfg = resolve(diff_c);
            const auto s = train_diffusion_run(cfg, diff_data, diff_vae, out_dir(diff_c, cfg, "train-diffusion"), diff_resume);
            std::printf("epochs %d  steps %lld  last loss %.5f\ncheckpoint: %s\n", s.epochs, s.steps, s.final_loss,
                        s.checkpoint.c_str());
        } else if (gen->parsed()) {
            const auto cfg = resolve(gen_c);
            const auto m = generate_run(cfg, gen_ckpt, gen_data, out_dir(gen_c, cfg, "generate"));
            std::printf("manifest: %s\n", m.c_str());
        } else if (eval->parsed()) {
            const auto cfg = resolve(eval_c);
            const fs::path out = out_dir(eval_c, cfg, "evaluate");
            const auto rep = evaluate_run(cfg, eval_ref, eval_gen, out);
            print_scores(rep.aggregate, rep.fad);
            std::printf("report: %s\n", (out / "report.json").c_str());
        } else if (sweep->parsed()) {
            const auto cfg = resolve(sweep_c);
            const fs::path out = out_dir(sweep_c, cfg, "sweep-alpha");
            const auto rows = sweep_alpha_run(cfg, sw_train, sw_eval, sw_vae, out);
            std::fputs(sweep_to_csv(rows).c_str(), stdout);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
