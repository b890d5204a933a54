// ldp: one binary driving the whole pipeline. Subcommands mirror the run
// stages; every run drops a manifest next to its outputs.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "ldp/config.hpp"
#include "ldp/errors.hpp"
#include "ldp/pipeline.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path,
                        "JSON config file (default: built-in preset)")
            ->expected(1);
        cmd->add_option("--out", out_dir, "output directory (default: out)")->expected(1);
        seed_opt = cmd->add_option("--seed", seed, "override every stage seed from one value");
    }

    ldp::PipelineConfig make_config() const {
        ldp::PipelineConfig cfg = config_path.empty()
                                      ? ldp::preset_config("default")
                                      : ldp::load_pipeline_config_file(config_path);
        if (seed_opt->count() > 0) cfg.reseed(seed);
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LoRA fine-tuning, preference alignment, and evaluation for a "
                 "toy endoscopy report generator"};
    app.require_subcommand(1);

    auto* prep = app.add_subcommand("prep", "build the synthetic corpus and split it");
    auto* train = app.add_subcommand("train", "fit adapters (sft or a preference phase)");
    auto* eval = app.add_subcommand("eval", "generate reports on the test split and score them");
    auto* efficiency = app.add_subcommand("efficiency", "trainable parameter accounting");
    auto* ablate = app.add_subcommand("ablate", "rank or phase sweep with a shared corpus");
    auto* score = app.add_subcommand("score", "summarize a physician score sheet");

    CommonFlags prep_f, train_f, eval_f, eff_f, abl_f, score_f;
    prep_f.attach(prep);
    train_f.attach(train);
    eval_f.attach(eval);
    eff_f.attach(efficiency);
    abl_f.attach(ablate);
    score_f.attach(score);

    std::string phase = "sft";
    train->add_option("--phase", phase, "sft | dpo | simpo | orpo")->expected(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        ldp::RunManifest m;
        if (prep->parsed()) m = ldp::cli::cmd_prep(prep_f.make_config(), prep_f.out_dir);
        else if (train->parsed())
            m = ldp::cli::cmd_train(train_f.make_config(), train_f.out_dir, phase);
        else if (eval->parsed()) m = ldp::cli::cmd_eval(eval_f.make_config(), eval_f.out_dir);
        else if (efficiency->parsed())
            m = ldp::cli::cmd_efficiency(eff_f.make_config(), eff_f.out_dir);
        else if (ablate->parsed()) m = ldp::cli::cmd_ablate(abl_f.make_config(), abl_f.out_dir);
        else if (score->parsed()) m = ldp::cli::cmd_score(score_f.make_config(), score_f.out_dir);
        std::printf("%s done, %zu output(s), %.2fs\n", m.command.c_str(), m.outputs.size(),
                    m.wall_time_seconds);
        return 0;
    } catch (const ldp::Error& e) {
        std::fprintf(stderr, "ldp: %s\n", e.what());
        return static_cast<int>(e.error_class());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "ldp: internal: %s\n", e.what());
        return 5;
    }
}
