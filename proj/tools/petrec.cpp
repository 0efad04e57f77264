#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "petrec/petrec.hpp"

// petrec: simulate -> train -> reconstruct -> evaluate / ablate, driven by a
// single JSON config. Exit codes: 0 ok, 2 config or missing input, 3 training
// abort, 4 evaluation mismatch.

namespace {

namespace fs = std::filesystem;

struct CommonOpts {
    std::string config_path;
    std::string out;
    std::int64_t seed = -1;  // -1: keep the config value
    int jobs = -1;           // -1: keep the config value
};

void add_common(CLI::App* cmd, CommonOpts& opts, const std::string& default_out) {
    cmd->add_option("--config", opts.config_path, "JSON config file (defaults apply if omitted)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", opts.out, "output directory (default: " + default_out + ")");
    cmd->add_option("--seed", opts.seed, "override config seed");
    cmd->add_option("--jobs", opts.jobs, "worker threads (0 = all cores)");
}

fs::path out_root() {
    if (const char* env = std::getenv("PETREC_OUT_ROOT"); env && *env) return env;
    return ".";
}

petrec::Config load_effective(const CommonOpts& opts) {
    petrec::Config cfg =
        opts.config_path.empty() ? petrec::Config{} : petrec::load_config(opts.config_path);
    if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
    if (opts.jobs >= 0) cfg.jobs = opts.jobs;
    return cfg;
}

fs::path out_dir(const CommonOpts& opts, const std::string& default_name) {
    return opts.out.empty() ? out_root() / default_name : fs::path(opts.out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"2D PET reconstruction: simulation, unrolled-solver training, baselines"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(petrec::kVersion));

    CommonOpts pc_opts;
    CLI::App* print_config = app.add_subcommand("print-config", "dump the effective config");
    print_config->add_option("--config", pc_opts.config_path, "JSON config file")
        ->check(CLI::ExistingFile);
    print_config->add_option("--seed", pc_opts.seed, "override config seed");

    CommonOpts sim_opts;
    CLI::App* simulate =
        app.add_subcommand("simulate", "generate phantoms, sinograms, randoms and the split manifest");
    add_common(simulate, sim_opts, "dataset");

    CommonOpts train_opts;
    std::string train_data, train_resume, train_mode = "dual";
    CLI::App* train_cmd = app.add_subcommand("train", "train the unrolled reconstructor");
    add_common(train_cmd, train_opts, "train");
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--resume", train_resume, "checkpoint to resume from")
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--loss", train_mode, "loss mode: image|measure|dual");

    CommonOpts rec_opts;
    std::string rec_method, rec_data, rec_ckpt, rec_split = "test";
    CLI::App* reconstruct = app.add_subcommand("reconstruct", "reconstruct one dataset split");
    add_common(reconstruct, rec_opts, "recon");
    reconstruct->add_option("--method", rec_method, "mlem | emtv | lda")->required();
    reconstruct->add_option("--data", rec_data, "dataset directory")->required();
    reconstruct->add_option("--checkpoint", rec_ckpt, "trained checkpoint (lda only)");
    reconstruct->add_option("--split", rec_split, "train | val | test | all");

    CommonOpts eval_opts;
    std::vector<std::string> eval_dirs;
    std::string eval_truth, eval_split = "test";
    CLI::App* evaluate = app.add_subcommand("evaluate", "score recon dirs against the truth split");
    add_common(evaluate, eval_opts, "eval");
    evaluate->add_option("dirs", eval_dirs, "reconstruction directories")->required();
    evaluate->add_option("--truth", eval_truth, "dataset directory with x/roi tensors")
        ->required();
    evaluate->add_option("--split", eval_split, "train | val | test | all");

    CommonOpts abl_opts;
    std::string abl_data;
    CLI::App* ablate = app.add_subcommand("ablate", "phase-count and loss-mode sweep");
    add_common(ablate, abl_opts, "ablate");
    ablate->add_option("--data", abl_data, "dataset directory")->required();

    CLI11_PARSE(app, argc, argv);

    return petrec::guarded([&]() -> int {
        if (print_config->parsed()) {
            petrec::Config cfg = load_effective(pc_opts);
            std::printf("%s\n", petrec::config_to_json(cfg).dump(2).c_str());
            return 0;
        }
        if (simulate->parsed()) {
            petrec::Config cfg = load_effective(sim_opts);
            return petrec::run_simulate(cfg, out_dir(sim_opts, "dataset"));
        }
        if (train_cmd->parsed()) {
            petrec::Config cfg = load_effective(train_opts);
            petrec::LossMode mode;
            if (train_mode == "image")
                mode = petrec::LossMode::kImage;
            else if (train_mode == "measure")
                mode = petrec::LossMode::kMeasure;
            else if (train_mode == "dual")
                mode = petrec::LossMode::kDual;
            else
                throw petrec::ConfigError("unknown loss mode \"" + train_mode + "\"");
            return petrec::run_train(cfg, train_data, out_dir(train_opts, "train"),
                                     train_resume, mode);
        }
        if (reconstruct->parsed()) {
            petrec::Config cfg = load_effective(rec_opts);
            return petrec::run_reconstruct(cfg, rec_method, rec_data, out_dir(rec_opts, "recon"),
                                           rec_ckpt, rec_split);
        }
        if (evaluate->parsed()) {
            petrec::Config cfg = load_effective(eval_opts);
            std::vector<fs::path> dirs(eval_dirs.begin(), eval_dirs.end());
            return petrec::run_evaluate(cfg, dirs, eval_truth, out_dir(eval_opts, "eval"),
                                        eval_split);
        }
        petrec::Config cfg = load_effective(abl_opts);
        return petrec::run_ablate(cfg, abl_data, out_dir(abl_opts, "ablate"));
    });
}
