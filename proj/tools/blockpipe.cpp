#include "blockpipe/cli.hpp"
#include "blockpipe/error.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <iostream>
#include <optional>

using namespace blockpipe;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> threads;
};

RunConfig resolve(const Globals& g) {
    RunConfig cfg = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (g.out) cfg.out_dir = *g.out;
    if (g.threads) cfg.threads = *g.threads;
    cfg.normalize();
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"blockpipe: pipelined block diffusion decoding for action chunks"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "run config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "master seed");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--threads", g.threads, "worker threads (BLOCKPIPE_THREADS overrides)");

    std::optional<int> steps;
    std::optional<std::string> regime, teacher, student, ar, init;
    std::optional<int> episodes;
    std::optional<std::string> decoder;
    std::vector<std::string> decoders;

    auto* train = app.add_subcommand("train", "train ACT or BD models");
    train->add_option("--regime", regime, "act_finetune | bd_from_scratch | bd_from_finetuned");
    train->add_option("--steps", steps, "optimiser steps");
    train->add_option("--init", init, "init checkpoint stem (BD_from_finetuned)");

    auto* distill = app.add_subcommand("distill", "adapter distillation from a finetuned teacher");
    distill->add_option("--teacher", teacher, "teacher checkpoint stem");
    distill->add_option("--steps", steps, "optimiser steps");

    auto* bench = app.add_subcommand("bench", "paired decoder benchmark");
    bench->add_option("--teacher", teacher, "teacher checkpoint stem");
    bench->add_option("--student", student, "student checkpoint stem");
    bench->add_option("--ar", ar, "autoregressive checkpoint stem");
    bench->add_option("--episodes", episodes, "episodes");
    bench->add_option("--decoders", decoders, "decoders to run (comma separated)")->delimiter(',');

    auto* trace = app.add_subcommand("trace", "decode-order trace");
    trace->add_option("--teacher", teacher, "teacher checkpoint stem");
    trace->add_option("--student", student, "student checkpoint stem");
    trace->add_option("--decoder", decoder, "decoder to trace");
    trace->add_option("--episodes", episodes, "episodes");

    auto* kvsim = app.add_subcommand("kvsim", "block-1 KV similarity across iterations");
    kvsim->add_option("--teacher", teacher, "teacher checkpoint stem");
    kvsim->add_option("--student", student, "student checkpoint stem");

    auto* sweep = app.add_subcommand("sweep", "threshold and block-size sweep of the pipelined decoder");
    sweep->add_option("--student", student, "student checkpoint stem");
    sweep->add_option("--episodes", episodes, "episodes per grid point");

    auto* init_config = app.add_subcommand("init-config", "write a default config to <out>/config.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        RunConfig cfg = resolve(g);
        if (steps) cfg.train.steps = *steps;
        if (regime) cfg.train.regime = regime_from_string(*regime);
        if (teacher) cfg.teacher = *teacher;
        if (student) cfg.student = *student;
        if (ar) cfg.ar = *ar;
        if (init) cfg.init = *init;
        if (decoder) cfg.trace_decoder = *decoder;
        if (!decoders.empty()) cfg.decoders = decoders;
        if (episodes) {
            cfg.bench_episodes = *episodes;
            cfg.sweep.episodes = *episodes;
        }
        cfg.normalize();
        cfg.validate();

        if (*train) cmd_train(cfg);
        else if (*distill) cmd_distill(cfg);
        else if (*bench) cmd_bench(cfg);
        else if (*trace) cmd_trace(cfg);
        else if (*kvsim) cmd_kvsim(cfg);
        else if (*sweep) cmd_sweep(cfg);
        else if (*init_config) {
            const auto path = (std::filesystem::path(cfg.out_dir) / "config.json").string();
            cmd_init_config(cfg, path);
            std::cout << path << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.kind() == ErrorKind::Config ? 1 : 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
