#pragma once

// Run configuration and the command implementations behind the blockpipe
// executable. Commands are plain functions so that other drivers (the
// acceptance run) can reuse them on in-memory models.

#include "blockpipe/decoder.hpp"
#include "blockpipe/model.hpp"
#include "blockpipe/report.hpp"
#include "blockpipe/taskbench.hpp"
#include "blockpipe/training.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace blockpipe {

inline constexpr int kConfigVersion = 1;

struct SweepGrid {
    std::vector<double> tau_add;
    std::vector<double> tau_act;
    std::vector<double> tau_conf;
    std::vector<int> n;
    std::vector<int> block_size;
    int episodes = 100;
};

struct RunConfig {
    ModelConfig model;
    TokenizerConfig tokenizer;
    TaskSpec task;
    DecodeConfig decode;
    TrainConfig train;
    std::optional<BlockLayout> train_layout; // defaults to the decode layout
    std::uint64_t init_seed = 1;

    int bench_episodes = 500;
    int vanilla_steps = 0; // 0: one token per step
    std::vector<std::string> decoders{"vanilla", "fast_dllm", "block_diffusion", "pipelined"};
    std::string trace_decoder = "vanilla";

    // checkpoint stems (<stem>.json + <stem>.bin)
    std::string teacher;
    std::string student;
    std::string ar;
    std::string init;

    SweepGrid sweep;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    int threads = 1;

    /// Propagates shared fields (task, tokenizer, layout, region start) into
    /// the nested configs.
    void normalize();
    /// Cross-checks every nested config; raises Config errors.
    void validate() const;
    int vanilla_step_count() const { return vanilla_steps > 0 ? vanilla_steps : tokenizer.seq_len(); }
    TrainConfig effective_train() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::string& path);

/// Worker count after applying the BLOCKPIPE_THREADS override.
int resolve_threads(int requested);

/// Runs f(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// failure after all workers stop.
void parallel_for(int n, int threads, const std::function<void(int)>& f);

struct LoadedModels {
    std::optional<ModelBundle> teacher; // bidirectional
    std::optional<ModelBundle> student; // block-causal (adapters active when present)
    std::optional<ModelBundle> ar;      // block-causal with one-token blocks
};

LoadedModels load_models(const RunConfig& cfg, bool need_teacher, bool need_student, bool need_ar);

/// Decodes one condition with the named decoder. Unknown names and missing
/// models are Config errors.
DecodeResult run_decoder(const std::string& name, const LoadedModels& models, const RunConfig& cfg,
                         const TokenSeq& cond, const DecodeOptions& opts = {});

BenchReport run_bench(const RunConfig& cfg, const LoadedModels& models, const std::vector<std::string>& decoders,
                      int episodes, int threads);
TraceReport run_trace(const RunConfig& cfg, const LoadedModels& models, const std::string& decoder, int episodes,
                      int threads);
KvSimReport run_kvsim(const RunConfig& cfg, const LoadedModels& models, std::uint64_t episode_seed);

/// Trains `bundle` in place per cfg.train (ACT or BD regimes), streaming
/// the log to `log_path` (skipped when empty).
TrainOutcome run_train(const RunConfig& cfg, ModelBundle& bundle, const std::string& log_path);
/// AD regime on top of `teacher`; returns the student (teacher backbone plus
/// trained adapters).
ModelBundle run_distill(const RunConfig& cfg, const ModelBundle& teacher, const std::string& log_path,
                        TrainOutcome* outcome = nullptr);

void write_bench_csv(std::ostream& os, const BenchReport& r);
void write_trace_files(const std::string& dir, const TraceReport& r);
void write_kvsim_files(const std::string& dir, const KvSimReport& r);

// Command entry points used by the executable; each reads and writes files
// under cfg.out_dir.
void cmd_init_config(const RunConfig& cfg, const std::string& path);
void cmd_train(const RunConfig& cfg);
void cmd_distill(const RunConfig& cfg);
void cmd_bench(const RunConfig& cfg);
void cmd_trace(const RunConfig& cfg);
void cmd_kvsim(const RunConfig& cfg);
void cmd_sweep(const RunConfig& cfg);

} // namespace blockpipe
