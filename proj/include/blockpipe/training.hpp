#pragma once

// Training objectives (masked CE, block-diffusion CE under forcing
// corruption, asymmetric KL distillation), Adam, finite-difference gradient
// verification and the four training regimes.

#include "blockpipe/diffusion.hpp"
#include "blockpipe/model.hpp"
#include "blockpipe/numerics.hpp"
#include "blockpipe/taskbench.hpp"
#include "blockpipe/types.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace blockpipe {

struct Batch {
    std::vector<TokenSeq> cond;
    std::vector<TokenSeq> clean;
    std::vector<CorruptionResult> corruption;
    std::vector<NoiseSchedule> schedules; // empty unless built with forcing corruption

    std::size_t size() const noexcept { return clean.size(); }
    void validate() const;
};

/// Uniform corruption (one mask ratio per example) or, with `forcing`,
/// block-wise corruption under a per-example sampled schedule.
Batch make_batch(const TaskSpec& task, const TokenizerConfig& tok, const BlockLayout& layout, int size,
                 bool forcing, Token mask_token, std::uint64_t seed);

struct LossValue {
    double loss = 0.0;
    RealMatrix dlogits; // same shape as the logits
};

/// -sum over masked rows of log softmax(logits)[target]. Rows of `logits`
/// are sequence positions; `masked_set` indexes them.
LossValue loss_masked_ce(const RealMatrix& logits, const TokenSeq& target, const std::vector<int>& masked_set,
                         Token mask_token);

/// sum over masked rows of KL(softmax(student) || softmax(teacher)).
/// Gradient is with respect to the student logits only.
LossValue loss_kl(const RealMatrix& student_logits, const RealMatrix& teacher_logits,
                  const std::vector<int>& masked_set);

// Batch losses: summed over masked positions, averaged over the batch.
// Gradient sinks may be null.

/// Bidirectional masked CE, the plain denoising objective.
double loss_act(const ModelBundle& bundle, const Batch& batch, Weights* grads = nullptr);

/// Block-diffusion CE: one forward under `pattern` (must be BlockCausal)
/// predicts every block from its forcing-corrupted prefix and itself.
double loss_bd(const ModelBundle& bundle, const Batch& batch, const AttentionPattern& pattern,
               Weights* grads = nullptr);

/// Asymmetric distillation. The student runs BlockCausal with its adapters
/// as flagged, the teacher runs Bidirectional and must not use adapters.
double loss_ad(const ModelBundle& student, bool student_active, const ModelBundle& teacher, bool teacher_active,
               const Batch& batch, const BlockLayout& layout, AdapterWeights* adapter_grads = nullptr);

struct OptimState {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<RealMatrix> m;
    std::vector<RealMatrix> v;
};

/// One Adam update with bias correction. Moments are allocated on first use.
void adam_step(OptimState& st, const std::vector<RealMatrix*>& params, const std::vector<const RealMatrix*>& grads);

enum class Regime { ACT_finetune, BD_from_scratch, BD_from_finetuned, AD_from_finetuned };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);
bool regime_uses_forcing(Regime r);

/// Learning rate used when none is configured.
double default_learning_rate(Regime r);

/// Multiplier on the base learning rate at 1-based step `step` of `total`.
double lr_factor(int step, int total, int warmup, bool cosine);

/// Backprop + Adam on the regime's trainable parameters. AD needs `teacher`
/// (frozen backbone, adapters off) and trains adapters only.
double train_step(ModelBundle& bundle, const Batch& batch, Regime regime, OptimState& optim,
                  const BlockLayout& layout, const ModelBundle* teacher = nullptr);

/// f(bundle, weight grads, adapter grads) returns the loss and accumulates
/// analytic gradients into non-null sinks.
using LossFn = std::function<double(const ModelBundle&, Weights*, AdapterWeights*)>;

enum class GradTarget { Weights, Adapters };

/// Max relative error between analytic and central-difference gradients
/// (h = 1e-5) over `probes` randomly chosen scalar parameters. The error is
/// |a - n| / max(|a|, |n|, 1e-5).
double grad_check(const LossFn& f, const ModelBundle& bundle, GradTarget target, int probes, std::uint64_t seed);

struct AccuracyReport {
    double accuracy = 0.0;  // argmax == clean token over masked positions
    double agreement = 0.0; // argmax == teacher argmax (when a teacher is given)
    std::size_t masked = 0;
};

/// Masked-position argmax accuracy of `bundle` under `pattern`.
AccuracyReport masked_accuracy(const ModelBundle& bundle, bool active, const AttentionPattern& pattern,
                               const Batch& batch, const ModelBundle* teacher = nullptr);

struct TrainConfig {
    Regime regime = Regime::ACT_finetune;
    int steps = 3000;
    int batch_size = 16;
    std::optional<double> learning_rate;
    bool cosine_decay = true; // linear warmup, then cosine decay to zero at `steps`
    int warmup_steps = 100;
    int eval_every = 100;
    int eval_examples = 256;
    std::optional<double> stop_at_accuracy; // stop once held-out accuracy reaches this
    std::uint64_t seed = 0;
    TaskSpec task;
    TokenizerConfig tokenizer;
    BlockLayout layout;
};

struct TrainLogRow {
    std::int64_t step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    double agreement = 0.0;
    double wall_seconds = 0.0;
};

struct TrainOutcome {
    std::vector<TrainLogRow> log;
    double final_accuracy = 0.0;
    std::optional<std::int64_t> reached_at; // first eval step meeting stop_at_accuracy
};

/// Runs `cfg.steps` steps (fewer when stop_at_accuracy is met), evaluating
/// every `eval_every` steps on a fixed held-out batch. `on_row` sees every
/// log row as soon as it is produced.
TrainOutcome train(ModelBundle& bundle, const TrainConfig& cfg, const ModelBundle* teacher = nullptr,
                   const std::function<void(const TrainLogRow&)>& on_row = {});

void write_train_log_header(std::ostream& os);
void write_train_log_row(std::ostream& os, const TrainLogRow& row);

} // namespace blockpipe
