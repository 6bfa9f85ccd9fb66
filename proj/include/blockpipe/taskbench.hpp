#pragma once

// Synthetic action-chunk tasks with exact ground truth, the uniform-bin action
// tokenizer, and per-episode success evaluation.

#include "blockpipe/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace blockpipe {

struct TokenizerConfig {
    int bins = 256;
    double range_lo = -1.0;
    double range_hi = 1.0;
    int action_dims = 7;
    int chunk_steps = 8;

    int seq_len() const noexcept { return action_dims * chunk_steps; }
    double bin_width() const noexcept { return (range_hi - range_lo) / bins; }
    void validate() const;

    friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

/// T x D continuous actions, time-major.
struct ActionChunk {
    int steps = 0;
    int dims = 0;
    std::vector<double> values;

    ActionChunk() = default;
    ActionChunk(int t, int d) : steps(t), dims(d), values(static_cast<std::size_t>(t * d), 0.0) {}
    double& at(int t, int d) { return values[static_cast<std::size_t>(t * dims + d)]; }
    double at(int t, int d) const { return values[static_cast<std::size_t>(t * dims + d)]; }
};

Token tokenize_value(double v, const TokenizerConfig& cfg);
double detokenize_value(Token b, const TokenizerConfig& cfg);
TokenSeq tokenize_actions(const ActionChunk& chunk, const TokenizerConfig& cfg);
ActionChunk detokenize_actions(const TokenSeq& seq, const TokenizerConfig& cfg);

enum class TaskFamily { Copy, Integrate, Reach };

std::string to_string(TaskFamily f);
TaskFamily task_family_from_string(const std::string& s);

struct TaskSpec {
    TaskFamily family = TaskFamily::Integrate;
    int cond_len = 16;
    std::uint64_t seed = 0;
};

struct Episode {
    TaskFamily family = TaskFamily::Integrate;
    std::uint64_t seed = 0;
    TokenSeq cond;
    ActionChunk truth;
    TokenSeq truth_tokens;
};

// Knobs of the Integrate family. Every dimension starts at the same mid-range
// bin. Each step has one condition token per group of four dimensions, and
// bit j of that token says whether dimension 4g + j moves up by one unit at
// that step. The running sum is clamped to the bin range.
inline constexpr int kIntegrateDeltaUnit = 8;
inline constexpr int kIntegrateGroup = 4;

inline int integrate_groups(int dims) { return (dims + kIntegrateGroup - 1) / kIntegrateGroup; }

/// Start bin of every dimension, centred on the span a path can cover.
inline int integrate_start(int bins, int steps) {
    const int s = (bins - 1 - steps * kIntegrateDeltaUnit) / 2;
    return s < 0 ? 0 : s;
}

/// Delta (in bins) of dimension `dim` at step `t`, read off the condition.
inline int integrate_delta(const TokenSeq& cond, int dims, int t, int dim) {
    const Token code = cond[static_cast<std::size_t>(t * integrate_groups(dims) + dim / kIntegrateGroup)];
    return ((code >> (dim % kIntegrateGroup)) & 1) * kIntegrateDeltaUnit;
}

Episode generate_episode(const TaskSpec& spec, const TokenizerConfig& cfg, std::uint64_t seed);

/// Seed of the i-th episode of a stream rooted at `base` (splitmix64 of a
/// counter), so streams can be split across workers without coordination.
std::uint64_t episode_seed(std::uint64_t base, std::uint64_t index);

struct EpisodeResult {
    bool success = false;
    double token_match_rate = 0.0;
    double max_action_error = 0.0;
    // decode summary, filled by the benchmark harness
    int iterations = 0;
    int forwards = 0;
    std::uint64_t attention_pairs = 0;
};

/// success iff every decoded token lies within one bin of the truth token.
/// Tokens that are not action bins count as misses.
EpisodeResult evaluate_success(const TokenSeq& decoded, const ActionChunk& truth, const TokenizerConfig& cfg,
                               Token mask_token);

void write_episode_jsonl(std::ostream& os, const Episode& ep);

} // namespace blockpipe
