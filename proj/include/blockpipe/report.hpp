#pragma once

// Result records shared by the command-line tools and the acceptance run.

#include "blockpipe/kvcache.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace blockpipe {

struct EpisodeRecord {
    std::uint64_t seed = 0;
    bool success = false;
    double token_match = 0.0;
    double max_action_error = 0.0;
    int iterations = 0;
    int forwards = 0;
    std::uint64_t attention_pairs = 0;
    double seconds = 0.0; // decode wall time
    friend bool operator==(const EpisodeRecord&, const EpisodeRecord&) = default;
};

struct BenchRow {
    std::string decoder;
    int episodes = 0;
    double success_rate = 0.0;
    double mean_token_match = 0.0;
    double tokens_per_second = 0.0; // generated action tokens over summed decode wall time
    double forwards_per_sequence = 0.0;
    double attention_pairs_per_sequence = 0.0; // per layer and head
    double speedup = 0.0;      // tokens/s relative to the vanilla row
    double pair_speedup = 0.0; // vanilla attention pairs over this row's
    std::vector<EpisodeRecord> records;
    friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

struct BenchReport {
    std::string task;
    int action_tokens = 0;
    std::vector<std::uint64_t> episode_seeds;
    std::vector<BenchRow> rows;
    friend bool operator==(const BenchReport&, const BenchReport&) = default;

    const BenchRow* row(const std::string& decoder) const;
};

/// Fills speedup and pair_speedup of every row from the vanilla row.
void finalize_speedups(BenchReport& r);

struct TraceReport {
    std::string decoder;
    int episodes = 0;
    int max_iteration = 0;
    std::vector<std::vector<std::uint64_t>> frequency; // [position][iteration - 1]
    std::vector<double> mean_iteration;                // per position
    double spearman = 0.0;                             // position vs mean iteration
};

struct KvSimReport {
    SimilarityReport bidirectional;
    SimilarityReport block_causal;
    int block_causal_complete_at = 0;    // iteration block 1 completed in the block-causal run
    double block_causal_max_deviation = 0.0; // max |sim - 1| among post-completion pairs
    double bidirectional_min_offdiag = 1.0;
};

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

} // namespace blockpipe
