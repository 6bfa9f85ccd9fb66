#pragma once

// Forward corruption: uniform absorbing-state masking and the block-wise
// monotone-noise variant used for diffusion forcing.

#include "blockpipe/types.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace blockpipe {

/// Contiguous blocks of `block_size` positions tiling an action region that
/// starts at global position `region_start`. Block indices are 0-based.
struct BlockLayout {
    int block_size = 7;
    int num_blocks = 8;
    Position region_start = 0;

    int region_len() const noexcept { return block_size * num_blocks; }
    Position region_end() const noexcept { return region_start + region_len(); }
    bool contains(Position p) const noexcept { return p >= region_start && p < region_end(); }
    Position block_begin(int block) const noexcept { return region_start + block * block_size; }
    Position block_end(int block) const noexcept { return block_begin(block) + block_size; }
    /// Block containing global position `p`, or nullopt outside the region.
    std::optional<int> block_of(Position p) const noexcept;
    void validate() const;

    friend bool operator==(const BlockLayout&, const BlockLayout&) = default;
};

struct NoiseSchedule {
    std::vector<double> levels; // t_1 < ... < t_N, each in (0, 1]

    void validate() const;
};

struct CorruptionResult {
    TokenSeq corrupted;
    std::vector<int> masked_set; // indices into the sequence, ascending
};

double gamma_of_t(double t);

CorruptionResult corrupt(const TokenSeq& seq, double gamma, Token mask_token, std::uint64_t seed);

/// Block i of `layout` (relative to the start of `seq`) is masked with
/// probability gamma_of_t(sched.levels[i]). Uses the same generator stream as
/// corrupt(), so a single-block layout reproduces it exactly.
CorruptionResult forcing_corrupt(const TokenSeq& seq, const BlockLayout& layout,
                                 const NoiseSchedule& sched, Token mask_token, std::uint64_t seed);

NoiseSchedule sample_schedule(int num_blocks, std::uint64_t seed);

} // namespace blockpipe
