#include "blockpipe/diffusion.hpp"

#include "blockpipe/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace blockpipe {

std::optional<int> BlockLayout::block_of(Position p) const noexcept {
    if (!contains(p)) return std::nullopt;
    return (p - region_start) / block_size;
}

void BlockLayout::validate() const {
    require(block_size >= 1, ErrorKind::InvalidInput, "block layout: block_size must be >= 1");
    require(num_blocks >= 1, ErrorKind::InvalidInput, "block layout: num_blocks must be >= 1");
    require(region_start >= 0, ErrorKind::InvalidInput, "block layout: negative region start");
}

void NoiseSchedule::validate() const {
    require(!levels.empty(), ErrorKind::InvalidInput, "noise schedule is empty");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        require(levels[i] > 0.0 && levels[i] <= 1.0, ErrorKind::InvalidInput,
                "noise level outside (0,1]");
        if (i > 0)
            require(levels[i] > levels[i - 1], ErrorKind::InvalidInput,
                    "noise schedule must be strictly increasing");
    }
}

double gamma_of_t(double t) {
    require(t > 0.0 && t <= 1.0, ErrorKind::InvalidInput,
            "gamma_of_t: t=" + std::to_string(t) + " outside (0,1]");
    return t;
}

namespace {

void check_clean(const TokenSeq& seq, Token mask_token) {
    require(std::find(seq.begin(), seq.end(), mask_token) == seq.end(), ErrorKind::InvalidInput,
            "corrupt: sequence already contains the mask token");
}

// Shared by corrupt() and forcing_corrupt() so both consume the generator in
// the same order: one uniform draw per position, left to right.
template <class RateFn>
CorruptionResult mask_positions(const TokenSeq& seq, Token mask_token, std::uint64_t seed, RateFn rate) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    CorruptionResult res{seq, {}};
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (unif(rng) < rate(i)) {
            res.corrupted[i] = mask_token;
            res.masked_set.push_back(static_cast<int>(i));
        }
    }
    return res;
}

} // namespace

CorruptionResult corrupt(const TokenSeq& seq, double gamma, Token mask_token, std::uint64_t seed) {
    require(gamma > 0.0 && gamma <= 1.0, ErrorKind::InvalidInput, "corrupt: mask ratio outside (0,1]");
    check_clean(seq, mask_token);
    return mask_positions(seq, mask_token, seed, [gamma](std::size_t) { return gamma; });
}

CorruptionResult forcing_corrupt(const TokenSeq& seq, const BlockLayout& layout,
                                 const NoiseSchedule& sched, Token mask_token, std::uint64_t seed) {
    layout.validate();
    require(sched.levels.size() == static_cast<std::size_t>(layout.num_blocks), ErrorKind::InvalidInput,
            "forcing_corrupt: schedule has " + std::to_string(sched.levels.size()) + " levels for " +
                std::to_string(layout.num_blocks) + " blocks");
    require(seq.size() == static_cast<std::size_t>(layout.region_len()), ErrorKind::InvalidInput,
            "forcing_corrupt: sequence length does not match the layout");
    sched.validate();
    check_clean(seq, mask_token);

    std::vector<double> rates(sched.levels.size());
    std::transform(sched.levels.begin(), sched.levels.end(), rates.begin(), gamma_of_t);
    const auto k = static_cast<std::size_t>(layout.block_size);
    return mask_positions(seq, mask_token, seed, [&](std::size_t i) { return rates[i / k]; });
}

NoiseSchedule sample_schedule(int num_blocks, std::uint64_t seed) {
    require(num_blocks >= 1, ErrorKind::InvalidInput, "sample_schedule: need at least one block");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    NoiseSchedule s;
    s.levels.resize(static_cast<std::size_t>(num_blocks));
    for (double& t : s.levels) t = 1.0 - unif(rng); // (0, 1]
    std::sort(s.levels.begin(), s.levels.end());
    // Break ties downward so the top value never leaves (0, 1].
    for (std::size_t i = s.levels.size() - 1; i-- > 0;) {
        if (s.levels[i] >= s.levels[i + 1]) s.levels[i] = std::nextafter(s.levels[i + 1], 0.0);
    }
    return s;
}

} // namespace blockpipe
