#pragma once

// Append-only per-layer key/value storage for block-causal decoding, plus the
// diagnostics used to show when cached KV is (and is not) reusable.

#include "blockpipe/attention_pattern.hpp"
#include "blockpipe/diffusion.hpp"
#include "blockpipe/numerics.hpp"
#include "blockpipe/types.hpp"

#include <cstddef>
#include <iosfwd>
#include <vector>

namespace blockpipe {

/// Keys and values of one layer for a set of positions, all heads
/// concatenated (rows = positions, cols = model_dim).
struct LayerKV {
    RealMatrix keys;
    RealMatrix values;

    friend bool operator==(const LayerKV&, const LayerKV&) = default;
};

std::vector<LayerKV> select_kv_rows(const std::vector<LayerKV>& kv, std::span<const std::size_t> rows);

class Cache {
public:
    Cache() = default;
    explicit Cache(int layers) : layers_(static_cast<std::size_t>(layers)) {}

    int layers() const noexcept { return static_cast<int>(layers_.size()); }
    std::size_t committed_len() const noexcept { return positions_.size(); }
    const PositionList& positions() const noexcept { return positions_; }
    const LayerKV& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
    bool contains(Position p) const noexcept;

    /// Positions must be strictly increasing and lie beyond every committed
    /// position. An empty cache with no layers adopts the layer count of the
    /// first append.
    void append(const std::vector<LayerKV>& new_kv, const PositionList& positions);
    void truncate_to(std::size_t len);

    friend bool operator==(const Cache&, const Cache&) = default;

private:
    std::vector<LayerKV> layers_;
    PositionList positions_;
};

struct Weights;

/// Max |logit| difference for block `upto_block` (1-based) between a forward
/// that reads blocks 1..upto_block-1 from an incrementally built cache and a
/// monolithic forward over the same tokens. Asking for the Bidirectional
/// pattern is rejected: there is nothing reusable to compare.
double equivalence_check(const Weights& w, const TokenSeq& cond, const TokenSeq& action,
                         const BlockLayout& layout, int upto_block,
                         AttentionPattern::Kind kind = AttentionPattern::Kind::BlockCausal);

/// One snapshot per decode iteration: the flattened keys and values of the
/// tracked block, one entry per layer.
using KvSnapshot = std::vector<LayerKV>;

struct SimilarityReport {
    RealMatrix mean;                  // iteration x iteration, mean over layers
    std::vector<RealMatrix> per_layer;
};

double kv_cosine(const LayerKV& a, const LayerKV& b);
SimilarityReport similarity_trace(const std::vector<KvSnapshot>& history);

void write_similarity_csv(std::ostream& os, const RealMatrix& sim);

} // namespace blockpipe
