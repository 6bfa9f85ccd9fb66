#pragma once

// Decoding paradigms over a masked denoising model: pipelined parallel block
// decoding with confidence thresholds and logarithmic scheduling, strict
// block diffusion, left-to-right AR, vanilla full-sequence denoising and a
// stale-KV approximation of cache reuse under bidirectional attention.

#include "blockpipe/diffusion.hpp"
#include "blockpipe/kvcache.hpp"
#include "blockpipe/model.hpp"
#include "blockpipe/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

namespace blockpipe {

struct DecodeConfig {
    double tau_add = 0.5;
    double tau_act = 0.7;
    double tau_conf = 0.5;
    int n = 2;         // logarithmic scheduling factor
    int max_iters = 0; // 0: L + N
    BlockLayout layout;
    bool fixed_length = true;

    int effective_max_iters() const noexcept { return max_iters > 0 ? max_iters : layout.region_len() + layout.num_blocks; }
    void validate() const;
};

enum class BlockStatus { Pending, SemiActivated, FullyActivated, Complete };

const char* to_string(BlockStatus s);

struct BlockState {
    BlockStatus status = BlockStatus::Pending;
    int decoded_count = 0;
    // iteration stamps, 0 = never
    int semi_at = 0;
    int full_at = 0;
    int complete_at = 0;
};

struct IterationCost {
    int iteration = 0;
    int forwards = 0;
    int query_count = 0;
    std::uint64_t attention_pairs = 0; // per layer and head
    int commits = 0;
};

/// One processed block within one iteration.
struct BlockStep {
    int iteration = 0;
    int block = 0;
    BlockStatus status = BlockStatus::Pending; // status while selecting
    int remaining_before = 0;
    int committed = 0;
};

struct DecodeTrace {
    std::vector<int> decode_iteration_of; // per action position, 0 = never decoded
    std::vector<IterationCost> iterations;
    std::vector<BlockStep> block_steps;
    std::vector<BlockState> blocks; // final states with stamps
};

struct DecodeResult {
    TokenSeq tokens;
    int iterations = 0;
    int forwards = 0;
    std::uint64_t attention_pairs = 0; // per layer and head, condition prefill included
    DecodeTrace trace;
    std::optional<Position> eoa_position; // action index of the first committed EOA
    std::size_t final_cache_len = 0;
    std::vector<KvSnapshot> block1_kv; // one per forward when requested
};

struct DecodeOptions {
    bool record_block1_kv = false;
};

/// Anything that maps (condition, partially masked actions) to logits.
class DenoisingModel {
public:
    virtual ~DenoisingModel() = default;
    virtual const ModelConfig& config() const = 0;
    virtual ForwardOutput run(const TokenSeq& cond, const TokenSeq& action, const AttentionPattern& pattern,
                              const Cache* cache, const PositionList& queries, const ForwardOptions& opts) const = 0;
};

class TransformerModel final : public DenoisingModel {
public:
    TransformerModel(const Weights& w, const AdapterWeights* adapters = nullptr, bool active = false)
        : w_(w), adapters_(adapters), active_(active) {}
    const ModelConfig& config() const override { return w_.config; }
    ForwardOutput run(const TokenSeq& cond, const TokenSeq& action, const AttentionPattern& pattern,
                      const Cache* cache, const PositionList& queries, const ForwardOptions& opts) const override;

private:
    const Weights& w_;
    const AdapterWeights* adapters_;
    bool active_;
};

/// Per row: the largest softmax probability once M is removed from the
/// vocabulary.
std::vector<double> confidence_scores(const RealMatrix& logits, Token mask_token);

/// Per row: argmax over the vocabulary without M.
TokenSeq best_tokens(const RealMatrix& logits, Token mask_token);

/// Indices into `conf` (the remaining positions of one block, ascending) to
/// commit this iteration.
std::vector<std::size_t> select_positions(const std::vector<double>& conf, BlockStatus status, const DecodeConfig& cfg);

DecodeResult decode_pipelined(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                              const DecodeOptions& opts = {});
DecodeResult decode_block_diffusion(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                                    const DecodeOptions& opts = {});
/// `steps` full bidirectional forwards (capped at L), no cache.
DecodeResult decode_vanilla_dvla(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg, int steps,
                                 const DecodeOptions& opts = {});
DecodeResult decode_fast_dllm_baseline(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                                       const DecodeOptions& opts = {});
/// One position per block, one commit per forward, over cfg.layout.region_len() positions.
DecodeResult decode_ar(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                       const DecodeOptions& opts = {});

void write_trace_csv(std::ostream& os, const DecodeResult& r, const BlockLayout& layout);
void write_cost_csv(std::ostream& os, const DecodeResult& r);

} // namespace blockpipe
