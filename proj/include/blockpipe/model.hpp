#pragma once

// Small masked-denoising transformer (pre-LayerNorm, GELU MLP, learned
// absolute positions) with optional low-rank adapters on the query/value
// projections and the output head. The same backbone serves as the
// bidirectional teacher (adapters off) and block-causal student (adapters on).

#include "blockpipe/attention_pattern.hpp"
#include "blockpipe/diffusion.hpp"
#include "blockpipe/kvcache.hpp"
#include "blockpipe/numerics.hpp"
#include "blockpipe/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace blockpipe {

struct ModelConfig {
    int vocab_size = 260;
    Token mask_token = 256;
    std::optional<Token> eoa_token = 257;
    int max_len = 128;
    int cond_len = 16;
    int layers = 4;
    int heads = 4;
    int model_dim = 128;
    int adapter_rank = 32;

    int head_dim() const noexcept { return model_dim / heads; }
    int ff_dim() const noexcept { return 4 * model_dim; }
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    RealMatrix ln1_gain, ln1_bias;
    RealMatrix wq, bq, wk, bk, wv, bv, wo, bo;
    RealMatrix ln2_gain, ln2_bias;
    RealMatrix w1, b1, w2, b2;

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
    ModelConfig config;
    RealMatrix token_embedding;    // V x d
    RealMatrix position_embedding; // max_len x d
    std::vector<LayerWeights> layers;
    RealMatrix final_gain, final_bias;
    RealMatrix head, head_bias; // d x V, 1 x V

    /// Calls f(name, matrix) for every tensor, in the fixed checkpoint order.
    template <class F> void for_each(F&& f) { visit(*this, f); }
    template <class F> void for_each(F&& f) const { visit(*this, f); }

    Weights zeros_like() const;
    std::size_t parameter_count() const;

    friend bool operator==(const Weights&, const Weights&) = default;

private:
    template <class Self, class F> static void visit(Self& self, F& f);
};

/// x*A*B is added to x*W for an adapted matrix W (A: d_in x r, B: r x d_out).
struct LowRankPair {
    RealMatrix a;
    RealMatrix b;

    friend bool operator==(const LowRankPair&, const LowRankPair&) = default;
};

struct LayerAdapters {
    LowRankPair query;
    LowRankPair value;

    friend bool operator==(const LayerAdapters&, const LayerAdapters&) = default;
};

struct AdapterWeights {
    int rank = 0;
    std::vector<LayerAdapters> layers;
    LowRankPair head;

    template <class F> void for_each(F&& f) { visit(*this, f); }
    template <class F> void for_each(F&& f) const { visit(*this, f); }

    AdapterWeights zeros_like() const;
    std::size_t parameter_count() const;

    friend bool operator==(const AdapterWeights&, const AdapterWeights&) = default;

private:
    template <class Self, class F> static void visit(Self& self, F& f);
};

/// Backbone plus optional adapters. Whether the adapters participate is a
/// per-call decision (teacher: off, student: on).
struct ModelBundle {
    Weights weights;
    std::optional<AdapterWeights> adapters;
    std::int64_t training_step = 0;
};

Weights init_weights(const ModelConfig& cfg, std::uint64_t seed);

/// A uniform, B zero, so fresh adapters contribute nothing. nullopt when the
/// configured rank is 0.
std::optional<AdapterWeights> init_adapters(const ModelConfig& cfg, std::uint64_t seed);

/// Backbone with A*B folded into every adapted matrix.
Weights merge_adapters(const Weights& w, const AdapterWeights& adapters);

/// Visibility rules over global positions (condition at [0, cond_len)):
/// condition queries see only the condition; action queries see the whole
/// condition, plus every action key (Bidirectional) or every key in their own
/// and earlier blocks (BlockCausal).
AttnMask build_attention_mask(const AttentionPattern& pattern, int cond_len,
                              const PositionList& query_positions, const PositionList& key_positions);

bool key_visible(const AttentionPattern& pattern, int cond_len, Position query, Position key);

struct ForwardOutput {
    RealMatrix logits;              // one row per query position
    PositionList query_positions;
    std::vector<LayerKV> new_kv;    // one entry per layer, rows follow kv_positions
    PositionList kv_positions;      // every position this call computed
};

struct ForwardOptions {
    // Permits a cache together with the Bidirectional pattern. Only the
    // stale-KV baseline decoder sets this; the result is an approximation.
    bool allow_stale_cache = false;
};

/// Logits for `query_positions` (global). Keys/values of cached positions are
/// read from `cache` and never recomputed; any uncached position that some
/// query can see is computed alongside the queries.
ForwardOutput forward(const Weights& w, const AdapterWeights* adapters, bool active,
                      const TokenSeq& cond, const TokenSeq& action, const AttentionPattern& pattern,
                      const Cache* cache, const PositionList& query_positions,
                      const ForwardOptions& opts = {});

/// Activations kept by a training forward for the backward pass.
struct ForwardTape {
    struct Norm {
        RealMatrix xhat;
        std::vector<double> rstd;
    };
    struct Layer {
        RealMatrix x_in;
        Norm ln1;
        RealMatrix h1; // ln1 output
        RealMatrix q, k, v;
        RealMatrix q_low, v_low; // h1*A for adapted projections
        std::vector<RealMatrix> probs;
        RealMatrix attn; // heads concatenated
        RealMatrix x_mid;
        Norm ln2;
        RealMatrix h2;
        RealMatrix ff_pre;
        RealMatrix ff_act;
    };

    PositionList positions; // computed rows
    TokenSeq tokens;
    AttnMask mask;
    std::vector<Layer> layers;
    Norm final_norm;
    RealMatrix final_h; // rows = query rows
    RealMatrix head_low;
    std::vector<std::size_t> query_rows;
    bool adapters_active = false;
};

/// Full (uncached) forward that records activations.
ForwardOutput forward_recorded(const Weights& w, const AdapterWeights* adapters, bool active,
                               const TokenSeq& cond, const TokenSeq& action,
                               const AttentionPattern& pattern, const PositionList& query_positions,
                               ForwardTape& tape);

/// Backpropagates d(loss)/d(logits) through a recorded forward, accumulating
/// into whichever gradient sinks are non-null.
void backward(const Weights& w, const AdapterWeights* adapters, const ForwardTape& tape,
              const RealMatrix& dlogits, Weights* weight_grads, AdapterWeights* adapter_grads);

/// What a forward with `queries` computes given the cached positions, and
/// the (query, key) pairs one attention head evaluates for it.
struct ForwardShape {
    PositionList computed;
    std::uint64_t pairs_per_head = 0;
};

ForwardShape forward_shape(const AttentionPattern& pattern, int cond_len, int total_len, const PositionList& cached,
                           const PositionList& queries);

PositionList action_positions(const ModelConfig& cfg, int action_len);

// Checkpoints: `<stem>.json` manifest plus `<stem>.bin` of little-endian
// float64 values in manifest order.
void save_checkpoint(const ModelBundle& bundle, const std::string& stem);
ModelBundle load_checkpoint(const std::string& stem);

// --- template definitions ---------------------------------------------------

template <class Self, class F> void Weights::visit(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
        auto& l = self.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        f(p + "ln1_gain", l.ln1_gain);
        f(p + "ln1_bias", l.ln1_bias);
        f(p + "wq", l.wq);
        f(p + "bq", l.bq);
        f(p + "wk", l.wk);
        f(p + "bk", l.bk);
        f(p + "wv", l.wv);
        f(p + "bv", l.bv);
        f(p + "wo", l.wo);
        f(p + "bo", l.bo);
        f(p + "ln2_gain", l.ln2_gain);
        f(p + "ln2_bias", l.ln2_bias);
        f(p + "w1", l.w1);
        f(p + "b1", l.b1);
        f(p + "w2", l.w2);
        f(p + "b2", l.b2);
    }
    f(std::string("final_gain"), self.final_gain);
    f(std::string("final_bias"), self.final_bias);
    f(std::string("head"), self.head);
    f(std::string("head_bias"), self.head_bias);
}

template <class Self, class F> void AdapterWeights::visit(Self& self, F& f) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
        auto& l = self.layers[i];
        const std::string p = "adapters.layers." + std::to_string(i) + ".";
        f(p + "query.a", l.query.a);
        f(p + "query.b", l.query.b);
        f(p + "value.a", l.value.a);
        f(p + "value.b", l.value.b);
    }
    f(std::string("adapters.head.a"), self.head.a);
    f(std::string("adapters.head.b"), self.head.b);
}

} // namespace blockpipe
