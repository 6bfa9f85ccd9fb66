#pragma once

// Scripted DenoisingModel and confidence streams shared by the decoder tests
// and the acceptance harness.

#include "blockpipe/decoder.hpp"
#include "blockpipe/taskbench.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace blockpipe::stubs {

constexpr Token kMaskTok = 4;
constexpr Token kEoaTok = 5;

inline ModelConfig stub_config(int cond_len) {
    ModelConfig c;
    c.vocab_size = 6;
    c.mask_token = kMaskTok;
    c.eoa_token = kEoaTok;
    c.max_len = 256;
    c.cond_len = cond_len;
    c.layers = 1;
    c.heads = 1;
    c.model_dim = 2;
    c.adapter_rank = 0;
    return c;
}

// Scripted model: the argmax token at a position is fixed, its confidence is
// conf(position, times this position has been queried before). KV rows are
// produced for exactly the rows a real forward would compute.
class StubModel final : public DenoisingModel {
public:
    using ConfFn = std::function<double(Position, int)>;
    using TokenFn = std::function<Token(Position)>;

    StubModel(int cond_len, ConfFn conf, TokenFn tok = {})
        : cfg_(stub_config(cond_len)), conf_(std::move(conf)), tok_(std::move(tok)) {}

    const ModelConfig& config() const override { return cfg_; }

    ForwardOutput run(const TokenSeq& cond, const TokenSeq& action, const AttentionPattern& pattern,
                      const Cache* cache, const PositionList& queries, const ForwardOptions& opts) const override {
        if (cache && !pattern.is_block_causal() && !opts.allow_stale_cache)
            throw std::logic_error("stub: bidirectional forward over a cache");
        inputs.push_back(action);
        const int total = cfg_.cond_len + static_cast<int>(action.size());
        const ForwardShape shape =
            forward_shape(pattern, cfg_.cond_len, total, cache ? cache->positions() : PositionList{}, queries);
        ForwardOutput out;
        out.query_positions = queries;
        out.kv_positions = shape.computed;
        LayerKV kv{RealMatrix(shape.computed.size(), 2), RealMatrix(shape.computed.size(), 2)};
        for (std::size_t r = 0; r < shape.computed.size(); ++r) {
            const Position p = shape.computed[r];
            kv.keys(r, 0) = p + 1;
            kv.values(r, 0) = p < cfg_.cond_len ? cond[static_cast<std::size_t>(p)]
                                                : action[static_cast<std::size_t>(p - cfg_.cond_len)];
        }
        out.new_kv = {kv};
        out.logits = RealMatrix(queries.size(), 6, 0.0);
        for (std::size_t r = 0; r < queries.size(); ++r) {
            const Position p = queries[r];
            const double c = conf_(p, queried[p]++);
            const Token t = tok_ ? tok_(p) : static_cast<Token>(p % 4);
            out.logits(r, static_cast<std::size_t>(t)) = logit_for(c);
        }
        ++calls;
        return out;
    }

    // top logit giving softmax probability c over the 5 non-mask symbols
    static double logit_for(double c) {
        if (c >= 1.0 - 1e-12) return 60.0;
        return std::log(c * 4.0 / (1.0 - c));
    }

    mutable int calls = 0;
    mutable std::map<Position, int> queried;
    mutable std::vector<TokenSeq> inputs;

private:
    ModelConfig cfg_;
    ConfFn conf_;
    TokenFn tok_;
};

inline DecodeConfig config_for(int k, int n_blocks, double tau_add = 0.5, double tau_act = 0.7, double tau_conf = 0.5, int n = 2) {
    DecodeConfig c;
    c.tau_add = tau_add;
    c.tau_act = tau_act;
    c.tau_conf = tau_conf;
    c.n = n;
    c.layout = BlockLayout{k, n_blocks, 0};
    return c;
}

inline TokenSeq cond_of(int len) { return TokenSeq(static_cast<std::size_t>(len), 1); }

inline StubModel::ConfFn all_confident() {
    return [](Position, int) { return 1.0; };
}

inline double uniform01(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return static_cast<double>(episode_seed(episode_seed(seed, a), b) >> 11) * 0x1.0p-53;
}

// confidence rises with the number of times a position was queried
inline StubModel::ConfFn rising_stream(std::uint64_t seed) {
    return [seed](Position p, int q) {
        const double base = 0.2 + 0.6 * uniform01(seed, static_cast<std::uint64_t>(p), 0);
        const double step = 0.05 + 0.25 * uniform01(seed, static_cast<std::uint64_t>(p), 1);
        return std::min(1.0, base + step * q);
    };
}

// fully random confidences per query
inline StubModel::ConfFn noisy_stream(std::uint64_t seed) {
    return [seed](Position p, int q) {
        return 0.2 + 0.8 * uniform01(seed, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(q) + 7);
    };
}

// commits recorded in the inputs never change, and match the final tokens
inline bool commits_monotone(const StubModel& m, const DecodeResult& r, Token mask) {
    TokenSeq prev(r.tokens.size(), mask);
    for (const TokenSeq& in : m.inputs) {
        for (std::size_t i = 0; i < in.size(); ++i)
            if (prev[i] != mask && in[i] != prev[i]) return false;
        prev = in;
    }
    for (std::size_t i = 0; i < prev.size(); ++i)
        if (prev[i] != mask && r.tokens[i] != prev[i]) return false;
    return true;
}

inline int count_decoded_by(const DecodeResult& r, const BlockLayout& lay, int block, int iteration) {
    int n = 0;
    for (int a = block * lay.block_size; a < (block + 1) * lay.block_size; ++a) {
        const int it = r.trace.decode_iteration_of[static_cast<std::size_t>(a)];
        if (it > 0 && it <= iteration) ++n;
    }
    return n;
}

// Scheduler invariants of a pipelined decode; returns the violated ones.
inline std::vector<std::string> pipelined_violations(const DecodeResult& r, const DecodeConfig& cfg) {
    std::vector<std::string> bad;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) bad.push_back(what);
    };
    const BlockLayout& lay = cfg.layout;
    const int k = lay.block_size, N = lay.num_blocks, L = lay.region_len();
    expect(r.iterations <= L + N, "more than L + N iterations");
    expect(r.forwards == r.iterations, "forwards != iterations");
    for (int a = 0; a < L; ++a)
        expect(r.trace.decode_iteration_of[static_cast<std::size_t>(a)] >= 1, "position never decoded");
    expect(r.trace.blocks[0].full_at == 1, "block 1 not fully activated at iteration 1");
    for (int b = 1; b < N; ++b) {
        const BlockState& s = r.trace.blocks[static_cast<std::size_t>(b)];
        const std::string tag = "block " + std::to_string(b + 1) + ": ";
        if (s.semi_at <= 1) {
            bad.push_back(tag + "appended at iteration " + std::to_string(s.semi_at));
            continue;
        }
        // predecessor had reached tau_add by the end of the previous iteration
        expect(count_decoded_by(r, lay, b - 1, s.semi_at - 1) + 1e-9 >= cfg.tau_add * k, tag + "appended before tau_add");
        // and was short of it one iteration earlier, otherwise the block would have come sooner
        if (s.semi_at > 2)
            expect(count_decoded_by(r, lay, b - 1, s.semi_at - 2) < cfg.tau_add * k - 1e-9, tag + "appended late");
        expect(s.complete_at >= s.semi_at, tag + "completed before appended");
        if (s.full_at == 0) {
            // finished while still semi-activated, its predecessor never reached tau_act before that
            expect(count_decoded_by(r, lay, b - 1, s.complete_at) < cfg.tau_act * k + 1e-9, tag + "activation skipped");
            continue;
        }
        expect(s.full_at >= s.semi_at, tag + "activated before appended");
        expect(count_decoded_by(r, lay, b - 1, s.full_at) + 1e-9 >= cfg.tau_act * k, tag + "activated before tau_act");
        if (s.full_at > s.semi_at)
            expect(count_decoded_by(r, lay, b - 1, s.full_at - 1) < cfg.tau_act * k - 1e-9, tag + "activated late");
        expect(s.complete_at >= s.full_at, tag + "completed before activated");
    }
    for (const BlockStep& st : r.trace.block_steps) {
        if (st.status == BlockStatus::FullyActivated)
            expect(st.committed >= std::max(1, st.remaining_before / cfg.n), "full block below its quota");
        expect(st.committed <= st.remaining_before, "committed more than remained");
    }
    return bad;
}

} // namespace blockpipe::stubs
