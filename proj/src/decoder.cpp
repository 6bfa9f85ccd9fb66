#include "blockpipe/decoder.hpp"

#include "blockpipe/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

namespace blockpipe {

namespace {

// Completion ratios are fractions like 2/7 compared against thresholds
// written as decimals; a hair of slack keeps 2/7 >= 2.0/7 true.
constexpr double kRatioSlack = 1e-12;

bool reaches(double ratio, double threshold) { return ratio + kRatioSlack >= threshold; }

} // namespace

void DecodeConfig::validate() const {
    layout.validate();
    require(tau_add >= 0.0 && tau_add <= 1.0 && tau_act >= 0.0 && tau_act <= 1.0, ErrorKind::Config,
            "decode config: tau_add and tau_act must lie in [0, 1]");
    require(tau_add <= tau_act, ErrorKind::Config, "decode config: tau_add must not exceed tau_act");
    require(tau_conf >= 0.0 && tau_conf <= 1.0, ErrorKind::Config, "decode config: tau_conf must lie in [0, 1]");
    require(n >= 2, ErrorKind::Config, "decode config: n must be >= 2");
    require(max_iters == 0 || max_iters >= layout.num_blocks, ErrorKind::Config,
            "decode config: max_iters must be >= the number of blocks");
}

const char* to_string(BlockStatus s) {
    switch (s) {
    case BlockStatus::Pending: return "pending";
    case BlockStatus::SemiActivated: return "semi";
    case BlockStatus::FullyActivated: return "full";
    case BlockStatus::Complete: return "complete";
    }
    return "unknown";
}

ForwardOutput TransformerModel::run(const TokenSeq& cond, const TokenSeq& action, const AttentionPattern& pattern,
                                    const Cache* cache, const PositionList& queries, const ForwardOptions& opts) const {
    return forward(w_, adapters_, active_, cond, action, pattern, cache, queries, opts);
}

std::vector<double> confidence_scores(const RealMatrix& logits, Token mask_token) {
    require(logits.all_finite(), ErrorKind::InvalidInput, "confidence: non-finite logits");
    std::vector<double> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < row.size(); ++c)
            if (static_cast<Token>(c) != mask_token) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c)
            if (static_cast<Token>(c) != mask_token) sum += std::exp(row[c] - mx);
        out[r] = 1.0 / sum;
    }
    return out;
}

TokenSeq best_tokens(const RealMatrix& logits, Token mask_token) {
    TokenSeq out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        Token best = -1;
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (static_cast<Token>(c) == mask_token) continue;
            if (best < 0 || row[c] > row[static_cast<std::size_t>(best)]) best = static_cast<Token>(c);
        }
        out[r] = best;
    }
    return out;
}

namespace {

// Indices sorted by confidence, highest first, lower index first on ties.
std::vector<std::size_t> confidence_order(const std::vector<double>& conf) {
    std::vector<std::size_t> idx(conf.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
    return idx;
}

std::vector<std::size_t> at_least_one(const std::vector<double>& conf, double tau) {
    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < conf.size(); ++i)
        if (conf[i] >= tau) sel.push_back(i);
    if (sel.empty() && !conf.empty()) sel.push_back(confidence_order(conf).front());
    return sel;
}

} // namespace

std::vector<std::size_t> select_positions(const std::vector<double>& conf, BlockStatus status, const DecodeConfig& cfg) {
    require(!conf.empty(), ErrorKind::InvalidInput, "select_positions: no remaining positions");
    require(status == BlockStatus::SemiActivated || status == BlockStatus::FullyActivated, ErrorKind::InvalidInput,
            "select_positions: block is not active");
    double tau = cfg.tau_conf;
    std::size_t keep = 0;
    if (status == BlockStatus::FullyActivated) {
        keep = std::max<std::size_t>(1, conf.size() / static_cast<std::size_t>(cfg.n));
        const std::vector<std::size_t> order = confidence_order(conf);
        tau = std::min(cfg.tau_conf, conf[order[keep - 1]]);
    }
    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < conf.size(); ++i)
        if (conf[i] >= tau) sel.push_back(i);
    require(sel.size() >= keep, ErrorKind::NonTermination, "select_positions: quota not met");
    return sel;
}

namespace {

struct BlockPolicy {
    double add_ratio;
    double act_ratio;
    bool born_full;
    bool strict_threshold; // commit >= tau_conf, at least the single best
};

void check_cond(const DenoisingModel& model, const TokenSeq& cond) {
    require(static_cast<int>(cond.size()) == model.config().cond_len, ErrorKind::InvalidInput,
            "decode: condition length does not match the model");
}

KvSnapshot rows_for(const std::vector<LayerKV>& kv, const PositionList& kv_positions, Position begin, Position end) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < kv_positions.size(); ++r)
        if (kv_positions[r] >= begin && kv_positions[r] < end) rows.push_back(r);
    return select_kv_rows(kv, rows);
}

KvSnapshot cache_rows(const Cache& cache, Position begin, Position end) {
    std::vector<LayerKV> kv;
    for (int l = 0; l < cache.layers(); ++l) kv.push_back(cache.layer(l));
    return rows_for(kv, cache.positions(), begin, end);
}

DecodeResult run_blocks(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg_in,
                        const BlockPolicy& policy, const DecodeOptions& opts) {
    const ModelConfig& mc = model.config();
    check_cond(model, cond);
    DecodeConfig cfg = cfg_in;
    cfg.layout.region_start = mc.cond_len;
    cfg.validate();
    const BlockLayout& layout = cfg.layout;
    const int L = layout.region_len();
    const int N = layout.num_blocks;
    const int k = layout.block_size;
    const int total = mc.cond_len + L;
    const auto pattern = AttentionPattern::block_causal(layout);
    const bool eoa_mode = !cfg.fixed_length && mc.eoa_token.has_value();
    const int max_iters = cfg.effective_max_iters();

    DecodeResult res;
    res.tokens.assign(static_cast<std::size_t>(L), mc.mask_token);
    res.trace.decode_iteration_of.assign(static_cast<std::size_t>(L), 0);
    std::vector<BlockState>& blocks = res.trace.blocks;
    blocks.assign(static_cast<std::size_t>(N), {});
    Cache cache(mc.layers);

    auto ratio = [&](int b) { return static_cast<double>(blocks[static_cast<std::size_t>(b)].decoded_count) / k; };
    auto last_live = [&]() {
        // blocks past the first EOA are cancelled
        if (!res.eoa_position) return N - 1;
        return *layout.block_of(mc.cond_len + *res.eoa_position);
    };
    auto finished = [&]() {
        const int upto = last_live();
        for (int b = 0; b <= upto; ++b)
            if (blocks[static_cast<std::size_t>(b)].status != BlockStatus::Complete) return false;
        return true;
    };

    for (int it = 1; !finished(); ++it) {
        if (it > max_iters)
            fail(ErrorKind::NonTermination, "decode: exceeded " + std::to_string(max_iters) + " iterations");

        // (a) grow the pipeline
        int last = -1;
        for (int b = 0; b < N; ++b)
            if (blocks[static_cast<std::size_t>(b)].status != BlockStatus::Pending) last = b;
        if (last < 0) {
            BlockState& s = blocks[0];
            s.status = BlockStatus::FullyActivated;
            s.semi_at = s.full_at = it;
        } else if (last + 1 < N && !res.eoa_position && reaches(ratio(last), policy.add_ratio)) {
            BlockState& s = blocks[static_cast<std::size_t>(last + 1)];
            s.semi_at = it;
            if (policy.born_full) {
                s.status = BlockStatus::FullyActivated;
                s.full_at = it;
            } else {
                s.status = BlockStatus::SemiActivated;
            }
        }

        // (b) one forward over every active block
        std::vector<int> active;
        for (int b = 0; b <= last_live(); ++b) {
            const BlockStatus st = blocks[static_cast<std::size_t>(b)].status;
            if (st == BlockStatus::SemiActivated || st == BlockStatus::FullyActivated) active.push_back(b);
        }
        require(!active.empty(), ErrorKind::NonTermination, "decode: no active block left to process");
        PositionList queries;
        for (int b : active)
            for (Position p = layout.block_begin(b); p < layout.block_end(b); ++p) queries.push_back(p);

        Position frontier = mc.cond_len;
        for (int b = 0; b < N && blocks[static_cast<std::size_t>(b)].status == BlockStatus::Complete; ++b)
            frontier = layout.block_end(b);

        const ForwardShape shape = forward_shape(pattern, mc.cond_len, total, cache.positions(), queries);
        const ForwardOutput out =
            model.run(cond, res.tokens, pattern, cache.committed_len() > 0 ? &cache : nullptr, queries, {});
        IterationCost cost{it, 1, static_cast<int>(queries.size()), shape.pairs_per_head, 0};

        // Positions before the frontier carry final tokens: their KV is exact now.
        {
            std::vector<std::size_t> rows;
            PositionList pos;
            for (std::size_t r = 0; r < out.kv_positions.size(); ++r)
                if (out.kv_positions[r] < frontier) {
                    rows.push_back(r);
                    pos.push_back(out.kv_positions[r]);
                }
            if (!rows.empty()) cache.append(select_kv_rows(out.new_kv, rows), pos);
        }
        if (opts.record_block1_kv) {
            const Position b0 = layout.block_begin(0), b1 = layout.block_end(0);
            res.block1_kv.push_back(cache.contains(b0) ? cache_rows(cache, b0, b1)
                                                       : rows_for(out.new_kv, out.kv_positions, b0, b1));
        }

        // (c) commits, (d) promotion, (e) completion
        const std::vector<double> conf_all = confidence_scores(out.logits, mc.mask_token);
        const TokenSeq best_all = best_tokens(out.logits, mc.mask_token);
        std::size_t qrow = 0;
        for (int b : active) {
            BlockState& s = blocks[static_cast<std::size_t>(b)];
            std::vector<std::size_t> remaining; // action indices
            std::vector<double> conf;
            std::vector<Token> best;
            for (Position p = layout.block_begin(b); p < layout.block_end(b); ++p, ++qrow) {
                const auto a = static_cast<std::size_t>(p - mc.cond_len);
                if (res.tokens[a] != mc.mask_token) continue;
                remaining.push_back(a);
                conf.push_back(conf_all[qrow]);
                best.push_back(best_all[qrow]);
            }
            if (remaining.empty()) continue;
            const std::vector<std::size_t> sel = policy.strict_threshold ? at_least_one(conf, cfg.tau_conf)
                                                                         : select_positions(conf, s.status, cfg);
            for (std::size_t i : sel) {
                const std::size_t a = remaining[i];
                res.tokens[a] = best[i];
                res.trace.decode_iteration_of[a] = it;
                if (eoa_mode && best[i] == *mc.eoa_token) {
                    const auto pos = static_cast<Position>(a);
                    if (!res.eoa_position || pos < *res.eoa_position) res.eoa_position = pos;
                }
            }
            res.trace.block_steps.push_back({it, b, s.status, static_cast<int>(remaining.size()),
                                             static_cast<int>(sel.size())});
            s.decoded_count += static_cast<int>(sel.size());
            cost.commits += static_cast<int>(sel.size());
            if (s.status == BlockStatus::SemiActivated && b > 0 && reaches(ratio(b - 1), policy.act_ratio)) {
                s.status = BlockStatus::FullyActivated;
                s.full_at = it;
            }
            if (s.decoded_count == k) {
                s.status = BlockStatus::Complete;
                s.complete_at = it;
            }
        }
        res.trace.iterations.push_back(cost);
        res.iterations = it;
        res.forwards += 1;
        res.attention_pairs += cost.attention_pairs;
    }
    res.final_cache_len = cache.committed_len();
    return res;
}

} // namespace

DecodeResult decode_pipelined(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                              const DecodeOptions& opts) {
    return run_blocks(model, cond, cfg, {cfg.tau_add, cfg.tau_act, false, false}, opts);
}

DecodeResult decode_block_diffusion(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                                    const DecodeOptions& opts) {
    return run_blocks(model, cond, cfg, {1.0, 1.0, true, true}, opts);
}

DecodeResult decode_ar(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                       const DecodeOptions& opts) {
    DecodeConfig ar = cfg;
    ar.layout.block_size = 1;
    ar.layout.num_blocks = cfg.layout.region_len();
    ar.max_iters = 0;
    return run_blocks(model, cond, ar, {1.0, 1.0, true, true}, opts);
}

namespace {

// Shared scaffolding of the two bidirectional decoders.
struct FullSequenceRun {
    const DenoisingModel& model;
    const TokenSeq& cond;
    DecodeResult res;
    BlockLayout layout;
    int L;
    int total;

    FullSequenceRun(const DenoisingModel& m, const TokenSeq& c, const DecodeConfig& cfg) : model(m), cond(c) {
        check_cond(m, c);
        cfg.layout.validate();
        layout = cfg.layout;
        layout.region_start = m.config().cond_len;
        L = layout.region_len();
        total = m.config().cond_len + L;
        res.tokens.assign(static_cast<std::size_t>(L), m.config().mask_token);
        res.trace.decode_iteration_of.assign(static_cast<std::size_t>(L), 0);
    }

    std::vector<std::size_t> masked() const {
        std::vector<std::size_t> out;
        for (std::size_t a = 0; a < res.tokens.size(); ++a)
            if (res.tokens[a] == model.config().mask_token) out.push_back(a);
        return out;
    }

    void snapshot(const ForwardOutput& out, const std::map<Position, std::vector<LayerKV>>* frozen) {
        const Position b0 = layout.block_begin(0), b1 = layout.block_end(0);
        KvSnapshot snap(static_cast<std::size_t>(model.config().layers));
        for (Position p = b0; p < b1; ++p) {
            std::vector<LayerKV> row;
            if (frozen && frozen->count(p)) {
                row = frozen->at(p);
            } else {
                const auto r = static_cast<std::size_t>(
                    std::find(out.kv_positions.begin(), out.kv_positions.end(), p) - out.kv_positions.begin());
                std::vector<std::size_t> one{r};
                row = select_kv_rows(out.new_kv, one);
            }
            for (std::size_t l = 0; l < snap.size(); ++l) {
                snap[l].keys.append_rows(row[l].keys);
                snap[l].values.append_rows(row[l].values);
            }
        }
        res.block1_kv.push_back(std::move(snap));
    }

    void finish() {
        res.trace.blocks.assign(static_cast<std::size_t>(layout.num_blocks), {});
        for (int b = 0; b < layout.num_blocks; ++b) {
            BlockState& s = res.trace.blocks[static_cast<std::size_t>(b)];
            for (Position p = layout.block_begin(b); p < layout.block_end(b); ++p) {
                const int it = res.trace.decode_iteration_of[static_cast<std::size_t>(p - layout.region_start)];
                if (it > 0) ++s.decoded_count;
                s.complete_at = std::max(s.complete_at, it);
            }
            s.status = s.decoded_count == layout.block_size ? BlockStatus::Complete : BlockStatus::FullyActivated;
            s.semi_at = s.full_at = 1;
        }
    }
};

} // namespace

DecodeResult decode_vanilla_dvla(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg, int steps,
                                 const DecodeOptions& opts) {
    require(steps >= 1, ErrorKind::InvalidInput, "vanilla decode: steps must be >= 1");
    FullSequenceRun run(model, cond, cfg);
    const ModelConfig& mc = model.config();
    const int S = std::min(steps, run.L);
    const PositionList queries = action_positions(mc, run.L);
    const auto pattern = AttentionPattern::bidirectional();
    const std::uint64_t pairs = forward_shape(pattern, mc.cond_len, run.total, {}, queries).pairs_per_head;

    for (int s = 1; s <= S; ++s) {
        const std::vector<std::size_t> rem = run.masked();
        const ForwardOutput out = model.run(cond, run.res.tokens, pattern, nullptr, queries, {});
        if (opts.record_block1_kv) run.snapshot(out, nullptr);
        // Spread what is left evenly over the steps left: ceil(L/S) at the
        // first step, exactly S steps overall.
        const std::size_t quota = (rem.size() + static_cast<std::size_t>(S - s)) / static_cast<std::size_t>(S - s + 1);
        std::vector<double> conf;
        std::vector<Token> best;
        const std::vector<double> conf_all = confidence_scores(out.logits, mc.mask_token);
        const TokenSeq best_all = best_tokens(out.logits, mc.mask_token);
        for (std::size_t a : rem) {
            conf.push_back(conf_all[a]);
            best.push_back(best_all[a]);
        }
        const std::vector<std::size_t> order = confidence_order(conf);
        for (std::size_t j = 0; j < quota && j < order.size(); ++j) {
            const std::size_t a = rem[order[j]];
            run.res.tokens[a] = best[order[j]];
            run.res.trace.decode_iteration_of[a] = s;
        }
        run.res.trace.iterations.push_back({s, 1, static_cast<int>(queries.size()), pairs,
                                            static_cast<int>(std::min(quota, order.size()))});
        run.res.iterations = s;
        run.res.forwards += 1;
        run.res.attention_pairs += pairs;
    }
    run.finish();
    return run.res;
}

DecodeResult decode_fast_dllm_baseline(const DenoisingModel& model, const TokenSeq& cond, const DecodeConfig& cfg,
                                       const DecodeOptions& opts) {
    FullSequenceRun run(model, cond, cfg);
    const ModelConfig& mc = model.config();
    const auto pattern = AttentionPattern::bidirectional();
    ForwardOptions fo;
    fo.allow_stale_cache = true;

    std::map<Position, std::vector<LayerKV>> frozen; // one row per layer
    PositionList fresh;                              // committed last step, KV not yet taken
    for (int s = 1;; ++s) {
        const std::vector<std::size_t> rem = run.masked();
        if (rem.empty()) break;
        require(s <= run.L + 1, ErrorKind::NonTermination, "fast-dllm decode: no progress");

        PositionList queries = fresh;
        for (std::size_t a : rem) queries.push_back(mc.cond_len + static_cast<Position>(a));
        std::sort(queries.begin(), queries.end());

        Cache cache(mc.layers);
        PositionList cached;
        for (const auto& [p, kv] : frozen) {
            cache.append(kv, {p});
            cached.push_back(p);
        }
        const std::uint64_t pairs = forward_shape(pattern, mc.cond_len, run.total, cached, queries).pairs_per_head;
        const ForwardOutput out = model.run(cond, run.res.tokens, pattern, frozen.empty() ? nullptr : &cache,
                                            queries, fo);
        if (opts.record_block1_kv) run.snapshot(out, &frozen);

        // Freeze the condition and the positions whose final tokens were just fed.
        for (std::size_t r = 0; r < out.kv_positions.size(); ++r) {
            const Position p = out.kv_positions[r];
            if (p < mc.cond_len || std::binary_search(fresh.begin(), fresh.end(), p)) {
                std::vector<std::size_t> one{r};
                frozen[p] = select_kv_rows(out.new_kv, one);
            }
        }

        std::vector<double> conf;
        std::vector<Token> best;
        const std::vector<double> conf_all = confidence_scores(out.logits, mc.mask_token);
        const TokenSeq best_all = best_tokens(out.logits, mc.mask_token);
        for (std::size_t a : rem) {
            const Position p = mc.cond_len + static_cast<Position>(a);
            const auto q = static_cast<std::size_t>(std::lower_bound(queries.begin(), queries.end(), p) - queries.begin());
            conf.push_back(conf_all[q]);
            best.push_back(best_all[q]);
        }
        fresh.clear();
        for (std::size_t i : at_least_one(conf, cfg.tau_conf)) {
            run.res.tokens[rem[i]] = best[i];
            run.res.trace.decode_iteration_of[rem[i]] = s;
            fresh.push_back(mc.cond_len + static_cast<Position>(rem[i]));
        }
        std::sort(fresh.begin(), fresh.end());
        run.res.trace.iterations.push_back({s, 1, static_cast<int>(queries.size()), pairs,
                                            static_cast<int>(fresh.size())});
        run.res.iterations = s;
        run.res.forwards += 1;
        run.res.attention_pairs += pairs;
    }
    run.finish();
    return run.res;
}

void write_trace_csv(std::ostream& os, const DecodeResult& r, const BlockLayout& layout) {
    os << "position,block,decode_iteration\n";
    for (std::size_t a = 0; a < r.trace.decode_iteration_of.size(); ++a)
        os << a << ',' << static_cast<int>(a) / layout.block_size << ',' << r.trace.decode_iteration_of[a] << '\n';
}

void write_cost_csv(std::ostream& os, const DecodeResult& r) {
    os << "iteration,forwards,query_count,attention_pairs,commits\n";
    for (const IterationCost& c : r.trace.iterations)
        os << c.iteration << ',' << c.forwards << ',' << c.query_count << ',' << c.attention_pairs << ',' << c.commits
           << '\n';
}

} // namespace blockpipe
