#include "blockpipe/model.hpp"

#include "blockpipe/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace blockpipe {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

RealMatrix row_vector(std::size_t n, double fill) { return RealMatrix(1, n, fill); }

void fill_uniform(RealMatrix& m, double scale, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (double& v : m.values()) v = dist(rng);
}

void add_row_bias(RealMatrix& x, const RealMatrix& b) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto o = x.row(r);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] += b.values()[c];
    }
}

void add_colsum(RealMatrix& acc, const RealMatrix& d) {
    auto a = acc.values();
    for (std::size_t r = 0; r < d.rows(); ++r) {
        auto row = d.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) a[c] += row[c];
    }
}

void add_inplace(RealMatrix& a, const RealMatrix& b) {
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

RealMatrix layer_norm(const RealMatrix& x, const RealMatrix& gain, const RealMatrix& bias,
                      ForwardTape::Norm* save) {
    const std::size_t d = x.cols();
    RealMatrix out(x.rows(), d);
    if (save) {
        save->xhat = RealMatrix(x.rows(), d);
        save->rstd.assign(x.rows(), 0.0);
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kNormEps);
        auto o = out.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (in[c] - mean) * rstd;
            if (save) save->xhat(r, c) = xh;
            o[c] = xh * gain.values()[c] + bias.values()[c];
        }
        if (save) save->rstd[r] = rstd;
    }
    return out;
}

// dy -> dx; accumulates parameter gradients when the sinks are non-null.
RealMatrix layer_norm_backward(const RealMatrix& dy, const ForwardTape::Norm& saved, const RealMatrix& gain,
                               RealMatrix* dgain, RealMatrix* dbias) {
    const std::size_t d = dy.cols();
    RealMatrix dx(dy.rows(), d);
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        auto g = dy.row(r);
        auto xh = saved.xhat.row(r);
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = g[c] * gain.values()[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
            if (dgain) dgain->values()[c] += g[c] * xh[c];
            if (dbias) dbias->values()[c] += g[c];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        auto o = dx.row(r);
        for (std::size_t c = 0; c < d; ++c)
            o[c] = saved.rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
    }
    return dx;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// out += (x*A)*B; returns x*A so the backward pass can reuse it.
RealMatrix apply_low_rank(const RealMatrix& x, const LowRankPair& lr, RealMatrix& out) {
    RealMatrix low = matmul(x, lr.a);
    matmul_into(low, lr.b, out, true);
    return low;
}

struct Plan {
    PositionList computed;
    PositionList keys;
    std::vector<std::size_t> query_rows;
    TokenSeq tokens;
    AttnMask mask;
};

void check_strictly_increasing(const PositionList& p, const char* what) {
    for (std::size_t i = 1; i < p.size(); ++i)
        require(p[i] > p[i - 1], ErrorKind::InvalidInput, std::string(what) + " must be strictly increasing");
}

// Queries plus every uncached position some query can see.
PositionList computed_positions(const AttentionPattern& pattern, int cond_len, int total,
                                       const std::vector<char>& in_cache, const PositionList& queries) {
    std::vector<char> need(static_cast<std::size_t>(total), 0);
    for (Position q : queries) {
        need[static_cast<std::size_t>(q)] = 1;
        for (Position k = 0; k < total; ++k)
            if (!need[static_cast<std::size_t>(k)] && key_visible(pattern, cond_len, q, k))
                need[static_cast<std::size_t>(k)] = 1;
    }
    PositionList out;
    for (Position p = 0; p < total; ++p)
        if (need[static_cast<std::size_t>(p)] && !in_cache[static_cast<std::size_t>(p)]) out.push_back(p);
    return out;
}

Plan make_plan(const Weights& w, const TokenSeq& cond, const TokenSeq& action, const AttentionPattern& pattern,
               const Cache* cache, const PositionList& queries, const ForwardOptions& opts) {
    const ModelConfig& cfg = w.config;
    require(static_cast<int>(cond.size()) == cfg.cond_len, ErrorKind::InvalidInput,
            "forward: condition length " + std::to_string(cond.size()) + " != cond_len " +
                std::to_string(cfg.cond_len));
    const int total = cfg.cond_len + static_cast<int>(action.size());
    require(total <= cfg.max_len, ErrorKind::InvalidInput, "forward: sequence exceeds max_len");
    require(!queries.empty(), ErrorKind::InvalidInput, "forward: no query positions");
    check_strictly_increasing(queries, "query positions");
    require(queries.front() >= 0 && queries.back() < total, ErrorKind::InvalidInput,
            "forward: query position out of range");

    if (pattern.is_block_causal()) {
        require(pattern.layout.region_start == cfg.cond_len &&
                    pattern.layout.region_len() == static_cast<int>(action.size()),
                ErrorKind::InvalidInput, "forward: block layout must tile the action region exactly");
    } else if (cache != nullptr && !opts.allow_stale_cache) {
        fail(ErrorKind::UnsupportedCombination,
             "forward: a KV cache cannot be reused under bidirectional attention");
    }

    std::vector<char> in_cache(static_cast<std::size_t>(total), 0);
    if (cache != nullptr) {
        for (Position p : cache->positions()) {
            require(p >= 0 && p < total, ErrorKind::InvalidInput, "forward: cached position out of range");
            in_cache[static_cast<std::size_t>(p)] = 1;
        }
        require(cache->layers() == cfg.layers || cache->committed_len() == 0, ErrorKind::InvalidInput,
                "forward: cache layer count does not match the model");
    }

    for (Position q : queries)
        require(!in_cache[static_cast<std::size_t>(q)], ErrorKind::InvalidInput,
                "forward: query position " + std::to_string(q) + " is already cached");

    Plan plan;
    plan.computed = computed_positions(pattern, cfg.cond_len, total, in_cache, queries);
    if (cache != nullptr) plan.keys = cache->positions();
    plan.keys.insert(plan.keys.end(), plan.computed.begin(), plan.computed.end());

    plan.tokens.reserve(plan.computed.size());
    for (Position p : plan.computed) {
        const Token t = p < cfg.cond_len ? cond[static_cast<std::size_t>(p)]
                                         : action[static_cast<std::size_t>(p - cfg.cond_len)];
        require(t >= 0 && t < cfg.vocab_size, ErrorKind::InvalidInput,
                "forward: token " + std::to_string(t) + " outside the vocabulary");
        plan.tokens.push_back(t);
    }

    std::size_t row = 0;
    for (Position q : queries) {
        while (plan.computed[row] != q) ++row;
        plan.query_rows.push_back(row);
    }
    plan.mask = build_attention_mask(pattern, cfg.cond_len, plan.computed, plan.keys);
    return plan;
}

ForwardOutput run_forward(const Weights& w, const AdapterWeights* adapters, bool active, const Plan& plan,
                          const Cache* cache, ForwardTape* tape) {
    const ModelConfig& cfg = w.config;
    const std::size_t n = plan.computed.size();
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool use_adapters = active && adapters != nullptr;
    if (use_adapters)
        require(adapters->layers.size() == w.layers.size(), ErrorKind::InvalidInput,
                "forward: adapter layer count does not match the model");

    RealMatrix x(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        auto te = w.token_embedding.row(static_cast<std::size_t>(plan.tokens[r]));
        auto pe = w.position_embedding.row(static_cast<std::size_t>(plan.computed[r]));
        auto o = x.row(r);
        for (std::size_t c = 0; c < d; ++c) o[c] = te[c] + pe[c];
    }

    ForwardOutput out;
    out.kv_positions = plan.computed;
    out.new_kv.resize(w.layers.size());
    if (tape) {
        tape->positions = plan.computed;
        tape->tokens = plan.tokens;
        tape->mask = plan.mask;
        tape->layers.assign(w.layers.size(), {});
        tape->query_rows = plan.query_rows;
        tape->adapters_active = use_adapters;
    }

    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& lw = w.layers[l];
        ForwardTape::Layer* tl = tape ? &tape->layers[l] : nullptr;
        if (tl) tl->x_in = x;

        RealMatrix h1 = layer_norm(x, lw.ln1_gain, lw.ln1_bias, tl ? &tl->ln1 : nullptr);
        RealMatrix q = matmul(h1, lw.wq);
        add_row_bias(q, lw.bq);
        RealMatrix k = matmul(h1, lw.wk);
        add_row_bias(k, lw.bk);
        RealMatrix v = matmul(h1, lw.wv);
        add_row_bias(v, lw.bv);
        if (use_adapters) {
            RealMatrix ql = apply_low_rank(h1, adapters->layers[l].query, q);
            RealMatrix vl = apply_low_rank(h1, adapters->layers[l].value, v);
            if (tl) {
                tl->q_low = std::move(ql);
                tl->v_low = std::move(vl);
            }
        }

        RealMatrix k_all;
        RealMatrix v_all;
        if (cache != nullptr && cache->committed_len() > 0) {
            k_all = cache->layer(static_cast<int>(l)).keys;
            v_all = cache->layer(static_cast<int>(l)).values;
            k_all.append_rows(k);
            v_all.append_rows(v);
        } else {
            k_all = k;
            v_all = v;
        }

        RealMatrix attn(n, d);
        if (tl) tl->probs.resize(static_cast<std::size_t>(cfg.heads));
        for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h) {
            AttentionResult res = masked_attention_with_probs(q.slice_cols(h * hd, hd), k_all.slice_cols(h * hd, hd),
                                                              v_all.slice_cols(h * hd, hd), plan.mask, scale);
            attn.set_cols(h * hd, res.output);
            if (tl) tl->probs[h] = std::move(res.probs);
        }

        RealMatrix proj = matmul(attn, lw.wo);
        add_row_bias(proj, lw.bo);
        add_inplace(x, proj);
        if (tl) tl->x_mid = x;

        RealMatrix h2 = layer_norm(x, lw.ln2_gain, lw.ln2_bias, tl ? &tl->ln2 : nullptr);
        RealMatrix ff_pre = matmul(h2, lw.w1);
        add_row_bias(ff_pre, lw.b1);
        RealMatrix ff_act(ff_pre.rows(), ff_pre.cols());
        for (std::size_t i = 0; i < ff_pre.size(); ++i) ff_act.values()[i] = gelu(ff_pre.values()[i]);
        RealMatrix ff_out = matmul(ff_act, lw.w2);
        add_row_bias(ff_out, lw.b2);
        add_inplace(x, ff_out);

        out.new_kv[l] = LayerKV{std::move(k), std::move(v)};
        if (tl) {
            tl->h1 = std::move(h1);
            tl->q = std::move(q);
            tl->k = out.new_kv[l].keys;
            tl->v = out.new_kv[l].values;
            tl->attn = std::move(attn);
            tl->h2 = std::move(h2);
            tl->ff_pre = std::move(ff_pre);
            tl->ff_act = std::move(ff_act);
        }
    }

    RealMatrix xq = x.select_rows(plan.query_rows);
    RealMatrix hf = layer_norm(xq, w.final_gain, w.final_bias, tape ? &tape->final_norm : nullptr);
    out.logits = matmul(hf, w.head);
    add_row_bias(out.logits, w.head_bias);
    if (use_adapters) {
        RealMatrix low = apply_low_rank(hf, adapters->head, out.logits);
        if (tape) tape->head_low = std::move(low);
    }
    if (tape) tape->final_h = std::move(hf);
    for (std::size_t r : plan.query_rows) out.query_positions.push_back(plan.computed[r]);
    return out;
}

} // namespace

void ModelConfig::validate() const {
    require(vocab_size >= 2, ErrorKind::Config, "model: vocab_size must be >= 2");
    require(mask_token >= 0 && mask_token < vocab_size, ErrorKind::Config, "model: mask token outside vocabulary");
    if (eoa_token) {
        require(*eoa_token >= 0 && *eoa_token < vocab_size, ErrorKind::Config, "model: EOA token outside vocabulary");
        require(*eoa_token != mask_token, ErrorKind::Config, "model: EOA token must differ from the mask token");
    }
    require(cond_len >= 1, ErrorKind::Config, "model: cond_len must be >= 1");
    require(max_len > cond_len, ErrorKind::Config, "model: max_len must exceed cond_len");
    require(layers >= 1 && heads >= 1 && model_dim >= 1, ErrorKind::Config, "model: non-positive dimensions");
    require(model_dim % heads == 0, ErrorKind::Config, "model: model_dim must be divisible by heads");
    require(adapter_rank >= 0, ErrorKind::Config, "model: adapter_rank must be >= 0");
}

Weights Weights::zeros_like() const {
    Weights z = *this;
    z.for_each([](const std::string&, RealMatrix& m) { m.fill(0.0); });
    return z;
}

std::size_t Weights::parameter_count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const RealMatrix& m) { n += m.size(); });
    return n;
}

AdapterWeights AdapterWeights::zeros_like() const {
    AdapterWeights z = *this;
    z.for_each([](const std::string&, RealMatrix& m) { m.fill(0.0); });
    return z;
}

std::size_t AdapterWeights::parameter_count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const RealMatrix& m) { n += m.size(); });
    return n;
}

Weights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    const auto f = static_cast<std::size_t>(cfg.ff_dim());
    const auto vocab = static_cast<std::size_t>(cfg.vocab_size);

    Weights w;
    w.config = cfg;
    w.token_embedding = RealMatrix(vocab, d);
    w.position_embedding = RealMatrix(static_cast<std::size_t>(cfg.max_len), d);
    w.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& l : w.layers) {
        l.ln1_gain = row_vector(d, 1.0);
        l.ln1_bias = row_vector(d, 0.0);
        l.wq = RealMatrix(d, d);
        l.bq = row_vector(d, 0.0);
        l.wk = RealMatrix(d, d);
        l.bk = row_vector(d, 0.0);
        l.wv = RealMatrix(d, d);
        l.bv = row_vector(d, 0.0);
        l.wo = RealMatrix(d, d);
        l.bo = row_vector(d, 0.0);
        l.ln2_gain = row_vector(d, 1.0);
        l.ln2_bias = row_vector(d, 0.0);
        l.w1 = RealMatrix(d, f);
        l.b1 = row_vector(f, 0.0);
        l.w2 = RealMatrix(f, d);
        l.b2 = row_vector(d, 0.0);
    }
    w.final_gain = row_vector(d, 1.0);
    w.final_bias = row_vector(d, 0.0);
    w.head = RealMatrix(d, vocab);
    w.head_bias = row_vector(vocab, 0.0);

    // Matrices get U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings are lookups
    // (fan_in 1); gains and biases keep their constant init.
    std::mt19937_64 rng(seed);
    w.for_each([&rng](const std::string& name, RealMatrix& m) {
        if (m.rows() == 1) return;
        const bool embedding = name.find("embedding") != std::string::npos;
        fill_uniform(m, embedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(m.rows())), rng);
    });
    return w;
}

std::optional<AdapterWeights> init_adapters(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.adapter_rank == 0) return std::nullopt;
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    const auto r = static_cast<std::size_t>(cfg.adapter_rank);
    const auto vocab = static_cast<std::size_t>(cfg.vocab_size);

    AdapterWeights a;
    a.rank = cfg.adapter_rank;
    a.layers.resize(static_cast<std::size_t>(cfg.layers));
    std::mt19937_64 rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& l : a.layers) {
        l.query = {RealMatrix(d, r), RealMatrix(r, d)};
        l.value = {RealMatrix(d, r), RealMatrix(r, d)};
        fill_uniform(l.query.a, scale, rng);
        fill_uniform(l.value.a, scale, rng);
    }
    a.head = {RealMatrix(d, r), RealMatrix(r, vocab)};
    fill_uniform(a.head.a, scale, rng);
    return a;
}

Weights merge_adapters(const Weights& w, const AdapterWeights& adapters) {
    require(adapters.layers.size() == w.layers.size(), ErrorKind::InvalidInput,
            "merge_adapters: layer count mismatch");
    Weights merged = w;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        matmul_into(adapters.layers[l].query.a, adapters.layers[l].query.b, merged.layers[l].wq, true);
        matmul_into(adapters.layers[l].value.a, adapters.layers[l].value.b, merged.layers[l].wv, true);
    }
    matmul_into(adapters.head.a, adapters.head.b, merged.head, true);
    return merged;
}

ForwardShape forward_shape(const AttentionPattern& pattern, int cond_len, int total_len, const PositionList& cached,
                           const PositionList& queries) {
    std::vector<char> in_cache(static_cast<std::size_t>(total_len), 0);
    for (Position p : cached) {
        require(p >= 0 && p < total_len, ErrorKind::InvalidInput, "forward_shape: cached position out of range");
        in_cache[static_cast<std::size_t>(p)] = 1;
    }
    ForwardShape shape;
    shape.computed = computed_positions(pattern, cond_len, total_len, in_cache, queries);
    PositionList keys = cached;
    keys.insert(keys.end(), shape.computed.begin(), shape.computed.end());
    for (Position q : shape.computed)
        for (Position k : keys)
            if (key_visible(pattern, cond_len, q, k)) ++shape.pairs_per_head;
    return shape;
}

bool key_visible(const AttentionPattern& pattern, int cond_len, Position query, Position key) {
    if (key < cond_len) return true;
    if (query < cond_len) return false;
    if (!pattern.is_block_causal()) return true;
    const auto qb = pattern.layout.block_of(query);
    const auto kb = pattern.layout.block_of(key);
    return qb && kb && *kb <= *qb;
}

AttnMask build_attention_mask(const AttentionPattern& pattern, int cond_len, const PositionList& query_positions,
                              const PositionList& key_positions) {
    if (pattern.is_block_causal()) {
        pattern.layout.validate();
        for (Position q : query_positions)
            require(q < cond_len || pattern.layout.contains(q), ErrorKind::InvalidInput,
                    "attention mask: query position " + std::to_string(q) + " lies outside the block layout");
        for (Position k : key_positions)
            require(k < cond_len || pattern.layout.contains(k), ErrorKind::InvalidInput,
                    "attention mask: key position " + std::to_string(k) + " lies outside the block layout");
    }
    AttnMask mask(query_positions.size(), key_positions.size());
    for (std::size_t i = 0; i < query_positions.size(); ++i)
        for (std::size_t j = 0; j < key_positions.size(); ++j)
            if (key_visible(pattern, cond_len, query_positions[i], key_positions[j])) mask.set(i, j, true);
    return mask;
}

ForwardOutput forward(const Weights& w, const AdapterWeights* adapters, bool active, const TokenSeq& cond,
                      const TokenSeq& action, const AttentionPattern& pattern, const Cache* cache,
                      const PositionList& query_positions, const ForwardOptions& opts) {
    const Plan plan = make_plan(w, cond, action, pattern, cache, query_positions, opts);
    return run_forward(w, adapters, active, plan, cache, nullptr);
}

ForwardOutput forward_recorded(const Weights& w, const AdapterWeights* adapters, bool active, const TokenSeq& cond,
                               const TokenSeq& action, const AttentionPattern& pattern,
                               const PositionList& query_positions, ForwardTape& tape) {
    const Plan plan = make_plan(w, cond, action, pattern, nullptr, query_positions, {});
    return run_forward(w, adapters, active, plan, nullptr, &tape);
}

void backward(const Weights& w, const AdapterWeights* adapters, const ForwardTape& tape, const RealMatrix& dlogits,
              Weights* wg, AdapterWeights* ag) {
    const ModelConfig& cfg = w.config;
    const std::size_t n = tape.positions.size();
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool use_adapters = tape.adapters_active;
    require(!use_adapters || adapters != nullptr, ErrorKind::InvalidInput,
            "backward: tape recorded active adapters but none were supplied");
    require(dlogits.rows() == tape.query_rows.size() && dlogits.cols() == static_cast<std::size_t>(cfg.vocab_size),
            ErrorKind::InvalidInput, "backward: dlogits shape does not match the recorded queries");
    if (ag) require(use_adapters, ErrorKind::InvalidInput, "backward: adapter gradients requested but adapters were inactive");

    // Output head.
    if (wg) {
        matmul_tn_into(tape.final_h, dlogits, wg->head, true);
        add_colsum(wg->head_bias, dlogits);
    }
    RealMatrix dhf;
    matmul_nt_into(dlogits, w.head, dhf, false);
    if (use_adapters) {
        const LowRankPair& lr = adapters->head;
        RealMatrix dlow;
        matmul_nt_into(dlogits, lr.b, dlow, false);
        if (ag) {
            matmul_tn_into(tape.head_low, dlogits, ag->head.b, true);
            matmul_tn_into(tape.final_h, dlow, ag->head.a, true);
        }
        matmul_nt_into(dlow, lr.a, dhf, true);
    }
    RealMatrix dxq = layer_norm_backward(dhf, tape.final_norm, w.final_gain, wg ? &wg->final_gain : nullptr,
                                         wg ? &wg->final_bias : nullptr);
    RealMatrix dx(n, d);
    for (std::size_t i = 0; i < tape.query_rows.size(); ++i) {
        auto src = dxq.row(i);
        auto dst = dx.row(tape.query_rows[i]);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }

    for (std::size_t li = w.layers.size(); li-- > 0;) {
        const LayerWeights& lw = w.layers[li];
        const ForwardTape::Layer& tl = tape.layers[li];
        LayerWeights* lg = wg ? &wg->layers[li] : nullptr;

        // Feed-forward block: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2.
        RealMatrix dff_act;
        matmul_nt_into(dx, lw.w2, dff_act, false);
        if (lg) {
            matmul_tn_into(tl.ff_act, dx, lg->w2, true);
            add_colsum(lg->b2, dx);
        }
        for (std::size_t i = 0; i < dff_act.size(); ++i) dff_act.values()[i] *= gelu_grad(tl.ff_pre.values()[i]);
        RealMatrix dh2;
        matmul_nt_into(dff_act, lw.w1, dh2, false);
        if (lg) {
            matmul_tn_into(tl.h2, dff_act, lg->w1, true);
            add_colsum(lg->b1, dff_act);
        }
        RealMatrix dx_mid = layer_norm_backward(dh2, tl.ln2, lw.ln2_gain, lg ? &lg->ln2_gain : nullptr,
                                                lg ? &lg->ln2_bias : nullptr);
        add_inplace(dx_mid, dx);

        // Attention block: x_mid = x_in + attn Wo + bo.
        RealMatrix dattn;
        matmul_nt_into(dx_mid, lw.wo, dattn, false);
        if (lg) {
            matmul_tn_into(tl.attn, dx_mid, lg->wo, true);
            add_colsum(lg->bo, dx_mid);
        }
        RealMatrix dq(n, d), dk(n, d), dv(n, d);
        for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h) {
            const RealMatrix& p = tl.probs[h];
            RealMatrix dout = dattn.slice_cols(h * hd, hd);
            RealMatrix qh = tl.q.slice_cols(h * hd, hd);
            RealMatrix kh = tl.k.slice_cols(h * hd, hd);
            RealMatrix vh = tl.v.slice_cols(h * hd, hd);
            RealMatrix dvh;
            matmul_tn_into(p, dout, dvh, false);
            RealMatrix dp;
            matmul_nt_into(dout, vh, dp, false);
            for (std::size_t r = 0; r < n; ++r) {
                auto pr = p.row(r);
                auto dpr = dp.row(r);
                double dot = 0.0;
                for (std::size_t c = 0; c < n; ++c) dot += pr[c] * dpr[c];
                for (std::size_t c = 0; c < n; ++c) dpr[c] = scale * pr[c] * (dpr[c] - dot);
            }
            RealMatrix dqh;
            matmul_into(dp, kh, dqh, false);
            RealMatrix dkh;
            matmul_tn_into(dp, qh, dkh, false);
            dq.set_cols(h * hd, dqh);
            dk.set_cols(h * hd, dkh);
            dv.set_cols(h * hd, dvh);
        }

        RealMatrix dh1;
        matmul_nt_into(dk, lw.wk, dh1, false);
        matmul_nt_into(dq, lw.wq, dh1, true);
        matmul_nt_into(dv, lw.wv, dh1, true);
        if (lg) {
            matmul_tn_into(tl.h1, dq, lg->wq, true);
            add_colsum(lg->bq, dq);
            matmul_tn_into(tl.h1, dk, lg->wk, true);
            add_colsum(lg->bk, dk);
            matmul_tn_into(tl.h1, dv, lg->wv, true);
            add_colsum(lg->bv, dv);
        }
        if (use_adapters) {
            const LayerAdapters& la = adapters->layers[li];
            LayerAdapters* lag = ag ? &ag->layers[li] : nullptr;
            auto through = [&](const RealMatrix& dy, const LowRankPair& lr, const RealMatrix& low, LowRankPair* g) {
                RealMatrix dlow;
                matmul_nt_into(dy, lr.b, dlow, false);
                if (g) {
                    matmul_tn_into(low, dy, g->b, true);
                    matmul_tn_into(tl.h1, dlow, g->a, true);
                }
                matmul_nt_into(dlow, lr.a, dh1, true);
            };
            through(dq, la.query, tl.q_low, lag ? &lag->query : nullptr);
            through(dv, la.value, tl.v_low, lag ? &lag->value : nullptr);
        }
        RealMatrix dx_in = layer_norm_backward(dh1, tl.ln1, lw.ln1_gain, lg ? &lg->ln1_gain : nullptr,
                                               lg ? &lg->ln1_bias : nullptr);
        add_inplace(dx_in, dx_mid);
        dx = std::move(dx_in);
    }

    if (wg) {
        for (std::size_t r = 0; r < n; ++r) {
            auto src = dx.row(r);
            auto te = wg->token_embedding.row(static_cast<std::size_t>(tape.tokens[r]));
            auto pe = wg->position_embedding.row(static_cast<std::size_t>(tape.positions[r]));
            for (std::size_t c = 0; c < d; ++c) {
                te[c] += src[c];
                pe[c] += src[c];
            }
        }
    }
}

PositionList action_positions(const ModelConfig& cfg, int action_len) {
    PositionList p(static_cast<std::size_t>(action_len));
    for (int i = 0; i < action_len; ++i) p[static_cast<std::size_t>(i)] = cfg.cond_len + i;
    return p;
}

} // namespace blockpipe
