#include "blockpipe/taskbench.hpp"

#include "blockpipe/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <random>

namespace blockpipe {

void TokenizerConfig::validate() const {
    require(bins >= 2, ErrorKind::Config, "tokenizer: bins must be >= 2");
    require(range_lo < range_hi, ErrorKind::Config, "tokenizer: range_lo must be < range_hi");
    require(action_dims >= 1 && chunk_steps >= 1, ErrorKind::Config, "tokenizer: empty action chunk");
}

Token tokenize_value(double v, const TokenizerConfig& cfg) {
    const double c = std::clamp(v, cfg.range_lo, cfg.range_hi);
    const auto b = static_cast<Token>(std::floor((c - cfg.range_lo) / (cfg.range_hi - cfg.range_lo) * cfg.bins));
    return std::min(b, static_cast<Token>(cfg.bins - 1));
}

double detokenize_value(Token b, const TokenizerConfig& cfg) {
    require(b >= 0 && b < cfg.bins, ErrorKind::InvalidToken,
            "detokenize: token " + std::to_string(b) + " is not an action bin");
    return cfg.range_lo + (static_cast<double>(b) + 0.5) * cfg.bin_width();
}

TokenSeq tokenize_actions(const ActionChunk& chunk, const TokenizerConfig& cfg) {
    TokenSeq out;
    out.reserve(chunk.values.size());
    for (double v : chunk.values) out.push_back(tokenize_value(v, cfg));
    return out;
}

ActionChunk detokenize_actions(const TokenSeq& seq, const TokenizerConfig& cfg) {
    require(static_cast<int>(seq.size()) == cfg.seq_len(), ErrorKind::InvalidInput,
            "detokenize: sequence length does not match the chunk shape");
    ActionChunk chunk(cfg.chunk_steps, cfg.action_dims);
    for (std::size_t i = 0; i < seq.size(); ++i) chunk.values[i] = detokenize_value(seq[i], cfg);
    return chunk;
}

std::string to_string(TaskFamily f) {
    switch (f) {
    case TaskFamily::Copy: return "copy";
    case TaskFamily::Integrate: return "integrate";
    case TaskFamily::Reach: return "reach";
    }
    return "unknown";
}

TaskFamily task_family_from_string(const std::string& s) {
    if (s == "copy") return TaskFamily::Copy;
    if (s == "integrate") return TaskFamily::Integrate;
    if (s == "reach") return TaskFamily::Reach;
    fail(ErrorKind::Config, "unknown task family '" + s + "'");
}

std::uint64_t episode_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

namespace {

Episode copy_episode(const TaskSpec& spec, const TokenizerConfig& cfg, std::mt19937_64& rng) {
    std::uniform_int_distribution<Token> bin(0, cfg.bins - 1);
    Episode ep;
    ep.cond.resize(static_cast<std::size_t>(spec.cond_len));
    for (Token& t : ep.cond) t = bin(rng);
    const int len = cfg.seq_len();
    ep.truth_tokens.resize(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i)
        ep.truth_tokens[static_cast<std::size_t>(i)] = ep.cond[static_cast<std::size_t>(i * spec.cond_len / len)];
    ep.truth = detokenize_actions(ep.truth_tokens, cfg);
    return ep;
}

Episode integrate_episode(const TaskSpec& spec, const TokenizerConfig& cfg, std::mt19937_64& rng) {
    const int dims = cfg.action_dims;
    const int steps = cfg.chunk_steps;
    const int groups = integrate_groups(dims);
    require(spec.cond_len >= steps * groups, ErrorKind::Config,
            "integrate task needs cond_len >= chunk_steps * ceil(action_dims / 4)");

    Episode ep;
    ep.cond.assign(static_cast<std::size_t>(spec.cond_len), 0);
    for (int t = 0; t < steps; ++t)
        for (int g = 0; g < groups; ++g) {
            const int width = std::min(kIntegrateGroup, dims - g * kIntegrateGroup);
            ep.cond[static_cast<std::size_t>(t * groups + g)] =
                std::uniform_int_distribution<Token>(0, static_cast<Token>((1 << width) - 1))(rng);
        }
    ep.truth_tokens.resize(static_cast<std::size_t>(cfg.seq_len()));
    for (int d = 0; d < dims; ++d) {
        int cur = integrate_start(cfg.bins, steps);
        for (int t = 0; t < steps; ++t) {
            cur = std::clamp(cur + integrate_delta(ep.cond, dims, t, d), 0, cfg.bins - 1);
            ep.truth_tokens[static_cast<std::size_t>(t * dims + d)] = cur;
        }
    }
    ep.truth = detokenize_actions(ep.truth_tokens, cfg);
    return ep;
}

Episode reach_episode(const TaskSpec& spec, const TokenizerConfig& cfg, std::mt19937_64& rng) {
    const int dims = cfg.action_dims;
    require(spec.cond_len >= 2 * dims, ErrorKind::Config, "reach task needs cond_len >= 2 * action_dims");
    std::uniform_int_distribution<Token> bin(0, cfg.bins - 1);
    Episode ep;
    ep.cond.assign(static_cast<std::size_t>(spec.cond_len), static_cast<Token>(cfg.bins / 2));
    for (int d = 0; d < 2 * dims; ++d) ep.cond[static_cast<std::size_t>(d)] = bin(rng);
    ep.truth = ActionChunk(cfg.chunk_steps, dims);
    for (int d = 0; d < dims; ++d) {
        const double a = detokenize_value(ep.cond[static_cast<std::size_t>(d)], cfg);
        const double b = detokenize_value(ep.cond[static_cast<std::size_t>(dims + d)], cfg);
        for (int t = 0; t < cfg.chunk_steps; ++t) {
            const double frac = cfg.chunk_steps == 1 ? 0.0 : static_cast<double>(t) / (cfg.chunk_steps - 1);
            ep.truth.at(t, d) = a + (b - a) * frac;
        }
    }
    ep.truth_tokens = tokenize_actions(ep.truth, cfg);
    return ep;
}

} // namespace

Episode generate_episode(const TaskSpec& spec, const TokenizerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    require(spec.cond_len >= 1, ErrorKind::Config, "task: cond_len must be >= 1");
    std::mt19937_64 rng(seed);
    Episode ep;
    switch (spec.family) {
    case TaskFamily::Copy: ep = copy_episode(spec, cfg, rng); break;
    case TaskFamily::Integrate: ep = integrate_episode(spec, cfg, rng); break;
    case TaskFamily::Reach: ep = reach_episode(spec, cfg, rng); break;
    }
    ep.family = spec.family;
    ep.seed = seed;
    return ep;
}

EpisodeResult evaluate_success(const TokenSeq& decoded, const ActionChunk& truth, const TokenizerConfig& cfg,
                               Token mask_token) {
    require(static_cast<int>(decoded.size()) == cfg.seq_len(), ErrorKind::InvalidInput,
            "evaluate_success: decoded length does not match the chunk shape");
    require(std::find(decoded.begin(), decoded.end(), mask_token) == decoded.end(), ErrorKind::IncompleteDecode,
            "evaluate_success: decoded sequence still contains mask tokens");
    const TokenSeq truth_tokens = tokenize_actions(truth, cfg);
    EpisodeResult r;
    r.success = true;
    std::size_t matches = 0;
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        const Token b = decoded[i];
        if (b < 0 || b >= cfg.bins) {
            r.success = false;
            r.max_action_error = std::max(r.max_action_error, cfg.range_hi - cfg.range_lo);
            continue;
        }
        if (b == truth_tokens[i]) ++matches;
        if (std::abs(b - truth_tokens[i]) > 1) r.success = false;
        r.max_action_error = std::max(r.max_action_error, std::abs(detokenize_value(b, cfg) - truth.values[i]));
    }
    r.token_match_rate = decoded.empty() ? 1.0 : static_cast<double>(matches) / static_cast<double>(decoded.size());
    return r;
}

void write_episode_jsonl(std::ostream& os, const Episode& ep) {
    nlohmann::json j;
    j["family"] = to_string(ep.family);
    j["seed"] = ep.seed;
    j["condition"] = ep.cond;
    j["truth"] = ep.truth_tokens;
    os << j.dump() << '\n';
}

} // namespace blockpipe
