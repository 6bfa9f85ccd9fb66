#pragma once

// JSON conversions for configuration and report types.

#include "blockpipe/decoder.hpp"
#include "blockpipe/diffusion.hpp"
#include "blockpipe/model.hpp"
#include "blockpipe/report.hpp"
#include "blockpipe/taskbench.hpp"
#include "blockpipe/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>

namespace blockpipe {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"mask_token", c.mask_token},
         {"eoa_token", c.eoa_token ? nlohmann::json(*c.eoa_token) : nlohmann::json(nullptr)},
         {"max_len", c.max_len}, {"cond_len", c.cond_len}, {"layers", c.layers}, {"heads", c.heads},
         {"model_dim", c.model_dim}, {"adapter_rank", c.adapter_rank}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.mask_token = j.value("mask_token", d.mask_token);
    if (j.contains("eoa_token"))
        c.eoa_token = j.at("eoa_token").is_null() ? std::nullopt : std::optional<Token>(j.at("eoa_token").get<Token>());
    else
        c.eoa_token = d.eoa_token;
    c.max_len = j.value("max_len", d.max_len);
    c.cond_len = j.value("cond_len", d.cond_len);
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.model_dim = j.value("model_dim", d.model_dim);
    c.adapter_rank = j.value("adapter_rank", d.adapter_rank);
}

inline void to_json(nlohmann::json& j, const BlockLayout& l) {
    j = {{"block_size", l.block_size}, {"num_blocks", l.num_blocks}, {"region_start", l.region_start}};
}

inline void from_json(const nlohmann::json& j, BlockLayout& l) {
    BlockLayout d;
    l.block_size = j.value("block_size", d.block_size);
    l.num_blocks = j.value("num_blocks", d.num_blocks);
    l.region_start = j.value("region_start", d.region_start);
}

inline void to_json(nlohmann::json& j, const TokenizerConfig& t) {
    j = {{"bins", t.bins}, {"range_lo", t.range_lo}, {"range_hi", t.range_hi},
         {"action_dims", t.action_dims}, {"chunk_steps", t.chunk_steps}};
}

inline void from_json(const nlohmann::json& j, TokenizerConfig& t) {
    TokenizerConfig d;
    t.bins = j.value("bins", d.bins);
    t.range_lo = j.value("range_lo", d.range_lo);
    t.range_hi = j.value("range_hi", d.range_hi);
    t.action_dims = j.value("action_dims", d.action_dims);
    t.chunk_steps = j.value("chunk_steps", d.chunk_steps);
}

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
    j = {{"family", to_string(t.family)}, {"cond_len", t.cond_len}, {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
    TaskSpec d;
    t.family = task_family_from_string(j.value("family", to_string(d.family)));
    t.cond_len = j.value("cond_len", d.cond_len);
    t.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const DecodeConfig& c) {
    j = {{"tau_add", c.tau_add}, {"tau_act", c.tau_act}, {"tau_conf", c.tau_conf}, {"n", c.n},
         {"max_iters", c.max_iters}, {"layout", c.layout}, {"fixed_length", c.fixed_length}};
}

inline void from_json(const nlohmann::json& j, DecodeConfig& c) {
    DecodeConfig d;
    c.tau_add = j.value("tau_add", d.tau_add);
    c.tau_act = j.value("tau_act", d.tau_act);
    c.tau_conf = j.value("tau_conf", d.tau_conf);
    c.n = j.value("n", d.n);
    c.max_iters = j.value("max_iters", d.max_iters);
    c.layout = j.value("layout", d.layout);
    c.fixed_length = j.value("fixed_length", d.fixed_length);
}

// Task, tokenizer and layout of a TrainConfig come from the enclosing run
// configuration, so only the optimisation knobs are serialised here.
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"regime", to_string(c.regime)},
         {"steps", c.steps},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate ? nlohmann::json(*c.learning_rate) : nlohmann::json(nullptr)},
         {"cosine_decay", c.cosine_decay},
         {"warmup_steps", c.warmup_steps},
         {"eval_every", c.eval_every},
         {"eval_examples", c.eval_examples},
         {"stop_at_accuracy", c.stop_at_accuracy ? nlohmann::json(*c.stop_at_accuracy) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    auto opt = [&](const char* key) -> std::optional<double> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        return j.at(key).get<double>();
    };
    c.regime = regime_from_string(j.value("regime", to_string(d.regime)));
    c.steps = j.value("steps", d.steps);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = opt("learning_rate");
    c.cosine_decay = j.value("cosine_decay", d.cosine_decay);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.eval_every = j.value("eval_every", d.eval_every);
    c.eval_examples = j.value("eval_examples", d.eval_examples);
    c.stop_at_accuracy = opt("stop_at_accuracy");
}

inline void to_json(nlohmann::json& j, const EpisodeRecord& r) {
    j = {{"seed", r.seed},           {"success", r.success},       {"token_match", r.token_match},
         {"max_action_error", r.max_action_error}, {"iterations", r.iterations}, {"forwards", r.forwards},
         {"attention_pairs", r.attention_pairs}, {"seconds", r.seconds}};
}

inline void from_json(const nlohmann::json& j, EpisodeRecord& r) {
    j.at("seed").get_to(r.seed);
    j.at("success").get_to(r.success);
    j.at("token_match").get_to(r.token_match);
    j.at("max_action_error").get_to(r.max_action_error);
    j.at("iterations").get_to(r.iterations);
    j.at("forwards").get_to(r.forwards);
    j.at("attention_pairs").get_to(r.attention_pairs);
    j.at("seconds").get_to(r.seconds);
}

inline void to_json(nlohmann::json& j, const BenchRow& r) {
    j = {{"decoder", r.decoder},
         {"episodes", r.episodes},
         {"success_rate", r.success_rate},
         {"mean_token_match", r.mean_token_match},
         {"tokens_per_second", r.tokens_per_second},
         {"forwards_per_sequence", r.forwards_per_sequence},
         {"attention_pairs_per_sequence", r.attention_pairs_per_sequence},
         {"speedup", r.speedup},
         {"pair_speedup", r.pair_speedup},
         {"records", r.records}};
}

inline void from_json(const nlohmann::json& j, BenchRow& r) {
    j.at("decoder").get_to(r.decoder);
    j.at("episodes").get_to(r.episodes);
    j.at("success_rate").get_to(r.success_rate);
    j.at("mean_token_match").get_to(r.mean_token_match);
    j.at("tokens_per_second").get_to(r.tokens_per_second);
    j.at("forwards_per_sequence").get_to(r.forwards_per_sequence);
    j.at("attention_pairs_per_sequence").get_to(r.attention_pairs_per_sequence);
    j.at("speedup").get_to(r.speedup);
    j.at("pair_speedup").get_to(r.pair_speedup);
    j.at("records").get_to(r.records);
}

inline void to_json(nlohmann::json& j, const BenchReport& r) {
    j = {{"task", r.task},
         {"action_tokens", r.action_tokens},
         {"tokens_per_second_scope", "generated action tokens only, summed per-episode decode wall time"},
         {"attention_pairs_scope", "per layer and head, condition prefill included"},
         {"episode_seeds", r.episode_seeds},
         {"rows", r.rows}};
}

inline void from_json(const nlohmann::json& j, BenchReport& r) {
    j.at("task").get_to(r.task);
    j.at("action_tokens").get_to(r.action_tokens);
    j.at("episode_seeds").get_to(r.episode_seeds);
    j.at("rows").get_to(r.rows);
}

} // namespace blockpipe
