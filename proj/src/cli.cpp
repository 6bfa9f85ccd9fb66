#include "blockpipe/cli.hpp"

#include "blockpipe/error.hpp"
#include "blockpipe/json_io.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

namespace blockpipe {

namespace {

const std::set<std::string> kDecoders{"vanilla", "fast_dllm", "block_diffusion", "pipelined", "ar"};

std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.out_dir);
    return std::filesystem::path(cfg.out_dir) / name;
}

std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p);
    require(os.good(), ErrorKind::Config, "cannot write " + p.string());
    return os;
}

ModelBundle load_required(const std::string& stem, const char* what) {
    require(!stem.empty(), ErrorKind::Config, std::string("no ") + what + " checkpoint configured");
    require(std::filesystem::exists(stem + ".json"), ErrorKind::Config,
            std::string(what) + " checkpoint not found: " + stem);
    return load_checkpoint(stem);
}

} // namespace

void RunConfig::normalize() {
    task.cond_len = model.cond_len;
    decode.layout.region_start = model.cond_len;
    if (train_layout) train_layout->region_start = model.cond_len;
    train.task = task;
    train.tokenizer = tokenizer;
    train.layout = train_layout.value_or(decode.layout);
    train.seed = seed;
}

void RunConfig::validate() const {
    model.validate();
    tokenizer.validate();
    decode.validate();
    const int L = tokenizer.seq_len();
    require(decode.layout.region_len() == L, ErrorKind::Config,
            "decode layout covers " + std::to_string(decode.layout.region_len()) + " positions but the chunk has " +
                std::to_string(L));
    require(train.layout.region_len() == L, ErrorKind::Config, "training layout does not cover the action chunk");
    require(model.vocab_size > tokenizer.bins, ErrorKind::Config, "vocabulary must hold every bin plus the mask");
    require(model.mask_token >= tokenizer.bins && model.mask_token < model.vocab_size, ErrorKind::Config,
            "mask token must lie outside the action bins");
    if (model.eoa_token)
        require(*model.eoa_token >= tokenizer.bins && *model.eoa_token != model.mask_token, ErrorKind::Config,
                "EOA token must lie outside the action bins and differ from the mask");
    require(task.family != TaskFamily::Integrate ||
                model.cond_len >= tokenizer.chunk_steps * integrate_groups(tokenizer.action_dims),
            ErrorKind::Config, "integrate task needs cond_len >= chunk_steps * ceil(action_dims / 4)");
    require(task.family != TaskFamily::Reach || model.cond_len >= 2 * tokenizer.action_dims, ErrorKind::Config,
            "reach task needs cond_len >= 2 * action_dims");
    require(model.max_len >= model.cond_len + L, ErrorKind::Config, "max_len too small for condition plus chunk");
    require(train.steps >= 0 && train.batch_size >= 1 && train.eval_every >= 1 && train.eval_examples >= 1,
            ErrorKind::Config, "invalid training settings");
    require(bench_episodes >= 1, ErrorKind::Config, "bench episodes must be >= 1");
    require(vanilla_steps >= 0, ErrorKind::Config, "vanilla steps must be >= 0");
    require(threads >= 1, ErrorKind::Config, "threads must be >= 1");
    for (const std::string& d : decoders) require(kDecoders.count(d) > 0, ErrorKind::Config, "unknown decoder '" + d + "'");
    require(kDecoders.count(trace_decoder) > 0, ErrorKind::Config, "unknown trace decoder '" + trace_decoder + "'");
}

TrainConfig RunConfig::effective_train() const {
    RunConfig c = *this;
    c.normalize();
    return c.train;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    nlohmann::json train = c.train;
    train["layout"] = c.train_layout ? nlohmann::json(*c.train_layout) : nlohmann::json(nullptr);
    j = {{"version", kConfigVersion},
         {"model", c.model},
         {"tokenizer", c.tokenizer},
         {"task", c.task},
         {"decode", c.decode},
         {"train", train},
         {"init_seed", c.init_seed},
         {"bench",
          {{"episodes", c.bench_episodes},
           {"vanilla_steps", c.vanilla_steps},
           {"decoders", c.decoders},
           {"trace_decoder", c.trace_decoder}}},
         {"checkpoints", {{"teacher", c.teacher}, {"student", c.student}, {"ar", c.ar}, {"init", c.init}}},
         {"sweep",
          {{"tau_add", c.sweep.tau_add},
           {"tau_act", c.sweep.tau_act},
           {"tau_conf", c.sweep.tau_conf},
           {"n", c.sweep.n},
           {"block_size", c.sweep.block_size},
           {"episodes", c.sweep.episodes}}},
         {"out_dir", c.out_dir},
         {"seed", c.seed},
         {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    const int version = j.value("version", kConfigVersion);
    require(version == kConfigVersion, ErrorKind::Config, "unsupported config version " + std::to_string(version));
    RunConfig d;
    c.model = j.value("model", d.model);
    c.tokenizer = j.value("tokenizer", d.tokenizer);
    c.task = j.value("task", d.task);
    c.decode = j.value("decode", d.decode);
    c.train = j.value("train", d.train);
    c.train_layout.reset();
    if (j.contains("train") && j.at("train").contains("layout") && !j.at("train").at("layout").is_null())
        c.train_layout = j.at("train").at("layout").get<BlockLayout>();
    c.init_seed = j.value("init_seed", d.init_seed);
    const nlohmann::json bench = j.value("bench", nlohmann::json::object());
    c.bench_episodes = bench.value("episodes", d.bench_episodes);
    c.vanilla_steps = bench.value("vanilla_steps", d.vanilla_steps);
    c.decoders = bench.value("decoders", d.decoders);
    c.trace_decoder = bench.value("trace_decoder", d.trace_decoder);
    const nlohmann::json ck = j.value("checkpoints", nlohmann::json::object());
    c.teacher = ck.value("teacher", d.teacher);
    c.student = ck.value("student", d.student);
    c.ar = ck.value("ar", d.ar);
    c.init = ck.value("init", d.init);
    const nlohmann::json sw = j.value("sweep", nlohmann::json::object());
    c.sweep.tau_add = sw.value("tau_add", d.sweep.tau_add);
    c.sweep.tau_act = sw.value("tau_act", d.sweep.tau_act);
    c.sweep.tau_conf = sw.value("tau_conf", d.sweep.tau_conf);
    c.sweep.n = sw.value("n", d.sweep.n);
    c.sweep.block_size = sw.value("block_size", d.sweep.block_size);
    c.sweep.episodes = sw.value("episodes", d.sweep.episodes);
    c.out_dir = j.value("out_dir", d.out_dir);
    c.seed = j.value("seed", d.seed);
    c.threads = j.value("threads", d.threads);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), ErrorKind::Config, "cannot read config " + path);
    try {
        RunConfig c = nlohmann::json::parse(is).get<RunConfig>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Config, "config " + path + ": " + e.what());
    }
}

int resolve_threads(int requested) {
    if (const char* env = std::getenv("BLOCKPIPE_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        require(end && *end == '\0' && v >= 1 && v <= 1024, ErrorKind::Config,
                std::string("BLOCKPIPE_THREADS must be a positive integer, got '") + env + "'");
        return static_cast<int>(v);
    }
    require(requested >= 1, ErrorKind::Config, "threads must be >= 1");
    return requested;
}

void parallel_for(int n, int threads, const std::function<void(int)>& f) {
    const int workers = std::max(1, std::min(threads, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::atomic<bool> stop{false};
    std::exception_ptr first;
    std::mutex mu;
    auto body = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n || stop.load()) return;
            try {
                f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first) first = std::current_exception();
                stop = true;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

LoadedModels load_models(const RunConfig& cfg, bool need_teacher, bool need_student, bool need_ar) {
    LoadedModels m;
    if (need_teacher) {
        m.teacher = load_required(cfg.teacher, "teacher");
        m.teacher->adapters.reset();
    }
    if (need_student) m.student = load_required(cfg.student, "student");
    if (need_ar) m.ar = load_required(cfg.ar, "ar");
    for (const auto* b : {&m.teacher, &m.student, &m.ar})
        if (*b)
            require((*b)->weights.config.cond_len == cfg.model.cond_len, ErrorKind::Config,
                    "checkpoint condition length differs from the configured model");
    return m;
}

DecodeResult run_decoder(const std::string& name, const LoadedModels& models, const RunConfig& cfg,
                         const TokenSeq& cond, const DecodeOptions& opts) {
    auto need = [&](const std::optional<ModelBundle>& b, const char* what) -> const ModelBundle& {
        require(b.has_value(), ErrorKind::Config, "decoder '" + name + "' needs a " + what + " checkpoint");
        return *b;
    };
    if (name == "vanilla" || name == "fast_dllm") {
        const TransformerModel model(need(models.teacher, "teacher").weights);
        return name == "vanilla" ? decode_vanilla_dvla(model, cond, cfg.decode, cfg.vanilla_step_count(), opts)
                                 : decode_fast_dllm_baseline(model, cond, cfg.decode, opts);
    }
    if (name == "block_diffusion" || name == "pipelined") {
        const ModelBundle& s = need(models.student, "student");
        const TransformerModel model(s.weights, s.adapters ? &*s.adapters : nullptr, s.adapters.has_value());
        return name == "pipelined" ? decode_pipelined(model, cond, cfg.decode, opts)
                                   : decode_block_diffusion(model, cond, cfg.decode, opts);
    }
    if (name == "ar") {
        const ModelBundle& a = need(models.ar, "ar");
        const TransformerModel model(a.weights, a.adapters ? &*a.adapters : nullptr, a.adapters.has_value());
        return decode_ar(model, cond, cfg.decode, opts);
    }
    fail(ErrorKind::Config, "unknown decoder '" + name + "'");
}

namespace {

std::uint64_t bench_seed_base(std::uint64_t seed) { return episode_seed(seed, 0xbe4c4); }

EpisodeRecord score(const DecodeResult& r, const Episode& ep, const RunConfig& cfg, double seconds) {
    EpisodeRecord rec;
    rec.seed = ep.seed;
    rec.iterations = r.iterations;
    rec.forwards = r.forwards;
    rec.attention_pairs = r.attention_pairs;
    rec.seconds = seconds;
    const bool complete =
        std::find(r.tokens.begin(), r.tokens.end(), cfg.model.mask_token) == r.tokens.end();
    if (complete) {
        const EpisodeResult er = evaluate_success(r.tokens, ep.truth, cfg.tokenizer, cfg.model.mask_token);
        rec.success = er.success;
        rec.token_match = er.token_match_rate;
        rec.max_action_error = er.max_action_error;
    } else {
        // variable-length decode stopped early: undecoded positions count as misses
        std::size_t hits = 0;
        for (std::size_t i = 0; i < r.tokens.size(); ++i) hits += r.tokens[i] == ep.truth_tokens[i];
        rec.token_match = static_cast<double>(hits) / static_cast<double>(r.tokens.size());
        rec.max_action_error = cfg.tokenizer.range_hi - cfg.tokenizer.range_lo;
    }
    return rec;
}

} // namespace

BenchReport run_bench(const RunConfig& cfg, const LoadedModels& models, const std::vector<std::string>& decoders,
                      int episodes, int threads) {
    require(episodes >= 1, ErrorKind::Config, "bench needs at least one episode");
    require(!decoders.empty(), ErrorKind::Config, "bench needs at least one decoder");
    for (const std::string& d : decoders) require(kDecoders.count(d) > 0, ErrorKind::Config, "unknown decoder '" + d + "'");
    BenchReport rep;
    rep.task = to_string(cfg.task.family);
    rep.action_tokens = cfg.tokenizer.seq_len();
    const std::uint64_t base = bench_seed_base(cfg.seed);
    for (int i = 0; i < episodes; ++i) rep.episode_seeds.push_back(episode_seed(base, static_cast<std::uint64_t>(i)));

    std::vector<std::vector<EpisodeRecord>> recs(decoders.size(), std::vector<EpisodeRecord>(static_cast<std::size_t>(episodes)));
    parallel_for(episodes, threads, [&](int i) {
        const Episode ep = generate_episode(cfg.task, cfg.tokenizer, rep.episode_seeds[static_cast<std::size_t>(i)]);
        for (std::size_t d = 0; d < decoders.size(); ++d) {
            const auto t0 = std::chrono::steady_clock::now();
            const DecodeResult r = run_decoder(decoders[d], models, cfg, ep.cond);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            recs[d][static_cast<std::size_t>(i)] = score(r, ep, cfg, secs);
        }
    });

    for (std::size_t d = 0; d < decoders.size(); ++d) {
        BenchRow row;
        row.decoder = decoders[d];
        row.episodes = episodes;
        double secs = 0, pairs = 0, fw = 0, succ = 0, match = 0;
        for (const EpisodeRecord& r : recs[d]) {
            secs += r.seconds;
            pairs += static_cast<double>(r.attention_pairs);
            fw += r.forwards;
            succ += r.success;
            match += r.token_match;
        }
        const double n = episodes;
        row.success_rate = succ / n;
        row.mean_token_match = match / n;
        row.forwards_per_sequence = fw / n;
        row.attention_pairs_per_sequence = pairs / n;
        row.tokens_per_second = secs > 0 ? n * rep.action_tokens / secs : 0.0;
        row.records = std::move(recs[d]);
        rep.rows.push_back(std::move(row));
    }
    finalize_speedups(rep);
    return rep;
}

TraceReport run_trace(const RunConfig& cfg, const LoadedModels& models, const std::string& decoder, int episodes,
                      int threads) {
    require(episodes >= 2, ErrorKind::Config, "trace needs at least two episodes");
    const int L = cfg.tokenizer.seq_len();
    const std::uint64_t base = bench_seed_base(cfg.seed);
    std::vector<std::vector<int>> its(static_cast<std::size_t>(episodes));
    parallel_for(episodes, threads, [&](int i) {
        const Episode ep = generate_episode(cfg.task, cfg.tokenizer, episode_seed(base, static_cast<std::uint64_t>(i)));
        its[static_cast<std::size_t>(i)] = run_decoder(decoder, models, cfg, ep.cond).trace.decode_iteration_of;
    });
    TraceReport rep;
    rep.decoder = decoder;
    rep.episodes = episodes;
    for (const auto& v : its)
        for (int it : v) rep.max_iteration = std::max(rep.max_iteration, it);
    rep.frequency.assign(static_cast<std::size_t>(L), std::vector<std::uint64_t>(static_cast<std::size_t>(rep.max_iteration), 0));
    rep.mean_iteration.assign(static_cast<std::size_t>(L), 0.0);
    for (const auto& v : its)
        for (int p = 0; p < L; ++p) {
            const int it = v[static_cast<std::size_t>(p)];
            if (it > 0) ++rep.frequency[static_cast<std::size_t>(p)][static_cast<std::size_t>(it - 1)];
            rep.mean_iteration[static_cast<std::size_t>(p)] += it;
        }
    std::vector<double> pos;
    for (int p = 0; p < L; ++p) {
        rep.mean_iteration[static_cast<std::size_t>(p)] /= episodes;
        pos.push_back(p);
    }
    rep.spearman = spearman(pos, rep.mean_iteration);
    return rep;
}

KvSimReport run_kvsim(const RunConfig& cfg, const LoadedModels& models, std::uint64_t seed) {
    const Episode ep = generate_episode(cfg.task, cfg.tokenizer, seed);
    DecodeOptions opts;
    opts.record_block1_kv = true;
    KvSimReport rep;
    const DecodeResult bi = run_decoder("vanilla", models, cfg, ep.cond, opts);
    const DecodeResult bc = run_decoder("pipelined", models, cfg, ep.cond, opts);
    require(bi.block1_kv.size() >= 2 && bc.block1_kv.size() >= 2, ErrorKind::InvalidInput,
            "kvsim: a decode finished in a single iteration, nothing to compare");
    rep.bidirectional = similarity_trace(bi.block1_kv);
    rep.block_causal = similarity_trace(bc.block1_kv);
    rep.block_causal_complete_at = bc.trace.blocks[0].complete_at;
    const std::size_t n_bc = rep.block_causal.mean.rows();
    for (std::size_t i = static_cast<std::size_t>(rep.block_causal_complete_at); i < n_bc; ++i)
        for (std::size_t j = static_cast<std::size_t>(rep.block_causal_complete_at); j < n_bc; ++j)
            for (const RealMatrix& m : rep.block_causal.per_layer)
                rep.block_causal_max_deviation = std::max(rep.block_causal_max_deviation, std::abs(m(i, j) - 1.0));
    const std::size_t n_bi = rep.bidirectional.mean.rows();
    for (std::size_t i = 0; i < n_bi; ++i)
        for (std::size_t j = 0; j < n_bi; ++j)
            if (i != j) rep.bidirectional_min_offdiag = std::min(rep.bidirectional_min_offdiag, rep.bidirectional.mean(i, j));
    return rep;
}

namespace {

std::function<void(const TrainLogRow&)> log_sink(std::ofstream* os) {
    return [os](const TrainLogRow& row) {
        if (os) {
            write_train_log_row(*os, row);
            os->flush();
        }
        std::cout << "step " << row.step << " loss " << row.loss << " acc " << row.accuracy << " agree "
                  << row.agreement << " t " << row.wall_seconds << "s\n";
        std::cout.flush();
    };
}

} // namespace

TrainOutcome run_train(const RunConfig& cfg, ModelBundle& bundle, const std::string& log_path) {
    const TrainConfig tc = cfg.effective_train();
    require(tc.regime != Regime::AD_from_finetuned, ErrorKind::Config, "the AD regime runs through distill");
    std::optional<std::ofstream> log;
    if (!log_path.empty()) {
        log.emplace(open_out(log_path));
        write_train_log_header(*log);
    }
    return train(bundle, tc, nullptr, log_sink(log ? &*log : nullptr));
}

ModelBundle run_distill(const RunConfig& cfg, const ModelBundle& teacher_in, const std::string& log_path,
                        TrainOutcome* outcome) {
    ModelBundle teacher{teacher_in.weights, std::nullopt, teacher_in.training_step};
    ModelBundle student{teacher_in.weights, init_adapters(teacher_in.weights.config, cfg.init_seed), 0};
    require(student.adapters.has_value(), ErrorKind::Config, "distill needs adapter_rank > 0");
    TrainConfig tc = cfg.effective_train();
    tc.regime = Regime::AD_from_finetuned;
    std::optional<std::ofstream> log;
    if (!log_path.empty()) {
        log.emplace(open_out(log_path));
        write_train_log_header(*log);
    }
    TrainOutcome o = train(student, tc, &teacher, log_sink(log ? &*log : nullptr));
    if (outcome) *outcome = std::move(o);
    return student;
}

void write_bench_csv(std::ostream& os, const BenchReport& r) {
    os << "decoder,episodes,success_rate,mean_token_match,tokens_per_second,forwards_per_sequence,"
          "attention_pairs_per_sequence,speedup,pair_speedup\n";
    for (const BenchRow& row : r.rows)
        os << row.decoder << ',' << row.episodes << ',' << row.success_rate << ',' << row.mean_token_match << ','
           << row.tokens_per_second << ',' << row.forwards_per_sequence << ',' << row.attention_pairs_per_sequence
           << ',' << row.speedup << ',' << row.pair_speedup << '\n';
}

void write_trace_files(const std::string& dir, const TraceReport& r) {
    std::filesystem::create_directories(dir);
    std::ofstream freq = open_out(std::filesystem::path(dir) / "trace_frequency.csv");
    freq << "position";
    for (int it = 1; it <= r.max_iteration; ++it) freq << ",iter_" << it;
    freq << '\n';
    for (std::size_t p = 0; p < r.frequency.size(); ++p) {
        freq << p;
        for (std::uint64_t c : r.frequency[p]) freq << ',' << c;
        freq << '\n';
    }
    std::ofstream mean = open_out(std::filesystem::path(dir) / "trace_mean.csv");
    mean << "position,mean_decode_iteration\n";
    for (std::size_t p = 0; p < r.mean_iteration.size(); ++p) mean << p << ',' << r.mean_iteration[p] << '\n';
    std::ofstream js = open_out(std::filesystem::path(dir) / "trace.json");
    js << nlohmann::json{{"decoder", r.decoder},
                         {"episodes", r.episodes},
                         {"max_iteration", r.max_iteration},
                         {"spearman_position_vs_mean_iteration", r.spearman}}
              .dump(2)
       << '\n';
}

void write_kvsim_files(const std::string& dir, const KvSimReport& r) {
    std::filesystem::create_directories(dir);
    auto emit = [&](const std::string& name, const SimilarityReport& s) {
        std::ofstream os = open_out(std::filesystem::path(dir) / (name + ".csv"));
        write_similarity_csv(os, s.mean);
        for (std::size_t l = 0; l < s.per_layer.size(); ++l) {
            std::ofstream ls = open_out(std::filesystem::path(dir) / (name + "_layer" + std::to_string(l) + ".csv"));
            write_similarity_csv(ls, s.per_layer[l]);
        }
    };
    emit("kvsim_bidirectional", r.bidirectional);
    emit("kvsim_block_causal", r.block_causal);
    std::ofstream js = open_out(std::filesystem::path(dir) / "kvsim.json");
    js << nlohmann::json{{"block_causal_block1_complete_at", r.block_causal_complete_at},
                         {"block_causal_post_completion_max_deviation", r.block_causal_max_deviation},
                         {"bidirectional_min_offdiagonal", r.bidirectional_min_offdiag}}
              .dump(2)
       << '\n';
}

void cmd_init_config(const RunConfig& cfg, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os = open_out(p);
    os << nlohmann::json(cfg).dump(2) << '\n';
}

void cmd_train(const RunConfig& cfg) {
    const std::string name = to_string(cfg.train.regime);
    ModelBundle bundle;
    if (cfg.train.regime == Regime::BD_from_finetuned) {
        bundle = load_required(cfg.init, "init");
        bundle.adapters.reset();
        require(bundle.weights.config == cfg.model, ErrorKind::Config, "init checkpoint does not match the model config");
    } else {
        bundle.weights = init_weights(cfg.model, cfg.init_seed);
    }
    const TrainOutcome o = run_train(cfg, bundle, out_path(cfg, name + "_log.csv").string());
    save_checkpoint(bundle, out_path(cfg, name).string());
    std::ofstream js = open_out(out_path(cfg, name + "_summary.json"));
    js << nlohmann::json{{"regime", name},
                         {"steps", bundle.training_step},
                         {"final_accuracy", o.final_accuracy},
                         {"reached_at", o.reached_at ? nlohmann::json(*o.reached_at) : nlohmann::json(nullptr)}}
              .dump(2)
       << '\n';
}

void cmd_distill(const RunConfig& cfg) {
    const ModelBundle teacher = load_required(cfg.teacher, "teacher");
    TrainOutcome o;
    const ModelBundle student = run_distill(cfg, teacher, out_path(cfg, "student_log.csv").string(), &o);
    save_checkpoint(student, out_path(cfg, "student").string());
    std::ofstream js = open_out(out_path(cfg, "student_summary.json"));
    js << nlohmann::json{{"regime", to_string(Regime::AD_from_finetuned)},
                         {"steps", student.training_step},
                         {"final_accuracy", o.final_accuracy},
                         {"final_agreement", o.log.empty() ? 0.0 : o.log.back().agreement},
                         {"reached_at", o.reached_at ? nlohmann::json(*o.reached_at) : nlohmann::json(nullptr)}}
              .dump(2)
       << '\n';
}

namespace {

bool uses(const std::vector<std::string>& ds, std::initializer_list<const char*> names) {
    for (const auto& d : ds)
        for (const char* n : names)
            if (d == n) return true;
    return false;
}

LoadedModels models_for(const RunConfig& cfg, const std::vector<std::string>& decoders) {
    return load_models(cfg, uses(decoders, {"vanilla", "fast_dllm"}), uses(decoders, {"block_diffusion", "pipelined"}),
                       uses(decoders, {"ar"}));
}

} // namespace

void cmd_bench(const RunConfig& cfg) {
    const LoadedModels models = models_for(cfg, cfg.decoders);
    const BenchReport rep = run_bench(cfg, models, cfg.decoders, cfg.bench_episodes, resolve_threads(cfg.threads));
    std::ofstream js = open_out(out_path(cfg, "bench.json"));
    js << nlohmann::json(rep).dump(2) << '\n';
    std::ofstream csv = open_out(out_path(cfg, "bench.csv"));
    write_bench_csv(csv, rep);
    write_bench_csv(std::cout, rep);
}

void cmd_trace(const RunConfig& cfg) {
    const LoadedModels models = models_for(cfg, {cfg.trace_decoder});
    const TraceReport rep = run_trace(cfg, models, cfg.trace_decoder, cfg.bench_episodes, resolve_threads(cfg.threads));
    write_trace_files(cfg.out_dir, rep);
    std::cout << "spearman(position, mean decode iteration) = " << rep.spearman << '\n';
}

void cmd_kvsim(const RunConfig& cfg) {
    const LoadedModels models = load_models(cfg, true, true, false);
    const KvSimReport rep = run_kvsim(cfg, models, episode_seed(bench_seed_base(cfg.seed), 0));
    write_kvsim_files(cfg.out_dir, rep);
    std::cout << "block-causal post-completion max |sim - 1| = " << rep.block_causal_max_deviation
              << ", bidirectional min off-diagonal = " << rep.bidirectional_min_offdiag << '\n';
}

void cmd_sweep(const RunConfig& cfg) {
    const LoadedModels models = load_models(cfg, false, true, false);
    auto or_default = [](auto v, auto d) { return v.empty() ? decltype(v){d} : v; };
    const auto adds = or_default(cfg.sweep.tau_add, cfg.decode.tau_add);
    const auto acts = or_default(cfg.sweep.tau_act, cfg.decode.tau_act);
    const auto confs = or_default(cfg.sweep.tau_conf, cfg.decode.tau_conf);
    const auto ns = or_default(cfg.sweep.n, cfg.decode.n);
    const auto ks = or_default(cfg.sweep.block_size, cfg.decode.layout.block_size);
    const int L = cfg.tokenizer.seq_len();
    const int threads = resolve_threads(cfg.threads);

    std::ofstream csv = open_out(out_path(cfg, "sweep.csv"));
    csv << "tau_add,tau_act,tau_conf,n,block_size,status,success_rate,tokens_per_second,forwards_per_sequence,"
           "attention_pairs_per_sequence\n";
    for (double a : adds)
        for (double t : acts)
            for (double c : confs)
                for (int n : ns)
                    for (int k : ks) {
                        csv << a << ',' << t << ',' << c << ',' << n << ',' << k << ',';
                        RunConfig point = cfg;
                        point.decode.tau_add = a;
                        point.decode.tau_act = t;
                        point.decode.tau_conf = c;
                        point.decode.n = n;
                        std::string why;
                        if (k < 1 || L % k != 0) why = "block size does not divide the chunk";
                        else {
                            point.decode.layout = BlockLayout{k, L / k, cfg.model.cond_len};
                            try {
                                point.decode.validate();
                            } catch (const Error& e) {
                                why = e.what();
                            }
                        }
                        if (!why.empty()) {
                            std::cerr << "warning: skipping grid point: " << why << '\n';
                            csv << "skipped,,,,\n";
                            continue;
                        }
                        const BenchReport rep = run_bench(point, models, {"pipelined"}, cfg.sweep.episodes, threads);
                        const BenchRow& row = rep.rows.front();
                        csv << "ok," << row.success_rate << ',' << row.tokens_per_second << ','
                            << row.forwards_per_sequence << ',' << row.attention_pairs_per_sequence << '\n';
                        csv.flush();
                    }
}

} // namespace blockpipe
