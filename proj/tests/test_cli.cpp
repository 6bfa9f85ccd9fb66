#include "test_util.hpp"

#include "blockpipe/cli.hpp"
#include "blockpipe/json_io.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace blockpipe;
using namespace testutil;

namespace {

// Reach task on 16 bins, 2 dims x 4 steps, blocks of 2
RunConfig tiny_run(const std::string& out) {
    RunConfig c;
    c.model = tiny_config(4, 1, 16, 2, 4);
    c.model.vocab_size = 18;
    c.model.mask_token = 16;
    c.model.eoa_token = 17;
    c.tokenizer.bins = 16;
    c.tokenizer.action_dims = 2;
    c.tokenizer.chunk_steps = 4;
    c.task.family = TaskFamily::Reach;
    c.decode.layout = BlockLayout{2, 4, 0};
    c.train.steps = 0;
    c.train.eval_every = 1;
    c.train.eval_examples = 8;
    c.bench_episodes = 6;
    c.out_dir = out;
    c.seed = 5;
    c.normalize();
    return c;
}

LoadedModels tiny_models(const RunConfig& c) {
    LoadedModels m;
    m.teacher = ModelBundle{init_weights(c.model, 1), std::nullopt, 0};
    m.student = ModelBundle{init_weights(c.model, 1), init_adapters(c.model, 2), 0};
    return m;
}

std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("blockpipe_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

void same_numbers(const BenchRow& a, const BenchRow& b) {
    REQUIRE(a.records.size() == b.records.size());
    CHECK(a.success_rate == b.success_rate);
    CHECK(a.mean_token_match == b.mean_token_match);
    CHECK(a.forwards_per_sequence == b.forwards_per_sequence);
    CHECK(a.attention_pairs_per_sequence == b.attention_pairs_per_sequence);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].seed == b.records[i].seed);
        CHECK(a.records[i].attention_pairs == b.records[i].attention_pairs);
        CHECK(a.records[i].iterations == b.records[i].iterations);
        CHECK(a.records[i].token_match == b.records[i].token_match);
    }
}

} // namespace

TEST_CASE("run config json roundtrip") {
    RunConfig c = tiny_run("x");
    c.train_layout = BlockLayout{4, 2, 0};
    c.train.regime = Regime::BD_from_scratch;
    c.train.learning_rate = 2e-3;
    c.train.stop_at_accuracy = 0.95;
    c.decoders = {"pipelined", "ar"};
    c.teacher = "a/t";
    c.sweep.tau_conf = {0.3, 0.9};
    c.sweep.block_size = {2, 3};
    c.threads = 3;
    const nlohmann::json j = c;
    const RunConfig back = j.get<RunConfig>();
    CHECK(nlohmann::json(back) == j);
    CHECK(back.train_layout == c.train_layout);
    CHECK(back.train.stop_at_accuracy == c.train.stop_at_accuracy);

    nlohmann::json wrong = j;
    wrong["version"] = 99;
    CHECK_ERROR_KIND(wrong.get<RunConfig>(), ErrorKind::Config);
}

TEST_CASE("empty config document takes the defaults") {
    const RunConfig c = nlohmann::json::object().get<RunConfig>();
    CHECK(nlohmann::json(c) == nlohmann::json(RunConfig{}));
    RunConfig d;
    d.normalize();
    CHECK_NOTHROW(d.validate());
}

TEST_CASE("config cross-checks") {
    RunConfig c = tiny_run("x");
    CHECK_NOTHROW(c.validate());
    RunConfig bad = c;
    bad.decode.layout = BlockLayout{3, 3, 0};
    bad.normalize();
    CHECK_ERROR_KIND(bad.validate(), ErrorKind::Config);
    bad = c;
    bad.model.mask_token = 3;
    CHECK_ERROR_KIND(bad.validate(), ErrorKind::Config);
    bad = c;
    bad.decoders = {"nope"};
    CHECK_ERROR_KIND(bad.validate(), ErrorKind::Config);
    bad = c;
    bad.task.family = TaskFamily::Integrate;
    bad.model.cond_len = 3; // four steps need four step tokens
    bad.normalize();
    CHECK_ERROR_KIND(bad.validate(), ErrorKind::Config);
    bad = c;
    bad.model.max_len = 8;
    CHECK_ERROR_KIND(bad.validate(), ErrorKind::Config);
}

TEST_CASE("malformed config file is a config error") {
    const std::string dir = temp_dir("badcfg");
    std::ofstream(dir + "/c.json") << "{ \"model\": 3 }";
    CHECK_ERROR_KIND(load_run_config(dir + "/c.json"), ErrorKind::Config);
    CHECK_ERROR_KIND(load_run_config(dir + "/missing.json"), ErrorKind::Config);
}

TEST_CASE("thread count and environment override") {
    unsetenv("BLOCKPIPE_THREADS");
    CHECK(resolve_threads(3) == 3);
    setenv("BLOCKPIPE_THREADS", "5", 1);
    CHECK(resolve_threads(3) == 5);
    setenv("BLOCKPIPE_THREADS", "zero", 1);
    CHECK_ERROR_KIND(resolve_threads(3), ErrorKind::Config);
    unsetenv("BLOCKPIPE_THREADS");
}

TEST_CASE("parallel_for visits every index once and forwards errors") {
    std::vector<std::atomic<int>> hits(100);
    parallel_for(100, 4, [&](int i) { ++hits[static_cast<std::size_t>(i)]; });
    for (const auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(10, 3, [](int i) {
                        if (i == 7) fail(ErrorKind::InvalidInput, "boom");
                    }),
                    Error);
}

TEST_CASE("spearman") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3, 4, 5}, {1, 100, 2, 3, 4}) == doctest::Approx(0.4));
    // ties take the average rank: ranks y = 1.5 1.5 3 4 against 1 2 3 4
    CHECK(spearman({1, 2, 3, 4}, {7, 7, 8, 9}) == doctest::Approx(4.5 / std::sqrt(5.0 * 4.5)));
    CHECK_ERROR_KIND(spearman({1}, {2}), ErrorKind::InvalidInput);
}

TEST_CASE("bench rows are paired and reproducible") {
    const RunConfig c = tiny_run("x");
    const LoadedModels m = tiny_models(c);
    const std::vector<std::string> ds{"vanilla", "fast_dllm", "block_diffusion", "pipelined"};
    const BenchReport a = run_bench(c, m, ds, 6, 1);
    REQUIRE(a.rows.size() == 4);
    CHECK(a.row("vanilla")->speedup == 1.0);
    CHECK(a.row("vanilla")->pair_speedup == 1.0);
    CHECK(a.action_tokens == 8);
    for (const BenchRow& row : a.rows) {
        REQUIRE(row.records.size() == 6);
        for (std::size_t i = 0; i < 6; ++i) CHECK(row.records[i].seed == a.episode_seeds[i]);
        CHECK(row.success_rate >= 0.0);
        CHECK(row.success_rate <= 1.0);
    }
    const BenchReport b = run_bench(c, m, ds, 6, 3);
    for (std::size_t r = 0; r < 4; ++r) same_numbers(a.rows[r], b.rows[r]);

    const BenchReport back = nlohmann::json(a).get<BenchReport>();
    CHECK(back == a);
}

TEST_CASE("missing checkpoints for a requested row") {
    const RunConfig c = tiny_run("x");
    LoadedModels m = tiny_models(c);
    CHECK_ERROR_KIND(run_bench(c, m, {"ar"}, 2, 1), ErrorKind::Config);
    m.teacher.reset();
    CHECK_ERROR_KIND(run_bench(c, m, {"vanilla"}, 2, 1), ErrorKind::Config);
    RunConfig nothing = c;
    nothing.teacher = temp_dir("nock") + "/teacher";
    CHECK_ERROR_KIND(load_models(nothing, true, false, false), ErrorKind::Config);
}

TEST_CASE("ar bench decodes one token per forward") {
    const RunConfig c = tiny_run("x");
    LoadedModels m;
    m.ar = ModelBundle{init_weights(c.model, 4), std::nullopt, 0};
    const BenchReport r = run_bench(c, m, {"ar"}, 3, 1);
    CHECK(r.rows[0].forwards_per_sequence == 8.0);
}

TEST_CASE("trace of the ar decoder is the position index") {
    const RunConfig c = tiny_run("x");
    LoadedModels m;
    m.ar = ModelBundle{init_weights(c.model, 4), std::nullopt, 0};
    const TraceReport t = run_trace(c, m, "ar", 5, 2);
    for (std::size_t p = 0; p < 8; ++p) {
        CHECK(t.mean_iteration[p] == static_cast<double>(p + 1));
        CHECK(t.frequency[p][p] == 5);
    }
    CHECK(t.spearman == doctest::Approx(1.0));
    const std::string dir = temp_dir("trace");
    write_trace_files(dir, t);
    std::ifstream is(dir + "/trace_mean.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "position,mean_decode_iteration");
}

TEST_CASE("kvsim on untrained models") {
    RunConfig c = tiny_run("x");
    const KvSimReport r = run_kvsim(c, tiny_models(c), 11);
    CHECK(r.block_causal_max_deviation <= 1e-12);
    for (std::size_t i = 0; i < r.bidirectional.mean.rows(); ++i) CHECK(r.bidirectional.mean(i, i) == doctest::Approx(1.0).epsilon(1e-12));
    const std::string dir = temp_dir("kvsim");
    write_kvsim_files(dir, r);
    CHECK(std::filesystem::exists(dir + "/kvsim_bidirectional.csv"));
    CHECK(std::filesystem::exists(dir + "/kvsim_block_causal_layer0.csv"));
}

TEST_CASE("zero-step train writes the initialisation") {
    RunConfig c = tiny_run(temp_dir("train0"));
    c.init_seed = 9;
    cmd_train(c);
    const ModelBundle b = load_checkpoint(c.out_dir + "/act_finetune");
    CHECK(b.weights == init_weights(c.model, 9));
    CHECK(std::filesystem::exists(c.out_dir + "/act_finetune_log.csv"));

    c.train.regime = Regime::AD_from_finetuned;
    CHECK_ERROR_KIND(cmd_train(c), ErrorKind::Config);
    c.train.regime = Regime::BD_from_finetuned;
    CHECK_ERROR_KIND(cmd_train(c), ErrorKind::Config);
}

TEST_CASE("training logs are reproducible") {
    RunConfig c = tiny_run("");
    c.train.steps = 3;
    c.normalize();
    auto run = [&] {
        ModelBundle b{init_weights(c.model, 1), std::nullopt, 0};
        const TrainOutcome o = run_train(c, b, "");
        std::vector<double> losses;
        for (const TrainLogRow& r : o.log) losses.push_back(r.loss);
        return losses;
    };
    const auto a = run();
    CHECK(a.size() == 4); // step 0 plus one row per step
    CHECK(a == run());
}

TEST_CASE("distill with zero steps keeps the teacher's behaviour") {
    RunConfig c = tiny_run("");
    const ModelBundle teacher{init_weights(c.model, 3), std::nullopt, 0};
    const ModelBundle student = run_distill(c, teacher, "", nullptr);
    REQUIRE(student.adapters.has_value());
    CHECK(student.weights == teacher.weights);
    // B starts at zero, so the adapters contribute nothing yet
    const Batch batch = make_batch(c.task, c.tokenizer, c.train.layout, 4, false, c.model.mask_token, 17);
    const AttentionPattern full = AttentionPattern::bidirectional();
    const AccuracyReport s = masked_accuracy(student, true, full, batch, &teacher);
    CHECK(s.agreement == 1.0);

    c.model.adapter_rank = 0;
    c.normalize();
    const ModelBundle t0{init_weights(c.model, 3), std::nullopt, 0};
    CHECK_ERROR_KIND(run_distill(c, t0, "", nullptr), ErrorKind::Config);
}

TEST_CASE("sweep of one point matches bench and skips invalid points") {
    RunConfig c = tiny_run(temp_dir("sweep"));
    c.student = c.out_dir + "/student";
    save_checkpoint(*tiny_models(c).student, c.student);
    c.sweep.episodes = 4;
    c.sweep.block_size = {2, 3};
    cmd_sweep(c);
    std::ifstream is(c.out_dir + "/sweep.csv");
    std::string header, ok, skipped;
    std::getline(is, header);
    std::getline(is, ok);
    std::getline(is, skipped);
    CHECK(header == "tau_add,tau_act,tau_conf,n,block_size,status,success_rate,tokens_per_second,forwards_per_sequence,"
                    "attention_pairs_per_sequence");
    CHECK(ok.find(",2,ok,") != std::string::npos);
    CHECK(skipped.find(",3,skipped") != std::string::npos);

    const BenchReport b = run_bench(c, load_models(c, false, true, false), {"pipelined"}, 4, 1);
    std::ostringstream expect;
    expect << b.rows[0].forwards_per_sequence << ',' << b.rows[0].attention_pairs_per_sequence;
    CHECK(ok.substr(ok.size() - expect.str().size()) == expect.str());
}

TEST_CASE("bench writes json and csv") {
    RunConfig c = tiny_run(temp_dir("bench"));
    const LoadedModels m = tiny_models(c);
    c.teacher = c.out_dir + "/t";
    c.student = c.out_dir + "/s";
    save_checkpoint(*m.teacher, c.teacher);
    save_checkpoint(*m.student, c.student);
    c.decoders = {"vanilla", "pipelined"};
    cmd_bench(c);
    std::ifstream js(c.out_dir + "/bench.json");
    const BenchReport r = nlohmann::json::parse(js).get<BenchReport>();
    CHECK(r.rows.size() == 2);
    CHECK(r.episode_seeds.size() == 6);
    std::ifstream csv(c.out_dir + "/bench.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.rfind("decoder,episodes,success_rate", 0) == 0);
}
