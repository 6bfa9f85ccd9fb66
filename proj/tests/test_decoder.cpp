#include "test_util.hpp"

#include "blockpipe/decoder.hpp"
#include "blockpipe/taskbench.hpp"
#include "stub_model.hpp"

#include <functional>
#include <map>
#include <set>
#include <sstream>

using namespace blockpipe;

using namespace blockpipe::stubs;

namespace {

void check_monotone(const StubModel& m, const DecodeResult& r, Token mask) { CHECK(commits_monotone(m, r, mask)); }

void check_pipelined_trace(const DecodeResult& r, const DecodeConfig& cfg) {
    const std::vector<std::string> bad = pipelined_violations(r, cfg);
    for (const std::string& b : bad) FAIL_CHECK(b);
}

} // namespace

TEST_CASE("confidence scores") {
    SUBCASE("large margin") {
        RealMatrix z(1, 6);
        z(0, 2) = 80.0;
        CHECK(confidence_scores(z, kMaskTok)[0] == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("uniform over 260 symbols with the mask left out") {
        const RealMatrix z(2, 260);
        const auto c = confidence_scores(z, 256);
        CHECK(std::abs(c[0] - 1.0 / 259) < 1e-15);
    }
    SUBCASE("mask probability is excluded") {
        RealMatrix z(1, 6);
        z(0, kMaskTok) = 50.0;
        CHECK(std::abs(confidence_scores(z, kMaskTok)[0] - 0.2) < 1e-15);
        CHECK(best_tokens(z, kMaskTok)[0] != kMaskTok);
    }
    SUBCASE("random rows against softmax then max") {
        std::mt19937_64 rng(3);
        const RealMatrix z = testutil::random_matrix(50, 9, rng, -4, 4);
        const auto c = confidence_scores(z, 8);
        const RealMatrix p = softmax_rows(z.slice_cols(0, 8));
        for (std::size_t r = 0; r < 50; ++r) {
            double mx = 0;
            for (std::size_t j = 0; j < 8; ++j) mx = std::max(mx, p(r, j));
            CHECK(std::abs(c[r] - mx) < 1e-12);
        }
    }
    SUBCASE("stub logits hit the requested confidence") {
        for (double want : {0.2, 0.35, 0.5, 0.9, 0.999}) {
            RealMatrix z(1, 6);
            z(0, 1) = StubModel::logit_for(want);
            CHECK(std::abs(confidence_scores(z, kMaskTok)[0] - want) < 1e-12);
        }
    }
}

TEST_CASE("select positions") {
    const DecodeConfig cfg = config_for(7, 2);
    CHECK(select_positions({0.9, 0.3, 0.7}, BlockStatus::SemiActivated, cfg) == std::vector<std::size_t>{0, 2});
    CHECK(select_positions({0.4, 0.3, 0.2, 0.1}, BlockStatus::FullyActivated, cfg) == std::vector<std::size_t>{0, 1});
    CHECK(select_positions({0.2}, BlockStatus::FullyActivated, cfg) == std::vector<std::size_t>{0});
    CHECK(select_positions({0.2, 0.1}, BlockStatus::SemiActivated, cfg).empty());
    // ties at the threshold keep every tied position, lower index included
    CHECK(select_positions({0.3, 0.3, 0.3, 0.1}, BlockStatus::FullyActivated, cfg) ==
          std::vector<std::size_t>{0, 1, 2});
    // confident positions beyond the quota are all taken
    CHECK(select_positions({0.9, 0.8, 0.7, 0.6}, BlockStatus::FullyActivated, cfg).size() == 4);
    CHECK_ERROR_KIND(select_positions({0.5}, BlockStatus::Pending, cfg), ErrorKind::InvalidInput);
}

TEST_CASE("select positions honours the logarithmic quota") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 2000; ++trial) {
        const int n = 2 + trial % 4;
        DecodeConfig cfg = config_for(7, 2, 0.5, 0.7, u(rng), n);
        std::vector<double> conf(1 + trial % 12);
        for (double& c : conf) c = u(rng);
        const auto sel = select_positions(conf, BlockStatus::FullyActivated, cfg);
        CHECK(sel.size() >= std::max<std::size_t>(1, conf.size() / static_cast<std::size_t>(n)));
        for (std::size_t i = 0; i < conf.size(); ++i)
            if (conf[i] >= cfg.tau_conf) CHECK(std::find(sel.begin(), sel.end(), i) != sel.end());
        CHECK(std::is_sorted(sel.begin(), sel.end()));
    }
}

TEST_CASE("decode config validation") {
    DecodeConfig c = config_for(7, 8);
    CHECK_NOTHROW(c.validate());
    c.tau_add = 0.8;
    CHECK_ERROR_KIND(c.validate(), ErrorKind::Config);
    c = config_for(7, 8);
    c.n = 1;
    CHECK_ERROR_KIND(c.validate(), ErrorKind::Config);
    c = config_for(7, 8);
    c.max_iters = 3;
    CHECK_ERROR_KIND(c.validate(), ErrorKind::Config);
    CHECK(config_for(7, 8).effective_max_iters() == 64);
}

TEST_CASE("all-confident stub decodes one block per iteration") {
    const DecodeConfig cfg = config_for(4, 3);
    for (auto decode : {decode_pipelined, decode_block_diffusion}) {
        StubModel m(3, all_confident());
        const DecodeResult r = decode(m, cond_of(3), cfg, {});
        CHECK(r.iterations == 3);
        CHECK(r.forwards == 3);
        CHECK(m.calls == 3);
        for (int a = 0; a < 12; ++a) {
            CHECK(r.tokens[static_cast<std::size_t>(a)] == (3 + a) % 4);
            CHECK(r.trace.decode_iteration_of[static_cast<std::size_t>(a)] == a / 4 + 1);
        }
        for (int b = 0; b < 3; ++b) CHECK(r.trace.blocks[static_cast<std::size_t>(b)].complete_at == b + 1);
    }
}

TEST_CASE("addition and activation thresholds follow the block's decoded ratio") {
    // every confidence below tau_conf, distinct, so a fully activated block commits
    // exactly one token per iteration (n = 7) and a semi block commits nothing
    const DecodeConfig cfg = config_for(7, 2, 2.0 / 7, 4.0 / 7, 0.5, 7);
    StubModel m(2, [](Position p, int) { return 0.3 - 0.01 * ((p - 2) % 7); });
    const DecodeResult r = decode_pipelined(m, cond_of(2), cfg);
    const BlockState& b2 = r.trace.blocks[1];
    CHECK(b2.semi_at == 3);  // block 1 holds 2/7 after iteration 2
    CHECK(b2.full_at == 4);  // and 4/7 after iteration 4
    CHECK(r.trace.blocks[0].complete_at == 7);
    for (int a = 0; a < 7; ++a) CHECK(r.trace.decode_iteration_of[static_cast<std::size_t>(a)] == a + 1);
    check_pipelined_trace(r, cfg);
}

TEST_CASE("single block layout keeps one active block") {
    const DecodeConfig cfg = config_for(9, 1);
    StubModel m(2, rising_stream(4));
    const DecodeResult r = decode_pipelined(m, cond_of(2), cfg);
    for (const BlockStep& s : r.trace.block_steps) CHECK(s.block == 0);
    CHECK(r.iterations <= 10);
}

TEST_CASE("pipelined invariants over 1000 random confidence streams") {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const int k = 2 + static_cast<int>(seed % 6), N = 1 + static_cast<int>((seed / 6) % 6);
        const double tau_add = 0.1 + 0.4 * uniform01(seed, 1, 1);
        const double tau_act = tau_add + (1.0 - tau_add) * uniform01(seed, 1, 2);
        const DecodeConfig cfg = config_for(k, N, tau_add, tau_act, 0.3 + 0.6 * uniform01(seed, 1, 3),
                                            2 + static_cast<int>(seed % 3));
        StubModel m(3, seed % 2 ? rising_stream(seed) : noisy_stream(seed));
        const DecodeResult r = decode_pipelined(m, cond_of(3), cfg);
        check_pipelined_trace(r, cfg);
        check_monotone(m, r, kMaskTok);
        for (Token t : r.tokens) CHECK(t != kMaskTok);
    }
}

TEST_CASE("adversarial stub still terminates within L + N") {
    // confidences never reach tau_conf, so only the quota makes progress
    for (int k : {1, 2, 5, 7, 8}) {
        for (int n : {2, 3, 8}) {
            const DecodeConfig cfg = config_for(k, 6, 0.5, 0.7, 0.99, n);
            StubModel m(2, [](Position p, int q) { return 0.2 + 0.001 * ((p * 7 + q * 3) % 11); });
            const DecodeResult r = decode_pipelined(m, cond_of(2), cfg);
            CHECK(r.iterations <= cfg.layout.region_len() + cfg.layout.num_blocks);
            check_pipelined_trace(r, cfg);
            StubModel m2(2, [](Position, int) { return 0.2; });
            CHECK(decode_block_diffusion(m2, cond_of(2), cfg).iterations == cfg.layout.region_len());
        }
    }
}

TEST_CASE("block diffusion processes one block at a time and needs no fewer forwards") {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const int k = 2 + static_cast<int>(seed % 6), N = 1 + static_cast<int>((seed / 6) % 6);
        const DecodeConfig cfg = config_for(k, N);
        StubModel bd_model(3, rising_stream(seed)), pp_model(3, rising_stream(seed));
        INFO("seed " << seed);
        const DecodeResult bd = decode_block_diffusion(bd_model, cond_of(3), cfg);
        const DecodeResult pp = decode_pipelined(pp_model, cond_of(3), cfg);
        std::map<int, std::set<int>> per_iter;
        for (const BlockStep& s : bd.trace.block_steps) per_iter[s.iteration].insert(s.block);
        for (const auto& [it, blocks] : per_iter) CHECK(blocks.size() == 1);
        CHECK(bd.forwards >= pp.forwards);
        CHECK(bd.iterations <= cfg.layout.region_len() + N);
        check_monotone(bd_model, bd, kMaskTok);
    }
}

TEST_CASE("mean decode iteration rises with block index on monotone streams") {
    // later positions are never more confident than earlier ones at equal query counts
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const DecodeConfig cfg = config_for(4, 5);
        const double inc = 0.05 + 0.3 * uniform01(seed, 2, 0);
        StubModel m(2, [&, seed](Position p, int q) {
            const double base = 0.9 - 0.6 * (p - 2) / 20.0 - 0.02 * uniform01(seed, static_cast<std::uint64_t>(p), 3);
            return std::min(1.0, std::max(0.2, base) + inc * q);
        });
        const DecodeResult r = decode_pipelined(m, cond_of(2), cfg);
        double prev = 0;
        for (int b = 0; b < 5; ++b) {
            double mean = 0;
            for (int a = 4 * b; a < 4 * b + 4; ++a) mean += r.trace.decode_iteration_of[static_cast<std::size_t>(a)];
            mean /= 4;
            CHECK(mean >= prev);
            prev = mean;
        }
    }
}

TEST_CASE("EOA ends the chunk and cancels later blocks") {
    DecodeConfig cfg = config_for(4, 5);
    cfg.fixed_length = false;
    StubModel m(2, all_confident(), [](Position p) { return p - 2 == 9 ? kEoaTok : Token{1}; });
    const DecodeResult r = decode_pipelined(m, cond_of(2), cfg);
    REQUIRE(r.eoa_position.has_value());
    CHECK(*r.eoa_position == 9);
    CHECK(r.iterations == 3);
    for (int b = 3; b < 5; ++b) CHECK(r.trace.blocks[static_cast<std::size_t>(b)].status == BlockStatus::Pending);
    for (int a = 12; a < 20; ++a) CHECK(r.tokens[static_cast<std::size_t>(a)] == kMaskTok);

    // fixed length ignores EOA
    cfg.fixed_length = true;
    StubModel m2(2, all_confident(), [](Position p) { return p - 2 == 9 ? kEoaTok : Token{1}; });
    const DecodeResult f = decode_pipelined(m2, cond_of(2), cfg);
    CHECK(!f.eoa_position.has_value());
    CHECK(f.iterations == 5);
}

TEST_CASE("AR decodes one token per forward") {
    const DecodeConfig cfg = config_for(4, 3);
    StubModel m(3, rising_stream(5));
    const DecodeResult r = decode_ar(m, cond_of(3), cfg);
    CHECK(r.forwards == 12);
    for (int a = 0; a < 12; ++a) CHECK(r.trace.decode_iteration_of[static_cast<std::size_t>(a)] == a + 1);
    // each forward recomputes the position committed last time before caching it
    const std::uint64_t c = 3, L = 12;
    std::uint64_t pairs = c * c + c + 1;
    for (std::uint64_t i = 2; i <= L; ++i) pairs += 2 * c + 2 * i - 1;
    CHECK(r.attention_pairs == pairs);
    CHECK(r.final_cache_len == c + L - 1);
}

TEST_CASE("vanilla decoding") {
    const DecodeConfig cfg = config_for(4, 3);
    const int c = 3, L = 12;
    SUBCASE("one step commits everything") {
        StubModel m(c, noisy_stream(1));
        const DecodeResult r = decode_vanilla_dvla(m, cond_of(c), cfg, 1);
        CHECK(r.forwards == 1);
        for (int a = 0; a < L; ++a) CHECK(r.tokens[static_cast<std::size_t>(a)] == (c + a) % 4);
    }
    SUBCASE("L steps, one token each, closed-form pairs") {
        StubModel m(c, noisy_stream(2));
        const DecodeResult r = decode_vanilla_dvla(m, cond_of(c), cfg, L);
        CHECK(r.forwards == L);
        for (const IterationCost& it : r.trace.iterations) CHECK(it.commits == 1);
        CHECK(r.attention_pairs == static_cast<std::uint64_t>(L * (c * c + L * (c + L))));
        check_monotone(m, r, kMaskTok);
    }
    SUBCASE("ceil(L/S) at the first step and exactly S steps") {
        for (int S = 1; S <= 20; ++S) {
            StubModel m(c, noisy_stream(static_cast<std::uint64_t>(S)));
            const DecodeResult r = decode_vanilla_dvla(m, cond_of(c), cfg, S);
            const int steps = std::min(S, L);
            CHECK(r.forwards == steps);
            CHECK(r.trace.iterations.front().commits == (L + steps - 1) / steps);
            for (Token t : r.tokens) CHECK(t != kMaskTok);
        }
    }
    SUBCASE("commits follow confidence order") {
        StubModel m(c, [](Position p, int) { return 0.2 + 0.05 * (p % 7); });
        const DecodeResult r = decode_vanilla_dvla(m, cond_of(c), cfg, L);
        // the most confident position goes first
        int first = -1;
        for (int a = 0; a < L; ++a)
            if (r.trace.decode_iteration_of[static_cast<std::size_t>(a)] == 1) first = a;
        CHECK((first + c) % 7 == 6);
    }
    CHECK_ERROR_KIND(decode_vanilla_dvla(StubModel(c, all_confident()), cond_of(c), cfg, 0), ErrorKind::InvalidInput);
}

TEST_CASE("stale-cache baseline") {
    const DecodeConfig cfg = config_for(4, 3);
    const int c = 3;
    SUBCASE("one-shot equals vanilla") {
        StubModel a(c, all_confident()), b(c, all_confident());
        const DecodeResult f = decode_fast_dllm_baseline(a, cond_of(c), cfg);
        const DecodeResult v = decode_vanilla_dvla(b, cond_of(c), cfg, 1);
        CHECK(f.iterations == 1);
        CHECK(f.tokens == v.tokens);
        CHECK(f.attention_pairs == v.attention_pairs);
    }
    SUBCASE("fewer pairs than vanilla with the same number of steps") {
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            StubModel a(c, noisy_stream(seed)), b(c, noisy_stream(seed));
            const DecodeResult f = decode_fast_dllm_baseline(a, cond_of(c), cfg);
            for (Token t : f.tokens) CHECK(t != kMaskTok);
            check_monotone(a, f, kMaskTok);
            if (f.iterations < 2) continue;
            const DecodeResult v = decode_vanilla_dvla(b, cond_of(c), cfg, f.iterations);
            CHECK(f.attention_pairs < v.attention_pairs);
        }
    }
}

TEST_CASE("reported pairs equal the instrumented attention counter") {
    const ModelConfig mc = testutil::tiny_config(4, 2, 16, 2, 0);
    const Weights w = init_weights(mc, 3);
    const TransformerModel model(w);
    std::mt19937_64 rng(1);
    const TokenSeq cond = testutil::random_tokens(4, 0, 9, rng);
    const DecodeConfig cfg = config_for(3, 4);
    const std::uint64_t per = static_cast<std::uint64_t>(mc.layers * mc.heads);
    auto check = [&](auto&& run) {
        reset_attention_pair_counter();
        const DecodeResult r = run();
        CHECK(attention_pairs_evaluated() == r.attention_pairs * per);
        CHECK(r.attention_pairs > 0);
        std::uint64_t sum = 0;
        for (const IterationCost& it : r.trace.iterations) sum += it.attention_pairs;
        CHECK(sum == r.attention_pairs);
    };
    check([&] { return decode_pipelined(model, cond, cfg); });
    check([&] { return decode_block_diffusion(model, cond, cfg); });
    check([&] { return decode_ar(model, cond, cfg); });
    check([&] { return decode_vanilla_dvla(model, cond, cfg, 5); });
    check([&] { return decode_fast_dllm_baseline(model, cond, cfg); });
}

TEST_CASE("completed block KV is bit-identical afterwards") {
    const ModelConfig mc = testutil::tiny_config(4, 2, 16, 2, 0);
    const Weights w = init_weights(mc, 5);
    const TransformerModel model(w);
    const TokenSeq cond{1, 2, 3, 4};
    DecodeConfig cfg = config_for(3, 4);
    DecodeOptions opts;
    opts.record_block1_kv = true;
    for (auto decode : {decode_pipelined, decode_block_diffusion}) {
        const DecodeResult r = decode(model, cond, cfg, opts);
        REQUIRE(r.block1_kv.size() == static_cast<std::size_t>(r.iterations));
        const int done = r.trace.blocks[0].complete_at;
        REQUIRE(done < r.iterations);
        for (int it = done + 1; it <= r.iterations; ++it)
            CHECK(r.block1_kv[static_cast<std::size_t>(it - 1)] == r.block1_kv[static_cast<std::size_t>(done)]);
        const SimilarityReport sim = similarity_trace(r.block1_kv);
        for (int i = done; i < r.iterations; ++i)
            for (int j = done; j < r.iterations; ++j)
                CHECK(std::abs(sim.mean(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) - 1.0) < 1e-12);
        // the cache trails by the block finished in the last iteration
        CHECK(r.final_cache_len == static_cast<std::size_t>(mc.cond_len + 9));
    }
}

TEST_CASE("condition length must match the model") {
    StubModel m(3, all_confident());
    CHECK_ERROR_KIND(decode_pipelined(m, cond_of(2), config_for(2, 2)), ErrorKind::InvalidInput);
}

TEST_CASE("trace and cost csv") {
    StubModel m(2, all_confident());
    const DecodeConfig cfg = config_for(2, 2);
    const DecodeResult r = decode_pipelined(m, cond_of(2), cfg);
    std::ostringstream t, c;
    write_trace_csv(t, r, cfg.layout);
    write_cost_csv(c, r);
    CHECK(t.str() == "position,block,decode_iteration\n0,0,1\n1,0,1\n2,1,2\n3,1,2\n");
    CHECK(c.str().rfind("iteration,forwards,query_count,attention_pairs,commits\n1,1,2,", 0) == 0);
}
