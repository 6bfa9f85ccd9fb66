#include "test_util.hpp"

#include <cmath>
#include <limits>

using namespace blockpipe;
using testutil::random_matrix;

namespace {

// direct softmax in extended precision
std::vector<long double> softmax_ld(std::span<const double> row) {
    long double mx = row[0];
    for (double v : row) mx = std::max<long double>(mx, v);
    std::vector<long double> e;
    long double s = 0;
    for (double v : row) {
        e.push_back(std::exp(static_cast<long double>(v) - mx));
        s += e.back();
    }
    for (auto& x : e) x /= s;
    return e;
}

// full attention over the allowed keys, triple loop
RealMatrix attention_oracle(const RealMatrix& q, const RealMatrix& k, const RealMatrix& v, const AttnMask& m, double scale) {
    RealMatrix out(q.rows(), v.cols());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        std::vector<long double> s(k.rows(), 0);
        long double mx = -INFINITY;
        for (std::size_t j = 0; j < k.rows(); ++j) {
            if (!m.at(i, j)) continue;
            long double d = 0;
            for (std::size_t c = 0; c < q.cols(); ++c) d += static_cast<long double>(q(i, c)) * k(j, c);
            s[j] = d * scale;
            mx = std::max(mx, s[j]);
        }
        long double z = 0;
        for (std::size_t j = 0; j < k.rows(); ++j)
            if (m.at(i, j)) z += std::exp(s[j] - mx);
        for (std::size_t j = 0; j < k.rows(); ++j) {
            if (!m.at(i, j)) continue;
            const long double p = std::exp(s[j] - mx) / z;
            for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += static_cast<double>(p * v(j, c));
        }
    }
    return out;
}

} // namespace

TEST_CASE("softmax of a zero row is uniform") {
    const RealMatrix p = softmax_rows(RealMatrix::from_rows({{0.0, 0.0}}));
    CHECK(p(0, 0) == 0.5);
    CHECK(p(0, 1) == 0.5);
}

TEST_CASE("softmax survives huge logits") {
    const RealMatrix p = softmax_rows(RealMatrix::from_rows({{1000.0, 0.0}}));
    CHECK(std::isfinite(p(0, 0)));
    CHECK(p(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(p(0, 1) >= 0.0);
    CHECK(p(0, 1) < 1e-300);
}

TEST_CASE("softmax rows match an extended precision oracle") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const RealMatrix m = random_matrix(3, 4, rng, -20, 20);
        const RealMatrix p = softmax_rows(m);
        for (std::size_t r = 0; r < 3; ++r) {
            const auto ref = softmax_ld(m.row(r));
            double sum = 0;
            for (std::size_t c = 0; c < 4; ++c) {
                CHECK(std::abs(p(r, c) - static_cast<double>(ref[c])) < 1e-14);
                CHECK(p(r, c) > 0.0);
                CHECK(p(r, c) <= 1.0);
                sum += p(r, c);
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("log softmax agrees with log of softmax") {
    std::mt19937_64 rng(4);
    const RealMatrix m = random_matrix(5, 7, rng, -5, 5);
    const RealMatrix p = softmax_rows(m), lp = log_softmax_rows(m);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(std::abs(std::log(p.values()[i]) - lp.values()[i]) < 1e-12);
}

TEST_CASE("softmax rejects non-finite input") {
    RealMatrix m(1, 2);
    m(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_ERROR_KIND(softmax_rows(m), ErrorKind::InvalidInput);
    m(0, 1) = std::numeric_limits<double>::infinity();
    CHECK_ERROR_KIND(log_softmax_rows(m), ErrorKind::InvalidInput);
}

TEST_CASE("diagonal mask selects the matching value row") {
    std::mt19937_64 rng(5);
    const RealMatrix q = random_matrix(4, 3, rng), k = random_matrix(4, 3, rng), v = random_matrix(4, 5, rng);
    AttnMask m(4, 4);
    for (std::size_t i = 0; i < 4; ++i) m.set(i, i, true);
    const RealMatrix out = masked_attention(q, k, v, m, 0.7);
    CHECK(out == v);
}

TEST_CASE("all-true mask matches full attention") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const RealMatrix q = random_matrix(5, 4, rng), k = random_matrix(7, 4, rng), v = random_matrix(7, 3, rng);
        const AttnMask m(5, 7, true);
        CHECK(max_abs_diff(masked_attention(q, k, v, m, 0.5), attention_oracle(q, k, v, m, 0.5)) < 1e-12);
    }
}

TEST_CASE("random masks match the oracle and count allowed pairs") {
    std::mt19937_64 rng(7);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 50; ++trial) {
        const RealMatrix q = random_matrix(6, 4, rng), k = random_matrix(9, 4, rng), v = random_matrix(9, 2, rng);
        AttnMask m(6, 9);
        for (std::size_t i = 0; i < 6; ++i) {
            m.set(i, i, true);
            for (std::size_t j = 0; j < 9; ++j)
                if (coin(rng)) m.set(i, j, true);
        }
        reset_attention_pair_counter();
        const RealMatrix out = masked_attention(q, k, v, m, 0.5);
        CHECK(attention_pairs_evaluated() == m.allowed_count());
        CHECK(max_abs_diff(out, attention_oracle(q, k, v, m, 0.5)) < 1e-12);
    }
}

TEST_CASE("disallowed keys have no influence") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const RealMatrix q = random_matrix(6, 4, rng);
        RealMatrix k = random_matrix(8, 4, rng), v = random_matrix(8, 3, rng);
        // block-causal shape: queries 0..2 see keys 0..3, queries 3..5 see all
        AttnMask m(6, 8);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 8; ++j) m.set(i, j, i >= 3 || j < 4);
        const AttentionResult before = masked_attention_with_probs(q, k, v, m, 0.5);
        for (std::size_t j = 4; j < 8; ++j)
            for (std::size_t c = 0; c < 4; ++c) {
                k(j, c) += 5.0 * (c + 1);
                if (c < 3) v(j, c) -= 3.0;
            }
        const AttentionResult after = masked_attention_with_probs(q, k, v, m, 0.5);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t c = 0; c < 3; ++c) CHECK(before.output(i, c) == after.output(i, c));
            for (std::size_t j = 4; j < 8; ++j) CHECK(after.probs(i, j) == 0.0);
        }
    }
}

TEST_CASE("a query row with no allowed key is an invalid mask") {
    std::mt19937_64 rng(9);
    const RealMatrix q = random_matrix(2, 2, rng), k = random_matrix(2, 2, rng), v = random_matrix(2, 2, rng);
    AttnMask m(2, 2);
    m.set(0, 0, true);
    CHECK_ERROR_KIND(masked_attention(q, k, v, m, 1.0), ErrorKind::InvalidMask);
}

TEST_CASE("attention is deterministic") {
    std::mt19937_64 rng(10);
    const RealMatrix q = random_matrix(5, 8, rng), k = random_matrix(5, 8, rng), v = random_matrix(5, 8, rng);
    const AttnMask m(5, 5, true);
    CHECK(masked_attention(q, k, v, m, 0.3) == masked_attention(q, k, v, m, 0.3));
}

TEST_CASE("linear") {
    std::mt19937_64 rng(11);
    SUBCASE("identity weight and zero bias") {
        const RealMatrix x = random_matrix(3, 3, rng);
        RealMatrix w(3, 3);
        for (std::size_t i = 0; i < 3; ++i) w(i, i) = 1.0;
        CHECK(linear(x, w, std::vector<double>(3, 0.0)) == x);
    }
    SUBCASE("zero input gives the bias") {
        const RealMatrix w = random_matrix(3, 2, rng);
        const std::vector<double> b{0.25, -4.0};
        const RealMatrix y = linear(RealMatrix(2, 3), w, b);
        for (std::size_t r = 0; r < 2; ++r) {
            CHECK(y(r, 0) == 0.25);
            CHECK(y(r, 1) == -4.0);
        }
    }
    SUBCASE("hand product") {
        const RealMatrix x = RealMatrix::from_rows({{1, 2, 3}, {4, 5, 6}});
        const RealMatrix w = RealMatrix::from_rows({{1, -1}, {0, 2}, {3, 0.5}});
        const RealMatrix y = linear(x, w, std::vector<double>{1, 1});
        CHECK(y == RealMatrix::from_rows({{11, 5.5}, {23, 10}}));
    }
    SUBCASE("random product against a triple loop") {
        const RealMatrix x = random_matrix(2, 3, rng), w = random_matrix(3, 2, rng);
        const RealMatrix y = linear(x, w, {});
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                double s = 0;
                for (std::size_t c = 0; c < 3; ++c) s += x(i, c) * w(c, j);
                CHECK(std::abs(y(i, j) - s) < 1e-15);
            }
    }
    SUBCASE("shape mismatch") {
        CHECK_ERROR_KIND(linear(RealMatrix(2, 3), RealMatrix(2, 2), {}), ErrorKind::InvalidInput);
    }
}

TEST_CASE("transposed gemm helpers agree with explicit transposes") {
    std::mt19937_64 rng(12);
    const RealMatrix a = random_matrix(4, 3, rng), b = random_matrix(4, 5, rng), c = random_matrix(6, 3, rng);
    RealMatrix at(3, 4), ct(3, 6);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) at(j, i) = a(i, j);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) ct(j, i) = c(i, j);
    RealMatrix tn(3, 5), nt(4, 6);
    matmul_tn_into(a, b, tn, false);
    matmul_nt_into(a, c, nt, false);
    CHECK(max_abs_diff(tn, matmul(at, b)) < 1e-14);
    CHECK(max_abs_diff(nt, matmul(a, ct)) < 1e-14);
    matmul_into(a, ct, nt, true);
    RealMatrix twice = matmul(a, ct);
    for (double& x : twice.values()) x *= 2.0;
    CHECK(max_abs_diff(nt, twice) < 1e-14);
}
