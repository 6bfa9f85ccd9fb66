#pragma once

// Dense row-major matrices of doubles and the masked attention kernel the
// model is built on. Everything here is a pure function of its inputs except
// the per-thread attention pair counter, which exists so that the decoders'
// analytic cost accounting can be cross-checked against what actually ran.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace blockpipe {

class RealMatrix {
public:
    RealMatrix() = default;
    RealMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static RealMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    void fill(double v);
    void append_rows(const RealMatrix& other);
    void truncate_rows(std::size_t rows);
    RealMatrix select_rows(std::span<const std::size_t> idx) const;
    RealMatrix slice_cols(std::size_t begin, std::size_t count) const;
    void set_cols(std::size_t begin, const RealMatrix& block);
    bool all_finite() const noexcept;

    friend bool operator==(const RealMatrix&, const RealMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

using RealVector = std::vector<double>;

struct AttnMask {
    std::size_t q_len = 0;
    std::size_t k_len = 0;
    std::vector<std::uint8_t> allowed;

    AttnMask() = default;
    AttnMask(std::size_t q, std::size_t k, bool fill = false)
        : q_len(q), k_len(k), allowed(q * k, fill ? 1 : 0) {}

    bool at(std::size_t q, std::size_t k) const noexcept { return allowed[q * k_len + k] != 0; }
    void set(std::size_t q, std::size_t k, bool v) noexcept { allowed[q * k_len + k] = v ? 1 : 0; }
    std::uint64_t allowed_count() const noexcept;
};

RealMatrix softmax_rows(const RealMatrix& m);

/// Row-wise log-softmax, stabilized the same way as softmax_rows.
RealMatrix log_softmax_rows(const RealMatrix& m);

struct AttentionResult {
    RealMatrix output;
    RealMatrix probs; // q_len x k_len, exact zeros at disallowed entries
};

/// softmax over allowed keys of scale * q_i . k_j, applied to v.
RealMatrix masked_attention(const RealMatrix& q, const RealMatrix& k, const RealMatrix& v,
                            const AttnMask& mask, double scale);

/// Same kernel, also returning the attention weights (the training path
/// needs them for the backward pass).
AttentionResult masked_attention_with_probs(const RealMatrix& q, const RealMatrix& k,
                                            const RealMatrix& v, const AttnMask& mask,
                                            double scale);

RealMatrix linear(const RealMatrix& x, const RealMatrix& w, std::span<const double> b);

// GEMM helpers: a*b, a^T*b, a*b^T. `accumulate` adds into `out` instead of
// overwriting it; `out` must already have the right shape in that case.
RealMatrix matmul(const RealMatrix& a, const RealMatrix& b);
void matmul_into(const RealMatrix& a, const RealMatrix& b, RealMatrix& out, bool accumulate);
void matmul_tn_into(const RealMatrix& a, const RealMatrix& b, RealMatrix& out, bool accumulate);
void matmul_nt_into(const RealMatrix& a, const RealMatrix& b, RealMatrix& out, bool accumulate);

double max_abs_diff(const RealMatrix& a, const RealMatrix& b);

// Per-thread count of allowed (query, key) pairs that masked_attention has
// evaluated since the last reset.
std::uint64_t attention_pairs_evaluated() noexcept;
void reset_attention_pair_counter() noexcept;

} // namespace blockpipe
