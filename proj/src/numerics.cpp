#include "blockpipe/numerics.hpp"

#include "blockpipe/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace blockpipe {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_eigen(RealMatrix& m) {
    return MapMat(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

CMapMat as_eigen(const RealMatrix& m) {
    return CMapMat(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

thread_local std::uint64_t g_attention_pairs = 0;

std::string shape_str(const RealMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace

RealMatrix RealMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    RealMatrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        require(row.size() == c, ErrorKind::InvalidInput, "ragged row initializer");
        std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
}

void RealMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void RealMatrix::append_rows(const RealMatrix& other) {
    if (other.rows_ == 0) return;
    if (rows_ == 0 && cols_ == 0) cols_ = other.cols_;
    require(other.cols_ == cols_, ErrorKind::InvalidInput,
            "append_rows: column mismatch " + shape_str(*this) + " vs " + shape_str(other));
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
}

void RealMatrix::truncate_rows(std::size_t rows) {
    require(rows <= rows_, ErrorKind::InvalidInput, "truncate_rows beyond current size");
    rows_ = rows;
    data_.resize(rows_ * cols_);
}

RealMatrix RealMatrix::select_rows(std::span<const std::size_t> idx) const {
    RealMatrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

RealMatrix RealMatrix::slice_cols(std::size_t begin, std::size_t count) const {
    RealMatrix out(rows_, count);
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* src = data_.data() + r * cols_ + begin;
        std::copy(src, src + count, out.row(r).begin());
    }
    return out;
}

void RealMatrix::set_cols(std::size_t begin, const RealMatrix& block) {
    for (std::size_t r = 0; r < rows_; ++r) {
        auto src = block.row(r);
        std::copy(src.begin(), src.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + begin));
    }
}

bool RealMatrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t AttnMask::allowed_count() const noexcept {
    return static_cast<std::uint64_t>(std::count(allowed.begin(), allowed.end(), std::uint8_t{1}));
}

RealMatrix softmax_rows(const RealMatrix& m) {
    require(m.all_finite(), ErrorKind::InvalidInput, "softmax_rows: non-finite input");
    RealMatrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (double& v : o) v /= sum;
    }
    return out;
}

RealMatrix log_softmax_rows(const RealMatrix& m) {
    require(m.all_finite(), ErrorKind::InvalidInput, "log_softmax_rows: non-finite input");
    RealMatrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (double v : in) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
    }
    return out;
}

AttentionResult masked_attention_with_probs(const RealMatrix& q, const RealMatrix& k,
                                            const RealMatrix& v, const AttnMask& mask,
                                            double scale) {
    require(q.rows() == mask.q_len && k.rows() == mask.k_len && v.rows() == mask.k_len,
            ErrorKind::InvalidInput, "masked_attention: mask shape does not match q/k/v");
    require(q.cols() == k.cols(), ErrorKind::InvalidInput, "masked_attention: q/k width mismatch");

    const std::size_t nq = q.rows();
    const std::size_t nk = k.rows();
    AttentionResult res{RealMatrix(nq, v.cols()), RealMatrix(nq, nk)};
    std::uint64_t pairs = 0;
    if (nq == 0) return res;
    if (nk > 0) as_eigen(res.probs).noalias() = scale * (as_eigen(q) * as_eigen(k).transpose());

    for (std::size_t i = 0; i < nq; ++i) {
        auto p = res.probs.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t allowed = 0;
        for (std::size_t j = 0; j < nk; ++j) {
            if (!mask.at(i, j)) continue;
            mx = std::max(mx, p[j]);
            ++allowed;
        }
        if (allowed == 0)
            fail(ErrorKind::InvalidMask, "masked_attention: query row " + std::to_string(i) +
                                             " has no allowed keys");
        pairs += allowed;

        double sum = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
            if (mask.at(i, j)) {
                p[j] = std::exp(p[j] - mx);
                sum += p[j];
            } else {
                p[j] = 0.0; // exactly zero weight
            }
        }
        for (std::size_t j = 0; j < nk; ++j) p[j] /= sum;
    }
    as_eigen(res.output).noalias() = as_eigen(res.probs) * as_eigen(v);
    g_attention_pairs += pairs;
    return res;
}

RealMatrix masked_attention(const RealMatrix& q, const RealMatrix& k, const RealMatrix& v,
                            const AttnMask& mask, double scale) {
    return masked_attention_with_probs(q, k, v, mask, scale).output;
}

RealMatrix linear(const RealMatrix& x, const RealMatrix& w, std::span<const double> b) {
    require(x.cols() == w.rows(), ErrorKind::InvalidInput,
            "linear: x is " + shape_str(x) + " but w is " + shape_str(w));
    require(b.empty() || b.size() == w.cols(), ErrorKind::InvalidInput, "linear: bias length mismatch");
    RealMatrix out = matmul(x, w);
    if (!b.empty()) {
        for (std::size_t r = 0; r < out.rows(); ++r) {
            auto o = out.row(r);
            for (std::size_t c = 0; c < o.size(); ++c) o[c] += b[c];
        }
    }
    return out;
}

RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
    RealMatrix out(a.rows(), b.cols());
    matmul_into(a, b, out, false);
    return out;
}

void matmul_into(const RealMatrix& a, const RealMatrix& b, RealMatrix& out, bool accumulate) {
    require(a.cols() == b.rows(), ErrorKind::InvalidInput,
            "matmul: " + shape_str(a) + " * " + shape_str(b));
    if (!accumulate) out = RealMatrix(a.rows(), b.cols());
    if (a.rows() == 0 || b.cols() == 0) return;
    if (a.cols() == 0) return;
    as_eigen(out).noalias() += as_eigen(a) * as_eigen(b);
}

void matmul_tn_into(const RealMatrix& a, const RealMatrix& b, RealMatrix& out, bool accumulate) {
    require(a.rows() == b.rows(), ErrorKind::InvalidInput,
            "matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
    if (!accumulate) out = RealMatrix(a.cols(), b.cols());
    if (a.rows() == 0) return;
    as_eigen(out).noalias() += as_eigen(a).transpose() * as_eigen(b);
}

void matmul_nt_into(const RealMatrix& a, const RealMatrix& b, RealMatrix& out, bool accumulate) {
    require(a.cols() == b.cols(), ErrorKind::InvalidInput,
            "matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    if (!accumulate) out = RealMatrix(a.rows(), b.rows());
    if (a.rows() == 0 || b.rows() == 0) return;
    as_eigen(out).noalias() += as_eigen(a) * as_eigen(b).transpose();
}

double max_abs_diff(const RealMatrix& a, const RealMatrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::InvalidInput,
            "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

std::uint64_t attention_pairs_evaluated() noexcept { return g_attention_pairs; }

void reset_attention_pair_counter() noexcept { g_attention_pairs = 0; }

} // namespace blockpipe
