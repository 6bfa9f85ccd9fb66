#include "blockpipe/kvcache.hpp"

#include "blockpipe/error.hpp"
#include "blockpipe/model.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>

namespace blockpipe {

std::vector<LayerKV> select_kv_rows(const std::vector<LayerKV>& kv, std::span<const std::size_t> rows) {
    std::vector<LayerKV> out;
    out.reserve(kv.size());
    for (const LayerKV& l : kv) out.push_back({l.keys.select_rows(rows), l.values.select_rows(rows)});
    return out;
}

bool Cache::contains(Position p) const noexcept {
    return std::binary_search(positions_.begin(), positions_.end(), p);
}

void Cache::append(const std::vector<LayerKV>& new_kv, const PositionList& positions) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const bool ordered = i == 0 ? (positions_.empty() || positions[0] > positions_.back())
                                    : positions[i] > positions[i - 1];
        require(ordered, ErrorKind::InvalidAppend,
                "cache append: position " + std::to_string(positions[i]) +
                    " is not beyond every committed position");
    }
    if (layers_.empty() && positions_.empty()) layers_.resize(new_kv.size());
    require(new_kv.size() == layers_.size(), ErrorKind::InvalidAppend, "cache append: layer count mismatch");
    for (std::size_t l = 0; l < new_kv.size(); ++l) {
        require(new_kv[l].keys.rows() == positions.size() && new_kv[l].values.rows() == positions.size(),
                ErrorKind::InvalidAppend, "cache append: KV rows do not match the position count");
    }
    for (std::size_t l = 0; l < new_kv.size(); ++l) {
        layers_[l].keys.append_rows(new_kv[l].keys);
        layers_[l].values.append_rows(new_kv[l].values);
    }
    positions_.insert(positions_.end(), positions.begin(), positions.end());
}

void Cache::truncate_to(std::size_t len) {
    require(len <= positions_.size(), ErrorKind::InvalidInput, "cache truncate beyond committed length");
    positions_.resize(len);
    for (LayerKV& l : layers_) {
        l.keys.truncate_rows(len);
        l.values.truncate_rows(len);
    }
}

double equivalence_check(const Weights& w, const TokenSeq& cond, const TokenSeq& action, const BlockLayout& layout,
                         int upto_block, AttentionPattern::Kind kind) {
    if (kind == AttentionPattern::Kind::Bidirectional)
        fail(ErrorKind::UnsupportedCombination,
             "equivalence_check: cached KV is not reusable under bidirectional attention");
    layout.validate();
    require(upto_block >= 1 && upto_block <= layout.num_blocks, ErrorKind::InvalidInput,
            "equivalence_check: upto_block out of range");
    const int cond_len = w.config.cond_len;
    const auto pattern = AttentionPattern::block_causal(layout);
    for (Position p = layout.block_begin(0); p < layout.block_end(upto_block - 1); ++p) {
        require(action[static_cast<std::size_t>(p - cond_len)] != w.config.mask_token, ErrorKind::InvalidInput,
                "equivalence_check: masked token inside the checked range");
    }

    auto block_positions = [&](int b) {
        PositionList p;
        for (Position i = layout.block_begin(b); i < layout.block_end(b); ++i) p.push_back(i);
        return p;
    };

    Cache cache(w.config.layers);
    RealMatrix incremental;
    for (int b = 0; b < upto_block; ++b) {
        PositionList queries;
        if (b == 0)
            for (Position i = 0; i < cond_len; ++i) queries.push_back(i);
        const PositionList blk = block_positions(b);
        queries.insert(queries.end(), blk.begin(), blk.end());
        ForwardOutput out = forward(w, nullptr, false, cond, action, pattern, b == 0 ? nullptr : &cache, queries);
        if (b + 1 == upto_block) {
            std::vector<std::size_t> rows;
            for (std::size_t r = queries.size() - blk.size(); r < queries.size(); ++r) rows.push_back(r);
            incremental = out.logits.select_rows(rows);
        } else {
            cache.append(out.new_kv, out.kv_positions);
        }
    }

    PositionList all;
    for (Position i = 0; i < layout.block_end(upto_block - 1); ++i) all.push_back(i);
    ForwardOutput mono = forward(w, nullptr, false, cond, action, pattern, nullptr, all);
    std::vector<std::size_t> rows;
    for (Position p = layout.block_begin(upto_block - 1); p < layout.block_end(upto_block - 1); ++p)
        rows.push_back(static_cast<std::size_t>(p));
    return max_abs_diff(incremental, mono.logits.select_rows(rows));
}

double kv_cosine(const LayerKV& a, const LayerKV& b) {
    require(a.keys.size() == b.keys.size() && a.values.size() == b.values.size(), ErrorKind::InvalidInput,
            "kv_cosine: snapshot shapes differ");
    double dot = 0.0, na = 0.0, nb = 0.0;
    auto acc = [&](std::span<const double> x, std::span<const double> y) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            dot += x[i] * y[i];
            na += x[i] * x[i];
            nb += y[i] * y[i];
        }
    };
    acc(a.keys.values(), b.keys.values());
    acc(a.values.values(), b.values.values());
    require(na > 0.0 && nb > 0.0, ErrorKind::UndefinedSimilarity, "kv_cosine: zero-norm snapshot");
    return dot / std::sqrt(na * nb);
}

SimilarityReport similarity_trace(const std::vector<KvSnapshot>& history) {
    require(history.size() >= 2, ErrorKind::InvalidInput, "similarity_trace: need at least two snapshots");
    const std::size_t layers = history.front().size();
    require(layers >= 1, ErrorKind::InvalidInput, "similarity_trace: snapshots carry no layers");
    for (const auto& s : history)
        require(s.size() == layers, ErrorKind::InvalidInput, "similarity_trace: inconsistent layer counts");

    const std::size_t n = history.size();
    SimilarityReport rep{RealMatrix(n, n), std::vector<RealMatrix>(layers, RealMatrix(n, n))};
    for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                const double c = kv_cosine(history[i][l], history[j][l]);
                rep.per_layer[l](i, j) = c;
                rep.per_layer[l](j, i) = c;
            }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t l = 0; l < layers; ++l) s += rep.per_layer[l](i, j);
            rep.mean(i, j) = s / static_cast<double>(layers);
        }
    return rep;
}

void write_similarity_csv(std::ostream& os, const RealMatrix& sim) {
    os << "iteration";
    for (std::size_t j = 0; j < sim.cols(); ++j) os << ',' << (j + 1);
    os << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < sim.rows(); ++i) {
        os << (i + 1);
        for (std::size_t j = 0; j < sim.cols(); ++j) os << ',' << sim(i, j);
        os << '\n';
    }
}

} // namespace blockpipe
