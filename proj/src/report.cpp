#include "blockpipe/report.hpp"

#include "blockpipe/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace blockpipe {

const BenchRow* BenchReport::row(const std::string& decoder) const {
    for (const BenchRow& r : rows)
        if (r.decoder == decoder) return &r;
    return nullptr;
}

void finalize_speedups(BenchReport& r) {
    const BenchRow* v = r.row("vanilla");
    for (BenchRow& row : r.rows) {
        row.speedup = v && v->tokens_per_second > 0 ? row.tokens_per_second / v->tokens_per_second : 0.0;
        row.pair_speedup = v && row.attention_pairs_per_sequence > 0
                               ? v->attention_pairs_per_sequence / row.attention_pairs_per_sequence
                               : 0.0;
    }
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
        i = j + 1;
    }
    return r;
}

} // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorKind::InvalidInput, "spearman: need two equal series of length >= 2");
    const std::vector<double> rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

} // namespace blockpipe
