#pragma once

// Language and attention analysis: topographic similarity, attention
// discrepancy, symbol-concept association, and sample comparisons.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "emcomm/tensor.hpp"
#include "emcomm/world.hpp"

namespace emcomm {

struct UndefinedCorrelation : NumericError {
  using NumericError::NumericError;
};

// ---------------------------------------------------------------------------
// Distances

/// Unit-cost edit distance.
template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  const std::size_t n = std::size(a), m = std::size(b);
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  auto ia = std::begin(a);
  for (std::size_t i = 1; i <= n; ++i, ++ia) {
    cur[0] = i;
    auto ib = std::begin(b);
    for (std::size_t j = 1; j <= m; ++j, ++ib) {
      const std::size_t sub = prev[j - 1] + (*ia == *ib ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

/// 1 - cos(v1, v2); both vectors must be nonzero.
inline double cosine_distance(std::span<const double> v1, std::span<const double> v2) {
  if (v1.size() != v2.size()) throw DimensionError("cosine_distance: length mismatch");
  double dot = 0.0, n1 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < v1.size(); ++i) {
    dot += v1[i] * v2[i];
    n1 += v1[i] * v1[i];
    n2 += v2[i] * v2[i];
  }
  if (n1 == 0.0 || n2 == 0.0) throw ContractError("cosine_distance: zero vector");
  return 1.0 - dot / std::sqrt(n1 * n2);
}

// ---------------------------------------------------------------------------
// Correlation

/// 1-based ranks; tied values share the mean of their ranks.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return xs[i] < xs[j]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DimensionError("pearson: length mismatch");
  if (xs.size() < 2) throw ContractError("pearson: need at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Pearson correlation of average ranks.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DimensionError("spearman: length mismatch");
  if (xs.size() < 2) throw ContractError("spearman: need at least two points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

// ---------------------------------------------------------------------------
// Topographic similarity

struct LanguageEntry {
  ObjectType type;
  std::vector<double> attributes;  // multi-hot over attribute values
  std::vector<std::size_t> message;
};

using LanguageTable = std::vector<LanguageEntry>;

struct TopSimResult {
  double value = 0.0;
  bool degenerate = false;
  std::size_t pairs = 0;
};

/// Spearman correlation between pairwise cosine distances of attribute
/// vectors and pairwise edit distances of messages, over unordered pairs.
inline TopSimResult topsim(const LanguageTable& table) {
  if (table.size() < 3) throw ContractError("topsim: need at least 3 object types");
  std::vector<double> dobj, dmsg;
  for (std::size_t i = 0; i < table.size(); ++i) {
    for (std::size_t j = i + 1; j < table.size(); ++j) {
      dobj.push_back(cosine_distance(table[i].attributes, table[j].attributes));
      dmsg.push_back(static_cast<double>(levenshtein(table[i].message, table[j].message)));
    }
  }
  TopSimResult r;
  r.pairs = dobj.size();
  try {
    r.value = spearman(dobj, dmsg);
  } catch (const UndefinedCorrelation&) {
    r.degenerate = true;
    r.value = 0.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Attention discrepancy

/// Jensen-Shannon divergence in nats; bounded by ln 2.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("jsd: length mismatch");
  auto check = [](std::span<const double> v, const char* name) {
    double s = 0.0;
    for (double x : v) {
      if (x < 0.0 || !std::isfinite(x)) throw ContractError(std::string("jsd: ") + name + " has invalid entries");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-6) throw ContractError(std::string("jsd: ") + name + " is not normalized");
  };
  check(p, "p");
  check(q, "q");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) d += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) d += 0.5 * q[i] * std::log(q[i] / m);
  }
  return std::clamp(d, 0.0, std::log(2.0));
}

/// Mean over symbols of JSD between speaker and listener attention rows.
inline double attention_discrepancy(const Tensor& speaker, const Tensor& listener) {
  if (speaker.rank() != 2 || speaker.shape != listener.shape) {
    throw ContractError("attention_discrepancy: shapes " + shape_str(speaker.shape) + " and " +
                        shape_str(listener.shape) + " differ");
  }
  const std::size_t t_len = speaker.dim(0), a = speaker.dim(1);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    total += jsd(std::span<const double>(speaker.data.data() + t * a, a),
                 std::span<const double>(listener.data.data() + t * a, a));
  }
  return total / static_cast<double>(t_len);
}

// ---------------------------------------------------------------------------
// Symbol-concept association

struct AssociationMatrix {
  std::size_t symbols = 0;
  std::size_t concepts = 0;
  std::vector<std::size_t> counts;  // symbols x (concepts + 1); last column is "unfocused"

  AssociationMatrix(std::size_t num_symbols, std::size_t num_concepts)
      : symbols(num_symbols), concepts(num_concepts), counts(num_symbols * (num_concepts + 1), 0) {}

  std::size_t& at(std::size_t symbol, std::size_t concept_id) { return counts[symbol * (concepts + 1) + concept_id]; }
  std::size_t at(std::size_t symbol, std::size_t concept_id) const {
    return counts[symbol * (concepts + 1) + concept_id];
  }
  std::size_t& unfocused(std::size_t symbol) { return at(symbol, concepts); }
  std::size_t unfocused(std::size_t symbol) const { return at(symbol, concepts); }
  std::size_t row_sum(std::size_t symbol) const {
    std::size_t s = 0;
    for (std::size_t c = 0; c <= concepts; ++c) s += at(symbol, c);
    return s;
  }
};

struct SymbolTrace {
  std::vector<std::size_t> message;  // T symbols
  Tensor attention;                  // [T, A], one row per symbol
  const ObjectInstance* instance = nullptr;
};

struct GridPoint {
  double row = 0.0;
  double col = 0.0;
};

/// Attention-weighted mean patch coordinate (patch centers at integer
/// row/col positions).
inline GridPoint center_of_gravity(std::span<const double> weights, std::size_t grid_w) {
  GridPoint g;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    g.row += weights[i] * static_cast<double>(i / grid_w);
    g.col += weights[i] * static_cast<double>(i % grid_w);
  }
  return g;
}

/// True when `p` lies in the closed unit cell of any listed patch.
inline bool inside_region(GridPoint p, std::span<const std::size_t> cells, std::size_t grid_w) {
  constexpr double tol = 1e-9;
  for (std::size_t cell : cells) {
    const double r = static_cast<double>(cell / grid_w), c = static_cast<double>(cell % grid_w);
    if (std::abs(p.row - r) <= 0.5 + tol && std::abs(p.col - c) <= 0.5 + tol) return true;
  }
  return false;
}

/// Counts, for every symbol occurrence, the attribute value whose region
/// contains the attention's center of gravity, or "unfocused" when no single
/// region does.
inline AssociationMatrix symbol_concept_map(std::span<const SymbolTrace> traces, std::size_t vocab,
                                            std::size_t concepts) {
  AssociationMatrix m(vocab, concepts);
  for (const SymbolTrace& tr : traces) {
    if (tr.instance == nullptr) throw ContractError("symbol_concept_map: trace without instance");
    const ObjectInstance& inst = *tr.instance;
    if (tr.attention.rank() != 2 || tr.attention.dim(0) != tr.message.size() ||
        tr.attention.dim(1) != inst.patches()) {
      throw ContractError("symbol_concept_map: attention " + shape_str(tr.attention.shape) +
                          " does not cover the instance's " + std::to_string(inst.patches()) + " patches");
    }
    const std::size_t a = inst.patches();
    for (std::size_t t = 0; t < tr.message.size(); ++t) {
      const std::size_t sym = tr.message[t];
      if (sym >= vocab) throw ContractError("symbol_concept_map: symbol outside vocabulary");
      const GridPoint g = center_of_gravity(std::span<const double>(tr.attention.data.data() + t * a, a), inst.grid_w);
      std::size_t hits = 0, hit = 0;
      for (const auto& [value, cells] : inst.locations) {
        if (inside_region(g, cells, inst.grid_w)) {
          ++hits;
          hit = value;
        }
      }
      if (hits == 1 && hit < concepts) {
        ++m.at(sym, hit);
      } else {
        ++m.unfocused(sym);
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Sample comparisons

struct KsResult {
  double d = 0.0;
  double p = 1.0;
};

/// Asymptotic Kolmogorov distribution tail Q(lambda).
inline double kolmogorov_tail(double lambda) {
  if (lambda < 0.2) return 1.0;
  double sum = 0.0, sign = 1.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = sign * std::exp(-2.0 * j * j * lambda * lambda);
    sum += term;
    if (std::abs(term) < 1e-16) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// Two-sample Kolmogorov-Smirnov statistic with asymptotic p-value.
inline KsResult ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("ks_statistic: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
  }
  KsResult r;
  r.d = d;
  const double en = std::sqrt(n * m / (n + m));
  r.p = kolmogorov_tail((en + 0.12 + 0.11 / en) * d);
  return r;
}

struct RankSumResult {
  double u = 0.0;  // Mann-Whitney U of the first sample
  double p = 1.0;  // one-sided: first sample stochastically greater
};

/// One-sided Wilcoxon rank-sum test. The null distribution is enumerated
/// exactly over the pooled (mid)ranks.
inline RankSumResult rank_sum_greater(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("rank_sum: empty sample");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto ranks = average_ranks(pooled);
  const std::size_t n = a.size(), total = pooled.size();
  // Doubled midranks are integers.
  std::vector<std::size_t> r2(total);
  for (std::size_t i = 0; i < total; ++i) r2[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
  std::size_t observed = 0;
  for (std::size_t i = 0; i < n; ++i) observed += r2[i];
  const std::size_t max_sum = std::accumulate(r2.begin(), r2.end(), std::size_t{0});
  // ways[k][s]: number of k-subsets with doubled rank sum s (as doubles to avoid overflow).
  std::vector<std::vector<double>> ways(n + 1, std::vector<double>(max_sum + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t idx = 0; idx < total; ++idx) {
    for (std::size_t k = std::min(n, idx + 1); k-- > 0;) {
      for (std::size_t s = max_sum - r2[idx] + 1; s-- > 0;) {
        if (ways[k][s] != 0.0) ways[k + 1][s + r2[idx]] += ways[k][s];
      }
    }
  }
  double all = 0.0, tail = 0.0;
  for (std::size_t s = 0; s <= max_sum; ++s) {
    all += ways[n][s];
    if (s >= observed) tail += ways[n][s];
  }
  RankSumResult r;
  r.u = static_cast<double>(observed) / 2.0 - static_cast<double>(n * (n + 1)) / 2.0;
  r.p = tail / all;
  return r;
}

// ---------------------------------------------------------------------------
// Order statistics

/// Linear-interpolated quantile of sorted data (numpy's default rule).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractError("quantile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct BoxSummary {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

inline BoxSummary box_summary(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return {values.front(), quantile_sorted(values, 0.25), quantile_sorted(values, 0.5),
          quantile_sorted(values, 0.75), values.back()};
}

/// Frequencies over `bins` equal-width bins on [lo, hi], normalized to sum 1.
inline std::vector<double> normalized_histogram(std::span<const double> xs, double lo, double hi, std::size_t bins) {
  std::vector<double> h(bins, 0.0);
  if (xs.empty()) return h;
  for (double x : xs) {
    auto k = static_cast<std::ptrdiff_t>(std::floor((x - lo) / (hi - lo) * static_cast<double>(bins)));
    k = std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    h[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double& v : h) v /= static_cast<double>(xs.size());
  return h;
}

}  // namespace emcomm
