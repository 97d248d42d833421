#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "emcomm/metrics.hpp"
#include "emcomm/world.hpp"

using namespace emcomm;

namespace {

LanguageTable table_for(const World& world, const std::function<std::vector<std::size_t>(const ObjectType&)>& speak) {
  LanguageTable t;
  for (const ObjectType& ty : world.universe()) {
    std::vector<double> attrs(world.value_count(), 0.0);
    for (std::size_t v : ty.values) attrs[v] = 1.0;
    t.push_back({ty, attrs, speak(ty)});
  }
  return t;
}

ObjectInstance grid_instance(std::size_t h, std::size_t w, std::map<std::size_t, std::vector<std::size_t>> loc) {
  ObjectInstance inst;
  inst.grid_h = h;
  inst.grid_w = w;
  inst.dim = 1;
  inst.features.assign(h * w, 0.0);
  inst.locations = std::move(loc);
  return inst;
}

}  // namespace

TEST(LevenshteinTest, Examples) {
  EXPECT_EQ(levenshtein(std::string("ab"), std::string("ba")), 2u);
  EXPECT_EQ(levenshtein(std::string("ab"), std::string("ac")), 1u);
  EXPECT_EQ(levenshtein(std::string(""), std::string("abc")), 3u);
  EXPECT_EQ(levenshtein(std::vector<std::size_t>{1, 2}, std::vector<std::size_t>{1, 2}), 0u);
}

TEST(LevenshteinTest, MetricProperties) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::size_t> a(uniform_index(rng, 5)), b(uniform_index(rng, 5)), c(uniform_index(rng, 5));
    for (auto* v : {&a, &b, &c})
      for (auto& s : *v) s = uniform_index(rng, 3);
    EXPECT_EQ(levenshtein(a, b), levenshtein(b, a));
    EXPECT_LE(levenshtein(a, c), levenshtein(a, b) + levenshtein(b, c));
    EXPECT_LE(levenshtein(a, b), std::max(a.size(), b.size()));
  }
}

TEST(CosineTest, Examples) {
  const std::vector<double> a{1, 1, 0, 0}, b{1, 0, 1, 0}, c{0, 0, 1, 1};
  EXPECT_NEAR(cosine_distance(a, b), 0.5, 1e-15);
  EXPECT_NEAR(cosine_distance(a, c), 1.0, 1e-15);
  EXPECT_EQ(cosine_distance(a, a), 0.0);
  EXPECT_EQ(cosine_distance(b, b), cosine_distance(std::vector<double>{1, 0}, std::vector<double>{1, 0}));
  EXPECT_THROW(cosine_distance(a, std::vector<double>(4, 0.0)), ContractError);
}

TEST(SpearmanTest, TiesUseAverageRanks) {
  const std::vector<double> x{1, 2, 2, 3}, y{1, 2, 3, 3};
  EXPECT_EQ(average_ranks(x), (std::vector<double>{1, 2.5, 2.5, 4}));
  // Pearson of [1,2.5,2.5,4] and [1,2,3.5,3.5]
  EXPECT_NEAR(spearman(x, y), 5.0 / 6, 1e-12);
}

TEST(SpearmanTest, InvariantUnderMonotoneMaps) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> x(12), y(12);
    for (std::size_t k = 0; k < 12; ++k) {
      x[k] = standard_normal(rng);
      y[k] = x[k] + standard_normal(rng);
    }
    std::vector<double> fx = x;
    for (double& v : fx) v = std::exp(3 * v);
    const double r = spearman(x, y);
    EXPECT_NEAR(spearman(fx, y), r, 1e-12);
    EXPECT_LE(std::abs(r), 1.0);
  }
}

TEST(SpearmanTest, ConstantInputIsUndefined) {
  const std::vector<double> x{1, 1, 1}, y{1, 2, 3};
  EXPECT_THROW(spearman(x, y), UndefinedCorrelation);
  EXPECT_THROW(spearman(y, x), UndefinedCorrelation);
}

TEST(TopSimTest, PairCountAndDegenerateLanguage) {
  const World world = World::build(WorldSpec{}, 0);
  const auto constant = table_for(world, [](const ObjectType&) { return std::vector<std::size_t>{3, 3}; });
  const TopSimResult r = topsim(constant);
  EXPECT_EQ(r.pairs, 990u);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_THROW(topsim(LanguageTable(constant.begin(), constant.begin() + 2)), ContractError);
}

TEST(TopSimTest, CompositionalLanguageIsPerfect) {
  WorldSpec s;
  s.kind = WorldKind::product;
  s.arities = {3, 3};
  s.split_train = 2;
  s.split_eval = 1;
  const World world = World::build(s, 0);
  const auto comp = table_for(world, [](const ObjectType& t) { return t.values; });
  const TopSimResult r = topsim(comp);
  EXPECT_NEAR(r.value, 1.0, 1e-12);
  EXPECT_FALSE(r.degenerate);

  Rng rng(7);
  int beaten = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto rnd = table_for(world, [&](const ObjectType&) {
      return std::vector<std::size_t>{uniform_index(rng, 6), uniform_index(rng, 6)};
    });
    if (topsim(rnd).value >= r.value) ++beaten;
  }
  EXPECT_LT(beaten, 50);
}

TEST(TopSimTest, InvariantUnderSymbolRelabeling) {
  const World world = World::build(WorldSpec{}, 0);
  Rng rng(8);
  std::vector<std::vector<std::size_t>> msgs;
  for (std::size_t i = 0; i < world.universe().size(); ++i) msgs.push_back({uniform_index(rng, 20), uniform_index(rng, 20)});
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle(perm, rng);
  std::size_t k = 0, j = 0;
  const auto a = table_for(world, [&](const ObjectType&) { return msgs[k++]; });
  const auto b = table_for(world, [&](const ObjectType&) {
    auto m = msgs[j++];
    for (auto& s : m) s = perm[s];
    return m;
  });
  EXPECT_EQ(topsim(a).value, topsim(b).value);
}

TEST(JsdTest, ExamplesAndBounds) {
  const std::vector<double> p{1, 0}, q{0, 1}, u{0.5, 0.5};
  EXPECT_NEAR(jsd(p, q), std::log(2.0), 1e-15);
  EXPECT_NEAR(jsd(u, u), 0.0, 1e-15);
  EXPECT_EQ(jsd(p, u), jsd(u, p));
  EXPECT_THROW(jsd(p, std::vector<double>{0.5, 0.6}), ContractError);
  EXPECT_THROW(jsd(p, std::vector<double>{1.5, -0.5}), ContractError);
  EXPECT_THROW(jsd(p, std::vector<double>{1.0}), DimensionError);
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = uniform01(rng);
    for (auto& v : b) v = uniform01(rng);
    const double sa = std::accumulate(a.begin(), a.end(), 0.0), sb = std::accumulate(b.begin(), b.end(), 0.0);
    for (auto& v : a) v /= sa;
    for (auto& v : b) v /= sb;
    const double d = jsd(a, b);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, std::log(2.0));
    EXPECT_NEAR(d, jsd(b, a), 1e-15);
  }
}

TEST(DiscrepancyTest, MeanOverSymbols) {
  const Tensor s(Shape{2, 2}, std::vector<double>{1, 0, 0.5, 0.5});
  const Tensor l(Shape{2, 2}, std::vector<double>{0, 1, 0.5, 0.5});
  EXPECT_NEAR(attention_discrepancy(s, l), 0.3466, 5e-5);
  EXPECT_THROW(attention_discrepancy(s, Tensor(Shape{2, 3}, 1.0 / 3)), ContractError);
}

TEST(AssociationTest, CenterOfGravityRegions) {
  const ObjectInstance inst = grid_instance(2, 2, {{0, {0}}, {3, {3}}});
  std::vector<SymbolTrace> traces;
  traces.push_back({{1, 2}, Tensor(Shape{2, 4}, std::vector<double>{1, 0, 0, 0, 0, 0, 0, 1}), &inst});
  traces.push_back({{1, 1}, Tensor(Shape{2, 4}, std::vector<double>{0.25, 0.25, 0.25, 0.25, 0, 1, 0, 0}), &inst});
  const AssociationMatrix m = symbol_concept_map(traces, 4, 4);
  EXPECT_EQ(m.at(1, 0), 1u);
  EXPECT_EQ(m.at(2, 3), 1u);
  // uniform attention sits on the shared corner of two regions; cell 1 is empty
  EXPECT_EQ(m.unfocused(1), 2u);
  std::size_t total = 0;
  for (std::size_t s = 0; s < 4; ++s) total += m.row_sum(s);
  EXPECT_EQ(total, 4u);
  EXPECT_EQ(m.row_sum(0), 0u);
}

TEST(AssociationTest, AttentionMustCoverPatches) {
  const ObjectInstance inst = grid_instance(2, 2, {{0, {0}}});
  std::vector<SymbolTrace> traces{{{0}, Tensor(Shape{1, 1}, 1.0), &inst}};
  EXPECT_THROW(symbol_concept_map(traces, 4, 4), ContractError);
}

TEST(AssociationTest, CenterInsideMultiCellRegion) {
  const ObjectInstance inst = grid_instance(2, 4, {{2, {0, 1}}, {5, {6, 7}}});
  std::vector<SymbolTrace> traces{{{0}, Tensor(Shape{1, 8}, std::vector<double>{0.5, 0.5, 0, 0, 0, 0, 0, 0}), &inst}};
  const AssociationMatrix m = symbol_concept_map(traces, 1, 10);
  EXPECT_EQ(m.at(0, 2), 1u);
  EXPECT_EQ(m.row_sum(0), 1u);
}

TEST(KsTest, Examples) {
  const std::vector<double> a{1, 2, 3}, b{1, 2, 4}, c{5, 6};
  EXPECT_NEAR(ks_statistic(a, b).d, 1.0 / 3, 1e-15);
  EXPECT_EQ(ks_statistic(a, c).d, 1.0);
  const KsResult same = ks_statistic(a, a);
  EXPECT_EQ(same.d, 0.0);
  EXPECT_EQ(same.p, 1.0);
  EXPECT_THROW(ks_statistic(a, std::vector<double>{}), ContractError);
}

TEST(KsTest, LargeSamplesSeparateShiftedDistributions) {
  Rng rng(12);
  std::vector<double> x(2000), y(2000), z(2000);
  for (auto& v : x) v = standard_normal(rng);
  for (auto& v : y) v = standard_normal(rng);
  for (auto& v : z) v = standard_normal(rng) + 0.3;
  EXPECT_GT(ks_statistic(x, y).p, 0.001);
  EXPECT_LT(ks_statistic(x, z).p, 1e-6);
  EXPECT_NEAR(kolmogorov_tail(0.1), 1.0, 1e-15);
  EXPECT_NEAR(kolmogorov_tail(1.0), 0.2700, 1e-4);
}

TEST(RankSumTest, Examples) {
  const std::vector<double> hi{4, 5, 6}, lo{1, 2, 3};
  const RankSumResult r = rank_sum_greater(hi, lo);
  EXPECT_EQ(r.u, 9.0);
  EXPECT_NEAR(r.p, 0.05, 1e-15);
  EXPECT_NEAR(rank_sum_greater(lo, hi).p, 1.0, 1e-15);
  const std::vector<double> t{1, 1, 1};
  EXPECT_NEAR(rank_sum_greater(t, t).p, 1.0, 1e-15);
}

TEST(SummaryTest, BoxAndHistogram) {
  const BoxSummary b = box_summary({5, 3, 1, 4, 2});
  EXPECT_EQ(b.min, 1);
  EXPECT_EQ(b.q1, 2);
  EXPECT_EQ(b.median, 3);
  EXPECT_EQ(b.q3, 4);
  EXPECT_EQ(b.max, 5);
  const std::vector<double> xs{0.0, 0.1, 0.2, 0.69, 0.05};
  const auto h = normalized_histogram(xs, 0.0, std::log(2.0), 4);
  EXPECT_NEAR(std::accumulate(h.begin(), h.end(), 0.0), 1.0, 1e-15);
  EXPECT_NEAR(h[0], 0.6, 1e-15);
  EXPECT_NEAR(h[3], 0.2, 1e-15);
}
