#include "radd/errors.hpp"
#include "radd/gradcheck.hpp"
#include "radd/retriever.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <complex>
#include <numbers>
#include <numeric>

using namespace radd;
using namespace radd::retriever;

namespace {

struct Model {
  kg::ModalityFeatureStore features;
  RetrieverParams params;
};

Model make_model(std::size_t n_ent, std::size_t n_rel, std::size_t d, std::uint64_t seed) {
  Model m;
  m.features.visual = radd::testing::random_features(n_ent, 3, seed, 4);
  m.features.textual = radd::testing::random_features(n_ent, 2, seed + 100, 3);
  Rng rng(seed);
  m.params = RetrieverParams::init(n_ent, n_rel, d, 3, 2, rng);
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < m.params.gate_logits.size(); ++i) m.params.gate_logits.data()[i] = nd(rng);
  return m;
}

std::vector<double> projected(const kg::ModalityFeatures& f, const Matrix& w, const Matrix& b, const Matrix& fallback,
                              EntityId e) {
  std::vector<double> out(static_cast<std::size_t>(w.cols()));
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    if (!f.is_present(e)) {
      out[static_cast<std::size_t>(j)] = fallback(0, j);
      continue;
    }
    double acc = b(0, j);
    for (Eigen::Index i = 0; i < w.rows(); ++i) acc += f.values(e, i) * w(i, j);
    out[static_cast<std::size_t>(j)] = acc;
  }
  return out;
}

// Score by explicit complex arithmetic.
double complex_score(std::span<const double> h, std::span<const double> phases, std::span<const double> t) {
  double dist = 0.0;
  for (std::size_t j = 0; j < phases.size(); ++j) {
    const std::complex<double> hc(h[2 * j], h[2 * j + 1]), tc(t[2 * j], t[2 * j + 1]);
    dist += std::abs(hc * std::polar(1.0, phases[j]) - tc);
  }
  return -dist;
}

std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

TEST(Fuse, UniformGateAveragesModalities) {
  auto m = make_model(6, 2, 3, 1);
  m.params.gate_logits.setZero();
  for (EntityId e = 0; e < 6; ++e) {
    const auto out = fuse_joint(m.params, e, 1, m.features);
    const auto v = projected(m.features.visual, m.params.proj_visual, m.params.bias_visual, m.params.default_visual, e);
    const auto t =
        projected(m.features.textual, m.params.proj_textual, m.params.bias_textual, m.params.default_textual, e);
    for (Eigen::Index j = 0; j < out.size(); ++j)
      EXPECT_NEAR(out(j), (m.params.structural(e, j) + v[static_cast<std::size_t>(j)] + t[static_cast<std::size_t>(j)]) / 3.0,
                  1e-12);
  }
}

TEST(Fuse, SaturatedGateSelectsStructure) {
  auto m = make_model(5, 1, 4, 2);
  m.params.gate_logits << 20.0, -20.0, -20.0;
  for (EntityId e = 0; e < 5; ++e) {
    const auto out = fuse_joint(m.params, e, 0, m.features);
    for (Eigen::Index j = 0; j < out.size(); ++j) EXPECT_NEAR(out(j), m.params.structural(e, j), 1e-6);
  }
}

TEST(Fuse, HandComputedSingleComponent) {
  RetrieverParams p;
  p.dim = 1;
  p.structural = Matrix(1, 2);
  p.structural << 1.0, 2.0;
  p.relation_phase = Matrix::Zero(1, 1);
  p.gate_logits = Matrix(1, 3);
  p.gate_logits << 1.0, 0.0, 0.0;
  p.proj_visual = Matrix(1, 2);
  p.proj_visual << 2.0, 0.0;
  p.bias_visual = Matrix::Zero(1, 2);
  p.proj_textual = Matrix(1, 2);
  p.proj_textual << 0.0, 1.0;
  p.bias_textual = Matrix(1, 2);
  p.bias_textual << 0.5, 0.5;
  p.default_visual = Matrix::Zero(1, 2);
  p.default_textual = Matrix::Zero(1, 2);
  kg::ModalityFeatureStore f;
  f.visual.dim = 1;
  f.visual.present = {1};
  f.visual.values = Matrix::Constant(1, 1, 3.0);
  f.textual.dim = 1;
  f.textual.present = {1};
  f.textual.values = Matrix::Constant(1, 1, -1.0);
  // alpha = (e, 1, 1) / (e + 2); visual = (6, 0); textual = (0.5, -0.5)
  const double e = std::exp(1.0), z = e + 2.0;
  const auto out = fuse_joint(p, 0, 0, f);
  EXPECT_NEAR(out(0), (e * 1.0 + 6.0 + 0.5) / z, 1e-12);
  EXPECT_NEAR(out(1), (e * 2.0 + 0.0 - 0.5) / z, 1e-12);
}

TEST(Fuse, AbsentModalityUsesDefault) {
  auto m = make_model(6, 1, 2, 3);
  ASSERT_FALSE(m.features.visual.is_present(1));
  m.params.gate_logits << -30.0, 30.0, -30.0;
  const auto out = fuse_joint(m.params, 1, 0, m.features);
  for (Eigen::Index j = 0; j < out.size(); ++j) EXPECT_NEAR(out(j), m.params.default_visual(0, j), 1e-9);
}

TEST(Fuse, StructureOnlyPinsGate) {
  auto m = make_model(4, 2, 2, 4);
  m.params.structure_only = true;
  const auto a = gate_weights(m.params, 1);
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a[1], 0.0);
  EXPECT_EQ(a[2], 0.0);
  const auto out = fuse_joint(m.params, 3, 1, m.features);
  for (Eigen::Index j = 0; j < out.size(); ++j) EXPECT_EQ(out(j), m.params.structural(3, j));
}

TEST(Fuse, CachedFusionMatchesDirect) {
  auto m = make_model(9, 3, 3, 5);
  FusedEntities fused(m.params, m.features);
  for (EntityId e = 0; e < 9; ++e)
    for (kg::RelationId r = 0; r < 3; ++r) EXPECT_TRUE(fused.joint(e, r).isApprox(fuse_joint(m.params, e, r, m.features), 1e-14));
}

TEST(GateProperty, SimplexForRandomLogits) {
  Rng rng(9);
  std::normal_distribution<double> nd(0.0, 10.0);
  RetrieverParams p;
  p.gate_logits = Matrix(100, 3);
  for (Eigen::Index i = 0; i < p.gate_logits.size(); ++i) p.gate_logits.data()[i] = nd(rng);
  for (kg::RelationId r = 0; r < 100; ++r) {
    const auto a = gate_weights(p, r);
    EXPECT_NEAR(a[0] + a[1] + a[2], 1.0, 1e-9);
    for (double v : a) EXPECT_GE(v, 0.0);
  }
}

TEST(RotateScore, IdentityRotation) {
  const std::vector<double> h{0.3, -1.2, 2.0, 0.5};
  EXPECT_EQ(rotate_score_with_phases(h, std::vector<double>{0.0, 0.0}, h), 0.0);
}

TEST(RotateScore, HalfTurn) {
  const std::vector<double> h{1.0, 0.0}, t{-1.0, 0.0};
  EXPECT_NEAR(rotate_score_with_phases(h, std::vector<double>{std::numbers::pi}, t), 0.0, 1e-15);
}

TEST(RotateScore, MatchesComplexArithmetic) {
  Rng rng(12);
  std::normal_distribution<double> nd;
  for (int k = 0; k < 20; ++k) {
    std::vector<double> h(4), t(4), ph(2);
    for (auto& v : h) v = nd(rng);
    for (auto& v : t) v = nd(rng);
    for (auto& v : ph) v = 3.0 * nd(rng);
    EXPECT_NEAR(rotate_score_with_phases(h, ph, t), complex_score(h, ph, t), 1e-12);
  }
}

TEST(RotateScore, NonPositiveAndInverseSymmetric) {
  Rng rng(13);
  std::normal_distribution<double> nd;
  for (int k = 0; k < 200; ++k) {
    const std::size_t d = 1 + static_cast<std::size_t>(k % 5);
    std::vector<double> h(2 * d), t(2 * d), ph(d), neg(d);
    for (auto& v : h) v = nd(rng);
    for (auto& v : t) v = nd(rng);
    for (std::size_t j = 0; j < d; ++j) neg[j] = -(ph[j] = 4.0 * nd(rng));
    const double s = rotate_score_with_phases(h, ph, t);
    EXPECT_LE(s, 0.0);
    EXPECT_NEAR(s, rotate_score_with_phases(t, neg, h), 1e-12);
  }
}

TEST(RotateScore, ZeroOnlyWhenRotationMatches) {
  const std::vector<double> h{0.6, 0.8};
  const double theta = 0.7;
  const std::vector<double> t{0.6 * std::cos(theta) - 0.8 * std::sin(theta), 0.6 * std::sin(theta) + 0.8 * std::cos(theta)};
  EXPECT_NEAR(rotate_score_with_phases(h, std::vector<double>{theta}, t), 0.0, 1e-15);
  EXPECT_LT(rotate_score_with_phases(h, std::vector<double>{theta + 0.01}, t), 0.0);
}

TEST(ScoreAll, ConsistentWithPerEntityScoring) {
  auto m = make_model(20, 3, 3, 14);
  for (kg::Direction dir : {kg::Direction::Tail, kg::Direction::Head}) {
    const kg::Query q{4, 2, dir, 0};
    const auto scores = score_all(m.params, q, m.features);
    ASSERT_EQ(scores.size(), 20u);
    const Vector known = fuse_joint(m.params, 4, 2, m.features);
    std::vector<double> phases(m.params.relation_phase.row(2).data(), m.params.relation_phase.row(2).data() + 3);
    std::size_t best = 0;
    for (EntityId e = 0; e < 20; ++e) {
      const Vector other = fuse_joint(m.params, e, 2, m.features);
      const double oracle = dir == kg::Direction::Tail ? complex_score(as_span(known), phases, as_span(other))
                                                       : complex_score(as_span(other), phases, as_span(known));
      EXPECT_NEAR(scores[static_cast<std::size_t>(e)], oracle, 1e-12);
      const double direct = dir == kg::Direction::Tail ? rotate_score(as_span(known), 2, as_span(other), m.params)
                                                       : rotate_score(as_span(other), 2, as_span(known), m.params);
      EXPECT_NEAR(scores[static_cast<std::size_t>(e)], direct, 1e-12);
      if (oracle > scores[best]) best = static_cast<std::size_t>(e);
    }
    EXPECT_EQ(std::max_element(scores.begin(), scores.end()) - scores.begin(), static_cast<std::ptrdiff_t>(best));
  }
}

TEST(ScoreAll, SingleEntity) {
  auto m = make_model(1, 1, 2, 15);
  m.features.visual = kg::ModalityFeatures::absent(1, 3);
  m.features.textual = kg::ModalityFeatures::absent(1, 2);
  EXPECT_EQ(score_all(m.params, kg::Query{0, 0, kg::Direction::Tail, 0}, m.features).size(), 1u);
}

TEST(ScoreAll, PermutationEquivariant) {
  auto m = make_model(12, 2, 3, 16);
  std::vector<EntityId> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(17);
  std::shuffle(perm.begin(), perm.end(), rng);
  // entity e of the original becomes perm[e] in the relabelled model
  Model r = m;
  for (EntityId e = 0; e < 12; ++e) {
    r.params.structural.row(perm[e]) = m.params.structural.row(e);
    r.features.visual.values.row(perm[e]) = m.features.visual.values.row(e);
    r.features.visual.present[static_cast<std::size_t>(perm[e])] = m.features.visual.present[static_cast<std::size_t>(e)];
    r.features.textual.values.row(perm[e]) = m.features.textual.values.row(e);
    r.features.textual.present[static_cast<std::size_t>(perm[e])] = m.features.textual.present[static_cast<std::size_t>(e)];
  }
  const auto a = score_all(m.params, kg::Query{5, 1, kg::Direction::Head, 0}, m.features);
  const auto b = score_all(r.params, kg::Query{perm[5], 1, kg::Direction::Head, 0}, r.features);
  for (EntityId e = 0; e < 12; ++e) EXPECT_NEAR(a[static_cast<std::size_t>(e)], b[static_cast<std::size_t>(perm[e])], 1e-12);
}

TEST(TopK, ArgmaxWithLowestIdOnTies) {
  const std::vector<double> s{0.1, 0.9, 0.5, 0.9};
  const auto sl = topk_shortlist(s, 1);
  EXPECT_EQ(sl.entity_ids, (std::vector<EntityId>{1}));
}

TEST(TopK, FullSortAndOracle) {
  Rng rng(18);
  std::uniform_int_distribution<int> coarse(0, 20);  // plenty of ties
  std::vector<double> s(100);
  for (auto& v : s) v = coarse(rng) * 0.5;
  std::vector<EntityId> oracle(100);
  std::iota(oracle.begin(), oracle.end(), 0);
  std::stable_sort(oracle.begin(), oracle.end(), [&](EntityId a, EntityId b) { return s[a] > s[b]; });
  EXPECT_EQ(topk_shortlist(s, 100).entity_ids, oracle);
  const auto ten = topk_shortlist(s, 10);
  EXPECT_EQ(ten.entity_ids, std::vector<EntityId>(oracle.begin(), oracle.begin() + 10));
  EXPECT_TRUE(std::is_sorted(ten.scores.rbegin(), ten.scores.rend()));
  EXPECT_TRUE(ten.contains(oracle[3]));
  EXPECT_FALSE(ten.contains(oracle[50]));
}

TEST(TopK, OutOfRange) {
  const std::vector<double> s{1.0, 2.0};
  EXPECT_THROW(topk_shortlist(s, 0), std::out_of_range);
  EXPECT_THROW(topk_shortlist(s, 3), std::out_of_range);
}

TEST(Negatives, TwoEntities) {
  Rng rng(1);
  const auto n = sample_negatives(2, kg::Triple{0, 0, 1}, kg::Direction::Tail, 50, rng);
  for (EntityId e : n) EXPECT_EQ(e, 0);
}

TEST(Negatives, CountAndUniformity) {
  Rng rng(2);
  EXPECT_EQ(sample_negatives(100, kg::Triple{3, 0, 7}, kg::Direction::Head, 128, rng).size(), 128u);
  const auto draws = sample_negatives(10, kg::Triple{3, 0, 7}, kg::Direction::Head, 100000, rng);
  std::vector<double> freq(10, 0.0);
  for (EntityId e : draws) freq[static_cast<std::size_t>(e)] += 1.0 / 100000.0;
  EXPECT_EQ(freq[3], 0.0);  // the head is the answer for head corruption
  for (int e = 0; e < 10; ++e)
    if (e != 3) EXPECT_NEAR(freq[static_cast<std::size_t>(e)], 1.0 / 9.0, 0.02);
}

TEST(KgeLoss, MatchesClosedForm) {
  auto m = make_model(10, 2, 3, 19);
  FusedEntities fused(m.params, m.features);
  const kg::Triple pos{1, 1, 4};
  const std::vector<EntityId> negs{0, 2, 7, 9};
  auto sp = [](double x) { return std::log1p(std::exp(x)); };
  for (double alpha : {0.0, 1.0}) {
    const auto r = kge_loss(fused, pos, kg::Direction::Tail, negs, 6.0, alpha);
    std::vector<double> w(negs.size());
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) z += w[i] = std::exp(alpha * r.negative_scores[i]);
    double expect = sp(-(6.0 + r.positive_score));
    for (std::size_t i = 0; i < w.size(); ++i) expect += w[i] / z * sp(r.negative_scores[i] + 6.0);
    EXPECT_NEAR(r.loss, expect, 1e-12);
    EXPECT_NEAR(r.positive_score, score_triple(fused, 1, 1, 4), 0.0);
  }
}

TEST(KgeLoss, SaturatesTowardZero) {
  // the positive is an exact rotation (score 0) and negatives are far away
  RetrieverParams p;
  p.dim = 1;
  p.structure_only = true;
  p.structural = Matrix(3, 2);
  p.structural << 1.0, 0.0, 1.0, 0.0, 1e4, 0.0;
  p.relation_phase = Matrix::Zero(1, 1);
  p.gate_logits = Matrix::Zero(1, 3);
  p.proj_visual = Matrix::Zero(0, 2);
  p.proj_textual = Matrix::Zero(0, 2);
  p.bias_visual = p.bias_textual = p.default_visual = p.default_textual = Matrix::Zero(1, 2);
  kg::ModalityFeatureStore f{kg::ModalityFeatures::absent(3), kg::ModalityFeatures::absent(3)};
  FusedEntities fused(p, f);
  const std::vector<EntityId> negs{2};
  const auto r = kge_loss(fused, kg::Triple{0, 0, 1}, kg::Direction::Tail, negs, 40.0, 1.0);
  EXPECT_LT(r.loss, 1e-15);
}

TEST(RankLoss, Examples) {
  EXPECT_EQ(rank_margin_loss(5.0, 1.0, 4.0).loss, 0.0);
  const auto at_kink = rank_margin_loss(5.0, 1.0, 4.0);
  EXPECT_EQ(at_kink.grad_positive, 0.0);
  const auto active = rank_margin_loss(0.0, 0.0, 4.0);
  EXPECT_EQ(active.loss, 4.0);
  EXPECT_EQ(active.grad_positive, -1.0);
  EXPECT_EQ(active.grad_negative, 1.0);
  const auto inactive = rank_margin_loss(10.0, 0.0, 4.0);
  EXPECT_EQ(inactive.loss, 0.0);
  EXPECT_EQ(inactive.grad_positive, 0.0);
  EXPECT_EQ(inactive.grad_negative, 0.0);
}

TEST(HardNegatives, Examples) {
  const std::vector<double> s{5.0, 1.0, 4.0, 3.0, 2.0};
  EXPECT_EQ(hard_negatives(s, 0, 2), (std::vector<EntityId>{2, 3}));
  EXPECT_EQ(hard_negatives(s, 2, 1), (std::vector<EntityId>{0}));
  EXPECT_THROW(hard_negatives(s, 0, 5), std::out_of_range);
}

TEST(HardNegatives, MatchesSortOracle) {
  Rng rng(20);
  std::uniform_int_distribution<int> coarse(0, 30);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> s(40);
    for (auto& v : s) v = coarse(rng);
    const EntityId answer = static_cast<EntityId>(k % 40);
    std::vector<EntityId> oracle;
    for (EntityId e = 0; e < 40; ++e)
      if (e != answer) oracle.push_back(e);
    std::stable_sort(oracle.begin(), oracle.end(), [&](EntityId a, EntityId b) { return s[a] > s[b]; });
    oracle.resize(7);
    EXPECT_EQ(hard_negatives(s, answer, 7), oracle);
  }
}

TEST(Gradients, KgeAndRankPassFiniteDifferences) {
  gradcheck::Options o;
  const auto reports = gradcheck::run_gradchecks(o);
  for (const auto& r : reports) {
    if (r.term != "kge" && r.term != "rank") continue;
    EXPECT_TRUE(r.passed) << r.term << " " << r.max_relative_error;
    EXPECT_LT(r.max_relative_error, 1e-5) << r.term;
  }
}
