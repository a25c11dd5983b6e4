#include "radd/retriever.hpp"

#include "radd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace radd::retriever {

namespace {

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// out = feature * W + b, accumulated in a fixed order.
void project(std::span<const double> feature, const Matrix& w, const Matrix& b, std::span<double> out) {
  for (Eigen::Index j = 0; j < w.cols(); ++j) out[static_cast<std::size_t>(j)] = b(0, j);
  for (std::size_t i = 0; i < feature.size(); ++i) {
    const double f = feature[i];
    const double* wrow = w.data() + static_cast<Eigen::Index>(i) * w.cols();
    for (Eigen::Index j = 0; j < w.cols(); ++j) out[static_cast<std::size_t>(j)] += f * wrow[j];
  }
}

void combine(const std::array<double, 3>& alpha, std::span<const double> s, std::span<const double> v,
             std::span<const double> t, std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = alpha[0] * s[j] + alpha[1] * v[j] + alpha[2] * t[j];
}

// -sum_j |rot(h)_j - t_j|, rot(h) = h * (cos, sin) in complex arithmetic.
// `rot` holds the relation as interleaved (cos, sin) pairs.
double rotated_distance_score(std::span<const double> h, const double* rot, std::span<const double> t,
                              std::size_t d) {
  double dist = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double c = rot[2 * j], s = rot[2 * j + 1];
    const double z_re = h[2 * j] * c - h[2 * j + 1] * s - t[2 * j];
    const double z_im = h[2 * j] * s + h[2 * j + 1] * c - t[2 * j + 1];
    dist += std::sqrt(z_re * z_re + z_im * z_im);
  }
  return -dist;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

bool ranks_before(std::span<const double> scores, EntityId a, EntityId b) {
  const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
  if (sa != sb) return sa > sb;
  return a < b;
}

}  // namespace

RetrieverParams RetrieverParams::init(std::size_t n_entities, std::size_t n_relations, std::size_t dim,
                                      std::size_t visual_dim, std::size_t textual_dim, Rng& rng,
                                      bool structure_only) {
  if (dim == 0 || n_entities == 0 || n_relations == 0) throw ShapeError("retriever: empty dimensions");
  RetrieverParams p;
  p.dim = dim;
  p.structure_only = structure_only;
  const auto w = static_cast<Eigen::Index>(2 * dim);
  const double bound = 6.0 / std::sqrt(static_cast<double>(2 * dim));
  p.structural = uniform(static_cast<Eigen::Index>(n_entities), w, bound, rng);
  p.relation_phase = uniform(static_cast<Eigen::Index>(n_relations), static_cast<Eigen::Index>(dim),
                             std::numbers::pi, rng);
  p.gate_logits = Matrix::Zero(static_cast<Eigen::Index>(n_relations), 3);
  const auto vd = static_cast<Eigen::Index>(visual_dim), td = static_cast<Eigen::Index>(textual_dim);
  p.proj_visual = uniform(vd, w, std::sqrt(6.0 / static_cast<double>(vd + w)), rng);
  p.bias_visual = Matrix::Zero(1, w);
  p.proj_textual = uniform(td, w, std::sqrt(6.0 / static_cast<double>(td + w)), rng);
  p.bias_textual = Matrix::Zero(1, w);
  p.default_visual = uniform(1, w, bound, rng);
  p.default_textual = uniform(1, w, bound, rng);
  return p;
}

RetrieverParams RetrieverParams::zeros_like(const RetrieverParams& o) {
  RetrieverParams p;
  p.dim = o.dim;
  p.structure_only = o.structure_only;
  auto z = [](const Matrix& m) { return Matrix::Zero(m.rows(), m.cols()).eval(); };
  p.structural = z(o.structural);
  p.relation_phase = z(o.relation_phase);
  p.gate_logits = z(o.gate_logits);
  p.proj_visual = z(o.proj_visual);
  p.bias_visual = z(o.bias_visual);
  p.proj_textual = z(o.proj_textual);
  p.bias_textual = z(o.bias_textual);
  p.default_visual = z(o.default_visual);
  p.default_textual = z(o.default_textual);
  return p;
}

std::vector<NamedTensor> RetrieverParams::tensors() {
  return {{"structural", &structural},         {"relation_phase", &relation_phase},
          {"gate_logits", &gate_logits},       {"proj_visual", &proj_visual},
          {"bias_visual", &bias_visual},       {"proj_textual", &proj_textual},
          {"bias_textual", &bias_textual},     {"default_visual", &default_visual},
          {"default_textual", &default_textual}};
}

std::vector<ConstNamedTensor> RetrieverParams::tensors() const {
  return {{"structural", &structural},         {"relation_phase", &relation_phase},
          {"gate_logits", &gate_logits},       {"proj_visual", &proj_visual},
          {"bias_visual", &bias_visual},       {"proj_textual", &proj_textual},
          {"bias_textual", &bias_textual},     {"default_visual", &default_visual},
          {"default_textual", &default_textual}};
}

std::array<double, 3> gate_weights(const RetrieverParams& params, RelationId relation) {
  if (params.structure_only) return {1.0, 0.0, 0.0};
  const auto l = params.gate_logits.row(relation);
  const double mx = std::max({l(0), l(1), l(2)});
  std::array<double, 3> a{std::exp(l(0) - mx), std::exp(l(1) - mx), std::exp(l(2) - mx)};
  const double sum = a[0] + a[1] + a[2];
  for (double& v : a) v /= sum;
  return a;
}

std::vector<double> relation_vector(const RetrieverParams& params, RelationId relation) {
  std::vector<double> out(2 * params.dim);
  for (std::size_t j = 0; j < params.dim; ++j) {
    const double th = params.relation_phase(relation, static_cast<Eigen::Index>(j));
    out[2 * j] = std::cos(th);
    out[2 * j + 1] = std::sin(th);
  }
  return out;
}

namespace {

void check_ids(const RetrieverParams& params, EntityId e, RelationId r) {
  if (e < 0 || static_cast<std::size_t>(e) >= params.n_entities())
    throw std::out_of_range("entity id " + std::to_string(e) + " out of range");
  if (r < 0 || static_cast<std::size_t>(r) >= params.n_relations())
    throw std::out_of_range("relation id " + std::to_string(r) + " out of range");
}

void modality_vector(const RetrieverParams& params, const kg::ModalityFeatures& f, const Matrix& w, const Matrix& b,
                     const Matrix& fallback, EntityId e, std::span<double> out) {
  if (static_cast<std::size_t>(e) < f.count() && f.is_present(e)) {
    project(row_span(f.values, e), w, b, out);
  } else {
    auto d = row_span(fallback, 0);
    std::copy(d.begin(), d.end(), out.begin());
  }
  (void)params;
}

}  // namespace

Vector fuse_joint(const RetrieverParams& params, EntityId entity, RelationId relation,
                  const ModalityFeatureStore& features) {
  check_ids(params, entity, relation);
  const auto w = static_cast<std::size_t>(params.width());
  Vector out(params.width());
  auto s = row_span(params.structural, entity);
  if (params.structure_only) {
    std::copy(s.begin(), s.end(), out.data());
    return out;
  }
  std::vector<double> v(w), t(w);
  modality_vector(params, features.visual, params.proj_visual, params.bias_visual, params.default_visual, entity, v);
  modality_vector(params, features.textual, params.proj_textual, params.bias_textual, params.default_textual, entity,
                  t);
  combine(gate_weights(params, relation), s, v, t, {out.data(), w});
  return out;
}

double rotate_score(std::span<const double> head_joint, RelationId relation, std::span<const double> tail_joint,
                    const RetrieverParams& params) {
  if (head_joint.size() != 2 * params.dim || tail_joint.size() != 2 * params.dim)
    throw ShapeError("rotate_score: joint vectors must have width 2d");
  return rotated_distance_score(head_joint, relation_vector(params, relation).data(),
                                tail_joint, params.dim);
}

double rotate_score_with_phases(std::span<const double> head_joint, std::span<const double> phases,
                                std::span<const double> tail_joint) {
  if (head_joint.size() != 2 * phases.size() || tail_joint.size() != head_joint.size())
    throw ShapeError("rotate_score: joint vectors must have width 2d");
  std::vector<double> rot(2 * phases.size());
  for (std::size_t j = 0; j < phases.size(); ++j) {
    rot[2 * j] = std::cos(phases[j]);
    rot[2 * j + 1] = std::sin(phases[j]);
  }
  return rotated_distance_score(head_joint, rot.data(), tail_joint, phases.size());
}

FusedEntities::FusedEntities(const RetrieverParams& params, const ModalityFeatureStore& features)
    : params_(&params), features_(&features) {
  rotation_.resize(static_cast<Eigen::Index>(params.n_relations()), params.width());
  for (Eigen::Index r = 0; r < rotation_.rows(); ++r) {
    const auto v = relation_vector(params, static_cast<RelationId>(r));
    std::copy(v.begin(), v.end(), rotation_.row(r).data());
  }
  if (params.structure_only) return;
  if (features.visual.count() != 0 && features.visual.count() != params.n_entities())
    throw ShapeError("visual features cover " + std::to_string(features.visual.count()) + " entities, model has " +
                     std::to_string(params.n_entities()));
  if (features.textual.count() != 0 && features.textual.count() != params.n_entities())
    throw ShapeError("textual features cover " + std::to_string(features.textual.count()) +
                     " entities, model has " + std::to_string(params.n_entities()));
  if (features.visual.count() && static_cast<Eigen::Index>(features.visual.dim) != params.proj_visual.rows())
    throw ShapeError("visual feature dim does not match projection");
  if (features.textual.count() && static_cast<Eigen::Index>(features.textual.dim) != params.proj_textual.rows())
    throw ShapeError("textual feature dim does not match projection");
  const auto n = static_cast<Eigen::Index>(params.n_entities());
  visual_.resize(n, params.width());
  textual_.resize(n, params.width());
  for (Eigen::Index e = 0; e < n; ++e) {
    modality_vector(params, features.visual, params.proj_visual, params.bias_visual, params.default_visual,
                    static_cast<EntityId>(e), row_span(visual_, e));
    modality_vector(params, features.textual, params.proj_textual, params.bias_textual, params.default_textual,
                    static_cast<EntityId>(e), row_span(textual_, e));
  }
  // small models get every (relation, entity) joint vector precomputed
  constexpr Eigen::Index kCacheLimit = Eigen::Index{1} << 22;
  const auto n_rel = static_cast<Eigen::Index>(params.n_relations());
  if (n_rel * n * params.width() <= kCacheLimit) {
    joint_cache_.resize(n_rel * n, params.width());
    for (Eigen::Index r = 0; r < n_rel; ++r) {
      const auto alpha = gate_weights(params, static_cast<RelationId>(r));
      for (Eigen::Index e = 0; e < n; ++e)
        combine(alpha, row_span(params.structural, e), row_span(visual_, e), row_span(textual_, e),
                row_span(joint_cache_, r * n + e));
    }
  }
}

void FusedEntities::joint(EntityId e, RelationId r, std::span<double> out) const {
  auto s = row_span(params_->structural, e);
  if (params_->structure_only) {
    std::copy(s.begin(), s.end(), out.begin());
    return;
  }
  if (joint_cache_.size() > 0) {
    auto c = row_span(joint_cache_, static_cast<Eigen::Index>(r) * visual_.rows() + e);
    std::copy(c.begin(), c.end(), out.begin());
    return;
  }
  combine(gate_weights(*params_, r), s, row_span(visual_, e), row_span(textual_, e), out);
}

Vector FusedEntities::joint(EntityId e, RelationId r) const {
  Vector out(params_->width());
  joint(e, r, {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

std::span<const double> FusedEntities::modality(EntityId e, int m) const {
  if (m == 0) return row_span(params_->structural, e);
  return row_span(m == 1 ? visual_ : textual_, e);
}

bool FusedEntities::modality_present(EntityId e, int m) const {
  const auto& f = m == 1 ? features_->visual : features_->textual;
  return static_cast<std::size_t>(e) < f.count() && f.is_present(e);
}

RetrieverGrad::RetrieverGrad(const RetrieverParams& params) : grads_(RetrieverParams::zeros_like(params)) {
  visual_table_ = Matrix::Zero(static_cast<Eigen::Index>(params.n_entities()), params.width());
  textual_table_ = Matrix::Zero(static_cast<Eigen::Index>(params.n_entities()), params.width());
}

void RetrieverGrad::add_joint(const FusedEntities& fused, EntityId e, RelationId r, std::span<const double> g) {
  const std::size_t w = g.size();
  double* srow = grads_.structural.data() + e * grads_.structural.cols();
  if (grads_.structure_only) {
    for (std::size_t j = 0; j < w; ++j) srow[j] += g[j];
    return;
  }
  const auto alpha = gate_weights(fused.params(), r);
  double* vrow = visual_table_.data() + e * visual_table_.cols();
  double* trow = textual_table_.data() + e * textual_table_.cols();
  auto sv = fused.modality(e, 0), vv = fused.modality(e, 1), tv = fused.modality(e, 2);
  std::array<double, 3> dalpha{0.0, 0.0, 0.0};
  for (std::size_t j = 0; j < w; ++j) {
    srow[j] += alpha[0] * g[j];
    vrow[j] += alpha[1] * g[j];
    trow[j] += alpha[2] * g[j];
    dalpha[0] += g[j] * sv[j];
    dalpha[1] += g[j] * vv[j];
    dalpha[2] += g[j] * tv[j];
  }
  const double mean = alpha[0] * dalpha[0] + alpha[1] * dalpha[1] + alpha[2] * dalpha[2];
  for (int m = 0; m < 3; ++m) grads_.gate_logits(r, m) += alpha[static_cast<std::size_t>(m)] * (dalpha[static_cast<std::size_t>(m)] - mean);
}

void RetrieverGrad::merge(const RetrieverGrad& other) {
  auto mine = grads_.tensors();
  auto theirs = other.grads_.tensors();
  for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].tensor += *theirs[i].tensor;
  visual_table_ += other.visual_table_;
  textual_table_ += other.textual_table_;
}

void RetrieverGrad::scale(double s) {
  for (auto& t : grads_.tensors()) *t.tensor *= s;
  visual_table_ *= s;
  textual_table_ *= s;
}

void RetrieverGrad::finalize(const ModalityFeatureStore& features) {
  if (finalized_) return;
  finalized_ = true;
  if (grads_.structure_only) return;
  auto route = [](const kg::ModalityFeatures& f, const Matrix& table, Matrix& w, Matrix& b, Matrix& fallback) {
    for (Eigen::Index e = 0; e < table.rows(); ++e) {
      const auto g = table.row(e);
      if (static_cast<std::size_t>(e) < f.count() && f.is_present(static_cast<EntityId>(e))) {
        w.noalias() += f.values.row(e).transpose() * g;
        b.row(0) += g;
      } else {
        fallback.row(0) += g;
      }
    }
  };
  route(features.visual, visual_table_, grads_.proj_visual, grads_.bias_visual, grads_.default_visual);
  route(features.textual, textual_table_, grads_.proj_textual, grads_.bias_textual, grads_.default_textual);
}

double score_triple(const FusedEntities& fused, EntityId head, RelationId r, EntityId tail, RetrieverGrad* grad,
                    double upstream) {
  const auto& params = fused.params();
  const std::size_t d = params.dim;
  std::vector<double> h(2 * d), t(2 * d);
  fused.joint(head, r, h);
  fused.joint(tail, r, t);
  const double* rot = fused.rotation(r).data();
  const double score = rotated_distance_score(h, rot, t, d);
  if (!grad || upstream == 0.0) return score;

  std::vector<double> gh(2 * d), gt(2 * d);
  for (std::size_t j = 0; j < d; ++j) {
    const double c = rot[2 * j], s = rot[2 * j + 1];
    const double hr_re = h[2 * j] * c - h[2 * j + 1] * s;
    const double hr_im = h[2 * j] * s + h[2 * j + 1] * c;
    const double z_re = hr_re - t[2 * j], z_im = hr_im - t[2 * j + 1];
    const double mod = std::sqrt(z_re * z_re + z_im * z_im);
    if (mod == 0.0) continue;
    const double gz_re = -upstream * z_re / mod;
    const double gz_im = -upstream * z_im / mod;
    gh[2 * j] = gz_re * c + gz_im * s;
    gh[2 * j + 1] = -gz_re * s + gz_im * c;
    gt[2 * j] = -gz_re;
    gt[2 * j + 1] = -gz_im;
    grad->add_phase(r, j, -gz_re * hr_im + gz_im * hr_re);
  }
  grad->add_joint(fused, head, r, gh);
  grad->add_joint(fused, tail, r, gt);
  return score;
}

std::vector<double> score_all(const FusedEntities& fused, const Query& query) {
  const auto& params = fused.params();
  check_ids(params, query.known, query.relation);
  const std::size_t d = params.dim, n = fused.n_entities();
  const double* rot = fused.rotation(query.relation).data();
  std::vector<double> known(2 * d), other(2 * d), scores(n);
  fused.joint(query.known, query.relation, known);
  for (std::size_t e = 0; e < n; ++e) {
    fused.joint(static_cast<EntityId>(e), query.relation, other);
    scores[e] = query.direction == Direction::Tail ? rotated_distance_score(known, rot, other, d)
                                                   : rotated_distance_score(other, rot, known, d);
  }
  return scores;
}

std::vector<double> score_all(const RetrieverParams& params, const Query& query,
                              const ModalityFeatureStore& features) {
  return score_all(FusedEntities(params, features), query);
}

bool Shortlist::contains(EntityId e) const {
  return std::find(entity_ids.begin(), entity_ids.end(), e) != entity_ids.end();
}

Shortlist topk_shortlist(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size())
    throw std::out_of_range("topk_shortlist: K=" + std::to_string(k) + " outside [1, " +
                            std::to_string(scores.size()) + "]");
  std::vector<EntityId> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](EntityId a, EntityId b) { return ranks_before(scores, a, b); });
  Shortlist out;
  out.entity_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
  for (EntityId e : out.entity_ids) out.scores.push_back(scores[static_cast<std::size_t>(e)]);
  return out;
}

std::vector<EntityId> sample_negatives(std::size_t n_entities, const Triple& positive, Direction direction,
                                       std::size_t n, Rng& rng) {
  if (n_entities < 2) throw std::invalid_argument("sample_negatives: need at least two entities");
  const EntityId answer = direction == Direction::Tail ? positive.tail : positive.head;
  std::uniform_int_distribution<EntityId> pick(0, static_cast<EntityId>(n_entities - 2));
  std::vector<EntityId> out(n);
  for (auto& e : out) {
    e = pick(rng);
    if (e >= answer) ++e;
  }
  return out;
}

KgeLossResult kge_loss(const FusedEntities& fused, const Triple& positive, Direction direction,
                       std::span<const EntityId> negatives, double gamma, double adv_temperature,
                       RetrieverGrad* grad, double weight) {
  if (negatives.empty()) throw std::invalid_argument("kge_loss: no negatives");
  auto corrupt = [&](EntityId e) {
    return direction == Direction::Tail ? Triple{positive.head, positive.relation, e}
                                        : Triple{e, positive.relation, positive.tail};
  };
  KgeLossResult out;
  out.positive_score = score_triple(fused, positive.head, positive.relation, positive.tail);
  out.negative_scores.resize(negatives.size());
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    const Triple t = corrupt(negatives[i]);
    out.negative_scores[i] = score_triple(fused, t.head, t.relation, t.tail);
  }
  // self-adversarial weights, constants for the gradient
  std::vector<double> w(negatives.size());
  const double mx = adv_temperature * *std::max_element(out.negative_scores.begin(), out.negative_scores.end());
  double wsum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(adv_temperature * out.negative_scores[i] - mx);
    wsum += w[i];
  }
  for (double& v : w) v /= wsum;

  out.loss = softplus(-(gamma + out.positive_score));
  for (std::size_t i = 0; i < w.size(); ++i) out.loss += w[i] * softplus(out.negative_scores[i] + gamma);

  if (grad) {
    score_triple(fused, positive.head, positive.relation, positive.tail, grad,
                 -weight * sigmoid(-(gamma + out.positive_score)));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Triple t = corrupt(negatives[i]);
      score_triple(fused, t.head, t.relation, t.tail, grad, weight * w[i] * sigmoid(out.negative_scores[i] + gamma));
    }
  }
  return out;
}

RankLossResult rank_margin_loss(double s_pos, double s_neg, double margin) {
  RankLossResult out;
  const double slack = margin - (s_pos - s_neg);
  if (slack > 0.0) {
    out.loss = slack;
    out.grad_positive = -1.0;
    out.grad_negative = 1.0;
  }
  return out;
}

std::vector<EntityId> hard_negatives(std::span<const double> scores, EntityId answer, std::size_t n) {
  if (n >= scores.size()) throw std::out_of_range("hard_negatives: n must be below the entity count");
  std::vector<EntityId> ids;
  ids.reserve(scores.size() - 1);
  for (std::size_t e = 0; e < scores.size(); ++e)
    if (static_cast<EntityId>(e) != answer) ids.push_back(static_cast<EntityId>(e));
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(),
                    [&](EntityId a, EntityId b) { return ranks_before(scores, a, b); });
  ids.resize(n);
  return ids;
}

}  // namespace radd::retriever
