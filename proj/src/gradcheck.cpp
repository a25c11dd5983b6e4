#include "radd/gradcheck.hpp"

#include "radd/diffusion.hpp"
#include "radd/errors.hpp"
#include "radd/numkernel.hpp"
#include "radd/retriever.hpp"
#include "radd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace radd::gradcheck {

namespace {

using kg::Direction;
using kg::EntityId;
using kg::Triple;

std::vector<double> flatten(const std::vector<ConstNamedTensor>& tensors) {
  std::vector<double> out;
  for (const auto& t : tensors) out.insert(out.end(), t.tensor->data(), t.tensor->data() + t.tensor->size());
  return out;
}

void unflatten(std::span<const double> flat, const std::vector<NamedTensor>& tensors) {
  std::size_t o = 0;
  for (const auto& t : tensors)
    for (Eigen::Index i = 0; i < t.tensor->size(); ++i) t.tensor->data()[i] = flat[o++];
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

kg::ModalityFeatures random_features(std::size_t n, std::size_t dim, Rng& rng) {
  kg::ModalityFeatures f;
  f.dim = dim;
  f.present.assign(n, 1);
  f.values = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  std::normal_distribution<double> nd;
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t j = 0; j < dim; ++j) f.values(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(j)) = nd(rng);
  // one absent entity exercises the learned default vector
  const auto gap = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  f.present[gap] = 0;
  f.values.row(static_cast<Eigen::Index>(gap)).setZero();
  return f;
}

struct Fixture {
  kg::ModalityFeatureStore features;
  retriever::RetrieverParams retriever;
  Rng rng;
};

Fixture make_fixture(const Options& o, std::uint64_t seed) {
  Fixture fx{{}, {}, make_rng(seed, {0x9c})};
  fx.features.visual = random_features(o.n_entities, o.visual_dim, fx.rng);
  fx.features.textual = random_features(o.n_entities, o.textual_dim, fx.rng);
  fx.retriever = retriever::RetrieverParams::init(o.n_entities, o.n_relations, o.dim, o.visual_dim, o.textual_dim, fx.rng);
  // move off the symmetric zero initialization of gates and biases
  std::normal_distribution<double> nd(0.0, 0.5);
  for (Matrix* m : {&fx.retriever.gate_logits, &fx.retriever.bias_visual, &fx.retriever.bias_textual})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = nd(fx.rng);
  return fx;
}

Triple random_triple(const Options& o, Rng& rng) {
  std::uniform_int_distribution<EntityId> ent(0, static_cast<EntityId>(o.n_entities - 1));
  std::uniform_int_distribution<kg::RelationId> rel(0, static_cast<kg::RelationId>(o.n_relations - 1));
  return {ent(rng), rel(rng), ent(rng)};
}

Triple corrupted(const Triple& t, Direction d, EntityId e) {
  return d == Direction::Tail ? Triple{t.head, t.relation, e} : Triple{e, t.relation, t.tail};
}

struct Check {
  std::vector<double> point;
  std::vector<double> analytic;
  num::ScalarFunction loss;
};

Check check_kge(const Options& o, std::uint64_t seed) {
  auto fx = make_fixture(o, seed);
  const Triple pos = random_triple(o, fx.rng);
  const Direction dir = fx.rng() % 2 ? Direction::Head : Direction::Tail;
  const auto negs = retriever::sample_negatives(o.n_entities, pos, dir, o.n_negatives, fx.rng);
  const double gamma = 6.0, alpha = 1.0;

  retriever::FusedEntities fused(fx.retriever, fx.features);
  retriever::RetrieverGrad grad(fx.retriever);
  const auto base = retriever::kge_loss(fused, pos, dir, negs, gamma, alpha, &grad);
  grad.finalize(fx.features);

  // adversarial weights are constants of the surrogate being differentiated
  std::vector<double> w(negs.size());
  const double mx = *std::max_element(base.negative_scores.begin(), base.negative_scores.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) sum += w[i] = std::exp(alpha * (base.negative_scores[i] - mx));
  for (double& v : w) v /= sum;

  Check c;
  c.point = flatten(std::as_const(fx.retriever).tensors());
  c.analytic = flatten(std::as_const(grad.grads()).tensors());
  c.loss = [fx, pos, dir, negs, w, gamma](std::span<const double> x) {
    auto p = fx.retriever;
    unflatten(x, p.tensors());
    retriever::FusedEntities f(p, fx.features);
    double l = softplus(-(gamma + retriever::score_triple(f, pos.head, pos.relation, pos.tail)));
    for (std::size_t i = 0; i < negs.size(); ++i) {
      const Triple t = corrupted(pos, dir, negs[i]);
      l += w[i] * softplus(retriever::score_triple(f, t.head, t.relation, t.tail) + gamma);
    }
    return l;
  };
  return c;
}

Check check_rank(const Options& o, std::uint64_t seed) {
  auto fx = make_fixture(o, seed);
  const Triple pos = random_triple(o, fx.rng);
  const Direction dir = fx.rng() % 2 ? Direction::Head : Direction::Tail;
  const auto neg_id = retriever::sample_negatives(o.n_entities, pos, dir, 1, fx.rng).front();
  const Triple neg = corrupted(pos, dir, neg_id);

  retriever::FusedEntities fused(fx.retriever, fx.features);
  const double sp = retriever::score_triple(fused, pos.head, pos.relation, pos.tail);
  const double sn = retriever::score_triple(fused, neg.head, neg.relation, neg.tail);
  // keep the hinge active, well away from its kink
  const double margin = (sp - sn) + std::uniform_real_distribution<double>(0.5, 2.0)(fx.rng);
  const auto rk = retriever::rank_margin_loss(sp, sn, margin);
  retriever::RetrieverGrad grad(fx.retriever);
  retriever::score_triple(fused, pos.head, pos.relation, pos.tail, &grad, rk.grad_positive);
  retriever::score_triple(fused, neg.head, neg.relation, neg.tail, &grad, rk.grad_negative);
  grad.finalize(fx.features);

  Check c;
  c.point = flatten(std::as_const(fx.retriever).tensors());
  c.analytic = flatten(std::as_const(grad.grads()).tensors());
  c.loss = [fx, pos, neg, margin](std::span<const double> x) {
    auto p = fx.retriever;
    unflatten(x, p.tensors());
    retriever::FusedEntities f(p, fx.features);
    const double sp = retriever::score_triple(f, pos.head, pos.relation, pos.tail);
    const double sn = retriever::score_triple(f, neg.head, neg.relation, neg.tail);
    return retriever::rank_margin_loss(sp, sn, margin).loss;
  };
  return c;
}

diffusion::DenoiserBatch only_direction(const diffusion::DenoiserBatch& batch, Direction d) {
  diffusion::DenoiserBatch out;
  std::vector<Eigen::Index> keep;
  for (std::size_t r = 0; r < batch.rows.size(); ++r)
    if (batch.rows[r].direction == d) {
      out.rows.push_back(batch.rows[r]);
      keep.push_back(static_cast<Eigen::Index>(r));
    }
  out.inputs.resize(static_cast<Eigen::Index>(keep.size()), batch.inputs.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) out.inputs.row(static_cast<Eigen::Index>(i)) = batch.inputs.row(keep[i]);
  return out;
}

Check check_ce(const Options& o, std::uint64_t seed, Direction which) {
  auto fx = make_fixture(o, seed);
  diffusion::DenoiserDims dims;
  dims.n_entities = o.n_entities;
  dims.joint_width = 2 * o.dim;
  dims.token_width = 2 * o.dim;
  dims.time_width = 8;
  dims.direction_width = 4;
  dims.hidden_width = 4 * 2 * o.dim;
  dims.hidden_layers = 2;
  auto dn = diffusion::DenoiserParams::init(dims, fx.rng);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& layer : dn.mlp.layers)
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias.data()[i] = nd(fx.rng);
  std::vector<Triple> triples;
  for (int i = 0; i < 3; ++i) triples.push_back(random_triple(o, fx.rng));
  const diffusion::NoiseSchedule schedule{10, 0.3};
  const double lambda_h = 2.0;
  const std::uint64_t batch_seed = fx.rng();

  auto build = [=](const diffusion::DenoiserParams& p) {
    retriever::FusedEntities fused(fx.retriever, fx.features);
    const auto full = diffusion::prepare_batch(p, triples, fused, schedule, false, batch_seed, 0);
    return only_direction(full, which);
  };
  const auto batch = build(dn);
  num::MlpTape tape;
  const Matrix logits = diffusion::batch_logits(dn, batch, &tape);
  Matrix logit_grad;
  diffusion::diffusion_ce(batch, logits, lambda_h, logit_grad);
  // the head rows carry lambda_h; check the unweighted head CE
  if (which == Direction::Head) logit_grad /= lambda_h;
  auto grads = diffusion::DenoiserParams::zeros_like(dn);
  diffusion::batch_backward(dn, batch, tape, logit_grad, grads);

  Check c;
  c.point = flatten(std::as_const(dn).tensors());
  c.analytic = flatten(std::as_const(grads).tensors());
  c.loss = [dn, build, which, lambda_h](std::span<const double> x) {
    auto p = dn;
    unflatten(x, p.tensors());
    const auto b = build(p);
    const Matrix lg = diffusion::batch_logits(p, b, nullptr);
    Matrix unused;
    const auto l = diffusion::diffusion_ce(b, lg, lambda_h, unused);
    return which == Direction::Tail ? l.tail : l.head;
  };
  return c;
}

Check check_distill(const Options& o, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0xd1});
  std::normal_distribution<double> nd(0.0, 2.0);
  std::vector<double> teacher(o.n_entities), student(o.n_entities);
  for (auto& v : teacher) v = nd(rng);
  for (auto& v : student) v = nd(rng);
  const auto answer = std::uniform_int_distribution<EntityId>(0, static_cast<EntityId>(o.n_entities - 1))(rng);
  const auto pool = trainer::build_candidate_pool(teacher, answer, o.pool_size, 0.5, rng);
  const double tau = 0.7;
  const auto base = trainer::distill_loss(pool, student, tau);

  Check c;
  c.point = student;
  c.analytic.assign(base.grad.data(), base.grad.data() + base.grad.size());
  c.loss = [pool, tau](std::span<const double> x) { return trainer::distill_loss(pool, x, tau).loss; };
  return c;
}

}  // namespace

const std::vector<std::string>& loss_terms() {
  static const std::vector<std::string> terms = {"kge", "rank", "tail-CE", "head-CE", "distill"};
  return terms;
}

std::vector<TermReport> run_gradchecks(const Options& o) {
  if (o.n_entities < 3 || o.n_relations < 1 || o.dim < 1 || o.seeds < 1)
    throw std::invalid_argument("gradcheck: dimensions too small");
  if (o.pool_size < 2 || o.pool_size > o.n_entities) throw std::invalid_argument("gradcheck: pool_size out of range");
  if (!o.inject_sign_error.empty() &&
      std::find(loss_terms().begin(), loss_terms().end(), o.inject_sign_error) == loss_terms().end())
    throw std::invalid_argument("gradcheck: unknown loss term '" + o.inject_sign_error + "'");

  std::vector<TermReport> reports;
  for (const auto& term : loss_terms()) {
    TermReport rep;
    rep.term = term;
    for (std::size_t k = 0; k < o.seeds; ++k) {
      const std::uint64_t seed = o.first_seed + k;
      Check c = term == "kge"       ? check_kge(o, seed)
                : term == "rank"    ? check_rank(o, seed)
                : term == "tail-CE" ? check_ce(o, seed, Direction::Tail)
                : term == "head-CE" ? check_ce(o, seed, Direction::Head)
                                    : check_distill(o, seed);
      if (term == o.inject_sign_error)
        for (double& g : c.analytic) g = -g;
      const auto res = num::grad_check(c.loss, c.point, c.analytic, o.step, o.floor);
      rep.coordinates = c.point.size();
      ++rep.seeds;
      if (res.max_relative_error >= rep.max_relative_error) {
        rep.max_relative_error = res.max_relative_error;
        rep.worst_seed = seed;
      }
    }
    rep.passed = rep.max_relative_error < o.tolerance;
    reports.push_back(rep);
  }
  return reports;
}

std::string format_report(const std::vector<TermReport>& reports) {
  std::string out = "term\tseeds\tcoordinates\tmax_rel_error\tworst_seed\tstatus\n";
  for (const auto& r : reports) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%zu\t%.3e\t%llu\t%s\n", r.term.c_str(), r.seeds, r.coordinates,
                  r.max_relative_error, static_cast<unsigned long long>(r.worst_seed), r.passed ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace radd::gradcheck
