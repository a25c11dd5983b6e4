#include "radd/trainer.hpp"

#include "radd/errors.hpp"
#include "radd/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>

namespace radd::trainer {

namespace {

// stream tags for derive_seed
constexpr std::uint64_t kInitRetriever = 0x11;
constexpr std::uint64_t kInitDenoiser = 0x12;
constexpr std::uint64_t kShuffle = 0x21;
constexpr std::uint64_t kNegatives = 0x31;
constexpr std::uint64_t kCorruption = 0x32;
constexpr std::uint64_t kPool = 0x33;

template <class Params>
std::vector<Matrix*> pointers(Params& p) {
  std::vector<Matrix*> out;
  for (auto& t : p.tensors()) out.push_back(t.tensor);
  return out;
}

template <class Params>
std::vector<const Matrix*> const_pointers(const Params& p) {
  std::vector<const Matrix*> out;
  for (const auto& t : p.tensors()) out.push_back(t.tensor);
  return out;
}

template <class Params>
void round_params(Params& p) {
  for (auto& t : p.tensors()) round_to_storage(*t.tensor);
}

}  // namespace

CandidatePool build_candidate_pool(std::span<const double> scores, EntityId answer, std::size_t pool_size,
                                   double hard_fraction, Rng& rng) {
  const std::size_t n = scores.size();
  if (pool_size > n) throw std::invalid_argument("build_candidate_pool: pool_size exceeds the entity count");
  if (pool_size < 1) throw std::invalid_argument("build_candidate_pool: pool_size must be positive");
  if (answer < 0 || static_cast<std::size_t>(answer) >= n)
    throw std::out_of_range("build_candidate_pool: answer outside the score vector");
  const std::size_t slots = pool_size - 1;
  const auto n_hard = std::min(
      slots, static_cast<std::size_t>(std::ceil(hard_fraction * static_cast<double>(slots) - 1e-9)));

  CandidatePool pool;
  pool.ids.reserve(pool_size);
  pool.ids.push_back(answer);
  std::vector<std::uint8_t> taken(n, 0);
  taken[static_cast<std::size_t>(answer)] = 1;
  for (EntityId e : retriever::hard_negatives(scores, answer, n_hard)) {
    pool.ids.push_back(e);
    taken[static_cast<std::size_t>(e)] = 1;
  }
  std::uniform_int_distribution<EntityId> pick(0, static_cast<EntityId>(n - 1));
  while (pool.ids.size() < pool_size) {
    const EntityId e = pick(rng);
    if (taken[static_cast<std::size_t>(e)]) continue;
    taken[static_cast<std::size_t>(e)] = 1;
    pool.ids.push_back(e);
  }
  pool.teacher_scores.reserve(pool_size);
  for (EntityId e : pool.ids) pool.teacher_scores.push_back(scores[static_cast<std::size_t>(e)]);
  return pool;
}

num::LossGrad distill_loss(const CandidatePool& pool, std::span<const double> student_logits, double tau) {
  std::vector<double> student(pool.ids.size());
  for (std::size_t i = 0; i < pool.ids.size(); ++i) student[i] = student_logits[static_cast<std::size_t>(pool.ids[i])];
  const auto kl = num::tempered_kl(pool.teacher_scores, student, tau);
  num::LossGrad out;
  out.loss = kl.loss;
  out.grad = Vector::Zero(static_cast<Eigen::Index>(student_logits.size()));
  for (std::size_t i = 0; i < pool.ids.size(); ++i) out.grad(pool.ids[i]) += kl.grad(static_cast<Eigen::Index>(i));
  return out;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  kge += o.kge;
  diff += o.diff;
  tail += o.tail;
  head += o.head;
  distill += o.distill;
  rank += o.rank;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  return {kge * s, diff * s, tail * s, head * s, distill * s, rank * s, total * s};
}

double total_loss(const LossBreakdown& l, const TrainConfig& config) {
  return l.kge + l.diff + config.lambda_d * l.distill + config.lambda_r * l.rank;
}

diffusion::DenoiserDims denoiser_dims(const TrainConfig& config, std::size_t n_entities) {
  diffusion::DenoiserDims d;
  d.n_entities = n_entities;
  d.joint_width = 2 * config.dim;
  d.token_width = 2 * config.dim;
  d.time_width = config.time_width;
  d.direction_width = config.direction_width;
  d.hidden_width = config.hidden_multiplier * 2 * config.dim;
  d.hidden_layers = config.hidden_layers;
  return d;
}

diffusion::NoiseSchedule noise_schedule(const TrainConfig& config) { return {config.timesteps, config.rho0}; }

std::size_t retriever_relation_count(const TrainConfig& config, std::size_t n_relations) {
  return config.augment_inverse_relations ? 2 * n_relations : n_relations;
}

TrainState init_state(const TrainConfig& config, std::size_t n_entities, std::size_t n_relations,
                      std::size_t visual_dim, std::size_t textual_dim) {
  TrainState s;
  Rng rr = make_rng(config.seed, {kInitRetriever});
  s.retriever = retriever::RetrieverParams::init(n_entities, retriever_relation_count(config, n_relations), config.dim,
                                                 visual_dim, textual_dim, rr, config.structure_only);
  Rng rd = make_rng(config.seed, {kInitDenoiser});
  s.denoiser = diffusion::DenoiserParams::init(denoiser_dims(config, n_entities), rd);
  round_params(s.retriever);
  round_params(s.denoiser);
  s.denoiser_ema = s.denoiser;
  s.adam_retriever = num::AdamState({config.lr_kge}, const_pointers(s.retriever));
  s.adam_denoiser = num::AdamState({config.lr_denoiser}, const_pointers(s.denoiser));
  return s;
}

void check_config(const TrainConfig& config, const kg::KnowledgeGraph& kg) {
  auto errors = config.validate();
  if (config.pool_size > kg.n_entities())
    errors.push_back("pool_size (" + std::to_string(config.pool_size) + ") exceeds the entity count (" +
                     std::to_string(kg.n_entities()) + ")");
  if (config.top_k > kg.n_entities())
    errors.push_back("top_k (" + std::to_string(config.top_k) + ") exceeds the entity count (" +
                     std::to_string(kg.n_entities()) + ")");
  if (kg.train.empty()) errors.push_back("training split is empty");
  if (errors.empty()) return;
  std::string msg = "configuration errors:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

namespace {

struct KgePart {
  double kge = 0.0;
  double rank = 0.0;
};

// L_kge (both directions, optionally with inverse-relation copies) and
// L_rank on the hardest sampled negative of each direction.
KgePart kge_phase(const retriever::FusedEntities& fused, std::span<const Triple> batch, const TrainConfig& config,
                  int epoch, std::size_t batch_index, std::size_t threads, retriever::RetrieverGrad* grad) {
  const std::size_t n_rel = config.augment_inverse_relations ? fused.params().n_relations() / 2 : 0;
  const std::size_t copies = config.augment_inverse_relations ? 2 : 1;
  const double norm = 1.0 / static_cast<double>(2 * copies * batch.size());

  const std::size_t workers = worker_count(threads, batch.size());
  std::vector<KgePart> parts(workers);
  std::vector<retriever::RetrieverGrad> grads;
  if (grad)
    for (std::size_t w = 0; w < workers; ++w) grads.emplace_back(fused.params());

  parallel_for(batch.size(), workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
    retriever::RetrieverGrad* g = grad ? &grads[w] : nullptr;
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t c = 0; c < copies; ++c) {
        const Triple& orig = batch[i];
        const Triple tr = c == 0 ? orig
                                 : Triple{orig.tail, static_cast<kg::RelationId>(orig.relation + n_rel), orig.head};
        Rng rng = make_rng(config.seed, {kNegatives, static_cast<std::uint64_t>(epoch), batch_index, i, c});
        for (Direction dir : {Direction::Tail, Direction::Head}) {
          const auto negs = retriever::sample_negatives(fused.n_entities(), tr, dir, config.n_negatives, rng);
          const auto res = retriever::kge_loss(fused, tr, dir, negs, config.gamma_kge, config.adv_temperature, g, norm);
          parts[w].kge += res.loss * norm;
          const std::size_t hard = static_cast<std::size_t>(
              std::max_element(res.negative_scores.begin(), res.negative_scores.end()) - res.negative_scores.begin());
          const auto rk = retriever::rank_margin_loss(res.positive_score, res.negative_scores[hard], config.margin);
          parts[w].rank += rk.loss * norm;
          if (g && config.lambda_r > 0.0 && rk.loss > 0.0) {
            const Triple neg = dir == Direction::Tail ? Triple{tr.head, tr.relation, negs[hard]}
                                                      : Triple{negs[hard], tr.relation, tr.tail};
            const double up = config.lambda_r * norm;
            retriever::score_triple(fused, tr.head, tr.relation, tr.tail, g, up * rk.grad_positive);
            retriever::score_triple(fused, neg.head, neg.relation, neg.tail, g, up * rk.grad_negative);
          }
        }
      }
    }
  });

  KgePart out;
  for (std::size_t w = 0; w < workers; ++w) {
    out.kge += parts[w].kge;
    out.rank += parts[w].rank;
    if (grad) grad->merge(grads[w]);
  }
  return out;
}

void check_finite(const LossBreakdown& l, int epoch, std::size_t batch_index) {
  const double v[] = {l.kge, l.diff, l.tail, l.head, l.distill, l.rank, l.total};
  for (double x : v) {
    if (std::isfinite(x)) continue;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "non-finite loss at epoch %d batch %zu: kge=%g diff=%g tail=%g head=%g distill=%g rank=%g", epoch,
                  batch_index, l.kge, l.diff, l.tail, l.head, l.distill, l.rank);
    throw NumericError(buf);
  }
}

}  // namespace

LossBreakdown joint_step(TrainState& state, std::span<const Triple> batch, const kg::ModalityFeatureStore& features,
                         const TrainConfig& config, int epoch, std::size_t batch_index, std::size_t threads) {
  if (batch.empty()) throw std::invalid_argument("joint_step: empty batch");
  if (state.denoiser.mlp.layers.empty()) throw std::invalid_argument("joint_step: state is not initialized");
  LossBreakdown out;

  // retriever step (warm-up only)
  const bool retriever_live = epoch <= config.freeze_epoch;
  {
    retriever::FusedEntities fused(state.retriever, features);
    std::optional<retriever::RetrieverGrad> grad;
    if (retriever_live) grad.emplace(state.retriever);
    const KgePart kp = kge_phase(fused, batch, config, epoch, batch_index, threads, grad ? &*grad : nullptr);
    out.kge = kp.kge;
    out.rank = kp.rank;
    if (retriever_live && std::isfinite(kp.kge) && std::isfinite(kp.rank)) {
      grad->finalize(features);
      state.adam_retriever.step(pointers(state.retriever), const_pointers(grad->grads()));
      state.adam_retriever.round_to_storage();
      round_params(state.retriever);
    }
  }

  // denoiser step against the (possibly just updated) retriever
  retriever::FusedEntities fused(state.retriever, features);
  const auto schedule = noise_schedule(config);
  const auto dbatch =
      diffusion::prepare_batch(state.denoiser, batch, fused, schedule, config.tail_only,
                               derive_seed(config.seed, {kCorruption, static_cast<std::uint64_t>(epoch)}), batch_index);
  num::MlpTape tape;
  const Matrix logits = diffusion::batch_logits(state.denoiser, dbatch, &tape);
  Matrix logit_grad;
  const auto dl = diffusion::diffusion_ce(dbatch, logits, config.lambda_h, logit_grad);
  out.diff = dl.loss;
  out.tail = dl.tail;
  out.head = dl.head;

  const std::size_t rows = dbatch.rows.size();
  const bool distill_grad = config.lambda_d > 0.0 && (!config.distill_after_freeze || epoch > config.freeze_epoch);
  const double row_norm = 1.0 / static_cast<double>(rows);
  std::vector<double> row_kl(rows, 0.0);
  Matrix distill_grad_rows = Matrix::Zero(logits.rows(), logits.cols());
  parallel_for(rows, threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const auto& row = dbatch.rows[r];
      const auto query = kg::make_query(batch[row.triple_index], row.direction);
      const auto teacher = retriever::score_all(fused, query);
      Rng rng = make_rng(config.seed, {kPool, static_cast<std::uint64_t>(epoch), batch_index, r});
      const auto pool = build_candidate_pool(teacher, query.answer, config.pool_size, config.hard_fraction, rng);
      const auto kl = distill_loss(pool, row_span(logits, static_cast<Eigen::Index>(r)), config.tau);
      row_kl[r] = kl.loss;
      if (distill_grad) distill_grad_rows.row(static_cast<Eigen::Index>(r)) = kl.grad.transpose();
    }
  });
  for (double v : row_kl) out.distill += v * row_norm;
  if (distill_grad) logit_grad += (config.lambda_d * row_norm) * distill_grad_rows;

  out.total = total_loss(out, config);
  check_finite(out, epoch, batch_index);

  auto grads = diffusion::DenoiserParams::zeros_like(state.denoiser);
  diffusion::batch_backward(state.denoiser, dbatch, tape, logit_grad, grads);
  state.adam_denoiser.step(pointers(state.denoiser), const_pointers(grads));
  state.adam_denoiser.round_to_storage();
  round_params(state.denoiser);
  num::ema_update(pointers(state.denoiser_ema), const_pointers(state.denoiser), config.ema_decay);
  round_params(state.denoiser_ema);
  return out;
}

std::string log_header() {
  return "epoch\tkge\tdiff\ttail\thead\tdistill\trank\ttotal\tvalid_mrr\tvalid_h1\tvalid_h3\tvalid_h10";
}

std::string log_line(const EvalRecord& r) {
  char buf[512];
  const auto& l = r.losses;
  const auto& v = r.valid.overall;
  std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f", r.epoch, l.kge,
                l.diff, l.tail, l.head, l.distill, l.rank, l.total, v.mrr, v.hits1, v.hits3, v.hits10);
  return buf;
}

eval::MetricsReport validate(const TrainState& state, const kg::KnowledgeGraph& kg,
                             const kg::ModalityFeatureStore& features, const TrainConfig& config,
                             WeightSource weights, std::size_t threads) {
  const auto queries = kg::make_queries(kg, kg::Split::Valid);
  if (queries.empty()) return {};
  const auto& denoiser = weights == WeightSource::Ema ? state.denoiser_ema : state.denoiser;
  eval::Ranker ranker(state.retriever, denoiser, features, noise_schedule(config));
  eval::EvalOptions opts;
  opts.rerank.top_k = std::min(config.top_k, kg.n_entities());
  opts.rerank.seed = config.seed;
  opts.threads = threads;
  return eval::evaluate(ranker, queries, kg.filter, opts).report;
}

TrainResult train(const kg::KnowledgeGraph& kg, const kg::ModalityFeatureStore& features, const TrainConfig& config,
                  const TrainOptions& options, const TrainState* resume) {
  check_config(config, kg);
  if (features.visual.count() != kg.n_entities() || features.textual.count() != kg.n_entities())
    throw DataError("feature files do not cover every entity");

  TrainState state = resume ? *resume
                            : init_state(config, kg.n_entities(), kg.n_relations(), features.visual.dim,
                                         features.textual.dim);
  TrainResult result;
  result.history = state.history;
  double best_mrr = -1.0;
  if (!result.history.empty()) {
    best_mrr = result.history.back().valid.overall.mrr;
    result.best = state;
  }

  auto run_eval = [&](int epoch, const LossBreakdown& losses) {
    EvalRecord rec{epoch, losses, validate(state, kg, features, config, options.eval_weights, options.threads)};
    result.history.push_back(rec);
    state.history = result.history;
    if (options.log) *options.log << log_line(rec) << '\n' << std::flush;
    if (options.hooks.on_eval) options.hooks.on_eval(rec);
    if (rec.valid.overall.mrr > best_mrr) {
      best_mrr = rec.valid.overall.mrr;
      result.best = state;
    }
  };

  if (options.log) *options.log << log_header() << '\n';
  if (result.history.empty()) run_eval(state.epoch, {});

  std::vector<std::size_t> order(kg.train.size());
  std::vector<Triple> batch;
  for (int epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = make_rng(config.seed, {kShuffle, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle);
    LossBreakdown sum;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(kg.train[order[i]]);
      sum += joint_step(state, batch, features, config, epoch, n_batches, options.threads);
      ++n_batches;
    }
    state.epoch = epoch;
    if (options.hooks.on_epoch_end) options.hooks.on_epoch_end(state, epoch);
    if (epoch % config.eval_every == 0 || epoch == config.epochs)
      run_eval(epoch, sum.scaled(1.0 / static_cast<double>(n_batches)));
  }
  result.final = state;
  return result;
}

}  // namespace radd::trainer
