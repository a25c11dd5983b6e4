#pragma once

#include "radd/config.hpp"
#include "radd/diffusion.hpp"
#include "radd/evalrank.hpp"
#include "radd/kgdata.hpp"
#include "radd/numkernel.hpp"
#include "radd/retriever.hpp"

#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace radd::trainer {

using kg::Direction;
using kg::EntityId;
using kg::Triple;

struct CandidatePool {
  std::vector<EntityId> ids;  // answer first, then hard, then random negatives
  std::vector<double> teacher_scores;
};

// Answer + ceil(hard_fraction (pool_size - 1)) top-scoring wrong entities +
// distinct uniform random wrong entities for the remaining slots.
CandidatePool build_candidate_pool(std::span<const double> scores, EntityId answer, std::size_t pool_size,
                                   double hard_fraction, Rng& rng);

// Tempered KL between teacher and student restricted to the pool; the
// gradient is scattered back to a full-length vector (zero off the pool).
num::LossGrad distill_loss(const CandidatePool& pool, std::span<const double> student_logits, double tau);

struct LossBreakdown {
  double kge = 0.0;
  double diff = 0.0;
  double tail = 0.0;
  double head = 0.0;
  double distill = 0.0;
  double rank = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
};

double total_loss(const LossBreakdown& l, const TrainConfig& config);

struct EvalRecord {
  int epoch = 0;
  LossBreakdown losses;  // mean over the epoch's batches; zero at epoch 0
  eval::MetricsReport valid;
};

struct TrainState {
  retriever::RetrieverParams retriever;
  diffusion::DenoiserParams denoiser;
  diffusion::DenoiserParams denoiser_ema;
  num::AdamState adam_retriever;
  num::AdamState adam_denoiser;
  int epoch = 0;  // completed epochs
  std::vector<EvalRecord> history;
};

diffusion::DenoiserDims denoiser_dims(const TrainConfig& config, std::size_t n_entities);
diffusion::NoiseSchedule noise_schedule(const TrainConfig& config);
std::size_t retriever_relation_count(const TrainConfig& config, std::size_t n_relations);

TrainState init_state(const TrainConfig& config, std::size_t n_entities, std::size_t n_relations,
                      std::size_t visual_dim, std::size_t textual_dim);

// Validates a config against a concrete graph; throws ConfigError listing
// every problem.
void check_config(const TrainConfig& config, const kg::KnowledgeGraph& kg);

// One optimization step on a batch of training triples. `epoch` is 1-based;
// `batch_index` only feeds the random streams.
LossBreakdown joint_step(TrainState& state, std::span<const Triple> batch, const kg::ModalityFeatureStore& features,
                         const TrainConfig& config, int epoch, std::size_t batch_index, std::size_t threads = 1);

struct TrainHooks {
  std::function<void(const TrainState&, int epoch)> on_epoch_end;
  std::function<void(const EvalRecord&)> on_eval;
};

struct TrainOptions {
  std::size_t threads = 1;
  WeightSource eval_weights = WeightSource::Ema;
  TrainHooks hooks;
  std::ostream* log = nullptr;  // tab-separated line per evaluation
};

struct TrainResult {
  TrainState best;   // highest validation MRR, earliest on ties
  TrainState final;
  std::vector<EvalRecord> history;
};

std::string log_header();
std::string log_line(const EvalRecord& record);

// Validation Diff-Rerank metrics (single pass) for the given weights.
eval::MetricsReport validate(const TrainState& state, const kg::KnowledgeGraph& kg,
                             const kg::ModalityFeatureStore& features, const TrainConfig& config,
                             WeightSource weights, std::size_t threads = 1);

// Runs epochs state.epoch + 1 .. config.epochs, evaluating at the starting
// epoch, every eval_every epochs and at the end.
TrainResult train(const kg::KnowledgeGraph& kg, const kg::ModalityFeatureStore& features, const TrainConfig& config,
                  const TrainOptions& options = {}, const TrainState* resume = nullptr);

}  // namespace radd::trainer
