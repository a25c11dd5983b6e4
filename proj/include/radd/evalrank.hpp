#pragma once

#include "radd/config.hpp"
#include "radd/diffusion.hpp"
#include "radd/kgdata.hpp"
#include "radd/retriever.hpp"

#include <span>
#include <string>
#include <vector>

namespace radd::eval {

using kg::Direction;
using kg::EntityId;
using kg::Query;

// Final scores under two-tier ordering: every tier-1 entity precedes every
// tier-0 entity; within a tier higher score first, ties by ascending id.
struct TieredScores {
  std::vector<double> score;
  std::vector<std::uint8_t> tier;

  std::size_t size() const { return score.size(); }
  // True when entity a is ordered strictly before entity b.
  bool before(EntityId a, EntityId b) const;
  std::vector<EntityId> ordering() const;
};

TieredScores single_tier(std::vector<double> scores);

// 1 + number of entities ordered strictly above the answer, ignoring every
// other true completion of the query.
std::size_t filtered_rank(const TieredScores& scores, const Query& query, const kg::FilterIndex& filter);
std::size_t unfiltered_rank(const TieredScores& scores, const Query& query);

struct RankResult {
  Query query;
  std::size_t filtered_rank = 0;
  AblationMode mode = AblationMode::Full;
};

struct DirectionMetrics {
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits3 = 0.0;
  double hits10 = 0.0;
  std::size_t count = 0;
};

struct MetricsReport {
  DirectionMetrics overall;
  DirectionMetrics head;
  DirectionMetrics tail;
};

MetricsReport metrics_from_ranks(std::span<const RankResult> ranks);

// Tab-separated table and the key=value percentage listing.
std::string format_metrics_tsv(const MetricsReport& report);
std::string format_metrics_kv(const MetricsReport& report);

struct RerankOptions {
  std::size_t top_k = 256;
  InferenceMode inference = InferenceMode::SinglePass;
  std::uint64_t seed = 1;  // iterative sampling only
};

// Read-only view of a trained model that produces per-query scores.
class Ranker {
 public:
  Ranker(const retriever::RetrieverParams& retriever, const diffusion::DenoiserParams& denoiser,
         const kg::ModalityFeatureStore& features, diffusion::NoiseSchedule schedule);

  std::vector<double> retriever_scores(const Query& query) const;

  // Denoiser log-probabilities for every entity at t = T from the MASK state.
  std::vector<double> denoiser_scores(const Query& query) const;

  TieredScores diff_rerank(const Query& query, const RerankOptions& options) const;

  // Dispatches on the evaluation path of an ablation mode. Training-time
  // ablations (structure-only, no-distill, tail-only) score like Full.
  TieredScores final_scores(const Query& query, AblationMode mode, const RerankOptions& options) const;

  std::size_t n_entities() const { return fused_.n_entities(); }
  const retriever::FusedEntities& fused() const { return fused_; }

 private:
  std::vector<double> denoiser_log_probs(const Query& query, EntityId token, int t) const;

  const retriever::RetrieverParams* retriever_;
  const diffusion::DenoiserParams* denoiser_;
  retriever::FusedEntities fused_;
  diffusion::NoiseSchedule schedule_;
};

struct EvalOptions {
  AblationMode mode = AblationMode::Full;
  RerankOptions rerank;
  std::size_t threads = 1;
};

struct Evaluation {
  MetricsReport report;
  std::vector<RankResult> ranks;
};

Evaluation evaluate(const Ranker& ranker, std::span<const Query> queries, const kg::FilterIndex& filter,
                    const EvalOptions& options);

struct CaseTrace {
  Query query;
  std::size_t retriever_only = 0;
  std::size_t denoiser_only = 0;
  std::size_t full = 0;
};

CaseTrace case_trace(const Ranker& ranker, const Query& query, const kg::FilterIndex& filter,
                     const RerankOptions& options);

// Rows "query<TAB>mode<TAB>rank" with the query printed as labels.
std::string format_case_traces(std::span<const CaseTrace> traces, const kg::KnowledgeGraph& kg);

// Fraction of queries whose denoiser argmax (single pass, all entities)
// equals the retriever argmax.
double top1_agreement(const Ranker& ranker, std::span<const Query> queries);

}  // namespace radd::eval
