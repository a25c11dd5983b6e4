#pragma once

#include "radd/kgdata.hpp"
#include "radd/rng.hpp"
#include "radd/tensor.hpp"

#include <array>
#include <span>
#include <vector>

namespace radd::retriever {

using kg::Direction;
using kg::EntityId;
using kg::ModalityFeatureStore;
using kg::Query;
using kg::RelationId;
using kg::Triple;

// Complex vectors are stored as d interleaved (real, imag) pairs, so a
// "joint" vector has width 2d.
struct RetrieverParams {
  std::size_t dim = 0;          // complex components d
  bool structure_only = false;  // gate pinned to (1, 0, 0), projections unused

  Matrix structural;      // |E| x 2d
  Matrix relation_phase;  // |R| x d, radians, interpreted modulo 2 pi
  Matrix gate_logits;     // |R| x 3 (structural, visual, textual)
  Matrix proj_visual;     // d_v x 2d
  Matrix bias_visual;     // 1 x 2d
  Matrix proj_textual;    // d_t x 2d
  Matrix bias_textual;    // 1 x 2d
  Matrix default_visual;  // 1 x 2d, used when an entity has no visual feature
  Matrix default_textual;

  std::size_t n_entities() const { return static_cast<std::size_t>(structural.rows()); }
  std::size_t n_relations() const { return static_cast<std::size_t>(relation_phase.rows()); }
  Eigen::Index width() const { return static_cast<Eigen::Index>(2 * dim); }

  static RetrieverParams init(std::size_t n_entities, std::size_t n_relations, std::size_t dim,
                              std::size_t visual_dim, std::size_t textual_dim, Rng& rng, bool structure_only = false);
  static RetrieverParams zeros_like(const RetrieverParams& other);

  std::vector<NamedTensor> tensors();
  std::vector<ConstNamedTensor> tensors() const;
};

std::array<double, 3> gate_weights(const RetrieverParams& params, RelationId relation);

// Relation rotation as interleaved (cos, sin) pairs.
std::vector<double> relation_vector(const RetrieverParams& params, RelationId relation);

// Relation-gated joint representation of one entity, computed from scratch.
Vector fuse_joint(const RetrieverParams& params, EntityId entity, RelationId relation,
                  const ModalityFeatureStore& features);

// -|| h o r - t ||_1 over complex components (sum of moduli).
double rotate_score(std::span<const double> head_joint, RelationId relation, std::span<const double> tail_joint,
                    const RetrieverParams& params);
double rotate_score_with_phases(std::span<const double> head_joint, std::span<const double> phases,
                                std::span<const double> tail_joint);

// Caches projected modality vectors for every entity so repeated fusion and
// scoring under fixed parameters is cheap.
class FusedEntities {
 public:
  FusedEntities(const RetrieverParams& params, const ModalityFeatureStore& features);

  void joint(EntityId e, RelationId r, std::span<double> out) const;
  Vector joint(EntityId e, RelationId r) const;

  std::span<const double> modality(EntityId e, int m) const;
  // Cached relation_vector(params, r).
  std::span<const double> rotation(RelationId r) const { return row_span(rotation_, r); }
  bool modality_present(EntityId e, int m) const;

  const RetrieverParams& params() const { return *params_; }
  const ModalityFeatureStore& features() const { return *features_; }
  std::size_t n_entities() const { return params_->n_entities(); }

 private:
  const RetrieverParams* params_;
  const ModalityFeatureStore* features_;
  Matrix visual_;   // |E| x 2d, default row substituted where absent
  Matrix textual_;
  Matrix rotation_;  // |R| x 2d
  Matrix joint_cache_;  // (|R| |E|) x 2d, empty when too large
};

// Gradient accumulator for retriever parameters. Joint-vector gradients are
// routed to the structural rows, the projected modality tables and the gate;
// finalize() pushes the projected-table gradients through the projections.
class RetrieverGrad {
 public:
  explicit RetrieverGrad(const RetrieverParams& params);

  void add_joint(const FusedEntities& fused, EntityId e, RelationId r, std::span<const double> g);
  void add_phase(RelationId r, std::size_t component, double g) { grads_.relation_phase(r, static_cast<Eigen::Index>(component)) += g; }
  void merge(const RetrieverGrad& other);
  void finalize(const ModalityFeatureStore& features);
  void scale(double s);

  const RetrieverParams& grads() const { return grads_; }
  RetrieverParams& grads() { return grads_; }

 private:
  RetrieverParams grads_;
  Matrix visual_table_;
  Matrix textual_table_;
  bool finalized_ = false;
};

// Score of (head, r, tail) under the cached fusion; when `grad` is given,
// accumulates upstream * d(score)/d(params).
double score_triple(const FusedEntities& fused, EntityId head, RelationId r, EntityId tail,
                    RetrieverGrad* grad = nullptr, double upstream = 1.0);

std::vector<double> score_all(const FusedEntities& fused, const Query& query);
std::vector<double> score_all(const RetrieverParams& params, const Query& query, const ModalityFeatureStore& features);

struct Shortlist {
  std::vector<EntityId> entity_ids;  // descending score, ties by ascending id
  std::vector<double> scores;

  bool contains(EntityId e) const;
};

Shortlist topk_shortlist(std::span<const double> scores, std::size_t k);

// n ids drawn uniformly (with replacement) from E \ {answer}, where the
// answer is the tail for tail corruption and the head otherwise.
std::vector<EntityId> sample_negatives(std::size_t n_entities, const Triple& positive, Direction direction,
                                       std::size_t n, Rng& rng);

struct KgeLossResult {
  double loss = 0.0;
  double positive_score = 0.0;
  std::vector<double> negative_scores;
};

// Self-adversarial negative-sampling loss; adversarial weights are treated as
// constants. Gradients (scaled by `weight`) go to `grad` when provided.
KgeLossResult kge_loss(const FusedEntities& fused, const Triple& positive, Direction direction,
                       std::span<const EntityId> negatives, double gamma, double adv_temperature,
                       RetrieverGrad* grad = nullptr, double weight = 1.0);

struct RankLossResult {
  double loss = 0.0;
  double grad_positive = 0.0;
  double grad_negative = 0.0;
};

RankLossResult rank_margin_loss(double s_pos, double s_neg, double margin);

// The n highest-scoring entities other than the answer.
std::vector<EntityId> hard_negatives(std::span<const double> scores, EntityId answer, std::size_t n);

}  // namespace radd::retriever
