#pragma once

#include "radd/kgdata.hpp"
#include "radd/numkernel.hpp"
#include "radd/retriever.hpp"
#include "radd/rng.hpp"
#include "radd/tensor.hpp"

#include <span>
#include <vector>

namespace radd::diffusion {

using kg::Direction;
using kg::EntityId;
using kg::RelationId;
using kg::Triple;

struct ChannelProbs {
  double keep = 1.0;
  double mask = 0.0;
  double rep = 0.0;
};

// keep(t) = cos^2((t/T) pi/2); the non-kept mass is split into replacement
// rho0 (1 - t/T) and masking, so t = T is pure masking.
struct NoiseSchedule {
  int timesteps = 100;
  double rho0 = 0.3;

  ChannelProbs probs(int t) const;
};

ChannelProbs schedule_probs(const NoiseSchedule& schedule, int t);

enum class Channel : std::uint8_t { Kept, Masked, Replaced };

struct CorruptionSample {
  EntityId x0 = 0;
  int t = 0;
  EntityId xt = 0;  // == n_entities encodes MASK
  Channel channel = Channel::Kept;
};

CorruptionSample corrupt(const NoiseSchedule& schedule, EntityId x0, int t, std::size_t n_entities, Rng& rng);

// Interleaved (sin(t w_k), cos(t w_k)) with w_k geometric from 1 to 1e-4.
std::vector<double> timestep_embedding(double t, std::size_t width);

struct DenoiserDims {
  std::size_t n_entities = 0;
  std::size_t joint_width = 0;  // 2d
  std::size_t token_width = 0;  // d_tok
  std::size_t time_width = 64;
  std::size_t direction_width = 32;
  std::size_t hidden_width = 0;
  std::size_t hidden_layers = 2;

  std::size_t input_width() const { return 2 * joint_width + token_width + time_width + direction_width; }
};

struct DenoiserParams {
  DenoiserDims dims;
  Matrix token_table;  // (|E| + 1) x d_tok, last row is the MASK embedding
  Matrix direction;    // 2 x d_dir, rows (tail, head)
  num::MlpParams mlp;  // input_width -> hidden... -> |E|

  EntityId mask_token() const { return static_cast<EntityId>(dims.n_entities); }

  static DenoiserParams init(const DenoiserDims& dims, Rng& rng);
  static DenoiserParams zeros_like(const DenoiserParams& other);

  std::vector<NamedTensor> tensors();
  std::vector<ConstNamedTensor> tensors() const;
};

// Concatenation [context; relation; token(xt); time(t); direction].
Vector assemble_input(const DenoiserParams& denoiser, std::span<const double> context,
                      std::span<const double> relation_vec, EntityId xt, int t, Direction direction);

Vector denoise_logits(const DenoiserParams& denoiser, std::span<const double> input);

// One row of a denoiser mini-batch: which triple, which direction, and the
// corruption applied to the clean id.
struct DenoiserRow {
  std::size_t triple_index = 0;
  Direction direction = Direction::Tail;
  CorruptionSample sample;
};

struct DenoiserBatch {
  std::vector<DenoiserRow> rows;
  Matrix inputs;
};

// Samples one timestep per triple (shared by both directions), corrupts the
// clean entity of each requested direction and assembles the inputs. Context
// vectors come from the retriever's fused representation and are constants.
DenoiserBatch prepare_batch(const DenoiserParams& denoiser, std::span<const Triple> triples,
                            const retriever::FusedEntities& fused, const NoiseSchedule& schedule, bool tail_only,
                            std::uint64_t seed, std::uint64_t stream);

Matrix batch_logits(const DenoiserParams& denoiser, const DenoiserBatch& batch, num::MlpTape* tape);

// Backpropagates logit gradients into the MLP, token table and direction
// embeddings. The context and relation slices receive no gradient.
void batch_backward(const DenoiserParams& denoiser, const DenoiserBatch& batch, const num::MlpTape& tape,
                    const Matrix& logit_grad, DenoiserParams& grads);

struct DiffusionLoss {
  double loss = 0.0;  // L_tail + lambda_h L_head
  double tail = 0.0;  // batch-mean CE of the tail rows
  double head = 0.0;
};

// Cross-entropy part of the gradient: writes d(loss)/d(logits) into
// logit_grad for every row, using the per-direction batch means.
DiffusionLoss diffusion_ce(const DenoiserBatch& batch, const Matrix& logits, double lambda_h, Matrix& logit_grad);

// Full L_diff with gradients for a batch of triples.
DiffusionLoss diffusion_loss(const DenoiserParams& denoiser, std::span<const Triple> triples,
                             const retriever::FusedEntities& fused, const NoiseSchedule& schedule, double lambda_h,
                             bool tail_only, std::uint64_t seed, std::uint64_t stream, DenoiserParams* grads);

}  // namespace radd::diffusion
