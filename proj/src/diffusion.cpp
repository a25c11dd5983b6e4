#include "radd/diffusion.hpp"

#include "radd/errors.hpp"

#include <cmath>
#include <numbers>

namespace radd::diffusion {

ChannelProbs NoiseSchedule::probs(int t) const {
  if (t < 1 || t > timesteps)
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(timesteps) + "]");
  const double frac = static_cast<double>(t) / static_cast<double>(timesteps);
  ChannelProbs p;
  const double c = std::cos(frac * std::numbers::pi / 2.0);
  p.keep = t == timesteps ? 0.0 : c * c;
  p.rep = rho0 * (1.0 - frac) * (1.0 - p.keep);
  p.mask = 1.0 - p.keep - p.rep;
  return p;
}

ChannelProbs schedule_probs(const NoiseSchedule& schedule, int t) { return schedule.probs(t); }

CorruptionSample corrupt(const NoiseSchedule& schedule, EntityId x0, int t, std::size_t n_entities, Rng& rng) {
  if (x0 < 0 || static_cast<std::size_t>(x0) >= n_entities) throw std::out_of_range("corrupt: x0 out of range");
  const ChannelProbs p = schedule.probs(t);
  if (n_entities < 2 && p.rep > 0.0)
    throw std::invalid_argument("corrupt: replacement needs at least two entities");
  CorruptionSample s{x0, t, x0, Channel::Kept};
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < p.keep) return s;
  if (u < p.keep + p.rep) {
    std::uniform_int_distribution<EntityId> pick(0, static_cast<EntityId>(n_entities - 2));
    EntityId e = pick(rng);
    if (e >= x0) ++e;
    s.xt = e;
    s.channel = Channel::Replaced;
    return s;
  }
  s.xt = static_cast<EntityId>(n_entities);
  s.channel = Channel::Masked;
  return s;
}

std::vector<double> timestep_embedding(double t, std::size_t width) {
  if (width % 2 != 0) throw std::invalid_argument("timestep embedding width must be even");
  const std::size_t half = width / 2;
  std::vector<double> out(width);
  for (std::size_t k = 0; k < half; ++k) {
    const double omega = half == 1 ? 1.0 : std::pow(10.0, -4.0 * static_cast<double>(k) / static_cast<double>(half - 1));
    out[2 * k] = std::sin(t * omega);
    out[2 * k + 1] = std::cos(t * omega);
  }
  return out;
}

DenoiserParams DenoiserParams::init(const DenoiserDims& dims, Rng& rng) {
  if (dims.n_entities == 0 || dims.joint_width == 0 || dims.token_width == 0 || dims.hidden_width == 0)
    throw ShapeError("denoiser: empty dimensions");
  if (dims.time_width % 2 != 0) throw ShapeError("denoiser: time width must be even");
  DenoiserParams p;
  p.dims = dims;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  p.token_table.resize(static_cast<Eigen::Index>(dims.n_entities + 1), static_cast<Eigen::Index>(dims.token_width));
  for (Eigen::Index i = 0; i < p.token_table.size(); ++i) p.token_table.data()[i] = u(rng);
  p.direction.resize(2, static_cast<Eigen::Index>(dims.direction_width));
  for (Eigen::Index i = 0; i < p.direction.size(); ++i) p.direction.data()[i] = u(rng);
  std::vector<Eigen::Index> layer_dims{static_cast<Eigen::Index>(dims.input_width())};
  for (std::size_t i = 0; i < dims.hidden_layers; ++i) layer_dims.push_back(static_cast<Eigen::Index>(dims.hidden_width));
  layer_dims.push_back(static_cast<Eigen::Index>(dims.n_entities));
  p.mlp = num::MlpParams::init(layer_dims, rng);
  return p;
}

DenoiserParams DenoiserParams::zeros_like(const DenoiserParams& o) {
  DenoiserParams p;
  p.dims = o.dims;
  p.token_table = Matrix::Zero(o.token_table.rows(), o.token_table.cols());
  p.direction = Matrix::Zero(o.direction.rows(), o.direction.cols());
  p.mlp = num::MlpParams::zeros_like(o.mlp);
  return p;
}

std::vector<NamedTensor> DenoiserParams::tensors() {
  std::vector<NamedTensor> out{{"token_table", &token_table}, {"direction", &direction}};
  mlp.append_tensors("mlp.", out);
  return out;
}

std::vector<ConstNamedTensor> DenoiserParams::tensors() const {
  std::vector<ConstNamedTensor> out{{"token_table", &token_table}, {"direction", &direction}};
  mlp.append_tensors("mlp.", out);
  return out;
}

namespace {

void write_input(const DenoiserParams& dn, std::span<const double> context, std::span<const double> relation_vec,
                 EntityId xt, int t, Direction direction, double* out) {
  const auto& d = dn.dims;
  if (context.size() != d.joint_width || relation_vec.size() != d.joint_width)
    throw ShapeError("assemble_input: context/relation width must be " + std::to_string(d.joint_width));
  if (xt < 0 || xt > dn.mask_token()) throw std::out_of_range("assemble_input: token out of range");
  std::size_t o = 0;
  for (double v : context) out[o++] = v;
  for (double v : relation_vec) out[o++] = v;
  for (Eigen::Index j = 0; j < dn.token_table.cols(); ++j) out[o++] = dn.token_table(xt, j);
  for (double v : timestep_embedding(static_cast<double>(t), d.time_width)) out[o++] = v;
  const auto dir_row = static_cast<Eigen::Index>(direction);
  for (Eigen::Index j = 0; j < dn.direction.cols(); ++j) out[o++] = dn.direction(dir_row, j);
}

}  // namespace

Vector assemble_input(const DenoiserParams& denoiser, std::span<const double> context,
                      std::span<const double> relation_vec, EntityId xt, int t, Direction direction) {
  Vector out(static_cast<Eigen::Index>(denoiser.dims.input_width()));
  write_input(denoiser, context, relation_vec, xt, t, direction, out.data());
  return out;
}

Vector denoise_logits(const DenoiserParams& denoiser, std::span<const double> input) {
  return num::mlp_apply(denoiser.mlp, input).output;
}

DenoiserBatch prepare_batch(const DenoiserParams& denoiser, std::span<const Triple> triples,
                            const retriever::FusedEntities& fused, const NoiseSchedule& schedule, bool tail_only,
                            std::uint64_t seed, std::uint64_t stream) {
  const std::size_t per_triple = tail_only ? 1 : 2;
  DenoiserBatch batch;
  batch.rows.reserve(triples.size() * per_triple);
  batch.inputs.resize(static_cast<Eigen::Index>(triples.size() * per_triple),
                      static_cast<Eigen::Index>(denoiser.dims.input_width()));
  const std::size_t n = denoiser.dims.n_entities;
  Vector context(static_cast<Eigen::Index>(denoiser.dims.joint_width));
  std::span<double> ctx(context.data(), static_cast<std::size_t>(context.size()));
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const Triple& tr = triples[i];
    Rng rng = make_rng(seed, {stream, i});
    const int t = std::uniform_int_distribution<int>(1, schedule.timesteps)(rng);
    const auto rel = retriever::relation_vector(fused.params(), tr.relation);
    for (std::size_t k = 0; k < per_triple; ++k) {
      const Direction dir = k == 0 ? Direction::Tail : Direction::Head;
      const EntityId known = dir == Direction::Tail ? tr.head : tr.tail;
      const EntityId target = dir == Direction::Tail ? tr.tail : tr.head;
      DenoiserRow row{i, dir, corrupt(schedule, target, t, n, rng)};
      fused.joint(known, tr.relation, ctx);
      write_input(denoiser, ctx, rel, row.sample.xt, t, dir,
                  batch.inputs.data() + static_cast<Eigen::Index>(batch.rows.size()) * batch.inputs.cols());
      batch.rows.push_back(row);
    }
  }
  return batch;
}

Matrix batch_logits(const DenoiserParams& denoiser, const DenoiserBatch& batch, num::MlpTape* tape) {
  return num::mlp_forward(denoiser.mlp, batch.inputs, tape);
}

void batch_backward(const DenoiserParams& denoiser, const DenoiserBatch& batch, const num::MlpTape& tape,
                    const Matrix& logit_grad, DenoiserParams& grads) {
  const Matrix input_grad = num::mlp_backward(denoiser.mlp, tape, logit_grad, grads.mlp);
  const auto& d = denoiser.dims;
  const auto tok_off = static_cast<Eigen::Index>(2 * d.joint_width);
  const auto dir_off = static_cast<Eigen::Index>(2 * d.joint_width + d.token_width + d.time_width);
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const auto& row = batch.rows[r];
    grads.token_table.row(row.sample.xt) += input_grad.row(ri).segment(tok_off, static_cast<Eigen::Index>(d.token_width));
    grads.direction.row(static_cast<Eigen::Index>(row.direction)) +=
        input_grad.row(ri).segment(dir_off, static_cast<Eigen::Index>(d.direction_width));
  }
}

DiffusionLoss diffusion_ce(const DenoiserBatch& batch, const Matrix& logits, double lambda_h, Matrix& logit_grad) {
  std::size_t n_tail = 0, n_head = 0;
  for (const auto& row : batch.rows) (row.direction == Direction::Tail ? n_tail : n_head)++;
  DiffusionLoss out;
  logit_grad.resize(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const auto& row = batch.rows[r];
    const auto ce = num::softmax_ce(row_span(logits, ri), static_cast<std::size_t>(row.sample.x0));
    const bool tail = row.direction == Direction::Tail;
    const double w = tail ? 1.0 / static_cast<double>(n_tail) : lambda_h / static_cast<double>(n_head);
    (tail ? out.tail : out.head) += ce.loss / static_cast<double>(tail ? n_tail : n_head);
    logit_grad.row(ri) = w * ce.grad.transpose();
  }
  out.loss = out.tail + lambda_h * out.head;
  return out;
}

DiffusionLoss diffusion_loss(const DenoiserParams& denoiser, std::span<const Triple> triples,
                             const retriever::FusedEntities& fused, const NoiseSchedule& schedule, double lambda_h,
                             bool tail_only, std::uint64_t seed, std::uint64_t stream, DenoiserParams* grads) {
  if (!(lambda_h > 0.0)) throw std::invalid_argument("diffusion_loss: lambda_h must be positive");
  const DenoiserBatch batch = prepare_batch(denoiser, triples, fused, schedule, tail_only, seed, stream);
  num::MlpTape tape;
  const Matrix logits = batch_logits(denoiser, batch, grads ? &tape : nullptr);
  Matrix logit_grad;
  DiffusionLoss out = diffusion_ce(batch, logits, lambda_h, logit_grad);
  if (grads) batch_backward(denoiser, batch, tape, logit_grad, *grads);
  return out;
}

}  // namespace radd::diffusion
