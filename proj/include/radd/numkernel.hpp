#pragma once

#include "radd/rng.hpp"
#include "radd/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace radd::num {

enum class Activation { GeluTanh, Identity };

double gelu(double x);
double gelu_derivative(double x);

struct DenseLayer {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out
};

// Fully connected network; the hidden activation is applied after every layer
// except the last.
struct MlpParams {
  std::vector<DenseLayer> layers;
  Activation hidden = Activation::GeluTanh;

  Eigen::Index in_dim() const { return layers.front().weight.cols(); }
  Eigen::Index out_dim() const { return layers.back().weight.rows(); }

  // dims = {in, hidden..., out}; scaled-uniform (Glorot) weights, zero bias.
  static MlpParams init(const std::vector<Eigen::Index>& dims, Rng& rng, Activation hidden = Activation::GeluTanh);
  static MlpParams zeros_like(const MlpParams& other);

  void append_tensors(const std::string& prefix, std::vector<NamedTensor>& out);
  void append_tensors(const std::string& prefix, std::vector<ConstNamedTensor>& out) const;
};

// Activations recorded by a forward pass; rows are batch elements.
struct MlpTape {
  std::vector<Matrix> inputs;          // input to each layer
  std::vector<Matrix> pre_activation;  // affine output of each layer
};

struct MlpOutput {
  Vector output;
  MlpTape tape;
};

MlpOutput mlp_apply(const MlpParams& params, std::span<const double> input);

// Batched forward pass over the rows of `batch`.
Matrix mlp_forward(const MlpParams& params, const Matrix& batch, MlpTape* tape);

// Accumulates parameter gradients into `grads` (same shapes as params) and
// returns the gradient with respect to the batch input.
Matrix mlp_backward(const MlpParams& params, const MlpTape& tape, const Matrix& output_grad, MlpParams& grads);

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

void log_softmax(std::span<const double> logits, std::span<double> out);
Vector softmax(std::span<const double> logits, double temperature = 1.0);

LossGrad softmax_ce(std::span<const double> logits, std::size_t target);

// KL(softmax(teacher / tau) || softmax(student / tau)); gradient is with
// respect to the student logits only.
LossGrad tempered_kl(std::span<const double> teacher_scores, std::span<const double> student_logits, double tau);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig config, const std::vector<const Matrix*>& shapes);

  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads);

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }
  std::vector<Matrix>& first_moment() { return m_; }
  std::vector<Matrix>& second_moment() { return v_; }
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }
  void round_to_storage();

 private:
  AdamConfig config_;
  std::vector<Matrix> m_, v_;
  std::uint64_t step_ = 0;
};

// shadow <- decay * shadow + (1 - decay) * live, elementwise.
void ema_update(const std::vector<Matrix*>& shadow, const std::vector<const Matrix*>& live, double decay);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFunction = std::function<double(std::span<const double>)>;

// Central differences per coordinate; relative error uses the denominator
// max(|analytic|, |numeric|, floor). The floor keeps round-off on
// vanishing gradient entries from reading as a relative failure.
GradCheckResult grad_check(const ScalarFunction& loss, std::span<const double> point,
                           std::span<const double> analytic, double h = 1e-5, double floor = 1e-12);

}  // namespace radd::num
