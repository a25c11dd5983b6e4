#include "radd/numkernel.hpp"

#include "radd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace radd::num {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

MlpParams MlpParams::init(const std::vector<Eigen::Index>& dims, Rng& rng, Activation hidden) {
  if (dims.size() < 2) throw ShapeError("mlp needs at least input and output dims");
  MlpParams p;
  p.hidden = hidden;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double bound = std::sqrt(6.0 / static_cast<double>(dims[i] + dims[i + 1]));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer layer;
    layer.weight.resize(dims[i + 1], dims[i]);
    for (Eigen::Index k = 0; k < layer.weight.size(); ++k) layer.weight.data()[k] = u(rng);
    layer.bias = Matrix::Zero(1, dims[i + 1]);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

MlpParams MlpParams::zeros_like(const MlpParams& other) {
  MlpParams p;
  p.hidden = other.hidden;
  for (const auto& l : other.layers)
    p.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Matrix::Zero(1, l.bias.cols())});
  return p;
}

void MlpParams::append_tensors(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({prefix + "layer" + std::to_string(i) + ".weight", &layers[i].weight});
    out.push_back({prefix + "layer" + std::to_string(i) + ".bias", &layers[i].bias});
  }
}

void MlpParams::append_tensors(const std::string& prefix, std::vector<ConstNamedTensor>& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({prefix + "layer" + std::to_string(i) + ".weight", &layers[i].weight});
    out.push_back({prefix + "layer" + std::to_string(i) + ".bias", &layers[i].bias});
  }
}

Matrix mlp_forward(const MlpParams& params, const Matrix& batch, MlpTape* tape) {
  if (batch.cols() != params.in_dim())
    throw ShapeError("mlp input width " + std::to_string(batch.cols()) + ", expected " +
                     std::to_string(params.in_dim()));
  if (tape) {
    tape->inputs.clear();
    tape->pre_activation.clear();
  }
  Matrix x = batch;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& layer = params.layers[i];
    Matrix z = x * layer.weight.transpose();
    z.rowwise() += layer.bias.row(0);
    const bool last = i + 1 == params.layers.size();
    Matrix a = z;
    if (!last && params.hidden == Activation::GeluTanh) a = z.unaryExpr([](double v) { return gelu(v); });
    if (tape) {
      tape->inputs.push_back(std::move(x));
      tape->pre_activation.push_back(std::move(z));
    }
    x = std::move(a);
  }
  return x;
}

MlpOutput mlp_apply(const MlpParams& params, std::span<const double> input) {
  if (static_cast<Eigen::Index>(input.size()) != params.in_dim())
    throw ShapeError("mlp_apply: input length " + std::to_string(input.size()) + ", expected " +
                     std::to_string(params.in_dim()));
  Matrix batch = Eigen::Map<const Matrix>(input.data(), 1, static_cast<Eigen::Index>(input.size()));
  MlpOutput out;
  Matrix y = mlp_forward(params, batch, &out.tape);
  out.output = y.row(0).transpose();
  return out;
}

Matrix mlp_backward(const MlpParams& params, const MlpTape& tape, const Matrix& output_grad, MlpParams& grads) {
  const std::size_t n = params.layers.size();
  if (tape.inputs.size() != n || tape.pre_activation.size() != n)
    throw ShapeError("mlp_backward: tape does not match network depth");
  if (grads.layers.size() != n) throw ShapeError("mlp_backward: gradient buffer does not match network depth");
  if (output_grad.cols() != params.out_dim() || output_grad.rows() != tape.inputs.front().rows())
    throw ShapeError("mlp_backward: output gradient shape does not match tape");

  Matrix delta = output_grad;
  for (std::size_t k = n; k-- > 0;) {
    const auto& layer = params.layers[k];
    const bool last = k + 1 == n;
    if (tape.inputs[k].cols() != layer.weight.cols() || tape.pre_activation[k].cols() != layer.weight.rows())
      throw ShapeError("mlp_backward: stale tape");
    if (!last && params.hidden == Activation::GeluTanh)
      delta = delta.cwiseProduct(tape.pre_activation[k].unaryExpr([](double v) { return gelu_derivative(v); }));
    grads.layers[k].weight.noalias() += delta.transpose() * tape.inputs[k];
    grads.layers[k].bias.row(0) += delta.colwise().sum();
    delta = delta * layer.weight;
  }
  return delta;
}

void log_softmax(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

Vector softmax(std::span<const double> logits, double temperature) {
  Vector p(static_cast<Eigen::Index>(logits.size()));
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[static_cast<Eigen::Index>(i)] = std::exp(logits[i] / temperature - mx);
    sum += p[static_cast<Eigen::Index>(i)];
  }
  return p / sum;
}

LossGrad softmax_ce(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw std::out_of_range("softmax_ce: target out of range");
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("softmax_ce: non-finite logit");
  LossGrad out;
  out.grad.resize(static_cast<Eigen::Index>(logits.size()));
  std::span<double> lp(out.grad.data(), logits.size());
  log_softmax(logits, lp);
  out.loss = -lp[target];
  for (double& v : lp) v = std::exp(v);
  lp[target] -= 1.0;
  return out;
}

LossGrad tempered_kl(std::span<const double> teacher_scores, std::span<const double> student_logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tempered_kl: temperature must be positive");
  if (teacher_scores.size() != student_logits.size())
    throw ShapeError("tempered_kl: teacher and student lengths differ");
  if (teacher_scores.size() < 2) throw ShapeError("tempered_kl: need at least two candidates");
  const std::size_t n = teacher_scores.size();
  std::vector<double> t(n), s(n), lt(n), ls(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = teacher_scores[i] / tau;
    s[i] = student_logits[i] / tau;
  }
  log_softmax(t, lt);
  log_softmax(s, ls);
  LossGrad out;
  out.grad.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double pt = std::exp(lt[i]);
    if (pt > 0.0) out.loss += pt * (lt[i] - ls[i]);
    out.grad[static_cast<Eigen::Index>(i)] = (std::exp(ls[i]) - pt) / tau;
  }
  out.loss = std::max(out.loss, 0.0);
  return out;
}

AdamState::AdamState(AdamConfig config, const std::vector<const Matrix*>& shapes) : config_(config) {
  for (const Matrix* s : shapes) {
    m_.push_back(Matrix::Zero(s->rows(), s->cols()));
    v_.push_back(Matrix::Zero(s->rows(), s->cols()));
  }
}

void AdamState::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("adam: parameter count does not match optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], m_[i], "adam parameter");
    require_same_shape(*grads[i], m_[i], "adam gradient");
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i]->data();
    const double* g = grads[i]->data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (Eigen::Index k = 0; k < m_[i].size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

void AdamState::round_to_storage() {
  for (auto& m : m_) radd::round_to_storage(m);
  for (auto& v : v_) radd::round_to_storage(v);
}

void ema_update(const std::vector<Matrix*>& shadow, const std::vector<const Matrix*>& live, double decay) {
  if (shadow.size() != live.size()) throw ShapeError("ema: tensor count mismatch");
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    require_same_shape(*shadow[i], *live[i], "ema tensor");
    *shadow[i] = decay * *shadow[i] + (1.0 - decay) * *live[i];
  }
}

GradCheckResult grad_check(const ScalarFunction& loss, std::span<const double> point,
                           std::span<const double> analytic, double h, double floor) {
  if (point.size() != analytic.size()) throw ShapeError("grad_check: gradient length differs from point");
  std::vector<double> x(point.begin(), point.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = loss(x);
    x[i] = orig - h;
    const double fm = loss(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite loss at perturbed coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace radd::num
