#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace radd {

enum class AblationMode { Full, RetrieverOnly, DenoiserOnly, StructureOnly, NoDistill, TailOnly };
enum class InferenceMode { SinglePass, Iterative };
enum class WeightSource { Ema, Live };

const char* to_string(AblationMode m);
const char* to_string(InferenceMode m);
const char* to_string(WeightSource w);
AblationMode parse_ablation_mode(const std::string& s);
InferenceMode parse_inference_mode(const std::string& s);
WeightSource parse_weight_source(const std::string& s);

struct TrainConfig {
  std::size_t dim = 250;
  std::size_t batch_size = 1024;
  std::size_t n_negatives = 128;
  double lr_kge = 1e-4;
  double lr_denoiser = 1e-4;
  int timesteps = 100;
  double rho0 = 0.3;
  double lambda_h = 2.0;
  double lambda_d = 1.0;
  double lambda_r = 0.1;
  double margin = 4.0;
  double gamma_kge = 6.0;
  double adv_temperature = 1.0;
  double tau = 0.7;
  std::size_t pool_size = 64;
  double hard_fraction = 0.5;
  std::size_t top_k = 256;
  int freeze_epoch = 100;
  double ema_decay = 0.9999;
  int epochs = 1000;
  int eval_every = 10;
  std::uint64_t seed = 1;

  std::size_t time_width = 64;
  std::size_t direction_width = 32;
  std::size_t hidden_layers = 2;
  std::size_t hidden_multiplier = 4;  // hidden width = multiplier * 2d

  bool structure_only = false;
  bool tail_only = false;
  bool distill_after_freeze = false;
  bool augment_inverse_relations = false;

  // Every violated invariant, not just the first.
  std::vector<std::string> validate() const;
};

struct RunConfig {
  TrainConfig train;
  std::filesystem::path train_path;
  std::filesystem::path valid_path;
  std::filesystem::path test_path;
  std::filesystem::path visual_path;
  std::filesystem::path textual_path;
  std::filesystem::path run_dir = "runs/radd";
  AblationMode ablation = AblationMode::Full;
  InferenceMode eval_inference = InferenceMode::SinglePass;
  WeightSource eval_weights = WeightSource::Ema;
  std::size_t threads = 1;

  // Applies the ablation switch to the training flags (structure_only,
  // tail_only, lambda_d).
  void resolve();

  std::vector<std::string> validate(bool check_paths) const;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Canonical, fully resolved key=value listing in a fixed order.
KeyValues to_key_values(const RunConfig& config);
std::string to_text(const RunConfig& config);

// Parses "key = value" lines (# comments). Unknown keys and malformed values
// are collected and reported together as a ConfigError.
RunConfig parse_run_config(const std::string& text, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Applies a single override, throwing ConfigError on unknown key or bad value.
void apply_override(RunConfig& config, const std::string& key, const std::string& value);

}  // namespace radd
