#include "radd/config.hpp"

#include "radd/errors.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace radd {

const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::Full: return "full";
    case AblationMode::RetrieverOnly: return "retriever-only";
    case AblationMode::DenoiserOnly: return "denoiser-only";
    case AblationMode::StructureOnly: return "structure-only";
    case AblationMode::NoDistill: return "no-distill";
    case AblationMode::TailOnly: return "tail-only";
  }
  return "full";
}

const char* to_string(InferenceMode m) { return m == InferenceMode::SinglePass ? "single-pass" : "iterative"; }
const char* to_string(WeightSource w) { return w == WeightSource::Ema ? "ema" : "live"; }

namespace {

std::string normalize(std::string s) {
  for (char& c : s)
    if (c == '_') c = '-';
  return s;
}

}  // namespace

AblationMode parse_ablation_mode(const std::string& raw) {
  const std::string s = normalize(raw);
  for (auto m : {AblationMode::Full, AblationMode::RetrieverOnly, AblationMode::DenoiserOnly,
                 AblationMode::StructureOnly, AblationMode::NoDistill, AblationMode::TailOnly})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown ablation mode '" + raw + "'");
}

InferenceMode parse_inference_mode(const std::string& raw) {
  const std::string s = normalize(raw);
  if (s == "single-pass") return InferenceMode::SinglePass;
  if (s == "iterative") return InferenceMode::Iterative;
  throw ConfigError("unknown inference mode '" + raw + "'");
}

WeightSource parse_weight_source(const std::string& raw) {
  if (raw == "ema") return WeightSource::Ema;
  if (raw == "live") return WeightSource::Live;
  throw ConfigError("unknown weight source '" + raw + "'");
}

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> errors;
  auto require = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  require(dim > 0, "dim must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(n_negatives > 0, "n_negatives must be positive");
  require(lr_kge > 0, "lr_kge must be positive");
  require(lr_denoiser > 0, "lr_denoiser must be positive");
  require(timesteps > 0, "timesteps must be positive");
  require(rho0 >= 0 && rho0 <= 1, "rho0 must lie in [0, 1]");
  require(lambda_h > 0, "lambda_h must be positive");
  require(lambda_d >= 0, "lambda_d must be non-negative");
  require(lambda_r >= 0, "lambda_r must be non-negative");
  require(margin >= 0, "margin must be non-negative");
  require(adv_temperature >= 0, "adv_temperature must be non-negative");
  require(tau > 0, "tau must be positive");
  require(pool_size >= 2, "pool_size must be at least 2");
  require(hard_fraction >= 0 && hard_fraction <= 1, "hard_fraction must lie in [0, 1]");
  require(top_k >= 1, "top_k must be at least 1");
  require(freeze_epoch >= 0, "freeze_epoch must be non-negative");
  require(epochs >= 0, "epochs must be non-negative");
  require(freeze_epoch <= epochs, "freeze_epoch must not exceed epochs");
  require(ema_decay >= 0 && ema_decay <= 1, "ema_decay must lie in [0, 1]");
  require(eval_every > 0, "eval_every must be positive");
  require(time_width > 0 && time_width % 2 == 0, "time_width must be positive and even");
  require(direction_width > 0, "direction_width must be positive");
  require(hidden_layers > 0, "hidden_layers must be positive");
  require(hidden_multiplier > 0, "hidden_multiplier must be positive");
  return errors;
}

void RunConfig::resolve() {
  switch (ablation) {
    case AblationMode::StructureOnly: train.structure_only = true; break;
    case AblationMode::NoDistill: train.lambda_d = 0.0; break;
    case AblationMode::TailOnly: train.tail_only = true; break;
    default: break;
  }
}

std::vector<std::string> RunConfig::validate(bool check_paths) const {
  std::vector<std::string> errors = train.validate();
  if (train_path.empty()) errors.push_back("train_path is required");
  if (valid_path.empty()) errors.push_back("valid_path is required");
  if (threads == 0) errors.push_back("threads must be positive");
  if (ablation == AblationMode::RetrieverOnly || ablation == AblationMode::DenoiserOnly)
    errors.push_back("ablation '" + std::string(to_string(ablation)) + "' is an evaluation mode, not a training mode");
  if (check_paths) {
    for (const auto* p : {&train_path, &valid_path, &test_path, &visual_path, &textual_path})
      if (!p->empty() && !std::filesystem::exists(*p)) errors.push_back("path does not exist: " + p->string());
  }
  return errors;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  if constexpr (std::is_same_v<T, double>) {
    try {
      std::size_t pos = 0;
      out = std::stod(s, &pos);
      return pos == s.size();
    } catch (...) {
      return false;
    }
  } else {
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
  }
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes") return out = true, true;
  if (s == "false" || s == "0" || s == "no") return out = false, true;
  return false;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<bool(RunConfig&, const std::string&)> set;
};

template <class T>
Field number_field(T TrainConfig::*member) {
  return {[member](const RunConfig& c) {
            if constexpr (std::is_same_v<T, double>) return fmt_double(c.train.*member);
            else return std::to_string(c.train.*member);
          },
          [member](RunConfig& c, const std::string& v) { return parse_number(v, c.train.*member); }};
}

Field bool_field(bool TrainConfig::*member) {
  return {[member](const RunConfig& c) { return std::string(c.train.*member ? "true" : "false"); },
          [member](RunConfig& c, const std::string& v) { return parse_bool(v, c.train.*member); }};
}

Field path_field(std::filesystem::path RunConfig::*member) {
  return {[member](const RunConfig& c) { return (c.*member).string(); },
          [member](RunConfig& c, const std::string& v) {
            c.*member = v;
            return true;
          }};
}

template <class E, class Parse, class Show>
Field enum_field(E RunConfig::*member, Parse parse, Show show) {
  return {[member, show](const RunConfig& c) { return std::string(show(c.*member)); },
          [member, parse](RunConfig& c, const std::string& v) {
            try {
              c.*member = parse(v);
              return true;
            } catch (const ConfigError&) {
              return false;
            }
          }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"train_path", path_field(&RunConfig::train_path)},
      {"valid_path", path_field(&RunConfig::valid_path)},
      {"test_path", path_field(&RunConfig::test_path)},
      {"visual_path", path_field(&RunConfig::visual_path)},
      {"textual_path", path_field(&RunConfig::textual_path)},
      {"run_dir", path_field(&RunConfig::run_dir)},
      {"ablation", enum_field(&RunConfig::ablation, parse_ablation_mode, [](AblationMode m) { return to_string(m); })},
      {"eval_inference",
       enum_field(&RunConfig::eval_inference, parse_inference_mode, [](InferenceMode m) { return to_string(m); })},
      {"eval_weights",
       enum_field(&RunConfig::eval_weights, parse_weight_source, [](WeightSource w) { return to_string(w); })},
      {"threads", {[](const RunConfig& c) { return std::to_string(c.threads); },
                   [](RunConfig& c, const std::string& v) { return parse_number(v, c.threads); }}},
      {"dim", number_field(&TrainConfig::dim)},
      {"batch_size", number_field(&TrainConfig::batch_size)},
      {"n_negatives", number_field(&TrainConfig::n_negatives)},
      {"lr_kge", number_field(&TrainConfig::lr_kge)},
      {"lr_denoiser", number_field(&TrainConfig::lr_denoiser)},
      {"timesteps", number_field(&TrainConfig::timesteps)},
      {"rho0", number_field(&TrainConfig::rho0)},
      {"lambda_h", number_field(&TrainConfig::lambda_h)},
      {"lambda_d", number_field(&TrainConfig::lambda_d)},
      {"lambda_r", number_field(&TrainConfig::lambda_r)},
      {"margin", number_field(&TrainConfig::margin)},
      {"gamma_kge", number_field(&TrainConfig::gamma_kge)},
      {"adv_temperature", number_field(&TrainConfig::adv_temperature)},
      {"tau", number_field(&TrainConfig::tau)},
      {"pool_size", number_field(&TrainConfig::pool_size)},
      {"hard_fraction", number_field(&TrainConfig::hard_fraction)},
      {"top_k", number_field(&TrainConfig::top_k)},
      {"freeze_epoch", number_field(&TrainConfig::freeze_epoch)},
      {"ema_decay", number_field(&TrainConfig::ema_decay)},
      {"epochs", number_field(&TrainConfig::epochs)},
      {"eval_every", number_field(&TrainConfig::eval_every)},
      {"seed", number_field(&TrainConfig::seed)},
      {"time_width", number_field(&TrainConfig::time_width)},
      {"direction_width", number_field(&TrainConfig::direction_width)},
      {"hidden_layers", number_field(&TrainConfig::hidden_layers)},
      {"hidden_multiplier", number_field(&TrainConfig::hidden_multiplier)},
      {"structure_only", bool_field(&TrainConfig::structure_only)},
      {"tail_only", bool_field(&TrainConfig::tail_only)},
      {"distill_after_freeze", bool_field(&TrainConfig::distill_after_freeze)},
      {"augment_inverse_relations", bool_field(&TrainConfig::augment_inverse_relations)},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : fields())
    if (name == key) return &field;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues to_key_values(const RunConfig& config) {
  KeyValues out;
  for (const auto& [name, field] : fields()) out.emplace_back(name, field.get(config));
  return out;
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [k, v] : to_key_values(config)) out += k + " = " + v + "\n";
  return out;
}

void apply_override(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  if (!f->set(config, value)) throw ConfigError("invalid value '" + value + "' for key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text, const RunConfig& base) {
  RunConfig config = base;
  std::vector<std::string> errors;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      apply_override(config, key, value);
    } catch (const ConfigError& e) {
      errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "configuration errors:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig config = parse_run_config(buf.str());
  // relative data paths resolve against the config file's directory
  const auto base = path.parent_path();
  for (auto* p : {&config.train_path, &config.valid_path, &config.test_path, &config.visual_path,
                  &config.textual_path})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  return config;
}

}  // namespace radd
