#include "radd/cli.hpp"

#include "radd/checkpoint.hpp"
#include "radd/config.hpp"
#include "radd/errors.hpp"
#include "radd/evalrank.hpp"
#include "radd/gradcheck.hpp"
#include "radd/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <ostream>
#include <sstream>

namespace radd::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string());
}

kg::ModalityFeatures features_or_absent(const fs::path& path, std::size_t n) {
  return path.empty() ? kg::ModalityFeatures::absent(n) : kg::load_features(path, n);
}

struct LoadedData {
  kg::KnowledgeGraph kg;
  kg::ModalityFeatureStore features;
};

LoadedData load_data(const RunConfig& config) {
  LoadedData d;
  d.kg = kg::load_knowledge_graph(config.train_path, config.valid_path, config.test_path);
  d.features.visual = features_or_absent(config.visual_path, d.kg.n_entities());
  d.features.textual = features_or_absent(config.textual_path, d.kg.n_entities());
  return d;
}

void throw_if_invalid(const std::vector<std::string>& errors) {
  if (errors.empty()) return;
  std::string msg = "configuration errors:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

// --- synth -----------------------------------------------------------------

int cmd_synth(const fs::path& out_dir, kg::SynthOptions options, const std::string& manifest, std::ostream& out) {
  if (!manifest.empty()) options = parse_synth_manifest(read_text(manifest));
  write_synth(out_dir, options);
  out << "wrote synthetic graph (seed " << options.seed << ") to " << out_dir.string() << "\n";
  return kOk;
}

// --- train -----------------------------------------------------------------

int cmd_train(const fs::path& config_path, const std::vector<std::string>& overrides, std::size_t threads,
              const std::string& run_dir, std::ostream& out) {
  RunConfig config = load_run_config(config_path);
  for (const auto& kv : overrides) {
    const auto [k, v] = split_override(kv);
    apply_override(config, k, v);
  }
  if (threads > 0) config.threads = threads;
  if (!run_dir.empty()) config.run_dir = run_dir;
  config.resolve();
  throw_if_invalid(config.validate(true));

  const LoadedData data = load_data(config);
  trainer::check_config(config.train, data.kg);

  const fs::path dir = fresh_run_dir(config.run_dir);
  ensure_dir(dir);
  write_text(dir / "config.resolved", to_text(config));
  std::ofstream log(dir / "train_log.tsv");
  if (!log) throw DataError("cannot write " + (dir / "train_log.tsv").string());
  log << trainer::log_header() << '\n';
  out << trainer::log_header() << '\n';

  trainer::TrainOptions opts;
  opts.threads = config.threads;
  opts.eval_weights = config.eval_weights;
  opts.hooks.on_eval = [&](const trainer::EvalRecord& rec) {
    const std::string line = trainer::log_line(rec);
    log << line << '\n' << std::flush;
    out << line << '\n' << std::flush;
  };
  const auto result = trainer::train(data.kg, data.features, config.train, opts);

  auto save = [&](const trainer::TrainState& state, const char* name) {
    ckpt::Checkpoint c{config, data.kg.n_entities(), data.kg.n_relations(), data.features.visual.dim,
                       data.features.textual.dim, state};
    ckpt::save_checkpoint(c, dir / name);
  };
  save(result.best, "best.ckpt");
  save(result.final, "final.ckpt");
  const auto& best = result.best.history.back();
  out << "best validation MRR " << best.valid.overall.mrr << " at epoch " << best.epoch << "\n";
  out << "run directory: " << dir.string() << "\n";
  return kOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string mode = "full";
  std::size_t top_k = 0;  // 0: the checkpoint's top_k
  std::string inference;
  std::string weights;
  std::string split = "test";
  std::string out_dir;
  std::size_t cases = 8;
  std::size_t threads = 0;
  std::string train, valid, test, visual, textual;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(a.checkpoint);
  RunConfig& config = c.config;
  for (auto [arg, target] : {std::pair{&a.train, &config.train_path}, {&a.valid, &config.valid_path},
                             {&a.test, &config.test_path}, {&a.visual, &config.visual_path},
                             {&a.textual, &config.textual_path}})
    if (!arg->empty()) *target = *arg;
  if (!a.inference.empty()) config.eval_inference = parse_inference_mode(a.inference);
  if (!a.weights.empty()) config.eval_weights = parse_weight_source(a.weights);
  if (a.threads > 0) config.threads = a.threads;
  const AblationMode mode = parse_ablation_mode(a.mode);
  kg::Split split;
  if (a.split == "test") split = kg::Split::Test;
  else if (a.split == "valid") split = kg::Split::Valid;
  else throw ConfigError("unknown split '" + a.split + "' (expected valid or test)");

  const LoadedData data = load_data(config);
  if (data.kg.n_entities() != c.n_entities || data.kg.n_relations() != c.n_relations)
    throw ShapeError("checkpoint was trained on " + std::to_string(c.n_entities) + " entities / " +
                     std::to_string(c.n_relations) + " relations, data has " + std::to_string(data.kg.n_entities()) +
                     " / " + std::to_string(data.kg.n_relations()));
  if (data.features.visual.dim != c.visual_dim || data.features.textual.dim != c.textual_dim)
    throw ShapeError("feature dimensions differ from the checkpoint");

  const std::size_t k = a.top_k > 0 ? a.top_k : config.train.top_k;
  if (k > data.kg.n_entities())
    throw ConfigError("K (" + std::to_string(k) + ") exceeds the entity count (" +
                      std::to_string(data.kg.n_entities()) + ")");

  const auto& denoiser = config.eval_weights == WeightSource::Ema ? c.state.denoiser_ema : c.state.denoiser;
  eval::Ranker ranker(c.state.retriever, denoiser, data.features, trainer::noise_schedule(config.train));
  eval::EvalOptions opts;
  opts.mode = mode;
  opts.rerank.top_k = k;
  opts.rerank.inference = config.eval_inference;
  opts.rerank.seed = config.train.seed;
  opts.threads = config.threads;
  const auto queries = kg::make_queries(data.kg, split);
  if (queries.empty()) throw DataError("the " + a.split + " split is empty");
  const auto result = eval::evaluate(ranker, queries, data.kg.filter, opts);

  const fs::path dir = a.out_dir.empty() ? fs::path(a.checkpoint).parent_path() / ("eval-" + std::string(to_string(mode)))
                                         : fs::path(a.out_dir);
  ensure_dir(dir);
  const std::string tsv = eval::format_metrics_tsv(result.report);
  write_text(dir / "metrics.tsv", tsv);
  write_text(dir / "metrics.txt", eval::format_metrics_kv(result.report));

  std::vector<eval::CaseTrace> traces;
  if (a.cases > 0) {
    Rng rng = make_rng(config.train.seed, {0xca5e});
    std::vector<std::size_t> idx(queries.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(a.cases, idx.size()));
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) traces.push_back(eval::case_trace(ranker, queries[i], data.kg.filter, opts.rerank));
    write_text(dir / "cases.tsv", eval::format_case_traces(traces, data.kg));
  }
  out << "mode=" << to_string(mode) << " K=" << k << " inference=" << to_string(config.eval_inference)
      << " weights=" << to_string(config.eval_weights) << " split=" << a.split << "\n";
  out << tsv;
  out << "reports written to " << dir.string() << "\n";
  return kOk;
}

// --- gradcheck -------------------------------------------------------------

int cmd_gradcheck(const gradcheck::Options& o, std::ostream& out) {
  const auto reports = gradcheck::run_gradchecks(o);
  out << gradcheck::format_report(reports);
  const bool ok = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
  out << (ok ? "all gradient checks passed" : "gradient check FAILED") << "\n";
  return ok ? kOk : kNumericError;
}

}  // namespace

const std::vector<std::string>& synth_file_names() {
  static const std::vector<std::string> names = {"train.tsv", "valid.tsv", "test.tsv", "visual.rvec", "textual.rvec",
                                                 "manifest.txt"};
  return names;
}

std::string synth_manifest(const kg::SynthOptions& o) {
  std::ostringstream s;
  s.precision(17);
  s << "seed=" << o.seed << "\n"
    << "n_entities=" << o.n_entities << "\n"
    << "n_relations=" << o.n_relations << "\n"
    << "n_triples=" << o.n_triples << "\n"
    << "feature_dim=" << o.feature_dim << "\n"
    << "feature_noise=" << o.feature_noise << "\n"
    << "violation_rate=" << o.violation_rate << "\n"
    << "visual_absent_rate=" << o.visual_absent_rate << "\n"
    << "textual_absent_rate=" << o.textual_absent_rate << "\n";
  return s.str();
}

kg::SynthOptions parse_synth_manifest(const std::string& text) {
  kg::SynthOptions o;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("manifest: malformed line '" + line + "'");
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    try {
      if (k == "seed") o.seed = std::stoull(v);
      else if (k == "n_entities") o.n_entities = std::stoull(v);
      else if (k == "n_relations") o.n_relations = std::stoull(v);
      else if (k == "n_triples") o.n_triples = std::stoull(v);
      else if (k == "feature_dim") o.feature_dim = std::stoull(v);
      else if (k == "feature_noise") o.feature_noise = std::stod(v);
      else if (k == "violation_rate") o.violation_rate = std::stod(v);
      else if (k == "visual_absent_rate") o.visual_absent_rate = std::stod(v);
      else if (k == "textual_absent_rate") o.textual_absent_rate = std::stod(v);
      else throw DataError("manifest: unknown key '" + k + "'");
    } catch (const std::logic_error&) {
      throw DataError("manifest: bad value for '" + k + "'");
    }
  }
  return o;
}

void write_synth(const fs::path& dir, const kg::SynthOptions& options) {
  const auto synth = kg::synth_kg(options);
  ensure_dir(dir);
  kg::write_triples(dir / "train.tsv", synth.kg, synth.kg.train);
  kg::write_triples(dir / "valid.tsv", synth.kg, synth.kg.valid);
  kg::write_triples(dir / "test.tsv", synth.kg, synth.kg.test);
  kg::write_features(dir / "visual.rvec", synth.features.visual);
  kg::write_features(dir / "textual.rvec", synth.features.textual);
  write_text(dir / "manifest.txt", synth_manifest(options));
}

fs::path fresh_run_dir(const fs::path& base) {
  if (!fs::exists(base)) return base;
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
  fs::path candidate = base.string() + "-" + stamp;
  for (int n = 2; fs::exists(candidate); ++n) candidate = base.string() + "-" + stamp + "-" + std::to_string(n);
  return candidate;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal knowledge graph completion: embedding retriever with a diffusion reranker", "radd"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic multimodal knowledge graph");
  std::string synth_out;
  std::string manifest;
  kg::SynthOptions so;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", so.seed, "Generator seed")->capture_default_str();
  synth->add_option("--entities", so.n_entities, "Number of entities")->capture_default_str();
  synth->add_option("--relations", so.n_relations, "Number of relations")->capture_default_str();
  synth->add_option("--triples", so.n_triples, "Number of triples over all splits")->capture_default_str();
  synth->add_option("--feature-dim", so.feature_dim, "Feature width of both modalities")->capture_default_str();
  synth->add_option("--manifest", manifest, "Regenerate from an existing manifest (overrides other options)");

  auto* train = app.add_subcommand("train", "Train a model from a key = value config file");
  std::string config_path, run_dir;
  std::vector<std::string> overrides;
  std::size_t train_threads = 0;
  train->add_option("--config", config_path, "Config file")->required();
  train->add_option("--set", overrides, "Override a config key (key=value), repeatable");
  train->add_option("--run-dir", run_dir, "Run directory (timestamp suffix added if it exists)");
  train->add_option("--threads", train_threads, "Worker threads; 1 gives bitwise reproducible runs");

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint with filtered ranking metrics");
  EvalArgs ea;
  evalc->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  evalc->add_option("--mode", ea.mode,
                    "full | retriever-only | denoiser-only (training ablations score like full)")
      ->capture_default_str();
  evalc->add_option("--K", ea.top_k, "Shortlist size (default: the checkpoint's top_k)");
  evalc->add_option("--inference", ea.inference, "single-pass | iterative");
  evalc->add_option("--weights", ea.weights, "ema | live");
  evalc->add_option("--split", ea.split, "valid | test")->capture_default_str();
  evalc->add_option("--out", ea.out_dir, "Report directory (default: next to the checkpoint)");
  evalc->add_option("--cases", ea.cases, "Number of sampled queries for case traces")->capture_default_str();
  evalc->add_option("--threads", ea.threads, "Worker threads");
  evalc->add_option("--train", ea.train, "Override the training triples path");
  evalc->add_option("--valid", ea.valid, "Override the validation triples path");
  evalc->add_option("--test", ea.test, "Override the test triples path");
  evalc->add_option("--visual", ea.visual, "Override the visual feature path");
  evalc->add_option("--textual", ea.textual, "Override the textual feature path");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable loss");
  gradcheck::Options go;
  gc->add_option("--seeds", go.seeds, "Random instances per loss term")->capture_default_str();
  gc->add_option("--entities", go.n_entities, "Entity count")->capture_default_str();
  gc->add_option("--relations", go.n_relations, "Relation count")->capture_default_str();
  gc->add_option("--dim", go.dim, "Complex embedding dimension")->capture_default_str();
  gc->add_option("--tolerance", go.tolerance, "Maximum relative error")->capture_default_str();
  gc->add_option("--inject-sign-error", go.inject_sign_error)->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*synth) return cmd_synth(synth_out, so, manifest, out);
    if (*train) return cmd_train(config_path, overrides, train_threads, run_dir, out);
    if (*evalc) return cmd_eval(ea, out);
    if (*gc) return cmd_gradcheck(go, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

}  // namespace radd::cli
