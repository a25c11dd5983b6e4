#include "radd/checkpoint.hpp"
#include "radd/cli.hpp"
#include "radd/config.hpp"
#include "radd/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace radd;
using radd::testing::read_file;
using radd::testing::TempDir;
using radd::testing::write_file;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void synth_small(const std::filesystem::path& dir) {
  const auto r = run({"synth", "--out", dir.string(), "--entities", "30", "--relations", "3", "--triples", "240",
                      "--feature-dim", "4", "--seed", "9"});
  ASSERT_EQ(r.code, 0) << r.err;
}

std::filesystem::path write_config(const TempDir& dir, const std::string& extra = "") {
  const auto path = dir / "run.conf";
  write_file(path,
             "# tiny run\n"
             "train_path = data/train.tsv\nvalid_path = data/valid.tsv\ntest_path = data/test.tsv\n"
             "visual_path = data/visual.rvec\ntextual_path = data/textual.rvec\n"
             "dim = 4\nbatch_size = 32\nn_negatives = 8\npool_size = 8\ntop_k = 5\ntimesteps = 10\n"
             "lr_kge = 0.01\nlr_denoiser = 0.003\nepochs = 1\nfreeze_epoch = 1\neval_every = 1\n" +
                 extra);
  return path;
}

}  // namespace

TEST(Config, DefaultsAndCanonicalText) {
  RunConfig c;
  EXPECT_EQ(c.train.dim, 250u);
  EXPECT_EQ(c.train.top_k, 256u);
  EXPECT_EQ(c.train.freeze_epoch, 100);
  EXPECT_EQ(c.train.tau, 0.7);
  const auto text = to_text(c);
  EXPECT_NE(text.find("dim = 250\n"), std::string::npos);
  EXPECT_NE(text.find("ema_decay = 0.99990000000000001\n"), std::string::npos);
  const auto back = parse_run_config(text);
  EXPECT_EQ(to_text(back), text);
}

TEST(Config, UnknownKeysAndBadValuesAreAllReported) {
  try {
    parse_run_config("dimm = 3\nlr_kge = fast\nbatchsize = 2\nepochs = 5\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("dimm"), std::string::npos);
    EXPECT_NE(msg.find("lr_kge"), std::string::npos);
    EXPECT_NE(msg.find("batchsize"), std::string::npos);
  }
}

TEST(Config, ValidationListsEveryProblem) {
  RunConfig c;
  c.train.pool_size = 1;
  c.train.tau = -1.0;
  c.train.freeze_epoch = 5000;
  const auto errors = c.validate(true);
  EXPECT_EQ(errors.size(), 5u);  // three field errors plus the two required split paths
}

TEST(Config, AblationResolvesFlags) {
  auto c = parse_run_config("ablation = structure-only\n");
  c.resolve();
  EXPECT_TRUE(c.train.structure_only);
  auto t = parse_run_config("ablation = tail_only\n");
  t.resolve();
  EXPECT_TRUE(t.train.tail_only);
  auto n = parse_run_config("ablation = no-distill\n");
  n.resolve();
  EXPECT_EQ(n.train.lambda_d, 0.0);
  EXPECT_THROW(parse_run_config("ablation = sometimes\n"), ConfigError);
}

TEST(Config, RelativePathsResolveAgainstConfigFile) {
  TempDir dir;
  const auto c = load_run_config(write_config(dir));
  EXPECT_EQ(c.train_path, dir / "data/train.tsv");
}

TEST(Config, OverrideChecksKeys) {
  RunConfig c;
  apply_override(c, "dim", "12");
  EXPECT_EQ(c.train.dim, 12u);
  EXPECT_THROW(apply_override(c, "dims", "12"), ConfigError);
  EXPECT_THROW(apply_override(c, "dim", "twelve"), ConfigError);
}

TEST(Synth, WritesSixFilesDeterministically) {
  TempDir a, b;
  synth_small(a.path());
  synth_small(b.path());
  ASSERT_EQ(cli::synth_file_names().size(), 6u);
  for (const auto& name : cli::synth_file_names()) {
    ASSERT_TRUE(std::filesystem::exists(a / name)) << name;
    EXPECT_EQ(read_file(a / name), read_file(b / name)) << name;
  }
  EXPECT_NE(read_file(a / "manifest.txt").find("seed=9"), std::string::npos);
}

TEST(Synth, ManifestRegeneratesFiles) {
  TempDir a, b;
  synth_small(a.path());
  const auto r = run({"synth", "--out", b.path().string(), "--manifest", (a / "manifest.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& name : cli::synth_file_names()) EXPECT_EQ(read_file(a / name), read_file(b / name)) << name;
  const auto opts = cli::parse_synth_manifest(read_file(a / "manifest.txt"));
  EXPECT_EQ(opts.seed, 9u);
  EXPECT_EQ(opts.n_entities, 30u);
  EXPECT_EQ(cli::synth_manifest(opts), read_file(a / "manifest.txt"));
}

TEST(Train, OneEpochWritesAllArtifacts) {
  TempDir dir;
  synth_small(dir / "data");
  const auto r = run({"train", "--config", write_config(dir).string(), "--run-dir", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.resolved", "train_log.tsv", "best.ckpt", "final.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / f)) << f;
  const auto resolved = read_file(dir / "run" / "config.resolved");
  EXPECT_NE(resolved.find("gamma_kge = 6\n"), std::string::npos);
  EXPECT_NE(resolved.find("epochs = 1\n"), std::string::npos);
  const auto log = read_file(dir / "run" / "train_log.tsv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);  // header, epoch 0, epoch 1
  EXPECT_NE(r.out.find(log.substr(0, log.find('\n'))), std::string::npos);
}

TEST(Train, ExistingRunDirectoryIsNotOverwritten) {
  TempDir dir;
  synth_small(dir / "data");
  const auto conf = write_config(dir).string();
  ASSERT_EQ(run({"train", "--config", conf, "--run-dir", (dir / "run").string()}).code, 0);
  const auto before = read_file(dir / "run" / "final.ckpt");
  ASSERT_EQ(run({"train", "--config", conf, "--run-dir", (dir / "run").string(), "--set", "seed=2"}).code, 0);
  EXPECT_EQ(read_file(dir / "run" / "final.ckpt"), before);
  std::size_t runs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path()))
    if (e.path().filename().string().rfind("run", 0) == 0 && e.is_directory()) ++runs;
  EXPECT_EQ(runs, 2u);
}

TEST(Train, RerunIsDeterministic) {
  TempDir dir;
  synth_small(dir / "data");
  const auto conf = write_config(dir, "epochs = 3\nfreeze_epoch = 2\n").string();
  ASSERT_EQ(run({"train", "--config", conf, "--run-dir", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"train", "--config", conf, "--run-dir", (dir / "b").string()}).code, 0);
  EXPECT_EQ(read_file(dir / "a" / "train_log.tsv"), read_file(dir / "b" / "train_log.tsv"));
  const auto a = ckpt::load_checkpoint(dir / "a" / "best.ckpt");
  const auto b = ckpt::load_checkpoint(dir / "b" / "best.ckpt");
  EXPECT_EQ(ckpt::tensor_digest(a.state.denoiser_ema.tensors()), ckpt::tensor_digest(b.state.denoiser_ema.tensors()));
  EXPECT_EQ(ckpt::tensor_digest(a.state.retriever.tensors()), ckpt::tensor_digest(b.state.retriever.tensors()));
}

TEST(Train, StructureOnlyPinsGate) {
  TempDir dir;
  synth_small(dir / "data");
  const auto conf = write_config(dir, "ablation = structure-only\n").string();
  ASSERT_EQ(run({"train", "--config", conf, "--run-dir", (dir / "s").string()}).code, 0);
  const auto ck = ckpt::load_checkpoint(dir / "s" / "final.ckpt");
  EXPECT_TRUE(ck.state.retriever.structure_only);
  const auto a = retriever::gate_weights(ck.state.retriever, 0);
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a[1], 0.0);
}

TEST(Train, ConfigErrorsListEveryProblem) {
  TempDir dir;
  synth_small(dir / "data");
  const auto conf = write_config(dir, "dimm = 3\nlr_denoiser = x\n").string();
  const auto r = run({"train", "--config", conf, "--run-dir", (dir / "r").string()});
  EXPECT_EQ(r.code, cli::kConfigError);
  EXPECT_NE(r.err.find("dimm"), std::string::npos);
  EXPECT_NE(r.err.find("lr_denoiser"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "r"));
}

TEST(Train, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run({"train", "--config", (dir / "missing.conf").string()}).code, cli::kConfigError);
  EXPECT_EQ(run({"bogus"}).code, cli::kConfigError);
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
  // paths exist but contents are malformed
  synth_small(dir / "data");
  write_file(dir / "data" / "train.tsv", "a\tb\n");
  EXPECT_EQ(run({"train", "--config", write_config(dir).string(), "--run-dir", (dir / "r").string()}).code,
            cli::kDataError);
  EXPECT_EQ(run({"eval", "--checkpoint", (dir / "nothing.ckpt").string()}).code, cli::kDataError);
}

TEST(Eval, ModesAndShortlistOverride) {
  TempDir dir;
  synth_small(dir / "data");
  const auto conf = write_config(dir, "epochs = 2\n").string();
  ASSERT_EQ(run({"train", "--config", conf, "--run-dir", (dir / "run").string()}).code, 0);
  const auto ck = (dir / "run" / "final.ckpt").string();
  auto metrics = [&](std::vector<std::string> extra, const std::string& out) {
    std::vector<std::string> args{"eval", "--checkpoint", ck, "--out", (dir / out).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = run(args);
    EXPECT_EQ(r.code, 0) << r.err;
    return read_file(dir / out / "metrics.tsv");
  };
  const auto full = metrics({}, "full");
  EXPECT_TRUE(std::filesystem::exists(dir / "full" / "metrics.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "full" / "cases.tsv"));
  const auto den = metrics({"--mode", "denoiser-only"}, "den");
  EXPECT_EQ(metrics({"--K", "30"}, "k30"), den);
  metrics({"--mode", "retriever-only"}, "ret");
  metrics({"--inference", "iterative"}, "iter");
  metrics({"--weights", "live", "--split", "valid"}, "live");
  EXPECT_FALSE(full.empty());
  EXPECT_EQ(run({"eval", "--checkpoint", ck, "--K", "31", "--out", (dir / "bad").string()}).code, cli::kConfigError);
  EXPECT_EQ(run({"eval", "--checkpoint", ck, "--mode", "sideways"}).code, cli::kConfigError);
}

TEST(Eval, IncompatibleFeaturesAreShapeErrors) {
  TempDir dir;
  synth_small(dir / "data");
  synth_small(dir / "other");
  ASSERT_EQ(run({"train", "--config", write_config(dir).string(), "--run-dir", (dir / "run").string()}).code, 0);
  ASSERT_EQ(run({"synth", "--out", (dir / "wide").string(), "--entities", "30", "--relations", "3", "--triples",
                 "240", "--feature-dim", "6", "--seed", "9"})
                .code,
            0);
  const auto r = run({"eval", "--checkpoint", (dir / "run" / "final.ckpt").string(), "--visual",
                      (dir / "wide" / "visual.rvec").string(), "--out", (dir / "e").string()});
  EXPECT_EQ(r.code, cli::kDataError);
}

TEST(Gradcheck, ReportsEveryTerm) {
  const auto r = run({"gradcheck", "--seeds", "20"});
  EXPECT_EQ(r.code, cli::kOk) << r.out << r.err;
  for (const char* term : {"kge", "rank", "tail-CE", "head-CE", "distill"})
    EXPECT_NE(r.out.find(std::string("\n") + term + "\t20\t"), std::string::npos) << term;
}

TEST(Gradcheck, DetectsInjectedSignError) {
  const auto r = run({"gradcheck", "--seeds", "20", "--inject-sign-error", "tail-CE"});
  EXPECT_EQ(r.code, cli::kNumericError);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}
