#include "radd/checkpoint.hpp"
#include "radd/errors.hpp"
#include "radd/evalrank.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace radd;

namespace {

struct Trained {
  kg::SynthKg graph;
  ckpt::Checkpoint checkpoint;
};

const Trained& trained() {
  static const Trained t = [] {
    kg::SynthOptions o;
    o.seed = 5;
    o.n_entities = 25;
    o.n_relations = 3;
    o.n_triples = 200;
    o.feature_dim = 3;
    Trained out{kg::synth_kg(o), {}};
    auto& c = out.checkpoint.config.train;
    c.dim = 4;
    c.batch_size = 32;
    c.n_negatives = 8;
    c.lr_kge = 0.01;
    c.lr_denoiser = 0.003;
    c.timesteps = 10;
    c.pool_size = 8;
    c.top_k = 5;
    c.freeze_epoch = 2;
    c.epochs = 3;
    c.eval_every = 1;
    c.ema_decay = 0.9;
    out.checkpoint.n_entities = out.graph.kg.n_entities();
    out.checkpoint.n_relations = out.graph.kg.n_relations();
    out.checkpoint.visual_dim = out.graph.features.visual.dim;
    out.checkpoint.textual_dim = out.graph.features.textual.dim;
    out.checkpoint.state = trainer::train(out.graph.kg, out.graph.features, c).final;
    return out;
  }();
  return t;
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  EXPECT_NE(at, std::string::npos) << from;
  if (at != std::string::npos) s.replace(at, from.size(), to);
  return s;
}

void expect_same_tensors(const std::vector<ConstNamedTensor>& a, const std::vector<ConstNamedTensor>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(*a[i].tensor == *b[i].tensor) << a[i].name;
  }
}

}  // namespace

TEST(Digest, EmptyListIsHashOfCount) {
  EXPECT_EQ(ckpt::tensor_digest({}), "df3f619804a92fdb4057192dc43dd748ea778adc52bc498ce80524c014b81119");
}

TEST(Digest, MatchesIndependentEncoding) {
  Matrix w(2, 2);
  w << 1.0, -2.5, 0.5, 3.0;
  EXPECT_EQ(ckpt::tensor_digest({{"w", &w}}), "845fcf4856c954bb39d5c9bb1efb6dcb59caec948a563c4c04e8fd5c1399ea28");
  w(1, 1) = 3.5;
  EXPECT_NE(ckpt::tensor_digest({{"w", &w}}), "845fcf4856c954bb39d5c9bb1efb6dcb59caec948a563c4c04e8fd5c1399ea28");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  radd::testing::TempDir dir;
  const auto& t = trained();
  ckpt::save_checkpoint(t.checkpoint, dir / "a.ckpt");
  const auto loaded = ckpt::load_checkpoint(dir / "a.ckpt");
  ckpt::save_checkpoint(loaded, dir / "b.ckpt");
  const auto a = radd::testing::read_file(dir / "a.ckpt");
  EXPECT_EQ(a.substr(0, 8), "RADDCKPT");
  EXPECT_EQ(a, radd::testing::read_file(dir / "b.ckpt"));
}

TEST(Checkpoint, RestoresEveryField) {
  const auto& t = trained();
  const auto back = ckpt::deserialize(ckpt::serialize(t.checkpoint));
  EXPECT_EQ(to_text(back.config), to_text(t.checkpoint.config));
  EXPECT_EQ(back.n_entities, t.checkpoint.n_entities);
  EXPECT_EQ(back.n_relations, t.checkpoint.n_relations);
  EXPECT_EQ(back.state.epoch, 3);
  const auto& s = t.checkpoint.state;
  expect_same_tensors(std::as_const(back.state.retriever).tensors(), s.retriever.tensors());
  expect_same_tensors(std::as_const(back.state.denoiser).tensors(), s.denoiser.tensors());
  expect_same_tensors(std::as_const(back.state.denoiser_ema).tensors(), s.denoiser_ema.tensors());
  EXPECT_EQ(back.state.adam_denoiser.step_count(), s.adam_denoiser.step_count());
  EXPECT_EQ(back.state.adam_retriever.step_count(), s.adam_retriever.step_count());
  for (std::size_t i = 0; i < s.adam_denoiser.second_moment().size(); ++i)
    EXPECT_TRUE(back.state.adam_denoiser.second_moment()[i] == s.adam_denoiser.second_moment()[i]);
  ASSERT_EQ(back.state.history.size(), s.history.size());
  for (std::size_t i = 0; i < s.history.size(); ++i) {
    EXPECT_EQ(back.state.history[i].epoch, s.history[i].epoch);
    EXPECT_EQ(back.state.history[i].valid.overall.mrr, s.history[i].valid.overall.mrr);
    EXPECT_EQ(back.state.history[i].losses.total, s.history[i].losses.total);
  }
}

TEST(Checkpoint, EditedDimensionIsShapeError) {
  const auto bytes = ckpt::serialize(trained().checkpoint);
  EXPECT_THROW(ckpt::deserialize(replace_once(bytes, "\ndim = 4\n", "\ndim = 5\n")), ShapeError);
}

TEST(Checkpoint, CorruptFilesAreDataErrors) {
  const auto bytes = ckpt::serialize(trained().checkpoint);
  EXPECT_THROW(ckpt::deserialize(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(ckpt::deserialize(bytes.substr(0, 10)), DataError);
  EXPECT_THROW(ckpt::deserialize(bytes + "x"), DataError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(ckpt::deserialize(magic), DataError);
  auto version = bytes;
  version[8] = 2;
  EXPECT_THROW(ckpt::deserialize(version), DataError);
  EXPECT_THROW(ckpt::deserialize(""), DataError);
}

TEST(Checkpoint, MissingFileIsDataError) {
  radd::testing::TempDir dir;
  EXPECT_THROW(ckpt::load_checkpoint(dir / "absent.ckpt"), DataError);
}

TEST(Checkpoint, ResumeWithoutEpochsKeepsMetrics) {
  const auto& t = trained();
  const auto back = ckpt::deserialize(ckpt::serialize(t.checkpoint));
  const auto& c = t.checkpoint.config.train;
  const auto resumed = trainer::train(t.graph.kg, t.graph.features, c, {}, &back.state);
  const auto before = trainer::validate(t.checkpoint.state, t.graph.kg, t.graph.features, c, WeightSource::Ema);
  const auto after = trainer::validate(resumed.final, t.graph.kg, t.graph.features, c, WeightSource::Ema);
  EXPECT_EQ(before.overall.mrr, after.overall.mrr);
  EXPECT_EQ(before.overall.hits10, after.overall.hits10);
  EXPECT_EQ(resumed.final.epoch, 3);
}

TEST(Checkpoint, EvaluationReproducesAfterReload) {
  radd::testing::TempDir dir;
  const auto& t = trained();
  ckpt::save_checkpoint(t.checkpoint, dir / "m.ckpt");
  const auto back = ckpt::load_checkpoint(dir / "m.ckpt");
  const auto queries = kg::make_queries(t.graph.kg, kg::Split::Test);
  const auto schedule = trainer::noise_schedule(t.checkpoint.config.train);
  eval::EvalOptions opts;
  opts.rerank.top_k = 5;
  const auto& s = t.checkpoint.state;
  const eval::Ranker a(s.retriever, s.denoiser_ema, t.graph.features, schedule);
  const eval::Ranker b(back.state.retriever, back.state.denoiser_ema, t.graph.features, schedule);
  const auto ea = eval::evaluate(a, queries, t.graph.kg.filter, opts);
  const auto eb = eval::evaluate(b, queries, t.graph.kg.filter, opts);
  EXPECT_EQ(eval::format_metrics_tsv(ea.report), eval::format_metrics_tsv(eb.report));
  ASSERT_EQ(ea.ranks.size(), eb.ranks.size());
  for (std::size_t i = 0; i < ea.ranks.size(); ++i) EXPECT_EQ(ea.ranks[i].filtered_rank, eb.ranks[i].filtered_rank);
}
