#include "radd/evalrank.hpp"

#include "radd/errors.hpp"
#include "radd/numkernel.hpp"
#include "radd/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace radd::eval {

bool TieredScores::before(EntityId a, EntityId b) const {
  const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
  if (tier[ia] != tier[ib]) return tier[ia] > tier[ib];
  if (score[ia] != score[ib]) return score[ia] > score[ib];
  return a < b;
}

std::vector<EntityId> TieredScores::ordering() const {
  std::vector<EntityId> ids(size());
  std::iota(ids.begin(), ids.end(), 0);
  std::sort(ids.begin(), ids.end(), [&](EntityId a, EntityId b) { return before(a, b); });
  return ids;
}

TieredScores single_tier(std::vector<double> scores) {
  TieredScores out;
  out.tier.assign(scores.size(), 1);
  out.score = std::move(scores);
  return out;
}

namespace {

void check_answer(const TieredScores& scores, const Query& query) {
  if (scores.tier.size() != scores.score.size()) throw ShapeError("tiered scores: tier/score length mismatch");
  if (query.answer < 0 || static_cast<std::size_t>(query.answer) >= scores.size())
    throw std::out_of_range("rank: answer id outside the score vector");
}

}  // namespace

std::size_t filtered_rank(const TieredScores& scores, const Query& query, const kg::FilterIndex& filter) {
  check_answer(scores, query);
  const auto& known_true = filter.completions(query.known, query.relation, query.direction);
  std::size_t rank = 1;
  for (std::size_t e = 0; e < scores.size(); ++e) {
    const auto id = static_cast<EntityId>(e);
    if (id == query.answer || !scores.before(id, query.answer)) continue;
    if (std::binary_search(known_true.begin(), known_true.end(), id)) continue;
    ++rank;
  }
  return rank;
}

std::size_t unfiltered_rank(const TieredScores& scores, const Query& query) {
  check_answer(scores, query);
  std::size_t rank = 1;
  for (std::size_t e = 0; e < scores.size(); ++e)
    if (static_cast<EntityId>(e) != query.answer && scores.before(static_cast<EntityId>(e), query.answer)) ++rank;
  return rank;
}

MetricsReport metrics_from_ranks(std::span<const RankResult> ranks) {
  MetricsReport report;
  auto add = [](DirectionMetrics& m, std::size_t rank) {
    m.mrr += 1.0 / static_cast<double>(rank);
    m.hits1 += rank <= 1 ? 1.0 : 0.0;
    m.hits3 += rank <= 3 ? 1.0 : 0.0;
    m.hits10 += rank <= 10 ? 1.0 : 0.0;
    ++m.count;
  };
  for (const auto& r : ranks) {
    if (r.filtered_rank == 0) throw std::invalid_argument("metrics: rank must be at least 1");
    add(report.overall, r.filtered_rank);
    add(r.query.direction == Direction::Tail ? report.tail : report.head, r.filtered_rank);
  }
  for (DirectionMetrics* m : {&report.overall, &report.head, &report.tail}) {
    if (m->count == 0) continue;
    const double n = static_cast<double>(m->count);
    m->mrr /= n;
    m->hits1 /= n;
    m->hits3 /= n;
    m->hits10 /= n;
  }
  return report;
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

const std::pair<const char*, const DirectionMetrics MetricsReport::*> kRows[] = {
    {"overall", &MetricsReport::overall}, {"head", &MetricsReport::head}, {"tail", &MetricsReport::tail}};

}  // namespace

std::string format_metrics_tsv(const MetricsReport& report) {
  std::string out = "split\tqueries\tMRR\tH@1\tH@3\tH@10\n";
  for (const auto& [name, member] : kRows) {
    const auto& m = report.*member;
    out += std::string(name) + "\t" + std::to_string(m.count) + "\t" + pct(m.mrr) + "\t" + pct(m.hits1) + "\t" +
           pct(m.hits3) + "\t" + pct(m.hits10) + "\n";
  }
  return out;
}

std::string format_metrics_kv(const MetricsReport& report) {
  std::string out;
  for (const auto& [name, member] : kRows) {
    const auto& m = report.*member;
    const std::string p(name);
    out += p + ".queries=" + std::to_string(m.count) + "\n";
    out += p + ".MRR=" + pct(m.mrr) + "\n";
    out += p + ".H@1=" + pct(m.hits1) + "\n";
    out += p + ".H@3=" + pct(m.hits3) + "\n";
    out += p + ".H@10=" + pct(m.hits10) + "\n";
  }
  return out;
}

Ranker::Ranker(const retriever::RetrieverParams& retriever, const diffusion::DenoiserParams& denoiser,
               const kg::ModalityFeatureStore& features, diffusion::NoiseSchedule schedule)
    : retriever_(&retriever), denoiser_(&denoiser), fused_(retriever, features), schedule_(schedule) {
  if (denoiser.mlp.layers.empty()) throw std::invalid_argument("ranker: denoiser is not initialized");
  if (denoiser.dims.n_entities != retriever.n_entities())
    throw ShapeError("ranker: denoiser and retriever disagree on the entity count");
  if (denoiser.dims.joint_width != 2 * retriever.dim)
    throw ShapeError("ranker: denoiser context width does not match the retriever dimension");
}

std::vector<double> Ranker::retriever_scores(const Query& query) const { return retriever::score_all(fused_, query); }

std::vector<double> Ranker::denoiser_log_probs(const Query& query, EntityId token, int t) const {
  const Vector context = fused_.joint(query.known, query.relation);
  const auto rel = retriever::relation_vector(*retriever_, query.relation);
  const Vector input = diffusion::assemble_input(*denoiser_, {context.data(), static_cast<std::size_t>(context.size())},
                                                 rel, token, t, query.direction);
  const Vector logits = diffusion::denoise_logits(*denoiser_, {input.data(), static_cast<std::size_t>(input.size())});
  std::vector<double> out(static_cast<std::size_t>(logits.size()));
  num::log_softmax({logits.data(), out.size()}, out);
  return out;
}

std::vector<double> Ranker::denoiser_scores(const Query& query) const {
  return denoiser_log_probs(query, denoiser_->mask_token(), schedule_.timesteps);
}

TieredScores Ranker::diff_rerank(const Query& query, const RerankOptions& options) const {
  const std::size_t n = n_entities();
  if (options.top_k < 1 || options.top_k > n) throw std::out_of_range("diff_rerank: K must lie in [1, |E|]");
  const auto shortlist = retriever::topk_shortlist(retriever_scores(query), options.top_k);

  std::vector<double> final_scores;
  if (options.inference == InferenceMode::SinglePass) {
    final_scores = denoiser_scores(query);
  } else {
    // Reverse chain from the all-MASK state; x0 proposals are drawn from the
    // denoiser posterior restricted to the shortlist, and a masked token is
    // revealed with the absorbing-state probability of leaving MASK at t - 1.
    Rng rng = make_rng(options.seed, {static_cast<std::uint64_t>(query.known),
                                      static_cast<std::uint64_t>(query.relation),
                                      static_cast<std::uint64_t>(query.direction)});
    EntityId x = denoiser_->mask_token();
    std::vector<double> weights(shortlist.entity_ids.size());
    for (int t = schedule_.timesteps; t >= 2; --t) {
      if (x != denoiser_->mask_token()) break;  // revealed tokens stay fixed
      const auto lp = denoiser_log_probs(query, x, t);
      double mx = -std::numeric_limits<double>::infinity();
      for (EntityId e : shortlist.entity_ids) mx = std::max(mx, lp[static_cast<std::size_t>(e)]);
      for (std::size_t i = 0; i < weights.size(); ++i)
        weights[i] = std::exp(lp[static_cast<std::size_t>(shortlist.entity_ids[i])] - mx);
      const EntityId x0_hat = shortlist.entity_ids[std::discrete_distribution<std::size_t>(weights.begin(), weights.end())(rng)];
      const double keep_t = schedule_.probs(t).keep;
      const double keep_prev = schedule_.probs(t - 1).keep;
      const double reveal = (keep_prev - keep_t) / (1.0 - keep_t);
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < reveal) x = x0_hat;
    }
    final_scores = denoiser_log_probs(query, x, 1);
  }

  TieredScores out;
  out.score = std::move(final_scores);
  out.tier.assign(n, 0);
  for (EntityId e : shortlist.entity_ids) out.tier[static_cast<std::size_t>(e)] = 1;
  return out;
}

TieredScores Ranker::final_scores(const Query& query, AblationMode mode, const RerankOptions& options) const {
  switch (mode) {
    case AblationMode::RetrieverOnly: return single_tier(retriever_scores(query));
    case AblationMode::DenoiserOnly: {
      RerankOptions all = options;
      all.top_k = n_entities();
      return diff_rerank(query, all);
    }
    default: return diff_rerank(query, options);
  }
}

Evaluation evaluate(const Ranker& ranker, std::span<const Query> queries, const kg::FilterIndex& filter,
                    const EvalOptions& options) {
  Evaluation out;
  out.ranks.resize(queries.size());
  parallel_for(queries.size(), options.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto scores = ranker.final_scores(queries[i], options.mode, options.rerank);
      out.ranks[i] = {queries[i], filtered_rank(scores, queries[i], filter), options.mode};
    }
  });
  out.report = metrics_from_ranks(out.ranks);
  return out;
}

CaseTrace case_trace(const Ranker& ranker, const Query& query, const kg::FilterIndex& filter,
                     const RerankOptions& options) {
  CaseTrace out;
  out.query = query;
  out.retriever_only = filtered_rank(ranker.final_scores(query, AblationMode::RetrieverOnly, options), query, filter);
  out.denoiser_only = filtered_rank(ranker.final_scores(query, AblationMode::DenoiserOnly, options), query, filter);
  out.full = filtered_rank(ranker.final_scores(query, AblationMode::Full, options), query, filter);
  return out;
}

std::string format_case_traces(std::span<const CaseTrace> traces, const kg::KnowledgeGraph& kg) {
  std::string out = "query\tmode\trank\n";
  for (const auto& t : traces) {
    const auto& q = t.query;
    const std::string known = kg.entities.label(q.known);
    const std::string rel = kg.relations.label(q.relation);
    const std::string text =
        q.direction == Direction::Tail ? "(" + known + ", " + rel + ", ?)" : "(?, " + rel + ", " + known + ")";
    out += text + "\t" + to_string(AblationMode::RetrieverOnly) + "\t" + std::to_string(t.retriever_only) + "\n";
    out += text + "\t" + to_string(AblationMode::DenoiserOnly) + "\t" + std::to_string(t.denoiser_only) + "\n";
    out += text + "\t" + to_string(AblationMode::Full) + "\t" + std::to_string(t.full) + "\n";
  }
  return out;
}

double top1_agreement(const Ranker& ranker, std::span<const Query> queries) {
  if (queries.empty()) return 0.0;
  auto argmax = [](const std::vector<double>& v) {
    // first maximum, i.e. ties resolved toward the smaller id
    return std::max_element(v.begin(), v.end()) - v.begin();
  };
  std::size_t agree = 0;
  for (const auto& q : queries)
    if (argmax(ranker.denoiser_scores(q)) == argmax(ranker.retriever_scores(q))) ++agree;
  return static_cast<double>(agree) / static_cast<double>(queries.size());
}

}  // namespace radd::eval
