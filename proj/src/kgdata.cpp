#include "radd/kgdata.hpp"

#include "radd/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace radd::kg {

const char* to_string(Direction d) { return d == Direction::Tail ? "tail" : "head"; }

std::int32_t Vocabulary::intern(const std::string& label) {
  auto [it, inserted] = index_.try_emplace(label, static_cast<std::int32_t>(labels_.size()));
  if (inserted) labels_.push_back(label);
  return it->second;
}

std::optional<std::int32_t> Vocabulary::find(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t FilterIndex::key(EntityId known, RelationId r, Direction d) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(known)) << 32) |
         (static_cast<std::uint64_t>(static_cast<std::uint32_t>(r)) << 1) | static_cast<std::uint64_t>(d);
}

void FilterIndex::add(const Triple& t) {
  index_[key(t.head, t.relation, Direction::Tail)].push_back(t.tail);
  index_[key(t.tail, t.relation, Direction::Head)].push_back(t.head);
}

void FilterIndex::finalize() {
  for (auto& [k, ids] : index_) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  }
}

const std::vector<EntityId>& FilterIndex::completions(EntityId known, RelationId r, Direction d) const {
  static const std::vector<EntityId> empty;
  auto it = index_.find(key(known, r, d));
  return it == index_.end() ? empty : it->second;
}

bool FilterIndex::contains(EntityId known, RelationId r, Direction d, EntityId candidate) const {
  const auto& ids = completions(known, r, d);
  return std::binary_search(ids.begin(), ids.end(), candidate);
}

std::vector<Triple> load_triples(const std::filesystem::path& path, Vocabulary& entities, Vocabulary& relations,
                                 VocabMode mode) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open triple file " + path.string());

  auto resolve = [&](Vocabulary& vocab, const std::string& label, std::size_t line_no) -> std::int32_t {
    if (mode == VocabMode::Build) return vocab.intern(label);
    auto id = vocab.find(label);
    if (!id) throw DataError(path.string() + ":" + std::to_string(line_no) + ": unknown label '" + label + "'");
    return *id;
  };

  std::vector<Triple> triples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string field; std::getline(ss, field, '\t');) fields.push_back(field);
    if (!line.empty() && line.back() == '\t') fields.emplace_back();
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty())
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
    Triple t;
    t.head = resolve(entities, fields[0], line_no);
    t.relation = resolve(relations, fields[1], line_no);
    t.tail = resolve(entities, fields[2], line_no);
    triples.push_back(t);
  }
  if (triples.empty()) throw DataError("triple file " + path.string() + " is empty");
  return triples;
}

void write_triples(const std::filesystem::path& path, const KnowledgeGraph& kg, const std::vector<Triple>& triples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : triples)
    out << kg.entities.label(t.head) << '\t' << kg.relations.label(t.relation) << '\t' << kg.entities.label(t.tail)
        << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

FilterIndex build_filter_index(const KnowledgeGraph& kg) {
  FilterIndex index;
  for (const auto* split : {&kg.train, &kg.valid, &kg.test})
    for (const auto& t : *split) index.add(t);
  index.finalize();
  return index;
}

KnowledgeGraph load_knowledge_graph(const std::filesystem::path& train, const std::filesystem::path& valid,
                                    const std::filesystem::path& test) {
  KnowledgeGraph kg;
  kg.train = load_triples(train, kg.entities, kg.relations, VocabMode::Build);
  if (!valid.empty()) kg.valid = load_triples(valid, kg.entities, kg.relations, VocabMode::Build);
  if (!test.empty()) kg.test = load_triples(test, kg.entities, kg.relations, VocabMode::Build);
  kg.filter = build_filter_index(kg);
  return kg;
}

std::size_t ModalityFeatures::present_count() const {
  return static_cast<std::size_t>(std::count(present.begin(), present.end(), std::uint8_t{1}));
}

ModalityFeatures ModalityFeatures::absent(std::size_t count, std::size_t dim) {
  ModalityFeatures f;
  f.dim = dim;
  f.present.assign(count, 0);
  f.values = Matrix::Zero(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  return f;
}

namespace {

constexpr char kRvecMagic[8] = {'R', 'A', 'D', 'D', 'V', 'E', 'C', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace

ModalityFeatures load_features(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kRvecMagic, 8) != 0)
    throw DataError(path.string() + ": bad RVEC1 magic");
  std::uint32_t count = 0, dim = 0, flags = 0;
  if (!get_u32(in, count) || !get_u32(in, dim) || !get_u32(in, flags))
    throw DataError(path.string() + ": truncated RVEC1 header");
  if (count != expected_count)
    throw DataError(path.string() + ": header declares " + std::to_string(count) + " entities, expected " +
                    std::to_string(expected_count));
  if ((flags & ~1u) != 0) throw DataError(path.string() + ": unknown RVEC1 flag bits");

  ModalityFeatures f = ModalityFeatures::absent(count, dim);
  if (flags & 1u) {
    if (!in.read(reinterpret_cast<char*>(f.present.data()), static_cast<std::streamsize>(count)))
      throw DataError(path.string() + ": truncated presence mask");
    for (std::size_t e = 0; e < count; ++e)
      if (f.present[e] > 1) throw DataError(path.string() + ": presence mask byte for entity " + std::to_string(e) +
                                            " is neither 0 nor 1");
  } else {
    std::fill(f.present.begin(), f.present.end(), std::uint8_t{1});
  }

  for (std::size_t e = 0; e < count; ++e) {
    if (!f.present[e]) continue;
    for (std::size_t j = 0; j < dim; ++j) {
      std::uint32_t bits = 0;
      if (!get_u32(in, bits)) throw DataError(path.string() + ": truncated payload at entity " + std::to_string(e));
      const float value = std::bit_cast<float>(bits);
      if (!std::isfinite(value))
        throw DataError(path.string() + ": non-finite value at entity " + std::to_string(e) + ", component " +
                        std::to_string(j));
      f.values(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(j)) = value;
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes after payload");
  return f;
}

void write_features(const std::filesystem::path& path, const ModalityFeatures& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kRvecMagic, 8);
  const bool all_present = f.present_count() == f.count();
  put_u32(out, static_cast<std::uint32_t>(f.count()));
  put_u32(out, static_cast<std::uint32_t>(f.dim));
  put_u32(out, all_present ? 0u : 1u);
  if (!all_present) out.write(reinterpret_cast<const char*>(f.present.data()), static_cast<std::streamsize>(f.count()));
  for (std::size_t e = 0; e < f.count(); ++e) {
    if (!f.present[e]) continue;
    for (std::size_t j = 0; j < f.dim; ++j) {
      const float value = static_cast<float>(f.values(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(j)));
      put_u32(out, std::bit_cast<std::uint32_t>(value));
    }
  }
  if (!out) throw DataError("write failed for " + path.string());
}

const std::vector<Triple>& split_triples(const KnowledgeGraph& kg, Split split) {
  switch (split) {
    case Split::Train: return kg.train;
    case Split::Valid: return kg.valid;
    case Split::Test: return kg.test;
  }
  return kg.test;
}

std::vector<Query> make_queries(const KnowledgeGraph& kg, Split split) {
  const auto& triples = split_triples(kg, split);
  std::vector<Query> queries;
  queries.reserve(triples.size() * 2);
  for (const auto& t : triples) {
    queries.push_back(make_query(t, Direction::Tail));
    queries.push_back(make_query(t, Direction::Head));
  }
  return queries;
}

namespace {

struct TripleKeyLess {
  bool operator()(const Triple& a, const Triple& b) const {
    return std::tie(a.head, a.relation, a.tail) < std::tie(b.head, b.relation, b.tail);
  }
};

}  // namespace

SynthKg synth_kg(const SynthOptions& opts) {
  const std::size_t n_ent = opts.n_entities;
  const std::size_t n_rel = opts.n_relations;
  if (n_ent < 4) throw DataError("synth_kg: need at least 4 entities");
  if (n_rel < 1) throw DataError("synth_kg: need at least 1 relation");
  if (static_cast<double>(opts.n_triples) > static_cast<double>(n_ent) * static_cast<double>(n_ent) *
                                                static_cast<double>(n_rel))
    throw DataError("synth_kg: more triples requested than distinct (h, r, t) combinations");
  // every entity and relation must occur in the train split so reloading the
  // emitted files reproduces the same ids
  if (opts.n_triples * 4 < (n_ent + n_rel) * 5)
    throw DataError("synth_kg: n_triples must be at least 1.25 * (n_entities + n_relations)");
  if (opts.feature_noise < 0.0) throw DataError("synth_kg: feature_noise must be non-negative");

  Rng rng(derive_seed(opts.seed, {0x5157}));
  const std::size_t n_clusters = std::clamp<std::size_t>((n_ent + 5) / 10, 2, n_ent / 2);

  std::vector<std::size_t> cluster_of(n_ent);
  std::vector<std::vector<EntityId>> members(n_clusters);
  {
    std::vector<EntityId> perm(n_ent);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n_ent; ++i) {
      cluster_of[static_cast<std::size_t>(perm[i])] = i % n_clusters;
      members[i % n_clusters].push_back(perm[i]);
    }
  }
  // Zipf-like popularity inside each cluster
  std::vector<std::discrete_distribution<std::size_t>> popularity;
  for (const auto& m : members) {
    std::vector<double> w(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) w[i] = 1.0 / static_cast<double>(i + 1);
    popularity.emplace_back(w.begin(), w.end());
  }
  std::vector<std::vector<std::size_t>> target(n_rel, std::vector<std::size_t>(n_clusters));
  std::uniform_int_distribution<std::size_t> pick_cluster(0, n_clusters - 1);
  for (auto& map : target)
    for (auto& c : map) c = pick_cluster(rng);

  std::uniform_int_distribution<std::size_t> pick_rel(0, n_rel - 1);
  std::uniform_int_distribution<EntityId> pick_entity(0, static_cast<EntityId>(n_ent - 1));
  std::bernoulli_distribution violate(opts.violation_rate);

  auto draw = [&](std::size_t cluster) { return members[cluster][popularity[cluster](rng)]; };
  auto tail_for = [&](RelationId r, EntityId h) {
    if (violate(rng)) return pick_entity(rng);
    return draw(target[static_cast<std::size_t>(r)][cluster_of[static_cast<std::size_t>(h)]]);
  };

  std::set<Triple, TripleKeyLess> seen;
  std::vector<Triple> coverage, rest;
  auto try_add = [&](const Triple& t, std::vector<Triple>& into) {
    if (t.head == t.tail || !seen.insert(t).second) return false;
    into.push_back(t);
    return true;
  };

  const std::size_t max_attempts = 1000 * (opts.n_triples + 10);
  std::size_t attempts = 0;
  auto guard = [&] {
    if (++attempts > max_attempts) throw DataError("synth_kg: could not generate enough distinct triples");
  };

  for (std::size_t r = 0; r < n_rel; ++r) {
    while (true) {
      guard();
      const EntityId h = pick_entity(rng);
      if (try_add({h, static_cast<RelationId>(r), tail_for(static_cast<RelationId>(r), h)}, coverage)) break;
    }
  }
  std::vector<std::uint8_t> covered(n_ent, 0);
  for (const auto& t : coverage) covered[static_cast<std::size_t>(t.head)] = covered[static_cast<std::size_t>(t.tail)] = 1;
  for (std::size_t e = 0; e < n_ent; ++e) {
    while (!covered[e]) {
      guard();
      const auto r = static_cast<RelationId>(pick_rel(rng));
      const auto h = static_cast<EntityId>(e);
      const Triple t{h, r, tail_for(r, h)};
      if (try_add(t, coverage)) covered[static_cast<std::size_t>(t.head)] = covered[static_cast<std::size_t>(t.tail)] = 1;
    }
  }
  while (coverage.size() + rest.size() < opts.n_triples) {
    guard();
    const auto r = static_cast<RelationId>(pick_rel(rng));
    const EntityId h = draw(pick_cluster(rng));
    try_add({h, r, tail_for(r, h)}, rest);
  }

  std::shuffle(rest.begin(), rest.end(), rng);
  const std::size_t n_eval = opts.n_triples / 10;
  std::vector<Triple> train = coverage, valid, test;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    if (i < n_eval) valid.push_back(rest[i]);
    else if (i < 2 * n_eval) test.push_back(rest[i]);
    else train.push_back(rest[i]);
  }
  std::shuffle(train.begin(), train.end(), rng);

  // Relabel in first-occurrence order so the TSV files reload to the same ids.
  SynthKg out;
  auto& kg = out.kg;
  std::vector<EntityId> new_entity(n_ent, -1);
  std::vector<RelationId> new_relation(n_rel, -1);
  auto relabel = [&](const std::vector<Triple>& src, std::vector<Triple>& dst) {
    for (const auto& t : src) {
      auto ent = [&](EntityId e) {
        auto& slot = new_entity[static_cast<std::size_t>(e)];
        if (slot < 0) slot = kg.entities.intern("e" + std::to_string(e));
        return slot;
      };
      Triple m;
      m.head = ent(t.head);
      auto& rslot = new_relation[static_cast<std::size_t>(t.relation)];
      if (rslot < 0) rslot = kg.relations.intern("r" + std::to_string(t.relation));
      m.relation = rslot;
      m.tail = ent(t.tail);
      dst.push_back(m);
    }
  };
  relabel(train, kg.train);
  relabel(valid, kg.valid);
  relabel(test, kg.test);
  kg.filter = build_filter_index(kg);

  auto make_modality = [&](double absent_rate, std::uint64_t stream) {
    Rng frng(derive_seed(opts.seed, {0xFEA7, stream}));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution absent(absent_rate);
    Matrix centroids(static_cast<Eigen::Index>(n_clusters), static_cast<Eigen::Index>(opts.feature_dim));
    for (Eigen::Index i = 0; i < centroids.size(); ++i) centroids.data()[i] = normal(frng);
    ModalityFeatures f = ModalityFeatures::absent(n_ent, opts.feature_dim);
    for (std::size_t e = 0; e < n_ent; ++e) {
      const auto id = static_cast<std::size_t>(new_entity[e]);
      const bool missing = absent(frng);
      for (std::size_t j = 0; j < opts.feature_dim; ++j) {
        const double noise = normal(frng);
        f.values(static_cast<Eigen::Index>(id), static_cast<Eigen::Index>(j)) =
            static_cast<float>(centroids(static_cast<Eigen::Index>(cluster_of[e]), static_cast<Eigen::Index>(j)) +
                               opts.feature_noise * noise);
      }
      f.present[id] = missing ? 0 : 1;
      if (missing) f.values.row(static_cast<Eigen::Index>(id)).setZero();
    }
    return f;
  };
  out.features.visual = make_modality(opts.visual_absent_rate, 1);
  out.features.textual = make_modality(opts.textual_absent_rate, 2);
  return out;
}

}  // namespace radd::kg
