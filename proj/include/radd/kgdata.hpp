#pragma once

#include "radd/rng.hpp"
#include "radd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace radd::kg {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

enum class Direction : std::uint8_t { Tail = 0, Head = 1 };

const char* to_string(Direction d);

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
};

// Label <-> dense id bijection, ids assigned in first-occurrence order.
class Vocabulary {
 public:
  std::int32_t intern(const std::string& label);
  std::optional<std::int32_t> find(const std::string& label) const;
  const std::string& label(std::int32_t id) const { return labels_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// (known entity, relation, direction) -> sorted set of every true completion.
class FilterIndex {
 public:
  FilterIndex() = default;

  void add(const Triple& t);
  void finalize();

  const std::vector<EntityId>& completions(EntityId known, RelationId r, Direction d) const;
  bool contains(EntityId known, RelationId r, Direction d, EntityId candidate) const;
  std::size_t key_count() const { return index_.size(); }
  const std::unordered_map<std::uint64_t, std::vector<EntityId>>& raw() const { return index_; }

  static std::uint64_t key(EntityId known, RelationId r, Direction d);

 private:
  std::unordered_map<std::uint64_t, std::vector<EntityId>> index_;
};

struct KnowledgeGraph {
  Vocabulary entities;
  Vocabulary relations;
  std::vector<Triple> train;
  std::vector<Triple> valid;
  std::vector<Triple> test;
  FilterIndex filter;

  std::size_t n_entities() const { return entities.size(); }
  std::size_t n_relations() const { return relations.size(); }
};

enum class VocabMode { Build, Reuse };

// Reads head<TAB>relation<TAB>tail lines. In Build mode unseen labels are
// appended to the vocabularies; in Reuse mode they are an error.
std::vector<Triple> load_triples(const std::filesystem::path& path, Vocabulary& entities, Vocabulary& relations,
                                 VocabMode mode);

void write_triples(const std::filesystem::path& path, const KnowledgeGraph& kg, const std::vector<Triple>& triples);

// Loads the three splits in order (vocabularies grow across them) and builds
// the filter index. Empty valid/test paths leave the split empty.
KnowledgeGraph load_knowledge_graph(const std::filesystem::path& train, const std::filesystem::path& valid,
                                    const std::filesystem::path& test);

FilterIndex build_filter_index(const KnowledgeGraph& kg);

// One modality's raw feature vectors, indexed by entity id.
struct ModalityFeatures {
  std::size_t dim = 0;
  std::vector<std::uint8_t> present;
  Matrix values;  // count x dim; rows of absent entities are zero and never read

  std::size_t count() const { return present.size(); }
  bool is_present(EntityId e) const { return present[static_cast<std::size_t>(e)] != 0; }
  std::size_t present_count() const;

  static ModalityFeatures absent(std::size_t count, std::size_t dim = 0);
};

struct ModalityFeatureStore {
  ModalityFeatures visual;
  ModalityFeatures textual;
};

// RVEC1 binary format, see README.
ModalityFeatures load_features(const std::filesystem::path& path, std::size_t expected_count);
void write_features(const std::filesystem::path& path, const ModalityFeatures& features);

struct Query {
  EntityId known = 0;
  RelationId relation = 0;
  Direction direction = Direction::Tail;
  EntityId answer = 0;
};

inline Query make_query(const Triple& t, Direction d) {
  return d == Direction::Tail ? Query{t.head, t.relation, d, t.tail} : Query{t.tail, t.relation, d, t.head};
}

enum class Split { Train, Valid, Test };

const std::vector<Triple>& split_triples(const KnowledgeGraph& kg, Split split);

// Two queries per triple, tail prediction first.
std::vector<Query> make_queries(const KnowledgeGraph& kg, Split split);

struct SynthOptions {
  std::uint64_t seed = 1;
  std::size_t n_entities = 100;
  std::size_t n_relations = 10;
  std::size_t n_triples = 1000;
  std::size_t feature_dim = 16;
  double feature_noise = 0.1;
  double violation_rate = 0.05;
  double visual_absent_rate = 0.05;
  double textual_absent_rate = 0.10;
};

struct SynthKg {
  KnowledgeGraph kg;
  ModalityFeatureStore features;
};

// Cluster-structured toy graph: every relation maps a subset of source
// clusters onto target clusters, entities within a cluster follow a skewed
// popularity law, and features are noisy copies of cluster centroids.
SynthKg synth_kg(const SynthOptions& opts);

}  // namespace radd::kg
