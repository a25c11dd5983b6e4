#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace radd::gradcheck {

struct Options {
  std::size_t n_entities = 8;
  std::size_t n_relations = 3;
  std::size_t dim = 3;
  std::size_t visual_dim = 3;
  std::size_t textual_dim = 2;
  std::size_t n_negatives = 4;
  std::size_t pool_size = 5;
  std::size_t seeds = 20;
  std::uint64_t first_seed = 1;
  double tolerance = 1e-4;
  double step = 1e-5;
  double floor = 1e-6;
  // Test fixture: negates the analytic gradient of the named term.
  std::string inject_sign_error;
};

struct TermReport {
  std::string term;
  std::size_t seeds = 0;
  std::size_t coordinates = 0;  // per seed
  double max_relative_error = 0.0;
  std::uint64_t worst_seed = 0;
  bool passed = true;
};

// kge, rank, tail-CE, head-CE, distill
const std::vector<std::string>& loss_terms();

std::vector<TermReport> run_gradchecks(const Options& options);

std::string format_report(const std::vector<TermReport>& reports);

}  // namespace radd::gradcheck
