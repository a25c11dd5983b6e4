#pragma once

#include "radd/config.hpp"
#include "radd/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace radd::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::size_t n_entities = 0;
  std::size_t n_relations = 0;  // relations in the graph, before inverse augmentation
  std::size_t visual_dim = 0;
  std::size_t textual_dim = 0;
  trainer::TrainState state;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 over tensor names, shapes and float32 payloads, as lowercase hex.
std::string tensor_digest(const std::vector<ConstNamedTensor>& tensors);

}  // namespace radd::ckpt
