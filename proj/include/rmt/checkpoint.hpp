#pragma once

// Binary checkpoints, little-endian throughout:
//
//   "RMT1" | u32 version | model config | u8 has_optimizer
//   | u32 n_tensors | { u32 name_len, name, u32 ndim, u64 dims[ndim], f32 data[] }*
//   | [optimizer: f64 beta1 beta2 eps weight_decay, u64 steps]
//   | u64 curriculum_stage | u32 rng_len, rng state text
//
// Optimizer moments live in the tensor table as "adam.m/<param>" and
// "adam.v/<param>".

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmt/model.hpp"
#include "rmt/optim.hpp"

namespace rmt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerSnapshot {
  AdamWConfig config;
  std::size_t steps = 0;
  std::vector<std::vector<float>> first, second;  // aligned with Model::parameters()
};

struct Checkpoint {
  Model<float> model;
  std::optional<OptimizerSnapshot> optimizer;
  std::size_t stage = 0;
  std::string rng_state;
};

Checkpoint make_checkpoint(const Model<float>& model, const AdamW<float>* optimizer,
                           std::size_t stage, std::string rng_state);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws CheckpointError on a malformed file, and before any tensor is
// allocated when `expected` is given and differs from the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig* expected = nullptr);

// Reads only the header's model config.
ModelConfig peek_checkpoint_config(const std::filesystem::path& path);

// Copies snapshot moments into an optimizer built over the same parameters.
void restore_optimizer(const OptimizerSnapshot& snap, AdamW<float>& optimizer);

std::string rng_state_string(const std::mt19937_64& rng);
void restore_rng(std::mt19937_64& rng, const std::string& state);

}  // namespace rmt
