#pragma once

// Probes over trained checkpoints: length extrapolation, per-position LM
// loss, and attention maps.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rmt/model.hpp"
#include "rmt/recurrence.hpp"
#include "rmt/trainer.hpp"

namespace rmt {

struct ExtrapolationRow {
  std::size_t n_segments = 0;
  double accuracy = 0;
  double loss = 0;
  std::size_t samples = 0;
};

// Accuracy per segment count on fixed eval sets drawn from eval_seed.
std::vector<ExtrapolationRow> extrapolation_sweep(const Model<float>& model, const TaskSource& source,
                                                  std::span<const std::size_t> segment_counts,
                                                  std::size_t n_samples, std::uint64_t eval_seed,
                                                  std::size_t batch = 64);
void write_extrapolation_csv(std::ostream& out, std::span<const ExtrapolationRow> rows);

enum class HistoryMode { baseline, rmt };
std::string to_string(HistoryMode mode);
HistoryMode parse_history_mode(const std::string& text);

struct PositionLoss {
  std::vector<double> loss;  // mean loss of predicting token p of the target segment
  std::size_t samples = 0;
  double mean() const;
};

// Baseline mode feeds only the target segment; rmt mode feeds the history
// segments first. Decoder models only.
PositionLoss per_position_loss(const Model<float>& model, const LmTaskSource& source,
                               std::size_t n_segments, std::size_t n_samples, HistoryMode mode,
                               std::size_t batch = 64);
void write_position_loss_csv(std::ostream& out, const PositionLoss& curve);

enum class RowRole { memory, memory_write, cls, sep, token };
std::string to_string(RowRole role);

struct AttentionGrid {
  std::size_t segment = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t size = 0;         // square: composed segment length
  std::vector<float> weights;   // row-major post-softmax
  float at(std::size_t i, std::size_t j) const { return weights[i * size + j]; }
};

struct AttentionDump {
  std::vector<AttentionGrid> grids;
  // Role of each composed row, per segment.
  std::vector<std::vector<RowRole>> roles;
  std::vector<std::filesystem::path> files;
};

// Rolls one sample (batch of 1) through the model and captures every
// layer and head. When out_dir is non-empty, writes
//   seg<t>_layer<l>_head<h>.bin : "RMTATTN1" magic, u32 rows, u32 cols, f32 row-major
//   seg<t>.roles                : "<row> <role>" per line
AttentionDump attention_dump(const Model<float>& model, const RolloutPlan& sample,
                             const std::filesystem::path& out_dir = {});

// Row-major float grid written by attention_dump.
AttentionGrid read_attention_grid(const std::filesystem::path& path);

// Mean over the given rows of the attention mass on columns [begin, begin + length).
double span_mass(const AttentionGrid& grid, std::span<const std::size_t> rows, std::size_t begin,
                 std::size_t length);

}  // namespace rmt
