#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rmt/checkpoint.hpp"
#include "rmt/model.hpp"
#include "rmt/optim.hpp"
#include "rmt/recurrence.hpp"
#include "rmt/tasks.hpp"

namespace rmt {

// A batch source for training and evaluation.
class TaskSource {
 public:
  virtual ~TaskSource() = default;
  virtual bool classification() const = 0;
  // Training batch of n_segments samples drawn from `seed`.
  virtual RolloutPlan make_batch(std::uint64_t seed, std::size_t batch,
                                 std::size_t n_segments) const = 0;
  // Evaluation samples [first, first + count) of the fixed set named by eval_seed.
  virtual RolloutPlan make_eval_batch(std::uint64_t eval_seed, std::size_t first,
                                      std::size_t count, std::size_t n_segments) const = 0;
  virtual std::size_t max_segments() const = 0;
};

// Memorize / Detect&Memorize / Reasoning samples laid out for an encoder.
class MemoryTaskSource : public TaskSource {
 public:
  MemoryTaskSource(const TaskGenerator& gen, TaskKind kind, std::size_t payload);
  bool classification() const override { return true; }
  RolloutPlan make_batch(std::uint64_t seed, std::size_t batch, std::size_t n_segments) const override;
  RolloutPlan make_eval_batch(std::uint64_t eval_seed, std::size_t first, std::size_t count,
                              std::size_t n_segments) const override;
  std::size_t max_segments() const override { return std::numeric_limits<std::size_t>::max(); }
  std::vector<TaskSample> samples(std::uint64_t seed, std::size_t first, std::size_t count,
                                  std::size_t n_segments) const;
  const TaskGenerator& generator() const { return *gen_; }
  TaskKind kind() const { return kind_; }
  std::size_t payload() const { return payload_; }

 private:
  const TaskGenerator* gen_;
  TaskKind kind_;
  std::size_t payload_;
};

// Decoder plan for LM samples: one SEP-led segment per history/target
// segment, loss on the target segment only.
RolloutPlan lm_plan(std::span<const LmSample* const> samples);

class LmTaskSource : public TaskSource {
 public:
  // Samples are grouped by history length; n_segments = history + 1.
  // Evaluation draws from `held_out` when given, otherwise from `corpus`.
  explicit LmTaskSource(LmCorpus corpus, std::optional<LmCorpus> held_out = std::nullopt);
  bool classification() const override { return false; }
  RolloutPlan make_batch(std::uint64_t seed, std::size_t batch, std::size_t n_segments) const override;
  // Evaluation walks the pool in order, wrapping around.
  RolloutPlan make_eval_batch(std::uint64_t eval_seed, std::size_t first, std::size_t count,
                              std::size_t n_segments) const override;
  std::size_t max_segments() const override { return by_history_.size(); }
  const std::vector<const LmSample*>& with_segments(std::size_t n_segments) const;
  const std::vector<const LmSample*>& eval_with_segments(std::size_t n_segments) const;

 private:
  using Groups = std::vector<std::vector<const LmSample*>>;
  LmCorpus corpus_;
  std::optional<LmCorpus> held_out_;
  Groups by_history_;
  Groups eval_by_history_;
};

enum class TrainMode { curriculum, naive };
enum class Mixing { fixed, mix_all_previous };
std::string to_string(TrainMode mode);
std::string to_string(Mixing mixing);
TrainMode parse_train_mode(const std::string& text);
Mixing parse_mixing(const std::string& text);

struct CurriculumConfig {
  std::vector<std::size_t> stages = {1, 2, 3, 4};  // max segments per stage
  double threshold = 0.9;                           // validation metric to count as converged
  std::size_t patience = 2;                         // consecutive evals at/above threshold
  Mixing mixing = Mixing::fixed;
  std::size_t stage_steps = 1000;  // per-stage step budget
  void validate() const;
};

// Advances when the metric reaches the threshold for `patience` evals in a
// row, or when the stage budget is exhausted.
class CurriculumTracker {
 public:
  explicit CurriculumTracker(const CurriculumConfig& cfg) : cfg_(cfg) {}
  // Returns true when the current stage should end.
  bool observe(double metric);
  bool converged() const { return streak_ >= cfg_.patience; }
  void reset() { streak_ = 0; }
  std::size_t streak() const { return streak_; }

 private:
  CurriculumConfig cfg_;
  std::size_t streak_ = 0;
};

// n_segments for one training batch at `stage_max`.
std::size_t sample_segments(Mixing mixing, std::size_t stage_max, std::mt19937_64& rng);

struct TrainerConfig {
  TrainMode mode = TrainMode::curriculum;
  CurriculumConfig curriculum;
  std::size_t naive_steps = 0;  // naive mode budget; 0 means stage_steps * stages
  std::size_t batch_size = 64;
  LrSchedule lr{1e-3, 100, 0};  // `total` is set per stage
  AdamWConfig adam;
  double clip_norm = 1.0;
  std::optional<std::size_t> bptt_unroll;
  std::size_t eval_every = 50;
  std::size_t eval_samples = 256;
  std::size_t eval_batch = 64;
  std::uint64_t seed = 1;
  std::uint64_t eval_seed = 12345;
  bool reset_optimizer_each_stage = false;
  bool train_initial_memory = true;
  std::filesystem::path output_dir;  // metrics.jsonl + stage checkpoints when non-empty
};

struct MetricRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  std::size_t n_segments = 0;
  std::string split;  // "train" or "val"
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
  double wall_ms = 0;
  std::string to_json() const;
};

struct StageResult {
  std::size_t stage = 0;
  std::size_t max_segments = 0;
  std::size_t steps = 0;
  bool converged = false;
  double final_metric = 0;
};

struct RunArtifacts {
  std::vector<MetricRecord> metrics;
  std::vector<StageResult> stages;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t total_steps = 0;
};

struct EvalResult {
  double accuracy = 0;  // classification: exact match; LM: next-token top-1
  double loss = 0;
  double perplexity = 0;
  std::size_t samples = 0;
};

// Classification accuracy or masked LM loss on `n_samples` samples of
// n_segments generated from eval_seed.
EvalResult evaluate(const Model<float>& model, const TaskSource& source, std::size_t n_segments,
                    std::size_t n_samples, std::uint64_t eval_seed, std::size_t batch = 64);

class Trainer {
 public:
  Trainer(Model<float>& model, const TaskSource& source, TrainerConfig cfg);
  RunArtifacts run();
  AdamW<float>& optimizer() { return opt_; }
  std::function<void(const StageResult&)> on_stage_end;
  std::function<void(const MetricRecord&)> on_metric;

 private:
  std::pair<double, double> train_step(std::uint64_t batch_seed, std::size_t n_segments, double lr);
  Model<float>& model_;
  const TaskSource& source_;
  TrainerConfig cfg_;
  AdamW<float> opt_;
  std::mt19937_64 rng_;
};

}  // namespace rmt
