#pragma once

// Run configuration files: flat INI sections [model] [task] [trainer]
// [output]. Every key is optional except where noted; unknown sections or
// keys are rejected by name.
//
// [model]   mode, n_layers, d_model, n_heads, d_ffn, vocab (0 = from data),
//           segment_window, memory_tokens, n_classes, dropout, memory_positions
// [task]    type (memorize | detect_memorize | reasoning | toy_lm), n_segments,
//           corpus, seed, payload (0 = window capacity),
//           lm_docs, lm_eval_docs, lm_doc_len, lm_alphabet, lm_families,
//           lm_fidelity, lm_history
// [trainer] mode, stages, threshold, patience, mixing, stage_steps, naive_steps,
//           batch_size, lr, warmup, beta1, beta2, eps, weight_decay, clip_norm,
//           bptt_unroll (0 = unlimited), eval_every, eval_samples, eval_batch,
//           seed, eval_seed, reset_optimizer, train_initial_memory
// [output]  dir (overridden by the RMT_OUT environment variable)

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include "rmt/model.hpp"
#include "rmt/tasks.hpp"
#include "rmt/trainer.hpp"

namespace rmt {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class TaskType { memorize, detect_memorize, reasoning, toy_lm };
std::string to_string(TaskType type);
TaskType parse_task_type(const std::string& text);

struct TaskConfig {
  TaskType type = TaskType::memorize;
  std::size_t n_segments = 1;  // evaluation length
  std::filesystem::path corpus = "data/noise_corpus.txt";
  std::uint64_t seed = 1;
  std::size_t payload = 0;
  std::size_t lm_docs = 512;
  std::size_t lm_eval_docs = 128;
  std::size_t lm_doc_len = 256;
  std::size_t lm_alphabet = 24;
  std::size_t lm_families = 4;
  double lm_fidelity = 0.9;
  std::size_t lm_history = 1;
};

struct RunConfig {
  ModelConfig model = [] {
    ModelConfig m;
    m.vocab_size = 0;
    return m;
  }();
  TaskConfig task;
  TrainerConfig trainer;
  std::filesystem::path output_dir = "runs/default";

  // Cross-field checks; throws ConfigError naming the key.
  void validate() const;
};

// Relative corpus paths resolve against `base_dir`. Applies RMT_OUT.
RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(std::ostream& out, const RunConfig& cfg);

// Data, vocab and task source for a run, with the model config completed
// (vocab size, payload) from the data.
class TaskContext {
 public:
  explicit TaskContext(const RunConfig& cfg);
  TaskContext(const TaskContext&) = delete;
  TaskContext& operator=(const TaskContext&) = delete;

  const RunConfig& config() const { return cfg_; }
  const ModelConfig& model_config() const { return cfg_.model; }
  const Vocab& vocab() const { return *vocab_; }
  const TaskSource& source() const { return *source_; }
  // Null for LM runs.
  const MemoryTaskSource* memory_source() const;
  const LmTaskSource* lm_source() const;
  std::size_t payload() const { return payload_; }

 private:
  RunConfig cfg_;
  std::unique_ptr<Vocab> vocab_;
  std::unique_ptr<NoiseCorpus> noise_;
  std::unique_ptr<TaskGenerator> gen_;
  std::unique_ptr<TaskSource> source_;
  std::size_t payload_ = 0;
};

// run.cfg stored next to a checkpoint by the train command.
std::filesystem::path run_config_for(const std::filesystem::path& checkpoint);

}  // namespace rmt
