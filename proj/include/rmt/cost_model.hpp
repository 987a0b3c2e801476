#pragma once

// Forward-pass FLOP accounting for full attention vs segment recurrence,
// and an empirical time/memory bench on the local kernels.
//
// Counting follows the usual dense-transformer convention: 2 FLOPs per
// multiply-add, attention scores and mixing quadratic in sequence length,
// 3 FLOPs per softmax entry per head, plus embedding and logits layers.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmt/model.hpp"

namespace rmt {

struct ArchSpec {
  std::string name;
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t d_ffn = 0;
  std::size_t vocab = 0;
  // Throws std::invalid_argument naming the arch and field.
  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

// INI-style blocks, one section per model:
//   [opt-125m]
//   n_layers = 12
//   d_model = 768
//   n_heads = 12
//   d_ffn = 3072
//   vocab = 50272
std::vector<ArchSpec> parse_arch_specs(std::istream& in);
std::vector<ArchSpec> load_arch_specs(const std::filesystem::path& path);
const ArchSpec& find_arch(std::span<const ArchSpec> specs, const std::string& name);

enum class CostMode { full, rmt };
std::string to_string(CostMode mode);
CostMode parse_cost_mode(const std::string& text);

struct FlopTerms {
  double embed = 0;
  double qkv_proj = 0;
  double attn_scores = 0;
  double attn_softmax = 0;
  double attn_mix = 0;
  double out_proj = 0;
  double ffn = 0;
  double logits = 0;
  double sum() const;
  FlopTerms scaled(double k) const;
};

struct CostEstimate {
  FlopTerms terms;
  double total = 0;
  CostMode mode = CostMode::full;
  std::size_t seq_len = 0;      // total input length L
  std::size_t segment_len = 0;  // s; equals L for full attention
  std::size_t mem_tokens = 0;
  std::size_t n_segments = 1;
};

struct FlopOptions {
  bool include_embed = true;
};

// One forward pass over seq_len tokens.
CostEstimate flops_full(const ArchSpec& arch, std::size_t seq_len, FlopOptions opt = {});

// ceil(L / s) passes over s + m tokens (s + 2m for decoders).
CostEstimate flops_rmt(const ArchSpec& arch, std::size_t segment_len, std::size_t mem_tokens,
                       std::size_t total_len, ModelMode mode, FlopOptions opt = {});

struct ScalingRow {
  std::string arch;
  CostMode mode = CostMode::full;
  std::size_t seq_len = 0;
  double flops_total = 0;
  double ratio = 0;  // full / rmt at this length
};

struct ScalingOptions {
  std::size_t segment_len = 512;
  std::size_t mem_tokens = 0;
  ModelMode mode = ModelMode::decoder;
  FlopOptions flops;
};

// Two rows (full, rmt) per arch and length.
std::vector<ScalingRow> scaling_table(std::span<const ArchSpec> archs,
                                      std::span<const std::size_t> lengths,
                                      const ScalingOptions& opt = {});
void write_scaling_csv(std::ostream& out, std::span<const ScalingRow> rows);

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};
// Ordinary least squares; needs at least two distinct x values.
LinearFit linear_fit(std::span<const double> x, std::span<const double> y);
// Slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

struct BenchConfig {
  std::vector<std::size_t> lengths;
  CostMode mode = CostMode::rmt;
  std::size_t reps = 5;
  std::int64_t memory_limit_bytes = 0;  // 0 is unlimited
  std::uint64_t seed = 1;
};

struct BenchRow {
  std::string arch;
  CostMode mode = CostMode::full;
  std::size_t seq_len = 0;
  std::size_t n_segments = 0;
  double flops_total = 0;
  double wall_ms = 0;  // median over reps
  std::int64_t peak_bytes = 0;
  bool oom = false;
};

// Forward passes with the local kernels. Full rows run one pass over L
// tokens; rmt rows stream ceil(L / s) segments with s = token window of
// `model_cfg`. Allocation failures become rows with oom set.
std::vector<BenchRow> bench_empirical(const ModelConfig& model_cfg, const BenchConfig& cfg);
void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows);

// ArchSpec matching a model config, for analytical rows next to bench rows.
ArchSpec arch_of(const ModelConfig& cfg, std::string name = "local");

}  // namespace rmt
