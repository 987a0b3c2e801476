#include "rmt/analysis.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace rmt {

std::vector<ExtrapolationRow> extrapolation_sweep(const Model<float>& model, const TaskSource& source,
                                                  std::span<const std::size_t> segment_counts,
                                                  std::size_t n_samples, std::uint64_t eval_seed,
                                                  std::size_t batch) {
  std::vector<ExtrapolationRow> rows;
  for (auto n : segment_counts) {
    if (n == 0) throw std::invalid_argument("extrapolation_sweep: segment counts must be >= 1");
    auto r = evaluate(model, source, n, n_samples, eval_seed, batch);
    rows.push_back({n, r.accuracy, r.loss, r.samples});
  }
  return rows;
}

void write_extrapolation_csv(std::ostream& out, std::span<const ExtrapolationRow> rows) {
  out << "n_segments,accuracy,loss,samples\n" << std::setprecision(10);
  for (const auto& r : rows) out << r.n_segments << ',' << r.accuracy << ',' << r.loss << ',' << r.samples << '\n';
}

std::string to_string(HistoryMode mode) { return mode == HistoryMode::baseline ? "baseline" : "rmt"; }

HistoryMode parse_history_mode(const std::string& text) {
  if (text == "baseline") return HistoryMode::baseline;
  if (text == "rmt") return HistoryMode::rmt;
  throw std::invalid_argument("unknown history mode '" + text + "' (baseline|rmt)");
}

double PositionLoss::mean() const {
  if (loss.empty()) return 0;
  return std::accumulate(loss.begin(), loss.end(), 0.0) / static_cast<double>(loss.size());
}

PositionLoss per_position_loss(const Model<float>& model, const LmTaskSource& source,
                               std::size_t n_segments, std::size_t n_samples, HistoryMode mode,
                               std::size_t batch) {
  if (model.config().mode != ModelMode::decoder) {
    throw std::invalid_argument("per_position_loss: needs a decoder checkpoint");
  }
  if (n_samples == 0 || batch == 0) throw std::invalid_argument("per_position_loss: empty evaluation set");
  const auto& pool = source.eval_with_segments(n_segments);
  NoGradScope<float> no_grad;
  PositionLoss curve;
  std::vector<double> sums;
  std::vector<std::size_t> counts;
  for (std::size_t first = 0; first < n_samples; first += batch) {
    const std::size_t count = std::min(batch, n_samples - first);
    std::vector<LmSample> alone;
    std::vector<const LmSample*> picked;
    for (std::size_t i = 0; i < count; ++i) picked.push_back(pool[(first + i) % pool.size()]);
    if (mode == HistoryMode::baseline) {
      alone.reserve(count);
      for (const auto* s : picked) {
        LmSample t = *s;
        const auto target = s->segment(s->n_history);
        t.tokens.assign(target.begin(), target.end());
        t.n_history = 0;
        alone.push_back(std::move(t));
      }
      for (std::size_t i = 0; i < count; ++i) picked[i] = &alone[i];
    }
    auto plan = lm_plan(picked);
    auto out = recurrent_rollout(model, plan);
    const auto& logits = out.outputs[plan.loss_positions.front()];
    const auto& tg = plan.targets.front();
    const std::size_t rows_per = logits.rows() / count, V = logits.cols();
    if (sums.empty()) {
      sums.assign(rows_per, 0.0);
      counts.assign(rows_per, 0);
    }
    auto d = logits.data();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      if (tg.mask[r] == 0) continue;
      const float* row = d.data() + r * V;
      double mx = row[0];
      for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (std::size_t j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      const double nll = mx + std::log(z) - static_cast<double>(row[static_cast<std::size_t>(tg.targets[r])]);
      sums[r % rows_per] += nll;
      counts[r % rows_per] += 1;
    }
  }
  for (std::size_t p = 0; p < sums.size(); ++p) {
    if (counts[p] > 0) curve.loss.push_back(sums[p] / static_cast<double>(counts[p]));
  }
  curve.samples = n_samples;
  return curve;
}

void write_position_loss_csv(std::ostream& out, const PositionLoss& curve) {
  out << "position,loss\n" << std::setprecision(10);
  for (std::size_t p = 0; p < curve.loss.size(); ++p) out << p << ',' << curve.loss[p] << '\n';
}

std::string to_string(RowRole role) {
  switch (role) {
    case RowRole::memory: return "mem";
    case RowRole::memory_write: return "mem_write";
    case RowRole::cls: return "cls";
    case RowRole::sep: return "sep";
    case RowRole::token: return "token";
  }
  return "?";
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

constexpr char kAttnMagic[8] = {'R', 'M', 'T', 'A', 'T', 'T', 'N', '1'};

void write_grid(const std::filesystem::path& path, const AttentionGrid& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kAttnMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(g.size));
  put_u32(out, static_cast<std::uint32_t>(g.size));
  for (float w : g.weights) {
    std::uint32_t bits;
    std::memcpy(&bits, &w, 4);
    put_u32(out, bits);
  }
}

}  // namespace

AttentionDump attention_dump(const Model<float>& model, const RolloutPlan& sample,
                             const std::filesystem::path& out_dir) {
  const auto& cfg = model.config();
  const std::size_t m = cfg.memory_tokens;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  NoGradScope<float> no_grad;
  AttentionDump dump;
  MemoryState<float> memory = initial_memory(model, 1);
  for (std::size_t t = 0; t < sample.segments.size(); ++t) {
    const auto& seg = sample.segments[t];
    if (seg.batch != 1) throw std::invalid_argument("attention_dump: expects a single sample");
    std::vector<RowRole> roles(m, RowRole::memory);
    for (int id : seg.ids) roles.push_back(id == kClsId ? RowRole::cls : id == kSepId ? RowRole::sep : RowRole::token);
    if (cfg.mode == ModelMode::decoder) roles.insert(roles.end(), m, RowRole::memory_write);

    AttentionCapture<float> capture;
    capture.on_layer = [&](std::size_t layer, const std::vector<float>& probs, std::size_t, std::size_t n_heads,
                           std::size_t L) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        AttentionGrid g{t, layer, h, L, {}};
        const auto first = probs.begin() + static_cast<std::ptrdiff_t>(h * L * L);
        g.weights.assign(first, first + static_cast<std::ptrdiff_t>(L * L));
        dump.grids.push_back(std::move(g));
      }
    };
    ForwardContext<float> ctx;
    ctx.capture = &capture;
    auto step = run_segment(model, memory, seg, t, ctx, false);
    memory = std::move(step.memory);

    if (!out_dir.empty()) {
      const auto roles_path = out_dir / ("seg" + std::to_string(t) + ".roles");
      std::ofstream rf(roles_path);
      for (std::size_t i = 0; i < roles.size(); ++i) rf << i << ' ' << to_string(roles[i]) << '\n';
      dump.files.push_back(roles_path);
    }
    dump.roles.push_back(std::move(roles));
  }
  if (!out_dir.empty()) {
    for (const auto& g : dump.grids) {
      const auto path = out_dir / ("seg" + std::to_string(g.segment) + "_layer" + std::to_string(g.layer) +
                                   "_head" + std::to_string(g.head) + ".bin");
      write_grid(path, g);
      dump.files.push_back(path);
    }
  }
  return dump;
}

AttentionGrid read_attention_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kAttnMagic, 8) != 0) throw std::runtime_error(path.string() + ": bad magic");
  const auto rows = get_u32(in), cols = get_u32(in);
  if (rows != cols) throw std::runtime_error(path.string() + ": grid is not square");
  AttentionGrid g;
  g.size = rows;
  g.weights.resize(static_cast<std::size_t>(rows) * cols);
  for (auto& w : g.weights) {
    const auto bits = get_u32(in);
    std::memcpy(&w, &bits, 4);
  }
  if (!in) throw std::runtime_error(path.string() + ": truncated grid");
  return g;
}

double span_mass(const AttentionGrid& grid, std::span<const std::size_t> rows, std::size_t begin,
                 std::size_t length) {
  if (rows.empty()) throw std::invalid_argument("span_mass: no rows");
  if (begin + length > grid.size) throw std::out_of_range("span_mass: span outside the grid");
  double total = 0;
  for (auto r : rows) {
    for (std::size_t j = begin; j < begin + length; ++j) total += grid.at(r, j);
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace rmt
