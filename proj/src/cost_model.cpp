#include "rmt/cost_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <new>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "rmt/recurrence.hpp"

namespace rmt {

void ArchSpec::validate() const {
  auto positive = [&](std::size_t v, const char* field) {
    if (v == 0) throw std::invalid_argument("arch " + name + ": " + field + " must be positive");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ffn, "d_ffn");
  positive(vocab, "vocab");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("arch " + name + ": d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

std::vector<ArchSpec> parse_arch_specs(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("arch specs: ") + e.what());
  }
  std::vector<ArchSpec> specs;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw std::invalid_argument("arch specs: key '" + section + "' outside a section");
    ArchSpec a;
    a.name = section;
    std::map<std::string, std::size_t*> fields = {{"n_layers", &a.n_layers}, {"d_model", &a.d_model},
                                                  {"n_heads", &a.n_heads},   {"d_ffn", &a.d_ffn},
                                                  {"vocab", &a.vocab}};
    for (const auto& [key, value] : body) {
      auto it = fields.find(key);
      if (it == fields.end()) throw std::invalid_argument("arch " + section + ": unknown key '" + key + "'");
      const auto text = value.get_value<std::string>();
      std::size_t used = 0;
      unsigned long long parsed = 0;
      try {
        parsed = std::stoull(text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != text.size() || text.empty() || text.front() == '-') {
        throw std::invalid_argument("arch " + section + ": key '" + key + "' is not a count: " + text);
      }
      *it->second = static_cast<std::size_t>(parsed);
      fields.erase(it);
    }
    if (!fields.empty()) {
      throw std::invalid_argument("arch " + section + ": missing key '" + fields.begin()->first + "'");
    }
    a.validate();
    specs.push_back(a);
  }
  return specs;
}

std::vector<ArchSpec> load_arch_specs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open arch specs " + path.string());
  return parse_arch_specs(in);
}

const ArchSpec& find_arch(std::span<const ArchSpec> specs, const std::string& name) {
  for (const auto& s : specs)
    if (s.name == name) return s;
  throw std::invalid_argument("unknown arch '" + name + "'");
}

std::string to_string(CostMode mode) { return mode == CostMode::full ? "full" : "rmt"; }

CostMode parse_cost_mode(const std::string& text) {
  if (text == "full") return CostMode::full;
  if (text == "rmt") return CostMode::rmt;
  throw std::invalid_argument("unknown cost mode '" + text + "' (expected full or rmt)");
}

double FlopTerms::sum() const {
  return embed + qkv_proj + attn_scores + attn_softmax + attn_mix + out_proj + ffn + logits;
}

FlopTerms FlopTerms::scaled(double k) const {
  return {embed * k,    qkv_proj * k, attn_scores * k, attn_softmax * k,
          attn_mix * k, out_proj * k, ffn * k,         logits * k};
}

CostEstimate flops_full(const ArchSpec& arch, std::size_t seq_len, FlopOptions opt) {
  arch.validate();
  if (seq_len == 0) throw std::invalid_argument("flops_full: seq_len must be positive");
  const double L = static_cast<double>(seq_len), d = static_cast<double>(arch.d_model),
               N = static_cast<double>(arch.n_layers), h = static_cast<double>(arch.n_heads),
               f = static_cast<double>(arch.d_ffn), V = static_cast<double>(arch.vocab);
  CostEstimate e;
  e.mode = CostMode::full;
  e.seq_len = e.segment_len = seq_len;
  auto& t = e.terms;
  t.embed = opt.include_embed ? 2 * L * V * d : 0;
  t.qkv_proj = N * 2 * 3 * L * d * d;
  t.attn_scores = N * 2 * L * L * d;
  t.attn_softmax = N * 3 * h * L * L;
  t.attn_mix = N * 2 * L * L * d;
  t.out_proj = N * 2 * L * d * d;
  t.ffn = N * 2 * 2 * L * d * f;
  t.logits = 2 * L * d * V;
  e.total = t.sum();
  return e;
}

CostEstimate flops_rmt(const ArchSpec& arch, std::size_t segment_len, std::size_t mem_tokens,
                       std::size_t total_len, ModelMode mode, FlopOptions opt) {
  if (segment_len == 0) throw std::invalid_argument("flops_rmt: segment_len must be positive");
  if (total_len < segment_len) {
    throw std::invalid_argument("flops_rmt: total length " + std::to_string(total_len) +
                                " shorter than segment length " + std::to_string(segment_len));
  }
  const std::size_t slots = mode == ModelMode::decoder ? 2 * mem_tokens : mem_tokens;
  const std::size_t n = (total_len + segment_len - 1) / segment_len;
  const auto one = flops_full(arch, segment_len + slots, opt);
  CostEstimate e;
  e.mode = CostMode::rmt;
  e.seq_len = total_len;
  e.segment_len = segment_len;
  e.mem_tokens = mem_tokens;
  e.n_segments = n;
  e.terms = one.terms.scaled(static_cast<double>(n));
  e.total = e.terms.sum();
  return e;
}

std::vector<ScalingRow> scaling_table(std::span<const ArchSpec> archs,
                                      std::span<const std::size_t> lengths,
                                      const ScalingOptions& opt) {
  std::vector<ScalingRow> rows;
  for (const auto& a : archs) {
    for (auto L : lengths) {
      const double full = flops_full(a, L, opt.flops).total;
      const double rmt = flops_rmt(a, opt.segment_len, opt.mem_tokens, L, opt.mode, opt.flops).total;
      rows.push_back({a.name, CostMode::full, L, full, full / rmt});
      rows.push_back({a.name, CostMode::rmt, L, rmt, full / rmt});
    }
  }
  return rows;
}

void write_scaling_csv(std::ostream& out, std::span<const ScalingRow> rows) {
  out << "arch,mode,seq_len,flops_total,ratio\n";
  const auto flags = out.flags();
  const auto prec = out.precision();
  out << std::setprecision(17);
  for (const auto& r : rows)
    out << r.arch << ',' << to_string(r.mode) << ',' << r.seq_len << ',' << r.flops_total << ','
        << r.ratio << '\n';
  out.flags(flags);
  out.precision(prec);
}

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("linear_fit: need two or more paired points");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw std::invalid_argument("linear_fit: x values are all equal");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  std::vector<double> lx(x.size()), ly(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0 || (i < y.size() && y[i] <= 0)) throw std::invalid_argument("loglog_slope: non-positive value");
    lx[i] = std::log(x[i]);
  }
  for (std::size_t i = 0; i < y.size(); ++i) ly[i] = std::log(y[i]);
  return linear_fit(lx, ly).slope;
}

ArchSpec arch_of(const ModelConfig& cfg, std::string name) {
  return {std::move(name), cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.ffn_width(), cfg.vocab_size};
}

namespace {

class AllocLimit {
 public:
  explicit AllocLimit(std::int64_t bytes) : previous_(alloc_stats().limit_bytes) {
    alloc_stats().limit_bytes = bytes;
  }
  ~AllocLimit() { alloc_stats().limit_bytes = previous_; }
  AllocLimit(const AllocLimit&) = delete;
  AllocLimit& operator=(const AllocLimit&) = delete;

 private:
  std::int64_t previous_;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<int> random_ids(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  const int lo = vocab > 4 ? 4 : 0;
  std::uniform_int_distribution<int> dist(lo, static_cast<int>(vocab) - 1);
  std::vector<int> ids(n);
  for (auto& id : ids) id = dist(rng);
  return ids;
}

}  // namespace

std::vector<BenchRow> bench_empirical(const ModelConfig& model_cfg, const BenchConfig& cfg) {
  model_cfg.validate();
  if (cfg.reps < 1) throw std::invalid_argument("bench: reps must be at least 1");
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  const auto arch = arch_of(model_cfg);
  const std::size_t s = model_cfg.token_positions();
  std::mt19937_64 rng(cfg.seed);

  std::optional<Model<float>> rmt_model;
  if (cfg.mode == CostMode::rmt) rmt_model.emplace(model_cfg, cfg.seed);

  for (auto L : cfg.lengths) {
    if (L == 0) throw std::invalid_argument("bench: lengths must be positive");
    BenchRow row;
    row.arch = arch.name;
    row.mode = cfg.mode;
    row.seq_len = L;
    const auto ids = random_ids(L, model_cfg.vocab_size, rng);
    std::vector<double> times;
    try {
      if (cfg.mode == CostMode::full) {
        row.n_segments = 1;
        row.flops_total = flops_full(arch, L).total;
        ModelConfig full_cfg = model_cfg;
        full_cfg.memory_tokens = 0;
        full_cfg.segment_window = L;
        AllocLimit limit(cfg.memory_limit_bytes);
        Model<float> model(full_cfg, cfg.seed);
        NoGradScope<float> no_grad;
        for (std::size_t r = 0; r < cfg.reps; ++r) {
          reset_alloc_peak();
          const auto base = alloc_stats().live_bytes;
          const auto t0 = clock::now();
          auto x = embed(model, std::span<const int>(ids), L);
          auto h = transformer_forward(model, x, L);
          auto out = heads(model, h, 1);
          times.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
          row.peak_bytes = std::max(row.peak_bytes, alloc_stats().peak_bytes - base);
        }
      } else {
        row.n_segments = (L + s - 1) / s;
        row.flops_total = L >= s ? flops_rmt(arch, s, model_cfg.memory_tokens, L, model_cfg.mode).total
                                 : flops_full(arch, L + model_cfg.memory_slots()).total;
        AllocLimit limit(cfg.memory_limit_bytes);
        SegmentSource source = [&](std::size_t t) -> std::optional<SegmentBatch> {
          const std::size_t begin = t * s;
          if (begin >= L) return std::nullopt;
          const std::size_t len = std::min(s, L - begin);
          return SegmentBatch{std::vector<int>(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                               ids.begin() + static_cast<std::ptrdiff_t>(begin + len)),
                              1, len};
        };
        for (std::size_t r = 0; r < cfg.reps; ++r) {
          reset_alloc_peak();
          const auto base = alloc_stats().live_bytes;
          const auto t0 = clock::now();
          stream_inference(*rmt_model, source, row.n_segments, {}, false);
          times.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
          row.peak_bytes = std::max(row.peak_bytes, alloc_stats().peak_bytes - base);
        }
      }
      row.wall_ms = median(times);
    } catch (const std::bad_alloc&) {
      row.oom = true;
      row.wall_ms = std::nan("");
      row.peak_bytes = cfg.memory_limit_bytes;
    }
    rows.push_back(row);
  }
  return rows;
}

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows) {
  out << "arch,mode,seq_len,flops_total,ratio,wall_ms,peak_bytes\n";
  const auto flags = out.flags();
  const auto prec = out.precision();
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.arch << ',' << to_string(r.mode) << ',' << r.seq_len << ',' << r.flops_total << ",,";
    if (r.oom)
      out << "oom,oom\n";
    else
      out << r.wall_ms << ',' << r.peak_bytes << '\n';
  }
  out.flags(flags);
  out.precision(prec);
}

}  // namespace rmt
