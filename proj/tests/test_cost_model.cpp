#include <doctest.h>

#include <cmath>
#include <sstream>

#include "rmt/cost_model.hpp"
#include "support.hpp"

using namespace rmt;

namespace {

const std::vector<ArchSpec>& opt_specs() {
  static const auto specs = load_arch_specs(testutil::data_dir() / "opt.specs");
  return specs;
}

// Independent count: every dense product listed as (rows, inner, cols), two
// FLOPs per multiply-add, plus softmax entries.
double listed_flops(const ArchSpec& a, double L, bool with_embed) {
  const double d = static_cast<double>(a.d_model), f = static_cast<double>(a.d_ffn),
               V = static_cast<double>(a.vocab), h = static_cast<double>(a.n_heads);
  struct Product { double r, k, c; };
  std::vector<Product> per_layer = {{L, d, d}, {L, d, d}, {L, d, d},  // q, k, v
                                    {L, d, L},                        // scores over all heads
                                    {L, L, d},                        // mix
                                    {L, d, d},                        // output projection
                                    {L, d, f}, {L, f, d}};            // ffn
  double total = 0;
  for (std::size_t layer = 0; layer < a.n_layers; ++layer) {
    for (const auto& p : per_layer) total += 2 * p.r * p.k * p.c;
    total += 3 * h * L * L;
  }
  total += 2 * L * d * V;
  if (with_embed) total += 2 * L * V * d;
  return total;
}

}  // namespace

TEST_CASE("arch spec file") {
  const auto& specs = opt_specs();
  REQUIRE(specs.size() == 9);
  const auto& big = find_arch(specs, "opt-175b");
  CHECK(big.n_layers == 96);
  CHECK(big.d_model == 12288);
  CHECK(big.n_heads == 96);
  CHECK(big.d_ffn == 49152);
  CHECK(big.vocab == 50272);
  CHECK(specs.front().name == "opt-125m");
  CHECK_THROWS_WITH_AS(find_arch(specs, "opt-135m"), doctest::Contains("opt-135m"), std::invalid_argument);

  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_arch_specs(in);
  };
  const std::string ok = "[t]\nn_layers=2\nd_model=8\nn_heads=2\nd_ffn=32\nvocab=11\n";
  CHECK(parse(ok).at(0) == ArchSpec{"t", 2, 8, 2, 32, 11});
  CHECK_THROWS_WITH_AS(parse(ok + "depth=3\n"), doctest::Contains("depth"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse("[t]\nn_layers=2\nd_model=8\nn_heads=2\nd_ffn=32\n"), doctest::Contains("vocab"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse("[t]\nn_layers=2\nd_model=8\nn_heads=3\nd_ffn=32\nvocab=11\n"),
                       doctest::Contains("n_heads"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse("[t]\nn_layers=x\nd_model=8\nn_heads=2\nd_ffn=32\nvocab=11\n"),
                       doctest::Contains("n_layers"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse("[t]\nn_layers=-2\nd_model=8\nn_heads=2\nd_ffn=32\nvocab=11\n"),
                       doctest::Contains("n_layers"), std::invalid_argument);
}

TEST_CASE("flops_full") {
  const ArchSpec a{"t", 3, 64, 4, 256, 1000};
  SUBCASE("terms add up and match a listed product oracle") {
    for (std::size_t L : {1, 7, 512, 3000}) {
      auto e = flops_full(a, L);
      CHECK(e.total == e.terms.sum());
      CHECK(e.total == doctest::Approx(listed_flops(a, static_cast<double>(L), true)).epsilon(1e-12));
      auto ne = flops_full(a, L, {.include_embed = false});
      CHECK(ne.terms.embed == 0);
      CHECK(ne.total == doctest::Approx(listed_flops(a, static_cast<double>(L), false)).epsilon(1e-12));
    }
  }
  SUBCASE("superlinear and increasingly attention dominated") {
    double prev_share = 0;
    for (std::size_t L = 64; L <= 1 << 20; L *= 2) {
      CHECK(flops_full(a, 2 * L).total > 2 * flops_full(a, L).total);
      auto e = flops_full(a, L);
      const double share = e.terms.attn_scores / e.total;
      CHECK(share > prev_share);
      prev_share = share;
    }
    CHECK(prev_share > 0.4);
  }
  SUBCASE("monotone in every field") {
    const double base = flops_full(a, 100).total;
    for (auto bump : {&ArchSpec::n_layers, &ArchSpec::d_model, &ArchSpec::d_ffn, &ArchSpec::vocab}) {
      ArchSpec b = a;
      b.*bump *= 2;
      CHECK(flops_full(b, 100).total > base);
    }
    ArchSpec more_heads = a;
    more_heads.n_heads = 8;
    CHECK(flops_full(more_heads, 100).total > base);
    CHECK(flops_full(a, 101).total > base);
  }
  CHECK_THROWS_AS(flops_full(a, 0), std::invalid_argument);
  CHECK_THROWS_AS(flops_full(ArchSpec{"bad", 1, 10, 3, 4, 5}, 4), std::invalid_argument);
}

TEST_CASE("analytical terms equal counted multiply-adds") {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 1;
  c.vocab_size = 11;
  c.segment_window = 4;
  c.mode = ModelMode::decoder;
  c.dropout = 0;
  Model<float> model(c, 3);
  const std::vector<int> ids = {4, 7, 10, 5};
  NoGradScope<float> no_grad;
  const auto before = mac_counter();
  auto h = transformer_forward(model, embed(model, std::span<const int>(ids), 4), 4);
  auto logits = heads(model, h, 1);
  const auto macs = mac_counter() - before;

  auto e = flops_full(arch_of(c), 4);
  const auto& t = e.terms;
  const double modeled = t.qkv_proj + t.attn_scores + t.attn_mix + t.out_proj + t.ffn + t.logits;
  CHECK(static_cast<double>(2 * macs) == modeled);
  CHECK(2 * macs == 2 * (2 * (3 * 4 * 64 + 4 * 4 * 8 * 2 + 4 * 64 + 2 * 4 * 8 * 32) + 4 * 8 * 11));
}

TEST_CASE("flops_rmt") {
  const auto& small = find_arch(opt_specs(), "opt-125m");
  SUBCASE("one segment without memory is a full pass") {
    CHECK(flops_rmt(small, 512, 0, 512, ModelMode::decoder).total == flops_full(small, 512).total);
  }
  SUBCASE("exactly linear in segment count") {
    for (std::size_t L = 512; L <= 2048000; L *= 2) {
      const auto one = flops_rmt(small, 512, 10, L, ModelMode::decoder).total;
      const auto two = flops_rmt(small, 512, 10, 2 * L, ModelMode::decoder).total;
      CHECK(two == 2 * one);
    }
    const auto seg = flops_full(small, 512 + 20).total;
    CHECK(flops_rmt(small, 512, 10, 513, ModelMode::decoder).total == 2 * seg);
    CHECK(flops_rmt(small, 512, 10, 513, ModelMode::decoder).n_segments == 2);
    CHECK(flops_rmt(small, 512, 10, 1024, ModelMode::encoder).total == 2 * flops_full(small, 522).total);
  }
  SUBCASE("quadratic surplus of full attention") {
    for (std::size_t k : {2, 3, 10, 100}) {
      const std::size_t L = 512 * k;
      CHECK(flops_full(small, L).total - static_cast<double>(k) * flops_full(small, 512).total > 0);
    }
  }
  CHECK_THROWS_AS(flops_rmt(small, 512, 0, 100, ModelMode::decoder), std::invalid_argument);
  CHECK_THROWS_AS(flops_rmt(small, 0, 0, 100, ModelMode::decoder), std::invalid_argument);
}

TEST_CASE("OPT reduction factors at two million tokens") {
  const std::size_t L = 2048000;
  for (bool with_embed : {true, false}) {
    FlopOptions opt{.include_embed = with_embed};
    auto ratio = [&](const char* name) {
      const auto& a = find_arch(opt_specs(), name);
      return flops_full(a, L, opt).total / flops_rmt(a, 512, 0, L, ModelMode::decoder, opt).total;
    };
    const double big = ratio("opt-175b"), small = ratio("opt-125m");
    MESSAGE("embed=" << with_embed << " 175b " << big << " 125m " << small);
    CHECK(std::fabs(big / 29 - 1) <= 0.25);
    CHECK(std::fabs(small / 295 - 1) <= 0.25);
  }
}

TEST_CASE("scaling table") {
  const auto& specs = opt_specs();
  std::vector<std::size_t> lengths;
  for (std::size_t L = 512; L <= 2048000; L *= 2) lengths.push_back(L);
  lengths.push_back(2048000);
  auto rows = scaling_table(specs, lengths);
  CHECK(rows.size() == 2 * specs.size() * lengths.size());
  for (const auto& r : rows) {
    if (r.seq_len > 512) CHECK(r.ratio >= 1);
  }

  const std::vector<std::size_t> flat(5, 512);
  for (const auto& r : scaling_table(specs, flat)) CHECK(r.ratio == doctest::Approx(1.0).epsilon(1e-12));

  auto slope_of = [&](const std::string& arch, CostMode mode, std::size_t min_len) {
    std::vector<double> x, y;
    for (const auto& r : rows) {
      if (r.arch == arch && r.mode == mode && r.seq_len >= min_len && r.seq_len % 512 == 0) {
        x.push_back(static_cast<double>(r.seq_len));
        y.push_back(r.flops_total);
      }
    }
    return loglog_slope(x, y);
  };
  CHECK(slope_of("opt-125m", CostMode::full, 256000) == doctest::Approx(2.0).epsilon(0.025));
  for (const auto& a : specs) {
    CHECK(slope_of(a.name, CostMode::rmt, 256000) == doctest::Approx(1.0).epsilon(1e-9));
    const double s = slope_of(a.name, CostMode::full, 256000);
    CHECK(s > 1.5);
    CHECK(s < 2.0);
  }
  // Bigger models approach the quadratic regime later.
  CHECK(slope_of("opt-175b", CostMode::full, 256000) < slope_of("opt-125m", CostMode::full, 256000));

  std::ostringstream csv;
  write_scaling_csv(csv, std::span<const ScalingRow>(rows).first(2));
  const auto text = csv.str();
  CHECK(text.rfind("arch,mode,seq_len,flops_total,ratio\nopt-125m,full,512,", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("linear_fit") {
  const std::vector<double> x = {1, 2, 3, 4, 5}, y = {3, 5, 7, 9, 11};
  auto f = linear_fit(x, y);
  CHECK(f.slope == doctest::Approx(2));
  CHECK(f.intercept == doctest::Approx(1));
  CHECK(f.r2 == doctest::Approx(1));

  const std::vector<double> noisy = {2.9, 5.3, 6.8, 9.4, 10.7};
  auto g = linear_fit(x, noisy);
  double mean = 0;
  for (double v : noisy) mean += v / 5;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const double pred = g.intercept + g.slope * x[i];
    ss_res += (noisy[i] - pred) * (noisy[i] - pred);
    ss_tot += (noisy[i] - mean) * (noisy[i] - mean);
  }
  CHECK(g.r2 == doctest::Approx(1 - ss_res / ss_tot).epsilon(1e-12));
  CHECK_THROWS_AS(linear_fit(std::vector<double>{1, 1}, std::vector<double>{1, 2}), std::invalid_argument);
  CHECK(loglog_slope(std::vector<double>{1, 10, 100}, std::vector<double>{3, 300, 30000}) == doctest::Approx(2));
}

TEST_CASE("bench_empirical") {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 40;
  c.segment_window = 36;
  c.memory_tokens = 4;
  c.mode = ModelMode::decoder;
  c.dropout = 0;

  SUBCASE("recurrent rows keep a flat peak") {
    BenchConfig b;
    b.lengths = {280, 2800};
    b.reps = 5;
    auto rows = bench_empirical(c, b);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].n_segments == 10);
    CHECK(rows[1].n_segments == 100);
    CHECK_FALSE(rows[1].oom);
    CHECK(rows[1].peak_bytes > 0);
    CHECK(static_cast<double>(rows[1].peak_bytes) / static_cast<double>(rows[0].peak_bytes) < 1.1);
    CHECK(rows[1].flops_total == 10 * rows[0].flops_total);
    CHECK(rows[0].wall_ms > 0);
  }
  SUBCASE("full attention memory grows superlinearly") {
    BenchConfig b;
    b.mode = CostMode::full;
    b.lengths = {256, 512};
    b.reps = 5;
    auto rows = bench_empirical(c, b);
    CHECK(static_cast<double>(rows[1].peak_bytes) / static_cast<double>(rows[0].peak_bytes) > 2);
  }
  SUBCASE("allocation limits become oom rows") {
    BenchConfig b;
    b.mode = CostMode::full;
    b.lengths = {64, 4096};
    b.reps = 5;
    b.memory_limit_bytes = 4 << 20;
    auto rows = bench_empirical(c, b);
    CHECK_FALSE(rows[0].oom);
    CHECK(rows[1].oom);
    CHECK(alloc_stats().limit_bytes == 0);
    std::ostringstream csv;
    write_bench_csv(csv, rows);
    CHECK(csv.str().rfind("arch,mode,seq_len,flops_total,ratio,wall_ms,peak_bytes\n", 0) == 0);
    CHECK(csv.str().find("oom") != std::string::npos);
  }
  CHECK_THROWS_AS(bench_empirical(c, BenchConfig{{0}, CostMode::rmt, 5, 0, 1}), std::invalid_argument);
}
