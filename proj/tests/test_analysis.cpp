#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "rmt/analysis.hpp"
#include "support.hpp"

using namespace rmt;

namespace {

struct MemoryFixture {
  std::string text = testutil::read_file(testutil::data_dir() / "noise_corpus.txt");
  Vocab vocab = Vocab::build(tokenize(text));
  NoiseCorpus noise{text, vocab};
  TaskGenerator gen{vocab, noise};
};

const MemoryFixture& mem_fx() {
  static MemoryFixture f;
  return f;
}

ModelConfig encoder_cfg(std::size_t vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.segment_window = 26;
  c.memory_tokens = 3;
  c.dropout = 0;
  return c;
}

struct LmFixture {
  ToyLmData data = gen_toy_lm_documents(4, 30, 40, 12, 2, 0.9);
  LmTaskSource source{segment_lm_corpus(data.docs, 8, 1)};
};

const LmFixture& lm_fx() {
  static LmFixture f;
  return f;
}

ModelConfig decoder_cfg(std::size_t vocab) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.segment_window = 13;
  c.memory_tokens = 2;
  c.mode = ModelMode::decoder;
  c.dropout = 0;
  return c;
}

}  // namespace

TEST_CASE("extrapolation sweep") {
  const auto& f = mem_fx();
  MemoryTaskSource src(f.gen, TaskKind::memorize, 20);
  SUBCASE("untrained model sits at chance") {
    Model<float> model(encoder_cfg(f.vocab.size()), 1);
    const std::vector<std::size_t> counts = {1, 3};
    auto rows = extrapolation_sweep(model, src, counts, 1000, 99);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
      CHECK(r.samples == 1000);
      CHECK(std::fabs(r.accuracy - 1.0 / 6) < 0.05);
    }
    CHECK(rows[1].n_segments == 3);
    const std::vector<std::size_t> bad = {0};
    CHECK_THROWS_AS(extrapolation_sweep(model, src, bad, 10, 1), std::invalid_argument);
  }
  SUBCASE("training length reproduces the trainer's final evaluation") {
    Model<float> model(encoder_cfg(f.vocab.size()), 2);
    TrainerConfig tc;
    tc.curriculum.stages = {1, 2};
    tc.curriculum.stage_steps = 20;
    tc.curriculum.threshold = 1.0;
    tc.batch_size = 16;
    tc.lr = {3e-3, 5, 0};
    tc.eval_every = 20;
    tc.eval_samples = 1000;
    Trainer trainer(model, src, tc);
    auto art = trainer.run();
    const double final_acc = art.stages.back().final_metric;
    const std::vector<std::size_t> two = {2};
    auto same = extrapolation_sweep(model, src, two, 1000, tc.eval_seed);
    CHECK(same[0].accuracy == doctest::Approx(final_acc).epsilon(1e-12));
    auto fresh = extrapolation_sweep(model, src, two, 1000, tc.eval_seed + 1);
    CHECK(std::fabs(fresh[0].accuracy - final_acc) < 0.07);
  }
}

TEST_CASE("per-position loss") {
  const auto& f = lm_fx();
  const auto V = f.data.vocab.size();
  SUBCASE("curve average equals the evaluation loss") {
    Model<float> model(decoder_cfg(V), 3);
    for (auto mode : {HistoryMode::rmt}) {
      auto curve = per_position_loss(model, f.source, 2, 40, mode, 16);
      CHECK(curve.loss.size() == 8);
      auto r = evaluate(model, f.source, 2, 40, 0, 16);
      CHECK(std::fabs(curve.mean() - r.loss) < 1e-6);
    }
  }
  SUBCASE("baseline mode drops the history") {
    Model<float> model(decoder_cfg(V), 4);
    auto base = per_position_loss(model, f.source, 2, 20, HistoryMode::baseline, 7);
    // Independent path: the same target segments as one-segment samples.
    const auto& pool = f.source.eval_with_segments(2);
    std::vector<LmSample> alone;
    for (std::size_t i = 0; i < 20; ++i) {
      LmSample s = *pool[i % pool.size()];
      const auto seg = s.segment(1);
      s.tokens.assign(seg.begin(), seg.end());
      s.n_history = 0;
      alone.push_back(s);
    }
    std::vector<const LmSample*> ptrs;
    for (const auto& s : alone) ptrs.push_back(&s);
    NoGradScope<float> ng;
    auto out = recurrent_rollout(model, lm_plan(ptrs));
    CHECK(std::fabs(base.mean() - static_cast<double>(out.loss.item())) < 1e-5);
  }
  SUBCASE("uniform-output model is flat at ln V") {
    Model<float> model(decoder_cfg(V), 5);
    for (auto& g : model.final_gain.mutable_data()) g = 0;
    auto curve = per_position_loss(model, f.source, 2, 60, HistoryMode::rmt, 30);
    for (double l : curve.loss) CHECK(std::fabs(l / std::log(static_cast<double>(V)) - 1) < 0.02);
  }
  SUBCASE("encoder checkpoints are rejected") {
    ModelConfig c = encoder_cfg(V);
    Model<float> model(c, 6);
    CHECK_THROWS_AS(per_position_loss(model, f.source, 2, 10, HistoryMode::rmt), std::invalid_argument);
  }
  std::ostringstream csv;
  write_position_loss_csv(csv, PositionLoss{{1.5, 0.25}, 2});
  CHECK(csv.str() == "position,loss\n0,1.5\n1,0.25\n");
}

TEST_CASE("attention dump") {
  SUBCASE("encoder grids") {
    const auto& f = mem_fx();
    MemoryTaskSource src(f.gen, TaskKind::memorize, 20);
    auto cfg = encoder_cfg(f.vocab.size());
    Model<float> model(cfg, 7);
    auto plan = src.make_eval_batch(5, 0, 1, 3);
    const auto dir = testutil::temp_dir("attn_enc");
    auto dump = attention_dump(model, plan, dir);
    const std::size_t L = cfg.memory_tokens + 23;
    CHECK(dump.grids.size() == 3 * cfg.n_layers * cfg.n_heads);
    for (const auto& g : dump.grids) {
      CHECK(g.size == L);
      for (std::size_t i = 0; i < L; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < L; ++j) row += g.at(i, j);
        CHECK(std::fabs(row - 1) < 1e-5);
      }
    }
    REQUIRE(dump.roles.size() == 3);
    CHECK(dump.roles[0][0] == RowRole::memory);
    CHECK(dump.roles[0][3] == RowRole::cls);
    CHECK(dump.roles[0][4] == RowRole::sep);
    CHECK(dump.roles[0][5] == RowRole::token);
    CHECK(dump.roles[0][L - 1] == RowRole::sep);

    const auto path = dir / "seg2_layer1_head0.bin";
    REQUIRE(std::filesystem::exists(path));
    CHECK(std::filesystem::file_size(path) == 16 + 4 * L * L);
    auto back = read_attention_grid(path);
    const auto& orig = dump.grids[2 * cfg.n_layers * cfg.n_heads + 1 * cfg.n_heads + 0];
    CHECK(back.weights == orig.weights);
    std::ifstream roles(dir / "seg0.roles");
    std::string line;
    std::getline(roles, line);
    CHECK(line == "0 mem");
  }
  SUBCASE("decoder grids are causal and include the write block") {
    const auto& f = lm_fx();
    auto cfg = decoder_cfg(f.data.vocab.size());
    Model<float> model(cfg, 8);
    auto plan = f.source.make_eval_batch(0, 0, 1, 2);
    auto dump = attention_dump(model, plan);
    const std::size_t L = 2 + 9 + 2;
    for (const auto& g : dump.grids) {
      REQUIRE(g.size == L);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = i + 1; j < L; ++j) CHECK(g.at(i, j) == 0.0f);
    }
    CHECK(dump.roles[1][L - 1] == RowRole::memory_write);
    CHECK(dump.roles[1][2] == RowRole::sep);
  }
  SUBCASE("batched plans are rejected") {
    const auto& f = mem_fx();
    MemoryTaskSource src(f.gen, TaskKind::memorize, 20);
    Model<float> model(encoder_cfg(f.vocab.size()), 9);
    CHECK_THROWS_AS(attention_dump(model, src.make_eval_batch(5, 0, 2, 1)), std::invalid_argument);
  }
  CHECK_THROWS_AS(read_attention_grid("/nonexistent.bin"), std::runtime_error);
}

TEST_CASE("span mass") {
  AttentionGrid g{0, 0, 0, 3, {0.5f, 0.25f, 0.25f, 0.1f, 0.1f, 0.8f, 1.0f, 0.0f, 0.0f}};
  const std::vector<std::size_t> rows = {0, 1};
  CHECK(span_mass(g, rows, 1, 2) == doctest::Approx((0.5 + 0.9) / 2));
  CHECK(span_mass(g, rows, 0, 1) == doctest::Approx(0.3));
  CHECK_THROWS_AS(span_mass(g, rows, 2, 2), std::out_of_range);
}
