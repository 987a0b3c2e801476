#include <doctest.h>

#include <cmath>

#include "rmt/model.hpp"
#include "support.hpp"

using namespace rmt;
using oracle::Mat;

namespace {

ModelConfig tiny(ModelMode mode, std::size_t layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.segment_window = 12;
  c.mode = mode;
  c.dropout = 0.0;
  return c;
}

Mat vals(const Tensor<double>& t) { return Mat(t.data().begin(), t.data().end()); }

Mat add_rows(Mat x, const Mat& bias, std::size_t cols) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += bias[i % cols];
  return x;
}

// Block-by-block reference forward pass built only from the oracle helpers.
Mat reference_forward(const Model<double>& m, const Mat& x, std::size_t len) {
  const auto& cfg = m.config();
  const std::size_t d = cfg.d_model, f = cfg.ffn_width(), h = cfg.n_heads, dh = d / h;
  const bool causal = cfg.mode == ModelMode::decoder;
  Mat cur = x;
  for (const auto& b : m.blocks) {
    auto a = oracle::two_pass_layer_norm(cur, len, d, vals(b.ln1_gain), vals(b.ln1_bias), 1e-5);
    auto q = add_rows(oracle::naive_matmul(a, vals(b.wq), len, d, d), vals(b.bq), d);
    auto k = add_rows(oracle::naive_matmul(a, vals(b.wk), len, d, d), vals(b.bk), d);
    auto v = add_rows(oracle::naive_matmul(a, vals(b.wv), len, d, d), vals(b.bv), d);
    Mat mixed(len * d);
    for (std::size_t head = 0; head < h; ++head) {
      Mat qh(len * dh), kh(len * dh), vh(len * dh);
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t c = 0; c < dh; ++c) {
          qh[i * dh + c] = q[i * d + head * dh + c];
          kh[i * dh + c] = k[i * d + head * dh + c];
          vh[i * dh + c] = v[i * d + head * dh + c];
        }
      auto oh = oracle::attention_1h(qh, kh, vh, len, dh, causal);
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t c = 0; c < dh; ++c) mixed[i * d + head * dh + c] = oh[i * dh + c];
    }
    auto att = add_rows(oracle::naive_matmul(mixed, vals(b.wo), len, d, d), vals(b.bo), d);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += att[i];
    auto n2 = oracle::two_pass_layer_norm(cur, len, d, vals(b.ln2_gain), vals(b.ln2_bias), 1e-5);
    auto hid = add_rows(oracle::naive_matmul(n2, vals(b.w1), len, d, f), vals(b.b1), f);
    for (auto& z : hid) z = oracle::gelu_tanh(z);
    auto out = add_rows(oracle::naive_matmul(hid, vals(b.w2), len, f, d), vals(b.b2), d);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += out[i];
  }
  return oracle::two_pass_layer_norm(cur, len, d, vals(m.final_gain), vals(m.final_bias), 1e-5);
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  auto c = tiny(ModelMode::encoder);
  c.n_heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_heads"), std::invalid_argument);
  c = tiny(ModelMode::decoder);
  c.memory_tokens = 6;  // 2*6 + 1 > 12
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("segment_window"), std::invalid_argument);
  c = tiny(ModelMode::encoder);
  c.dropout = 1.0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dropout"), std::invalid_argument);
  c = tiny(ModelMode::encoder);
  c.memory_tokens = 8;  // 8 + 3 < 12 fits
  CHECK_NOTHROW(c.validate());
  c.memory_tokens = 9;
  CHECK_THROWS(c.validate());
}

TEST_CASE("parameter count matches closed form") {
  for (auto mode : {ModelMode::encoder, ModelMode::decoder}) {
    for (std::size_t m : {0u, 3u}) {
      auto c = tiny(mode);
      c.memory_tokens = m;
      Model<float> model(c, 1);
      std::size_t n = 0;
      for (const auto& p : model.parameters()) n += p.numel();
      CHECK(n == parameter_count(c));
    }
  }
}

TEST_CASE("embed") {
  Model<double> model(tiny(ModelMode::encoder), 3);
  auto empty = embed(model, std::span<const int>{}, 4);
  CHECK(empty.rows() == 0);
  CHECK(empty.cols() == 8);

  std::vector<int> ids = {7, 7, 2};
  auto e = embed(model, std::span<const int>(ids), 3);
  for (std::size_t c = 0; c < 8; ++c) {
    const double want = model.token_embedding.at(7, c) + model.position_embedding.at(0, c);
    CHECK(e.at(0, c) == doctest::Approx(want).epsilon(1e-15));
  }
  bool differ = false;
  for (std::size_t c = 0; c < 8; ++c) differ |= e.at(0, c) != e.at(1, c);
  CHECK(differ);
  // Rows coincide exactly when position rows are made equal.
  for (std::size_t c = 0; c < 8; ++c) model.position_embedding.mutable_data()[8 + c] = model.position_embedding.at(0, c);
  auto e2 = embed(model, std::span<const int>(ids), 3);
  for (std::size_t c = 0; c < 8; ++c) CHECK(e2.at(0, c) == e2.at(1, c));

  std::vector<int> bad = {11};
  CHECK_THROWS_AS(embed(model, std::span<const int>(bad), 1), std::out_of_range);
  std::vector<int> long_ids(13, 4);
  CHECK_THROWS_AS(embed(model, std::span<const int>(long_ids), 13), std::out_of_range);
}

TEST_CASE("attention with one token returns the projected value row") {
  Model<double> model(tiny(ModelMode::encoder), 4);
  const auto& b = model.blocks[0];
  auto q = testutil::tensor<double>({1, 8}, oracle::random_values(8, 1));
  auto k = testutil::tensor<double>({1, 8}, oracle::random_values(8, 2));
  auto v = testutil::tensor<double>({1, 8}, oracle::random_values(8, 3));
  auto want = add_rows(oracle::naive_matmul(vals(v), vals(b.wo), 1, 8, 8), vals(b.bo), 8);
  for (auto mask : {AttentionMask::bidirectional, AttentionMask::causal}) {
    auto out = attention(q, k, v, mask, 2, 1, b.wo, b.bo);
    for (std::size_t i = 0; i < 8; ++i) CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention T=3 h=1 matches hand computation") {
  auto q = oracle::random_values(12, 5), k = oracle::random_values(12, 6), v = oracle::random_values(12, 7);
  auto wo = oracle::random_values(16, 8);
  auto bo = oracle::random_values(4, 9);
  for (bool causal : {false, true}) {
    auto out = attention(testutil::tensor<float>({3, 4}, q), testutil::tensor<float>({3, 4}, k),
                         testutil::tensor<float>({3, 4}, v), causal ? AttentionMask::causal : AttentionMask::bidirectional,
                         1, 3, testutil::tensor<float>({4, 4}, wo), testutil::tensor<float>({4}, bo));
    auto want = add_rows(oracle::naive_matmul(oracle::attention_1h(q, k, v, 3, 4, causal), wo, 3, 4, 4), bo, 4);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::fabs(out.data()[i] - want[i]) < 1e-5);
  }
}

TEST_CASE("attention shape errors") {
  auto a = Tensor<float>::zeros({3, 4});
  auto b = Tensor<float>::zeros({3, 6});
  auto wo = Tensor<float>::zeros({4, 4});
  auto bo = Tensor<float>::zeros({4});
  CHECK_THROWS_AS(attention(a, b, a, AttentionMask::causal, 1, 3, wo, bo), DimensionError);
  CHECK_THROWS_AS(attention(a, a, a, AttentionMask::causal, 3, 3, wo, bo), DimensionError);
}

TEST_CASE("causal invariance: later perturbations never reach earlier outputs") {
  Model<double> model(tiny(ModelMode::decoder), 5);
  auto x = testutil::tensor<double>({6, 8}, oracle::random_values(48, 10));
  auto base = transformer_forward(model, x, 6);
  for (std::size_t t = 1; t < 6; ++t) {
    auto y = x.clone();
    for (std::size_t c = 0; c < 8; ++c) y.mutable_data()[t * 8 + c] += 3.0;
    auto out = transformer_forward(model, y, 6);
    for (std::size_t i = 0; i < t * 8; ++i) CHECK(out.data()[i] == base.data()[i]);
    bool changed = false;
    for (std::size_t i = t * 8; i < 48; ++i) changed |= out.data()[i] != base.data()[i];
    CHECK(changed);
  }
}

TEST_CASE("transformer_forward") {
  SUBCASE("zero layers reduce to the final norm") {
    Model<double> model(tiny(ModelMode::encoder, 0), 6);
    auto xv = oracle::random_values(40, 11);
    auto out = transformer_forward(model, testutil::tensor<double>({5, 8}, xv), 5);
    auto want = oracle::two_pass_layer_norm(xv, 5, 8, vals(model.final_gain), vals(model.final_bias), 1e-5);
    for (std::size_t i = 0; i < 40; ++i) CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  SUBCASE("shape contract and window limit") {
    Model<float> model(tiny(ModelMode::encoder), 7);
    for (std::size_t len : {1u, 5u, 12u}) {
      auto out = transformer_forward(model, Tensor<float>::zeros({2 * len, 8}), len);
      CHECK(out.rows() == 2 * len);
      CHECK(out.cols() == 8);
    }
    CHECK_THROWS_AS(transformer_forward(model, Tensor<float>::zeros({13, 8}), 13), std::length_error);
  }
  SUBCASE("two layers match the step-by-step composition") {
    for (auto mode : {ModelMode::encoder, ModelMode::decoder}) {
      Model<double> model(tiny(mode), 8);
      // Non-trivial norms and biases so every term participates.
      for (auto p : model.parameters()) {
        if (p.shape().size() == 1) {
          auto r = oracle::random_values(p.numel(), p.numel() + 99, 0.3);
          for (std::size_t i = 0; i < p.numel(); ++i) p.mutable_data()[i] += r[i];
        }
      }
      auto xv = oracle::random_values(56, 12);
      auto out = transformer_forward(model, testutil::tensor<double>({7, 8}, xv), 7);
      auto want = reference_forward(model, xv, 7);
      for (std::size_t i = 0; i < 56; ++i) CHECK(std::fabs(out.data()[i] - want[i]) < 1e-10);
    }
  }
}

TEST_CASE("heads") {
  SUBCASE("encoder gives six class logits from CLS") {
    Model<float> model(tiny(ModelMode::encoder), 9);
    auto hidden = testutil::tensor<float>({10, 8}, oracle::random_values(80, 13));
    auto logits = heads(model, hidden, 2);
    CHECK(logits.rows() == 2);
    CHECK(logits.cols() == 6);
    CHECK_THROWS_AS(classify(model, Tensor<float>::zeros({0, 8}), 1), std::invalid_argument);
  }
  SUBCASE("decoder logits are tied to the token embedding") {
    Model<double> model(tiny(ModelMode::decoder), 10);
    auto hv = oracle::random_values(32, 14);
    auto logits = heads(model, testutil::tensor<double>({4, 8}, hv), 1);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == 11);
    auto want = oracle::naive_matmul(hv, oracle::transpose(vals(model.token_embedding), 11, 8), 4, 8, 11);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(logits.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
    CHECK_THROWS_AS(classify(model, Tensor<double>::zeros({4, 8}), 1), std::invalid_argument);
  }
}

TEST_CASE("every parameter's gradient matches 64-bit finite differences") {
  for (auto mode : {ModelMode::encoder, ModelMode::decoder}) {
    Model<float> base(tiny(mode), 11);
    auto model = base.cast<double>();
    // O(1) activations keep central-difference truncation error small at h = 1e-3.
    std::mt19937_64 init(23);
    std::normal_distribution<double> dist(0.0, 0.3);
    for (auto p : model.parameters()) {
      for (auto& w : p.mutable_data()) w += dist(init);
    }
    std::vector<int> ids = {0, 1, 5, 9, 4, 1, 0, 1, 7, 7, 3, 1};
    std::vector<int> targets = mode == ModelMode::encoder ? std::vector<int>{2, 5} : std::vector<int>(ids.begin(), ids.end());
    auto loss_fn = [&] {
      auto h = transformer_forward(model, embed(model, std::span<const int>(ids), 6), 6);
      return cross_entropy(heads(model, h, 2), targets);
    };
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(loss_fn());
    }
    NoGradScope<double> no_grad;
    std::mt19937_64 rng(17);
    std::size_t checked = 0;
    for (auto p : model.parameters()) {
      REQUIRE(p.has_grad());
      for (int rep = 0; rep < 4; ++rep) {
        const std::size_t i = rng() % p.numel();
        auto data = p.mutable_data();
        const double numeric = oracle::central_difference([&] { return loss_fn().item(); }, data[i], 1e-3);
        const double analytic = p.grad()[i];
        const double err = oracle::grad_rel_error(analytic, numeric);
        INFO(p.name(), "[", i, "] analytic ", analytic, " numeric ", numeric);
        CHECK(err < 1e-4);
        ++checked;
      }
    }
    CHECK(checked >= 100);
  }
}
