#include "rmt/model.hpp"

#include <cmath>
#include <stdexcept>

namespace rmt {

std::string to_string(ModelMode mode) {
  return mode == ModelMode::decoder ? "decoder" : "encoder";
}

ModelMode parse_mode(const std::string& text) {
  if (text == "encoder") return ModelMode::encoder;
  if (text == "decoder") return ModelMode::decoder;
  throw std::invalid_argument("mode: expected encoder|decoder, got '" + text + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument(key + ": " + why);
  };
  if (d_model == 0) fail("d_model", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (d_model % n_heads != 0) fail("n_heads", "d_model must be divisible by n_heads");
  if (vocab_size <= static_cast<std::size_t>(kUnkId)) fail("vocab_size", "must exceed the reserved ids");
  if (segment_window <= memory_slots() + special_tokens()) {
    fail("segment_window", "must exceed memory rows plus special tokens");
  }
  if (mode == ModelMode::encoder && n_classes == 0) fail("n_classes", "must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must be in [0, 1)");
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, f = cfg.ffn_width();
  std::size_t n = cfg.vocab_size * d + cfg.token_positions() * d;
  if (cfg.memory_positions) n += cfg.memory_slots() * d;
  n += cfg.memory_tokens * d;
  const std::size_t per_block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
  n += cfg.n_layers * per_block + 2 * d;
  if (cfg.mode == ModelMode::encoder) n += d * cfg.n_classes + cfg.n_classes;
  return n;
}

template <class Real>
Model<Real>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_model, f = cfg.ffn_width();
  auto normal = [&](Shape shape, double stddev, const std::string& name) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<Real> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<Real>(dist(rng));
    auto t = Tensor<Real>::from(std::move(shape), std::move(v), true);
    t.set_name(name);
    return t;
  };
  auto constant = [](Shape shape, Real value, const std::string& name) {
    auto t = Tensor<Real>::full(std::move(shape), value, true);
    t.set_name(name);
    return t;
  };
  const double std_init = 0.02;
  const double std_residual = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_layers, 1)));

  token_embedding = normal({cfg.vocab_size, d}, std_init, "token_embedding");
  position_embedding = normal({cfg.token_positions(), d}, std_init, "position_embedding");
  if (cfg.memory_positions && cfg.memory_tokens > 0) {
    memory_position = normal({cfg.memory_slots(), d}, std_init, "memory_position");
  }
  if (cfg.memory_tokens > 0) memory = normal({cfg.memory_tokens, d}, std_init, "memory");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block<Real> b;
    b.ln1_gain = constant({d}, Real(1), p + "ln1_gain");
    b.ln1_bias = constant({d}, Real(0), p + "ln1_bias");
    b.wq = normal({d, d}, std_init, p + "wq");
    b.bq = constant({d}, Real(0), p + "bq");
    b.wk = normal({d, d}, std_init, p + "wk");
    b.bk = constant({d}, Real(0), p + "bk");
    b.wv = normal({d, d}, std_init, p + "wv");
    b.bv = constant({d}, Real(0), p + "bv");
    b.wo = normal({d, d}, std_residual, p + "wo");
    b.bo = constant({d}, Real(0), p + "bo");
    b.ln2_gain = constant({d}, Real(1), p + "ln2_gain");
    b.ln2_bias = constant({d}, Real(0), p + "ln2_bias");
    b.w1 = normal({d, f}, std_init, p + "w1");
    b.b1 = constant({f}, Real(0), p + "b1");
    b.w2 = normal({f, d}, std_residual, p + "w2");
    b.b2 = constant({d}, Real(0), p + "b2");
    blocks.push_back(std::move(b));
  }
  final_gain = constant({d}, Real(1), "final_gain");
  final_bias = constant({d}, Real(0), "final_bias");
  if (cfg.mode == ModelMode::encoder) {
    classifier_w = normal({d, cfg.n_classes}, std_init, "classifier_w");
    classifier_b = constant({cfg.n_classes}, Real(0), "classifier_b");
  }
}

template <class Real>
std::vector<Tensor<Real>> Model<Real>::parameters() const {
  std::vector<Tensor<Real>> out;
  auto push = [&](const Tensor<Real>& t) {
    if (t.defined()) out.push_back(t);
  };
  push(token_embedding);
  push(position_embedding);
  push(memory_position);
  push(memory);
  for (const auto& b : blocks) {
    for (const auto* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv,
                          &b.wo, &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2}) {
      push(*t);
    }
  }
  push(final_gain);
  push(final_bias);
  push(classifier_w);
  push(classifier_b);
  return out;
}

template <class Real>
Tensor<Real> embed(const Model<Real>& model, std::span<const int> ids, std::size_t seq_len,
                   std::size_t position_base) {
  const std::size_t d = model.config().d_model;
  if (ids.empty()) return Tensor<Real>::zeros({0, d});
  if (seq_len == 0 || ids.size() % seq_len != 0) {
    throw DimensionError("embed: " + std::to_string(ids.size()) + " ids do not split into sequences of " +
                         std::to_string(seq_len));
  }
  const std::size_t max_pos = model.config().token_positions();
  if (position_base + seq_len > max_pos) {
    throw std::out_of_range("embed: positions up to " + std::to_string(position_base + seq_len) +
                            " exceed the " + std::to_string(max_pos) + " learned positions");
  }
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(position_base + i % seq_len);
  return add(embedding(model.token_embedding, ids), embedding(model.position_embedding, std::span<const int>(pos)));
}

template <class Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       AttentionMask mask, std::size_t n_heads, std::size_t seq_len,
                       const Tensor<Real>& wo, const Tensor<Real>& bo, std::vector<Real>* probs) {
  auto mixed = multihead_attention(q, k, v, n_heads, seq_len, mask, probs);
  return add_bias(matmul(mixed, wo), bo);
}

AttentionMask mask_for(ModelMode mode) {
  return mode == ModelMode::decoder ? AttentionMask::causal : AttentionMask::bidirectional;
}

template <class Real>
Tensor<Real> transformer_forward(const Model<Real>& model, const Tensor<Real>& x,
                                 std::size_t seq_len, const ForwardContext<Real>& ctx) {
  const auto& cfg = model.config();
  if (seq_len > cfg.segment_window) {
    throw std::length_error("transformer_forward: sequence of " + std::to_string(seq_len) +
                            " rows exceeds window " + std::to_string(cfg.segment_window));
  }
  if (seq_len == 0 || x.rows() % seq_len != 0 || x.cols() != cfg.d_model) {
    throw DimensionError("transformer_forward: input " + shape_str(x.shape()) + " with seq_len " +
                         std::to_string(seq_len));
  }
  const double p = ctx.training ? cfg.dropout : 0.0;
  if (p > 0.0 && ctx.rng == nullptr) throw std::invalid_argument("transformer_forward: dropout needs an rng");
  const AttentionMask mask = mask_for(cfg.mode);
  std::vector<Real> probs;
  Tensor<Real> h = x;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& b = model.blocks[l];
    auto a = layer_norm(h, b.ln1_gain, b.ln1_bias);
    auto q = add_bias(matmul(a, b.wq), b.bq);
    auto k = add_bias(matmul(a, b.wk), b.bk);
    auto v = add_bias(matmul(a, b.wv), b.bv);
    const bool want_probs = ctx.capture != nullptr && ctx.capture->on_layer;
    auto att = attention(q, k, v, mask, cfg.n_heads, seq_len, b.wo, b.bo, want_probs ? &probs : nullptr);
    if (want_probs) ctx.capture->on_layer(l, probs, x.rows() / seq_len, cfg.n_heads, seq_len);
    if (p > 0.0) att = dropout(att, p, *ctx.rng);
    h = add(h, att);
    auto f = layer_norm(h, b.ln2_gain, b.ln2_bias);
    f = add_bias(matmul(gelu(add_bias(matmul(f, b.w1), b.b1)), b.w2), b.b2);
    if (p > 0.0) f = dropout(f, p, *ctx.rng);
    h = add(h, f);
  }
  return layer_norm(h, model.final_gain, model.final_bias);
}

template <class Real>
Tensor<Real> classify(const Model<Real>& model, const Tensor<Real>& hidden, std::size_t batch) {
  if (model.config().mode != ModelMode::encoder) {
    throw std::invalid_argument("classify: decoder models have no CLS head");
  }
  if (batch == 0 || hidden.rows() % batch != 0 || hidden.rows() == 0) {
    throw std::invalid_argument("classify: no CLS position in hidden " + shape_str(hidden.shape()));
  }
  const std::size_t block = hidden.rows() / batch;
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * block;
  auto cls = select_rows(hidden, std::span<const std::size_t>(rows));
  return add_bias(matmul(cls, model.classifier_w), model.classifier_b);
}

template <class Real>
Tensor<Real> lm_logits(const Model<Real>& model, const Tensor<Real>& hidden) {
  return matmul_nt(hidden, model.token_embedding);
}

template <class Real>
Tensor<Real> heads(const Model<Real>& model, const Tensor<Real>& hidden, std::size_t batch) {
  return model.config().mode == ModelMode::encoder ? classify(model, hidden, batch)
                                                   : lm_logits(model, hidden);
}

#define RMT_INSTANTIATE_MODEL(R)                                                                   \
  template class Model<R>;                                                                         \
  template Tensor<R> embed(const Model<R>&, std::span<const int>, std::size_t, std::size_t);      \
  template Tensor<R> attention(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,              \
                               AttentionMask, std::size_t, std::size_t, const Tensor<R>&,          \
                               const Tensor<R>&, std::vector<R>*);                                 \
  template Tensor<R> transformer_forward(const Model<R>&, const Tensor<R>&, std::size_t,           \
                                         const ForwardContext<R>&);                                \
  template Tensor<R> classify(const Model<R>&, const Tensor<R>&, std::size_t);                    \
  template Tensor<R> lm_logits(const Model<R>&, const Tensor<R>&);                                 \
  template Tensor<R> heads(const Model<R>&, const Tensor<R>&, std::size_t);

RMT_INSTANTIATE_MODEL(float)
RMT_INSTANTIATE_MODEL(double)

}  // namespace rmt
