#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rmt/ops.hpp"
#include "rmt/tensor.hpp"

namespace rmt {

enum class ModelMode { encoder, decoder };

std::string to_string(ModelMode mode);
ModelMode parse_mode(const std::string& text);

// Reserved token ids. Decoder segments reuse SEP as the segment-start token.
inline constexpr int kClsId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 0;  // 0 means 4 * d_model
  std::size_t vocab_size = 64;
  // Total backbone positions per segment, memory and special tokens included.
  std::size_t segment_window = 64;
  std::size_t memory_tokens = 0;
  ModelMode mode = ModelMode::encoder;
  std::size_t n_classes = 6;
  double dropout = 0.1;
  // Memory rows get their own learned position slots.
  bool memory_positions = true;

  std::size_t ffn_width() const { return d_ffn == 0 ? 4 * d_model : d_ffn; }
  // Memory rows per composed segment: m for encoders, read + write blocks for decoders.
  std::size_t memory_slots() const {
    return mode == ModelMode::decoder ? 2 * memory_tokens : memory_tokens;
  }
  std::size_t special_tokens() const { return mode == ModelMode::decoder ? 1 : 3; }
  // Size of the learned token-position table.
  std::size_t token_positions() const { return segment_window - memory_slots(); }

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Closed-form number of scalar parameters implied by a config.
std::size_t parameter_count(const ModelConfig& cfg);

template <class Real>
struct Block {
  Tensor<Real> ln1_gain, ln1_bias;
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Real> ln2_gain, ln2_bias;
  Tensor<Real> w1, b1, w2, b2;
};

template <class Real>
struct AttentionCapture {
  // Called once per layer with post-softmax weights laid out [seq][head][i][j].
  std::function<void(std::size_t layer, const std::vector<Real>& probs, std::size_t n_seq,
                     std::size_t n_heads, std::size_t seq_len)>
      on_layer;
};

template <class Real>
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
  const AttentionCapture<Real>* capture = nullptr;
};

template <class Real>
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Named handles sharing storage with the model, in a fixed order.
  std::vector<Tensor<Real>> parameters() const;

  // Deep copy in another precision; requires_grad flags are preserved.
  template <class Other>
  Model<Other> cast() const;

  Tensor<Real> token_embedding, position_embedding, memory_position, memory;
  std::vector<Block<Real>> blocks;
  Tensor<Real> final_gain, final_bias;
  Tensor<Real> classifier_w, classifier_b;  // encoder only

 private:
  template <class>
  friend class Model;
  ModelConfig cfg_;
};

// Token plus learned position embedding for `ids.size() / seq_len` sequences.
// Positions restart at position_base for every sequence.
template <class Real>
Tensor<Real> embed(const Model<Real>& model, std::span<const int> ids, std::size_t seq_len,
                   std::size_t position_base = 0);

// Multi-head attention over pre-projected q/k/v followed by the output projection.
template <class Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       AttentionMask mask, std::size_t n_heads, std::size_t seq_len,
                       const Tensor<Real>& wo, const Tensor<Real>& bo,
                       std::vector<Real>* probs = nullptr);

AttentionMask mask_for(ModelMode mode);

// N pre-norm blocks and a final layer norm over `x.rows() / seq_len`
// sequences of seq_len rows.
template <class Real>
Tensor<Real> transformer_forward(const Model<Real>& model, const Tensor<Real>& x,
                                 std::size_t seq_len, const ForwardContext<Real>& ctx = {});

// Encoder head: class logits [batch x n_classes] from row 0 (CLS) of each
// segment block in `hidden`.
template <class Real>
Tensor<Real> classify(const Model<Real>& model, const Tensor<Real>& hidden, std::size_t batch);

// Decoder head tied to the token embedding: [rows x vocab].
template <class Real>
Tensor<Real> lm_logits(const Model<Real>& model, const Tensor<Real>& hidden);

// Dispatches on mode.
template <class Real>
Tensor<Real> heads(const Model<Real>& model, const Tensor<Real>& hidden, std::size_t batch);

template <class Real>
template <class Other>
Model<Other> Model<Real>::cast() const {
  auto conv = [](const Tensor<Real>& t) {
    return t.defined() ? t.template cast<Other>() : Tensor<Other>{};
  };
  Model<Other> out;
  out.cfg_ = cfg_;
  out.token_embedding = conv(token_embedding);
  out.position_embedding = conv(position_embedding);
  out.memory_position = conv(memory_position);
  out.memory = conv(memory);
  for (const auto& b : blocks) {
    out.blocks.push_back(Block<Other>{conv(b.ln1_gain), conv(b.ln1_bias), conv(b.wq), conv(b.bq),
                                      conv(b.wk), conv(b.bk), conv(b.wv), conv(b.bv), conv(b.wo),
                                      conv(b.bo), conv(b.ln2_gain), conv(b.ln2_bias), conv(b.w1),
                                      conv(b.b1), conv(b.w2), conv(b.b2)});
  }
  out.final_gain = conv(final_gain);
  out.final_bias = conv(final_bias);
  out.classifier_w = conv(classifier_w);
  out.classifier_b = conv(classifier_b);
  return out;
}

}  // namespace rmt
