#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rmt/tensor.hpp"

namespace rmt {

// All 2-D ops treat a tensor as rows() x cols().

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

// a * b^T
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b);

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

// x[r, c] + bias[c]
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias);

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor);

// tanh approximation
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x);

inline constexpr double kLayerNormEps = 1e-5;

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = static_cast<Real>(kLayerNormEps));

template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x);

enum class AttentionMask { bidirectional, causal };

// Scaled dot-product attention over `rows / seq_len` independent sequences
// of seq_len rows each; heads are contiguous column groups of q/k/v.
// Returns concatenated head outputs (no output projection). If `probs` is
// given it receives post-softmax weights laid out [seq][head][i][j].
template <class Real>
Tensor<Real> multihead_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                 const Tensor<Real>& v, std::size_t n_heads,
                                 std::size_t seq_len, AttentionMask mask,
                                 std::vector<Real>* probs = nullptr);

// Mean of -log softmax(logits)[target] over positions with mask != 0 (all
// positions when mask is empty). Returns a 1-element tensor.
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::span<const int> targets,
                           std::span<const std::uint8_t> mask = {});

// Per-row -log softmax(logits)[target], no tape.
template <class Real>
std::vector<double> token_nll(const Tensor<Real>& logits, std::span<const int> targets);

// Gathers rows of `table` for each id.
template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids);

// Each part is `batch` blocks stacked row-wise; the output interleaves them
// block by block: [p0_b0; p1_b0; ...; p0_b1; p1_b1; ...].
template <class Real>
Tensor<Real> concat_blocks(const std::vector<Tensor<Real>>& parts, std::size_t batch);

// Inverse of concat_blocks for one part: rows [begin, end) of every block.
template <class Real>
Tensor<Real> slice_blocks(const Tensor<Real>& x, std::size_t batch, std::size_t begin,
                          std::size_t end);

// Stacks `times` copies of x row-wise.
template <class Real>
Tensor<Real> tile_rows(const Tensor<Real>& x, std::size_t times);

template <class Real>
Tensor<Real> select_rows(const Tensor<Real>& x, std::span<const std::size_t> indices);

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x);

// Shares no history with x; gradients never flow through the result.
template <class Real>
Tensor<Real> detach(const Tensor<Real>& x);

// Inverted dropout; identity when p == 0.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, std::mt19937_64& rng);

}  // namespace rmt
