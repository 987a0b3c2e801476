#pragma once

// Segment-level recurrence: memory rows are composed with each segment's
// embeddings, the backbone runs over the composed rows, and the memory
// rows of the output become the memory of the next segment.
//
//   encoder: [mem | segment]              -> updated memory = leading m rows
//   decoder: [mem | segment | mem]        -> updated memory = trailing m rows

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rmt/model.hpp"

namespace rmt {

// One segment for a batch of sequences; ids are [batch][len] row-major and
// already include special tokens.
struct SegmentBatch {
  std::vector<int> ids;
  std::size_t batch = 1;
  std::size_t len = 0;
};

// [CLS] [SEP] payload [SEP]
std::vector<int> encoder_segment_ids(std::span<const int> payload);
// [SEP] payload, SEP acting as segment start.
std::vector<int> decoder_segment_ids(std::span<const int> payload);

enum class MemoryOrigin { initial, carried };

template <class Real>
struct MemoryState {
  Tensor<Real> vectors;  // [batch * m x d]; undefined when m == 0
  MemoryOrigin origin = MemoryOrigin::initial;
  std::size_t step = 0;  // segment index that produced it (carried only)
  bool detached = false;
};

// Loss targets for one segment. Encoder: one class per batch item.
// Decoder: one token per output row with an optional row mask.
struct SegmentTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

struct RolloutPlan {
  std::vector<SegmentBatch> segments;
  // Number of recurrent hops gradients may cross; nullopt is unlimited.
  std::optional<std::size_t> bptt_unroll;
  std::vector<std::size_t> loss_positions;
  std::vector<SegmentTargets> targets;  // aligned with loss_positions
  bool keep_outputs = false;            // head outputs for every segment, not only loss ones
  bool trace_memory = false;
};

template <class Real>
struct RolloutResult {
  std::vector<Tensor<Real>> outputs;  // head logits per segment (undefined when skipped)
  std::vector<Tensor<Real>> segment_losses;
  MemoryState<Real> final_memory;
  Tensor<Real> loss;
  std::vector<Tensor<Real>> memory_in, memory_out;  // filled when trace_memory
};

class WindowOverflow : public std::length_error {
 public:
  WindowOverflow(std::size_t segment, const std::string& what)
      : std::length_error(what), segment_(segment) {}
  std::size_t segment() const { return segment_; }

 private:
  std::size_t segment_;
};

class StreamError : public std::runtime_error {
 public:
  StreamError(std::size_t segment, const std::string& what)
      : std::runtime_error(what), segment_(segment) {}
  std::size_t segment() const { return segment_; }

 private:
  std::size_t segment_;
};

template <class Real>
MemoryState<Real> initial_memory(const Model<Real>& model, std::size_t batch);

// mem: [batch * m x d] or undefined for m == 0; seg_emb: [batch * T x d].
// mem_pos, when defined, holds the learned slot rows added to the read
// (and for decoders, write) copies.
template <class Real>
Tensor<Real> compose_segment(const Tensor<Real>& mem, const Tensor<Real>& seg_emb,
                             std::size_t batch, ModelMode mode,
                             const Tensor<Real>& mem_pos = {});

template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> split_output(const Tensor<Real>& out, std::size_t batch,
                                                   std::size_t m, ModelMode mode);

template <class Real>
struct SegmentStep {
  Tensor<Real> hidden;  // segment rows of the backbone output
  Tensor<Real> logits;
  MemoryState<Real> memory;
};

// One recurrent step; `index` is used for error reporting and the memory origin.
template <class Real>
SegmentStep<Real> run_segment(const Model<Real>& model, const MemoryState<Real>& memory,
                              const SegmentBatch& segment, std::size_t index,
                              const ForwardContext<Real>& ctx = {}, bool want_logits = true);

template <class Real>
RolloutResult<Real> recurrent_rollout(const Model<Real>& model, const RolloutPlan& plan,
                                      const ForwardContext<Real>& ctx = {});

// Segment loss for one step's logits.
template <class Real>
Tensor<Real> segment_loss(const Model<Real>& model, const Tensor<Real>& logits,
                          const SegmentTargets& targets);

using SegmentSource = std::function<std::optional<SegmentBatch>(std::size_t index)>;

template <class Real>
struct StreamResult {
  std::size_t segments = 0;
  std::vector<std::vector<int>> predictions;  // argmax per head row, per segment
  Tensor<Real> last_logits;
  MemoryState<Real> final_memory;
};

// Inference over an arbitrarily long segment stream. Only the parameters,
// the current segment and the memory state are alive at any time. The sink
// (optional) sees each segment's logits before they are released.
template <class Real>
StreamResult<Real> stream_inference(
    const Model<Real>& model, const SegmentSource& source, std::size_t max_segments,
    const std::function<void(std::size_t, const Tensor<Real>&)>& sink = {},
    bool keep_predictions = true);

}  // namespace rmt
