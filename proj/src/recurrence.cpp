#include "rmt/recurrence.hpp"

#include <algorithm>
#include <string>

namespace rmt {

std::vector<int> encoder_segment_ids(std::span<const int> payload) {
  std::vector<int> ids;
  ids.reserve(payload.size() + 3);
  ids.push_back(kClsId);
  ids.push_back(kSepId);
  ids.insert(ids.end(), payload.begin(), payload.end());
  ids.push_back(kSepId);
  return ids;
}

std::vector<int> decoder_segment_ids(std::span<const int> payload) {
  std::vector<int> ids;
  ids.reserve(payload.size() + 1);
  ids.push_back(kSepId);
  ids.insert(ids.end(), payload.begin(), payload.end());
  return ids;
}

template <class Real>
MemoryState<Real> initial_memory(const Model<Real>& model, std::size_t batch) {
  MemoryState<Real> state;
  if (model.config().memory_tokens > 0) state.vectors = tile_rows(model.memory, batch);
  return state;
}

template <class Real>
Tensor<Real> compose_segment(const Tensor<Real>& mem, const Tensor<Real>& seg_emb,
                             std::size_t batch, ModelMode mode, const Tensor<Real>& mem_pos) {
  if (!mem.defined() || mem.rows() == 0) return seg_emb;
  if (mem.cols() != seg_emb.cols()) {
    throw DimensionError("compose_segment: memory width " + std::to_string(mem.cols()) +
                         " vs segment width " + std::to_string(seg_emb.cols()));
  }
  if (batch == 0 || mem.rows() % batch != 0) {
    throw DimensionError("compose_segment: memory rows " + std::to_string(mem.rows()) +
                         " not divisible by batch " + std::to_string(batch));
  }
  const std::size_t m = mem.rows() / batch;
  Tensor<Real> read = mem;
  Tensor<Real> write = mem;
  if (mem_pos.defined()) {
    read = add(mem, tile_rows(slice_blocks(mem_pos, 1, 0, m), batch));
    if (mode == ModelMode::decoder) write = add(mem, tile_rows(slice_blocks(mem_pos, 1, m, 2 * m), batch));
  }
  if (mode == ModelMode::encoder) return concat_blocks<Real>({read, seg_emb}, batch);
  return concat_blocks<Real>({read, seg_emb, write}, batch);
}

template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> split_output(const Tensor<Real>& out, std::size_t batch,
                                                   std::size_t m, ModelMode mode) {
  if (batch == 0 || out.rows() % batch != 0) {
    throw DimensionError("split_output: " + std::to_string(out.rows()) +
                         " rows not divisible by batch " + std::to_string(batch));
  }
  const std::size_t block = out.rows() / batch;
  const std::size_t slots = mode == ModelMode::decoder ? 2 * m : m;
  if (block < slots) {
    throw DimensionError("split_output: block of " + std::to_string(block) +
                         " rows cannot hold " + std::to_string(slots) + " memory rows");
  }
  if (m == 0) return {Tensor<Real>{}, out};
  if (mode == ModelMode::encoder) {
    return {slice_blocks(out, batch, 0, m), slice_blocks(out, batch, m, block)};
  }
  return {slice_blocks(out, batch, block - m, block), slice_blocks(out, batch, m, block - m)};
}

template <class Real>
SegmentStep<Real> run_segment(const Model<Real>& model, const MemoryState<Real>& memory,
                              const SegmentBatch& segment, std::size_t index,
                              const ForwardContext<Real>& ctx, bool want_logits) {
  const auto& cfg = model.config();
  if (segment.batch == 0 || segment.ids.size() != segment.batch * segment.len) {
    throw DimensionError("segment " + std::to_string(index) + ": " + std::to_string(segment.ids.size()) +
                         " ids for batch " + std::to_string(segment.batch) + " x len " +
                         std::to_string(segment.len));
  }
  const std::size_t composed = segment.len + cfg.memory_slots();
  if (composed > cfg.segment_window || segment.len > cfg.token_positions()) {
    throw WindowOverflow(index, "segment " + std::to_string(index) + " needs " +
                                    std::to_string(composed) + " positions, window is " +
                                    std::to_string(cfg.segment_window));
  }
  auto emb = embed(model, std::span<const int>(segment.ids), segment.len);
  auto x = compose_segment(memory.vectors, emb, segment.batch, cfg.mode, model.memory_position);
  auto out = transformer_forward(model, x, composed, ctx);
  auto [mem, hidden] = split_output(out, segment.batch, cfg.memory_tokens, cfg.mode);
  SegmentStep<Real> step;
  step.hidden = hidden;
  step.memory.vectors = mem;
  step.memory.origin = MemoryOrigin::carried;
  step.memory.step = index;
  if (want_logits) step.logits = heads(model, hidden, segment.batch);
  return step;
}

template <class Real>
Tensor<Real> segment_loss(const Model<Real>& model, const Tensor<Real>& logits,
                          const SegmentTargets& targets) {
  (void)model;
  return cross_entropy(logits, std::span<const int>(targets.targets),
                       std::span<const std::uint8_t>(targets.mask));
}

template <class Real>
RolloutResult<Real> recurrent_rollout(const Model<Real>& model, const RolloutPlan& plan,
                                      const ForwardContext<Real>& ctx) {
  const std::size_t n = plan.segments.size();
  if (n == 0) throw std::invalid_argument("recurrent_rollout: plan has no segments");
  if (plan.bptt_unroll && *plan.bptt_unroll > n) {
    throw std::invalid_argument("recurrent_rollout: unroll " + std::to_string(*plan.bptt_unroll) +
                                " exceeds " + std::to_string(n) + " segments");
  }
  if (plan.targets.size() != plan.loss_positions.size()) {
    throw std::invalid_argument("recurrent_rollout: targets do not match loss positions");
  }
  for (auto p : plan.loss_positions) {
    if (p >= n) throw std::out_of_range("recurrent_rollout: loss position " + std::to_string(p));
  }
  const std::size_t batch = plan.segments.front().batch;
  RolloutResult<Real> result;
  result.outputs.resize(n);
  MemoryState<Real> memory = initial_memory(model, batch);
  std::vector<Tensor<Real>> losses;
  for (std::size_t t = 0; t < n; ++t) {
    // Memory entering segment (last - k) or earlier is cut from the graph.
    if (plan.bptt_unroll && t + *plan.bptt_unroll <= n - 1 && memory.vectors.defined()) {
      memory.vectors = detach(memory.vectors);
      memory.detached = true;
    }
    if (plan.trace_memory) result.memory_in.push_back(memory.vectors);
    const auto loss_it = std::find(plan.loss_positions.begin(), plan.loss_positions.end(), t);
    const bool is_loss = loss_it != plan.loss_positions.end();
    auto step = run_segment(model, memory, plan.segments[t], t, ctx, is_loss || plan.keep_outputs);
    if (is_loss) {
      const auto& tg = plan.targets[static_cast<std::size_t>(loss_it - plan.loss_positions.begin())];
      losses.push_back(segment_loss(model, step.logits, tg));
    }
    result.outputs[t] = step.logits;
    if (plan.trace_memory) result.memory_out.push_back(step.memory.vectors);
    memory = std::move(step.memory);
  }
  result.segment_losses = losses;
  if (!losses.empty()) {
    Tensor<Real> total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    result.loss = losses.size() == 1 ? total : scale(total, Real(1) / static_cast<Real>(losses.size()));
  }
  result.final_memory = std::move(memory);
  return result;
}

namespace {

template <class Real>
std::vector<int> argmax_rows(const Tensor<Real>& logits) {
  const std::size_t r = logits.rows(), c = logits.cols();
  std::vector<int> out(r);
  auto d = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    const auto* row = d.data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace

template <class Real>
StreamResult<Real> stream_inference(
    const Model<Real>& model, const SegmentSource& source, std::size_t max_segments,
    const std::function<void(std::size_t, const Tensor<Real>&)>& sink, bool keep_predictions) {
  NoGradScope<Real> no_grad;
  StreamResult<Real> result;
  MemoryState<Real> memory;
  bool started = false;
  for (std::size_t t = 0; t < max_segments; ++t) {
    std::optional<SegmentBatch> segment;
    try {
      segment = source(t);
    } catch (const std::exception& e) {
      throw StreamError(t, "segment source failed at segment " + std::to_string(t) + ": " + e.what());
    }
    if (!segment) break;
    if (!started) {
      memory = initial_memory(model, segment->batch);
      started = true;
    }
    auto step = run_segment(model, memory, *segment, t);
    if (sink) sink(t, step.logits);
    if (keep_predictions) result.predictions.push_back(argmax_rows(step.logits));
    result.last_logits = step.logits;
    memory = std::move(step.memory);
    result.segments = t + 1;
  }
  result.final_memory = std::move(memory);
  return result;
}

#define RMT_INSTANTIATE_RECURRENCE(R)                                                              \
  template MemoryState<R> initial_memory(const Model<R>&, std::size_t);                           \
  template Tensor<R> compose_segment(const Tensor<R>&, const Tensor<R>&, std::size_t, ModelMode,   \
                                     const Tensor<R>&);                                            \
  template std::pair<Tensor<R>, Tensor<R>> split_output(const Tensor<R>&, std::size_t,             \
                                                        std::size_t, ModelMode);                   \
  template SegmentStep<R> run_segment(const Model<R>&, const MemoryState<R>&, const SegmentBatch&, \
                                      std::size_t, const ForwardContext<R>&, bool);                \
  template Tensor<R> segment_loss(const Model<R>&, const Tensor<R>&, const SegmentTargets&);       \
  template RolloutResult<R> recurrent_rollout(const Model<R>&, const RolloutPlan&,                 \
                                              const ForwardContext<R>&);                           \
  template StreamResult<R> stream_inference(                                                       \
      const Model<R>&, const SegmentSource&, std::size_t,                                          \
      const std::function<void(std::size_t, const Tensor<R>&)>&, bool);

RMT_INSTANTIATE_RECURRENCE(float)
RMT_INSTANTIATE_RECURRENCE(double)

}  // namespace rmt
