#include "rmt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace rmt {

MemoryTaskSource::MemoryTaskSource(const TaskGenerator& gen, TaskKind kind, std::size_t payload)
    : gen_(&gen), kind_(kind), payload_(payload) {}

std::vector<TaskSample> MemoryTaskSource::samples(std::uint64_t seed, std::size_t first,
                                                  std::size_t count, std::size_t n_segments) const {
  std::vector<TaskSample> out;
  out.reserve(count);
  const TaskParams params{kind_, n_segments, payload_};
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_->generate(mix_seed(seed, first + i), params));
  return out;
}

namespace {

RolloutPlan classification_plan(const std::vector<TaskSample>& samples, std::size_t n_segments) {
  RolloutPlan plan;
  const std::size_t batch = samples.size();
  for (std::size_t t = 0; t < n_segments; ++t) {
    SegmentBatch seg;
    seg.batch = batch;
    for (const auto& s : samples) {
      auto ids = encoder_segment_ids(s.segment(t));
      seg.len = ids.size();
      seg.ids.insert(seg.ids.end(), ids.begin(), ids.end());
    }
    plan.segments.push_back(std::move(seg));
  }
  SegmentTargets targets;
  for (const auto& s : samples) targets.targets.push_back(s.label);
  plan.loss_positions = {n_segments - 1};
  plan.targets = {std::move(targets)};
  return plan;
}

}  // namespace

RolloutPlan MemoryTaskSource::make_batch(std::uint64_t seed, std::size_t batch,
                                         std::size_t n_segments) const {
  return classification_plan(samples(seed, 0, batch, n_segments), n_segments);
}

RolloutPlan MemoryTaskSource::make_eval_batch(std::uint64_t eval_seed, std::size_t first,
                                              std::size_t count, std::size_t n_segments) const {
  return classification_plan(samples(eval_seed, first, count, n_segments), n_segments);
}

RolloutPlan lm_plan(std::span<const LmSample* const> samples) {
  if (samples.empty()) throw std::invalid_argument("lm_plan: no samples");
  const std::size_t n = samples.front()->n_segments();
  const std::size_t len = samples.front()->segment_len;
  for (const auto* s : samples) {
    if (s->n_segments() != n || s->segment_len != len) {
      throw std::invalid_argument("lm_plan: samples differ in segment count or length");
    }
  }
  RolloutPlan plan;
  for (std::size_t t = 0; t < n; ++t) {
    SegmentBatch seg;
    seg.batch = samples.size();
    seg.len = len + 1;
    for (const auto* s : samples) {
      auto ids = decoder_segment_ids(s->segment(t));
      seg.ids.insert(seg.ids.end(), ids.begin(), ids.end());
    }
    plan.segments.push_back(std::move(seg));
  }
  SegmentTargets targets;
  for (const auto* s : samples) {
    auto last = s->segment(n - 1);
    targets.targets.insert(targets.targets.end(), last.begin(), last.end());
    targets.targets.push_back(kPadId);
    targets.mask.insert(targets.mask.end(), len, 1);
    targets.mask.push_back(0);
  }
  plan.loss_positions = {n - 1};
  plan.targets = {std::move(targets)};
  return plan;
}

namespace {

void group_by_history(const LmCorpus& corpus, std::vector<std::vector<const LmSample*>>& groups) {
  for (const auto& s : corpus.samples) {
    if (groups.size() <= s.n_history) groups.resize(s.n_history + 1);
    groups[s.n_history].push_back(&s);
  }
}

const std::vector<const LmSample*>& group_at(const std::vector<std::vector<const LmSample*>>& groups,
                                             std::size_t n_segments, const char* which) {
  if (n_segments == 0 || n_segments > groups.size() || groups[n_segments - 1].empty()) {
    throw TaskError(std::string(which) + " LM corpus has no samples with " + std::to_string(n_segments) +
                    " segments");
  }
  return groups[n_segments - 1];
}

}  // namespace

LmTaskSource::LmTaskSource(LmCorpus corpus, std::optional<LmCorpus> held_out)
    : corpus_(std::move(corpus)), held_out_(std::move(held_out)) {
  group_by_history(corpus_, by_history_);
  group_by_history(held_out_ ? *held_out_ : corpus_, eval_by_history_);
}

const std::vector<const LmSample*>& LmTaskSource::with_segments(std::size_t n_segments) const {
  return group_at(by_history_, n_segments, "training");
}

const std::vector<const LmSample*>& LmTaskSource::eval_with_segments(std::size_t n_segments) const {
  return group_at(eval_by_history_, n_segments, held_out_ ? "held-out" : "training");
}

RolloutPlan LmTaskSource::make_batch(std::uint64_t seed, std::size_t batch,
                                     std::size_t n_segments) const {
  const auto& pool = with_segments(n_segments);
  std::vector<const LmSample*> picked;
  for (std::size_t i = 0; i < batch; ++i) picked.push_back(pool[mix_seed(seed, i) % pool.size()]);
  return lm_plan(picked);
}

RolloutPlan LmTaskSource::make_eval_batch(std::uint64_t, std::size_t first, std::size_t count,
                                          std::size_t n_segments) const {
  const auto& pool = eval_with_segments(n_segments);
  std::vector<const LmSample*> picked;
  for (std::size_t i = 0; i < count; ++i) picked.push_back(pool[(first + i) % pool.size()]);
  return lm_plan(picked);
}

std::string to_string(TrainMode mode) { return mode == TrainMode::naive ? "naive" : "curriculum"; }
std::string to_string(Mixing mixing) { return mixing == Mixing::fixed ? "fixed" : "mix_all_previous"; }

TrainMode parse_train_mode(const std::string& text) {
  if (text == "curriculum") return TrainMode::curriculum;
  if (text == "naive") return TrainMode::naive;
  throw std::invalid_argument("unknown train mode '" + text + "' (curriculum|naive)");
}

Mixing parse_mixing(const std::string& text) {
  if (text == "fixed") return Mixing::fixed;
  if (text == "mix_all_previous" || text == "mix-all-previous") return Mixing::mix_all_previous;
  throw std::invalid_argument("unknown mixing '" + text + "' (fixed|mix_all_previous)");
}

void CurriculumConfig::validate() const {
  if (stages.empty()) throw std::invalid_argument("curriculum.stages: empty");
  if (stages.front() == 0) throw std::invalid_argument("curriculum.stages: segment counts must be >= 1");
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (stages[i] <= stages[i - 1]) throw std::invalid_argument("curriculum.stages: not strictly increasing");
  }
  if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("curriculum.threshold: must be in (0, 1]");
  if (patience == 0) throw std::invalid_argument("curriculum.patience: must be >= 1");
  if (stage_steps == 0) throw std::invalid_argument("curriculum.stage_steps: must be >= 1");
}

bool CurriculumTracker::observe(double metric) {
  streak_ = metric >= cfg_.threshold ? streak_ + 1 : 0;
  return converged();
}

std::size_t sample_segments(Mixing mixing, std::size_t stage_max, std::mt19937_64& rng) {
  if (mixing == Mixing::fixed || stage_max <= 1) return stage_max;
  return 1 + static_cast<std::size_t>(rng() % stage_max);
}

std::string MetricRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["stage"] = stage;
  j["n_segments"] = n_segments;
  j["split"] = split;
  j["loss"] = loss;
  j["accuracy"] = accuracy;
  j["lr"] = lr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

namespace {

// Correct predictions among the scored rows of one head output.
std::size_t count_correct(const Tensor<float>& logits, const SegmentTargets& targets, std::size_t& scored) {
  const std::size_t c = logits.cols();
  auto d = logits.data();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (!targets.mask.empty() && !targets.mask[r]) continue;
    const float* row = d.data() + r * c;
    const auto pred = static_cast<int>(std::max_element(row, row + c) - row);
    correct += pred == targets.targets[r] ? 1 : 0;
    ++scored;
  }
  return correct;
}

}  // namespace

EvalResult evaluate(const Model<float>& model, const TaskSource& source, std::size_t n_segments,
                    std::size_t n_samples, std::uint64_t eval_seed, std::size_t batch) {
  if (n_samples == 0) throw std::invalid_argument("evaluate: empty evaluation set");
  if (batch == 0) batch = n_samples;
  NoGradScope<float> no_grad;
  EvalResult result;
  double loss_sum = 0, loss_weight = 0;
  std::size_t correct = 0, scored = 0;
  for (std::size_t first = 0; first < n_samples; first += batch) {
    const std::size_t count = std::min(batch, n_samples - first);
    auto plan = source.make_eval_batch(eval_seed, first, count, n_segments);
    auto out = recurrent_rollout(model, plan);
    const auto& targets = plan.targets.front();
    const auto& logits = out.outputs[plan.loss_positions.front()];
    std::size_t batch_scored = 0;
    correct += count_correct(logits, targets, batch_scored);
    scored += batch_scored;
    loss_sum += static_cast<double>(out.loss.item()) * static_cast<double>(batch_scored);
    loss_weight += static_cast<double>(batch_scored);
  }
  result.samples = n_samples;
  result.accuracy = static_cast<double>(correct) / static_cast<double>(scored);
  result.loss = loss_sum / loss_weight;
  result.perplexity = std::exp(result.loss);
  return result;
}

Trainer::Trainer(Model<float>& model, const TaskSource& source, TrainerConfig cfg)
    : model_(model), source_(source), cfg_(std::move(cfg)), rng_(mix_seed(cfg_.seed, 0x5eed)) {
  cfg_.curriculum.validate();
  if (cfg_.batch_size == 0) throw std::invalid_argument("trainer.batch_size: must be >= 1");
  if (cfg_.eval_every == 0) throw std::invalid_argument("trainer.eval_every: must be >= 1");
  if (cfg_.eval_samples == 0) throw std::invalid_argument("trainer.eval_samples: must be >= 1");
  if (cfg_.curriculum.stages.back() > source_.max_segments()) {
    throw TaskError("dataset cannot produce " + std::to_string(cfg_.curriculum.stages.back()) + " segments");
  }
  opt_ = AdamW<float>(model_.parameters(), cfg_.adam);
}

std::pair<double, double> Trainer::train_step(std::uint64_t batch_seed, std::size_t n_segments, double lr) {
  auto plan = source_.make_batch(batch_seed, cfg_.batch_size, n_segments);
  if (cfg_.bptt_unroll && *cfg_.bptt_unroll < n_segments) plan.bptt_unroll = cfg_.bptt_unroll;
  Tape<float> tape;
  double loss = 0, accuracy = 0;
  {
    TapeScope<float> scope(tape);
    ForwardContext<float> ctx;
    ctx.training = true;
    ctx.rng = &rng_;
    auto out = recurrent_rollout(model_, plan, ctx);
    tape.backward(out.loss);
    loss = static_cast<double>(out.loss.item());
    std::size_t scored = 0;
    const auto correct = count_correct(out.outputs[plan.loss_positions.front()], plan.targets.front(), scored);
    accuracy = static_cast<double>(correct) / static_cast<double>(scored);
  }
  const auto& params = opt_.params();
  clip_grad_norm(params, cfg_.clip_norm);
  opt_.step(lr);
  zero_grads(params);
  return {loss, accuracy};
}

RunArtifacts Trainer::run() {
  RunArtifacts art;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };

  std::ofstream metrics_file;
  if (!cfg_.output_dir.empty()) {
    std::filesystem::create_directories(cfg_.output_dir);
    metrics_file.open(cfg_.output_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_file) throw std::runtime_error("cannot write " + (cfg_.output_dir / "metrics.jsonl").string());
  }
  auto emit = [&](MetricRecord rec) {
    rec.wall_ms = elapsed_ms();
    if (metrics_file) metrics_file << rec.to_json() << '\n' << std::flush;
    if (on_metric) on_metric(rec);
    art.metrics.push_back(std::move(rec));
  };

  const bool naive = cfg_.mode == TrainMode::naive;
  const auto& cur = cfg_.curriculum;
  std::vector<std::size_t> stages = naive ? std::vector<std::size_t>{cur.stages.back()} : cur.stages;
  const std::size_t naive_budget = cfg_.naive_steps ? cfg_.naive_steps : cur.stage_steps * cur.stages.size();
  const std::uint64_t batch_stream = mix_seed(cfg_.seed, 0xba7c);

  std::size_t global_step = 0;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const std::size_t stage_max = stages[si];
    const std::size_t budget = naive ? naive_budget : cur.stage_steps;
    if (si > 0 && cfg_.reset_optimizer_each_stage) opt_.reset();
    if (si > 0 && !cfg_.train_initial_memory && model_.memory.defined()) {
      model_.memory.set_requires_grad(false);
    }
    LrSchedule sched = cfg_.lr;
    sched.total = budget;
    CurriculumTracker tracker(cur);
    StageResult sr;
    sr.stage = si;
    sr.max_segments = stage_max;
    for (std::size_t s = 0; s < budget; ++s) {
      const double lr = lr_at(s, sched);
      const std::size_t n = naive ? stage_max : sample_segments(cur.mixing, stage_max, rng_);
      auto [loss, acc] = train_step(mix_seed(batch_stream, global_step), n, lr);
      ++global_step;
      ++sr.steps;
      emit({global_step, si, n, "train", loss, acc, lr, 0});
      if (sr.steps % cfg_.eval_every == 0 || s + 1 == budget) {
        auto ev = evaluate(model_, source_, stage_max, cfg_.eval_samples, cfg_.eval_seed, cfg_.eval_batch);
        emit({global_step, si, stage_max, "val", ev.loss, ev.accuracy, lr, 0});
        sr.final_metric = ev.accuracy;
        const bool done = tracker.observe(ev.accuracy);
        if (done && !naive) break;
      }
    }
    sr.converged = tracker.converged();
    art.stages.push_back(sr);
    if (!cfg_.output_dir.empty()) {
      const auto path = cfg_.output_dir / ("stage" + std::to_string(si) + ".ckpt");
      save_checkpoint(path, make_checkpoint(model_, &opt_, si, rng_state_string(rng_)));
      art.checkpoints.push_back(path);
    }
    if (on_stage_end) on_stage_end(sr);
  }
  art.total_steps = global_step;
  if (!cfg_.train_initial_memory && model_.memory.defined()) model_.memory.set_requires_grad(true);
  return art;
}

}  // namespace rmt
