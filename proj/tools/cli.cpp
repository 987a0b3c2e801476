#include "rmt/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "rmt/analysis.hpp"
#include "rmt/checkpoint.hpp"
#include "rmt/cost_model.hpp"
#include "rmt/run_config.hpp"

namespace rmt {

namespace {

namespace fs = std::filesystem;

// Writes to `path` when given, otherwise to `fallback`.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : out_(&fallback) {
    if (!path.empty()) {
      if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
      file_.open(path);
      if (!file_) throw std::runtime_error("cannot write " + path);
      out_ = &file_;
    }
  }
  std::ostream& stream() { return *out_; }

 private:
  std::ofstream file_;
  std::ostream* out_;
};

struct Loaded {
  RunConfig cfg;
  std::unique_ptr<TaskContext> ctx;
  Checkpoint ckpt;
};

Loaded load_run(const std::string& ckpt_path, const std::string& config_path) {
  const fs::path cfg_path = config_path.empty() ? run_config_for(ckpt_path) : fs::path(config_path);
  if (!fs::exists(cfg_path)) throw ConfigError("config", "no run config at " + cfg_path.string());
  if (!fs::exists(ckpt_path)) throw ConfigError("ckpt", "no checkpoint at " + ckpt_path);
  Loaded l{load_run_config(cfg_path), nullptr, {}};
  l.ctx = std::make_unique<TaskContext>(l.cfg);
  const auto expected = l.ctx->model_config();
  l.ckpt = load_checkpoint(ckpt_path, &expected);
  return l;
}

void cmd_gen_data(const std::string& config, const std::string& task, std::size_t segments, std::size_t count,
                  const std::string& corpus, std::uint64_t seed, std::size_t payload, const std::string& out_path,
                  std::ostream& out) {
  RunConfig cfg;
  if (!config.empty()) cfg = load_run_config(config);
  if (!task.empty()) cfg.task.type = parse_task_type(task);
  if (segments > 0) cfg.task.n_segments = segments;
  if (!corpus.empty()) cfg.task.corpus = corpus;
  if (seed > 0) cfg.task.seed = seed;
  if (payload > 0) cfg.task.payload = payload;
  if (cfg.task.type == TaskType::toy_lm) {
    cfg.model.mode = ModelMode::decoder;
    if (config.empty()) cfg.trainer.curriculum.stages = {1};
    if (cfg.task.lm_history + 1 < cfg.task.n_segments) cfg.task.lm_history = cfg.task.n_segments - 1;
  }
  TaskContext ctx(cfg);
  fs::path path(out_path);
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  ctx.vocab().save(path.string() + ".vocab");
  if (const auto* src = ctx.memory_source()) {
    auto samples = src->samples(cfg.task.seed, 0, count, cfg.task.n_segments);
    write_shard(path, samples);
    out << "wrote " << samples.size() << " " << to_string(cfg.task.type) << " samples of "
        << cfg.task.n_segments << " segments to " << path.string() << "\n";
    return;
  }
  const auto& t = cfg.task;
  auto data = gen_toy_lm_documents(t.seed, t.lm_docs + t.lm_eval_docs, t.lm_doc_len, t.lm_alphabet, t.lm_families,
                                   t.lm_fidelity);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& doc : data.docs) {
    for (std::size_t i = 0; i < doc.size(); ++i) f << (i ? " " : "") << data.vocab.word(doc[i]);
    f << '\n';
  }
  out << "wrote " << data.docs.size() << " toy LM documents to " << path.string() << "\n";
}

void cmd_train(const std::string& config, const std::string& out_dir, std::ostream& out) {
  RunConfig cfg = load_run_config(config);
  if (!out_dir.empty()) cfg.output_dir = cfg.trainer.output_dir = out_dir;
  TaskContext ctx(cfg);
  RunConfig resolved = cfg;
  resolved.model = ctx.model_config();
  fs::create_directories(resolved.output_dir);
  {
    std::ofstream f(resolved.output_dir / "run.cfg");
    write_run_config(f, resolved);
  }
  ctx.vocab().save(resolved.output_dir / "vocab.txt");
  Model<float> model(ctx.model_config(), cfg.trainer.seed);
  Trainer trainer(model, ctx.source(), cfg.trainer);
  trainer.on_stage_end = [&](const StageResult& r) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["max_segments"] = r.max_segments;
    j["steps"] = r.steps;
    j["converged"] = r.converged;
    j["final_metric"] = r.final_metric;
    out << j.dump() << "\n" << std::flush;
  };
  auto art = trainer.run();
  out << "trained " << art.total_steps << " steps; outputs in " << resolved.output_dir.string() << "\n";
}

void cmd_eval(const std::string& ckpt, const std::string& config, std::size_t segments, std::size_t samples,
              std::uint64_t seed, std::ostream& out) {
  auto l = load_run(ckpt, config);
  const std::size_t n = segments > 0 ? segments : l.cfg.task.n_segments;
  const std::size_t count = samples > 0 ? samples : l.cfg.trainer.eval_samples;
  const std::uint64_t eval_seed = seed > 0 ? seed : l.cfg.trainer.eval_seed;
  auto r = evaluate(l.ckpt.model, l.ctx->source(), n, count, eval_seed, l.cfg.trainer.eval_batch);
  nlohmann::ordered_json j;
  j["checkpoint"] = ckpt;
  j["n_segments"] = n;
  j["accuracy"] = r.accuracy;
  j["loss"] = r.loss;
  j["perplexity"] = r.perplexity;
  j["samples"] = r.samples;
  out << j.dump() << "\n";
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& flag) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
      x = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || item.front() == '-') {
      throw std::invalid_argument(flag + ": expected comma-separated counts, got '" + text + "'");
    }
    v.push_back(static_cast<std::size_t>(x));
  }
  if (v.empty()) throw std::invalid_argument(flag + ": empty list");
  return v;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recurrent memory transformer toolkit", "rmt"};
  app.require_subcommand(1);

  std::string config, task, corpus, out_path, ckpt, counts, archs, lengths, mode, bench_mode = "rmt", history = "rmt";
  std::size_t segments = 0, count = 100, payload = 0, samples = 0, segment_len = 512, mem = 0, reps = 5;
  std::size_t layers = 2, d_model = 64, heads = 2, window = 64, limit_mb = 0;
  std::uint64_t seed = 0;
  bool no_embed = false;

  auto* gen = app.add_subcommand("gen-data", "Write a dataset shard");
  gen->add_option("--config", config, "Run config supplying task settings");
  gen->add_option("--task", task, "memorize|detect_memorize|reasoning|toy_lm");
  gen->add_option("--segments", segments, "Segments per sample");
  gen->add_option("--count", count, "Number of samples");
  gen->add_option("--corpus", corpus, "Noise corpus text file");
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--payload", payload, "Tokens per segment");
  gen->add_option("--out", out_path, "Output shard path")->required();

  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", config, "Run config")->required();
  train->add_option("--out", out_path, "Output directory (overrides the config)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--config", config, "Run config (default: run.cfg next to the checkpoint)");
  eval->add_option("--segments", segments, "Segments per sample");
  eval->add_option("--samples", samples, "Evaluation samples");
  eval->add_option("--seed", seed, "Evaluation seed");

  auto* extra = app.add_subcommand("extrapolate", "Accuracy against segment count");
  extra->add_option("--ckpt", ckpt, "Checkpoint")->required();
  extra->add_option("--config", config, "Run config (default: run.cfg next to the checkpoint)");
  extra->add_option("--counts", counts, "Comma-separated segment counts")->required();
  extra->add_option("--samples", samples, "Samples per count (default 1000)");
  extra->add_option("--seed", seed, "Evaluation seed");
  extra->add_option("--out", out_path, "CSV output (default stdout)");

  auto* flops = app.add_subcommand("flops", "Analytical FLOP scaling table");
  flops->add_option("--archs", archs, "Arch spec file")->required();
  flops->add_option("--lengths", lengths, "Comma-separated sequence lengths")->required();
  flops->add_option("--segment", segment_len, "Recurrent segment length");
  flops->add_option("--mem", mem, "Memory tokens");
  flops->add_option("--mode", mode, "encoder|decoder (default decoder)");
  flops->add_flag("--no-embed", no_embed, "Leave out embedding FLOPs");
  flops->add_option("--out", out_path, "CSV output (default stdout)");

  auto* bench = app.add_subcommand("bench", "Time and memory of forward passes");
  bench->add_option("--config", config, "Run config supplying the model");
  bench->add_option("--layers", layers, "Layers");
  bench->add_option("--d-model", d_model, "Hidden size");
  bench->add_option("--heads", heads, "Attention heads");
  bench->add_option("--window", window, "Segment window");
  bench->add_option("--mem", mem, "Memory tokens");
  bench->add_option("--mode", mode, "encoder|decoder (default decoder)");
  bench->add_option("--lengths", lengths, "Comma-separated sequence lengths")->required();
  bench->add_option("--bench-mode", bench_mode, "full|rmt");
  bench->add_option("--reps", reps, "Repetitions per length");
  bench->add_option("--limit-mb", limit_mb, "Allocation limit in MiB (0 = none)");
  bench->add_option("--out", out_path, "CSV output (default stdout)");

  auto* attn = app.add_subcommand("attn-dump", "Write attention maps for one sample");
  attn->add_option("--ckpt", ckpt, "Checkpoint")->required();
  attn->add_option("--config", config, "Run config (default: run.cfg next to the checkpoint)");
  attn->add_option("--segments", segments, "Segments in the sample");
  attn->add_option("--seed", seed, "Sample seed");
  attn->add_option("--out", out_path, "Output directory")->required();

  auto* pos = app.add_subcommand("pos-loss", "LM loss by position in the target segment");
  pos->add_option("--ckpt", ckpt, "Decoder checkpoint")->required();
  pos->add_option("--config", config, "Run config (default: run.cfg next to the checkpoint)");
  pos->add_option("--mode", history, "baseline|rmt");
  pos->add_option("--segments", segments, "Segments per sample in rmt mode");
  pos->add_option("--samples", samples, "Evaluation samples");
  pos->add_option("--out", out_path, "CSV output (default stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitInvalid;
  }

  try {
    if (gen->parsed()) {
      cmd_gen_data(config, task, segments, count, corpus, seed, payload, out_path, out);
    } else if (train->parsed()) {
      cmd_train(config, out_path, out);
    } else if (eval->parsed()) {
      cmd_eval(ckpt, config, segments, samples, seed, out);
    } else if (extra->parsed()) {
      auto l = load_run(ckpt, config);
      const auto list = parse_sizes(counts, "--counts");
      auto rows = extrapolation_sweep(l.ckpt.model, l.ctx->source(), list, samples > 0 ? samples : 1000,
                                      seed > 0 ? seed : l.cfg.trainer.eval_seed, l.cfg.trainer.eval_batch);
      Sink sink(out_path, out);
      write_extrapolation_csv(sink.stream(), rows);
    } else if (flops->parsed()) {
      const auto specs = load_arch_specs(archs);
      const auto list = parse_sizes(lengths, "--lengths");
      ScalingOptions opt;
      opt.segment_len = segment_len;
      opt.mem_tokens = mem;
      opt.mode = mode.empty() ? ModelMode::decoder : parse_mode(mode);
      opt.flops.include_embed = !no_embed;
      for (auto L : list) {
        if (L < segment_len) throw std::invalid_argument("--lengths: " + std::to_string(L) + " is shorter than --segment");
      }
      auto rows = scaling_table(specs, list, opt);
      Sink sink(out_path, out);
      write_scaling_csv(sink.stream(), rows);
    } else if (bench->parsed()) {
      ModelConfig mc;
      if (!config.empty()) {
        auto rc = load_run_config(config);
        TaskContext ctx(rc);
        mc = ctx.model_config();
      } else {
        mc.n_layers = layers;
        mc.d_model = d_model;
        mc.n_heads = heads;
        mc.segment_window = window;
        mc.memory_tokens = mem;
        mc.mode = mode.empty() ? ModelMode::decoder : parse_mode(mode);
        mc.vocab_size = 256;
      }
      mc.dropout = 0;
      BenchConfig bc;
      bc.lengths = parse_sizes(lengths, "--lengths");
      bc.mode = parse_cost_mode(bench_mode);
      bc.reps = reps;
      bc.memory_limit_bytes = static_cast<std::int64_t>(limit_mb) << 20;
      auto rows = bench_empirical(mc, bc);
      Sink sink(out_path, out);
      write_bench_csv(sink.stream(), rows);
    } else if (attn->parsed()) {
      auto l = load_run(ckpt, config);
      const std::size_t n = segments > 0 ? segments : l.cfg.task.n_segments;
      auto plan = l.ctx->source().make_eval_batch(seed > 0 ? seed : l.cfg.trainer.eval_seed, 0, 1, n);
      auto dump = attention_dump(l.ckpt.model, plan, out_path);
      out << "wrote " << dump.grids.size() << " attention grids for " << n << " segments to " << out_path << "\n";
    } else if (pos->parsed()) {
      auto l = load_run(ckpt, config);
      const auto* lm = l.ctx->lm_source();
      if (lm == nullptr) throw ConfigError("task.type", "pos-loss needs an LM checkpoint");
      const auto hm = parse_history_mode(history);
      const std::size_t n = segments > 0 ? segments : l.cfg.task.n_segments;
      auto curve = per_position_loss(l.ckpt.model, *lm, n, samples > 0 ? samples : l.cfg.trainer.eval_samples, hm,
                                     l.cfg.trainer.eval_batch);
      Sink sink(out_path, out);
      write_position_loss_csv(sink.stream(), curve);
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace rmt
