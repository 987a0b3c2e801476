#include "rmt/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace rmt {

std::string to_string(TaskType type) {
  switch (type) {
    case TaskType::memorize: return "memorize";
    case TaskType::detect_memorize: return "detect_memorize";
    case TaskType::reasoning: return "reasoning";
    case TaskType::toy_lm: return "toy_lm";
  }
  return "?";
}

TaskType parse_task_type(const std::string& text) {
  for (auto t : {TaskType::memorize, TaskType::detect_memorize, TaskType::reasoning, TaskType::toy_lm}) {
    if (text == to_string(t)) return t;
  }
  throw std::invalid_argument("unknown task type '" + text +
                              "' (memorize|detect_memorize|reasoning|toy_lm)");
}

namespace {

std::uint64_t parse_count(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty()) throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(key, "expected a number, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(' '), b = item.find_last_not_of(' ');
    if (a == std::string::npos) throw ConfigError(key, "empty list entry in '" + text + "'");
    out.push_back(parse_count(key, item.substr(a, b - a + 1)));
  }
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

template <class Parse>
auto wrap(const std::string& key, Parse&& parse) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto count = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_count(k, v));
      });
    };
    auto real = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_real(k, v); });
    };
    auto flag = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_bool(k, v); });
    };
    // [model]
    t["model.mode"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.model.mode = wrap(k, [&] { return parse_mode(v); });
    };
    t["model.n_layers"] = count([](RunConfig& c) -> auto& { return c.model.n_layers; });
    t["model.d_model"] = count([](RunConfig& c) -> auto& { return c.model.d_model; });
    t["model.n_heads"] = count([](RunConfig& c) -> auto& { return c.model.n_heads; });
    t["model.d_ffn"] = count([](RunConfig& c) -> auto& { return c.model.d_ffn; });
    t["model.vocab"] = count([](RunConfig& c) -> auto& { return c.model.vocab_size; });
    t["model.segment_window"] = count([](RunConfig& c) -> auto& { return c.model.segment_window; });
    t["model.memory_tokens"] = count([](RunConfig& c) -> auto& { return c.model.memory_tokens; });
    t["model.n_classes"] = count([](RunConfig& c) -> auto& { return c.model.n_classes; });
    t["model.dropout"] = real([](RunConfig& c) -> auto& { return c.model.dropout; });
    t["model.memory_positions"] = flag([](RunConfig& c) -> auto& { return c.model.memory_positions; });
    // [task]
    t["task.type"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.task.type = wrap(k, [&] { return parse_task_type(v); });
    };
    t["task.n_segments"] = count([](RunConfig& c) -> auto& { return c.task.n_segments; });
    t["task.corpus"] = [](RunConfig& c, const std::string&, const std::string& v) { c.task.corpus = v; };
    t["task.seed"] = count([](RunConfig& c) -> auto& { return c.task.seed; });
    t["task.payload"] = count([](RunConfig& c) -> auto& { return c.task.payload; });
    t["task.lm_docs"] = count([](RunConfig& c) -> auto& { return c.task.lm_docs; });
    t["task.lm_eval_docs"] = count([](RunConfig& c) -> auto& { return c.task.lm_eval_docs; });
    t["task.lm_doc_len"] = count([](RunConfig& c) -> auto& { return c.task.lm_doc_len; });
    t["task.lm_alphabet"] = count([](RunConfig& c) -> auto& { return c.task.lm_alphabet; });
    t["task.lm_families"] = count([](RunConfig& c) -> auto& { return c.task.lm_families; });
    t["task.lm_fidelity"] = real([](RunConfig& c) -> auto& { return c.task.lm_fidelity; });
    t["task.lm_history"] = count([](RunConfig& c) -> auto& { return c.task.lm_history; });
    // [trainer]
    t["trainer.mode"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.trainer.mode = wrap(k, [&] { return parse_train_mode(v); });
    };
    t["trainer.stages"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.trainer.curriculum.stages = parse_list(k, v);
    };
    t["trainer.threshold"] = real([](RunConfig& c) -> auto& { return c.trainer.curriculum.threshold; });
    t["trainer.patience"] = count([](RunConfig& c) -> auto& { return c.trainer.curriculum.patience; });
    t["trainer.mixing"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.trainer.curriculum.mixing = wrap(k, [&] { return parse_mixing(v); });
    };
    t["trainer.stage_steps"] = count([](RunConfig& c) -> auto& { return c.trainer.curriculum.stage_steps; });
    t["trainer.naive_steps"] = count([](RunConfig& c) -> auto& { return c.trainer.naive_steps; });
    t["trainer.batch_size"] = count([](RunConfig& c) -> auto& { return c.trainer.batch_size; });
    t["trainer.lr"] = real([](RunConfig& c) -> auto& { return c.trainer.lr.peak; });
    t["trainer.warmup"] = count([](RunConfig& c) -> auto& { return c.trainer.lr.warmup; });
    t["trainer.beta1"] = real([](RunConfig& c) -> auto& { return c.trainer.adam.beta1; });
    t["trainer.beta2"] = real([](RunConfig& c) -> auto& { return c.trainer.adam.beta2; });
    t["trainer.eps"] = real([](RunConfig& c) -> auto& { return c.trainer.adam.eps; });
    t["trainer.weight_decay"] = real([](RunConfig& c) -> auto& { return c.trainer.adam.weight_decay; });
    t["trainer.clip_norm"] = real([](RunConfig& c) -> auto& { return c.trainer.clip_norm; });
    t["trainer.bptt_unroll"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const auto n = parse_count(k, v);
      c.trainer.bptt_unroll = n == 0 ? std::nullopt : std::optional<std::size_t>(n);
    };
    t["trainer.eval_every"] = count([](RunConfig& c) -> auto& { return c.trainer.eval_every; });
    t["trainer.eval_samples"] = count([](RunConfig& c) -> auto& { return c.trainer.eval_samples; });
    t["trainer.eval_batch"] = count([](RunConfig& c) -> auto& { return c.trainer.eval_batch; });
    t["trainer.seed"] = count([](RunConfig& c) -> auto& { return c.trainer.seed; });
    t["trainer.eval_seed"] = count([](RunConfig& c) -> auto& { return c.trainer.eval_seed; });
    t["trainer.reset_optimizer"] = flag([](RunConfig& c) -> auto& { return c.trainer.reset_optimizer_each_stage; });
    t["trainer.train_initial_memory"] = flag([](RunConfig& c) -> auto& { return c.trainer.train_initial_memory; });
    // [output]
    t["output.dir"] = [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; };
    return t;
  }();
  return table;
}

bool is_lm(TaskType t) { return t == TaskType::toy_lm; }

}  // namespace

void RunConfig::validate() const {
  ModelConfig probe = model;
  if (probe.vocab_size == 0) probe.vocab_size = 8;
  try {
    probe.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", e.what());
  }
  if (is_lm(task.type) && model.mode != ModelMode::decoder) {
    throw ConfigError("model.mode", "task " + to_string(task.type) + " needs a decoder");
  }
  if (!is_lm(task.type) && model.mode != ModelMode::encoder) {
    throw ConfigError("model.mode", "task " + to_string(task.type) + " needs an encoder");
  }
  if (task.n_segments == 0) throw ConfigError("task.n_segments", "must be at least 1");
  const std::size_t capacity = model.segment_window > model.memory_slots() + model.special_tokens()
                                   ? payload_capacity(model.segment_window, model.memory_tokens, model.mode)
                                   : 0;
  if (capacity == 0) throw ConfigError("model.segment_window", "leaves no room for segment tokens");
  if (task.payload > capacity) {
    throw ConfigError("task.payload", std::to_string(task.payload) + " exceeds the window capacity of " +
                                          std::to_string(capacity));
  }
  try {
    trainer.curriculum.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("trainer.stages", e.what());
  }
  if (trainer.batch_size == 0) throw ConfigError("trainer.batch_size", "must be at least 1");
  if (trainer.eval_every == 0) throw ConfigError("trainer.eval_every", "must be at least 1");
  if (trainer.eval_samples == 0) throw ConfigError("trainer.eval_samples", "must be at least 1");
  if (trainer.eval_batch == 0) throw ConfigError("trainer.eval_batch", "must be at least 1");
  if (!(trainer.lr.peak > 0)) throw ConfigError("trainer.lr", "must be positive");
  if (!(trainer.clip_norm > 0)) throw ConfigError("trainer.clip_norm", "must be positive");
  if (trainer.adam.beta1 < 0 || trainer.adam.beta1 >= 1) throw ConfigError("trainer.beta1", "must lie in [0, 1)");
  if (trainer.adam.beta2 < 0 || trainer.adam.beta2 >= 1) throw ConfigError("trainer.beta2", "must lie in [0, 1)");
  if (!(trainer.adam.eps > 0)) throw ConfigError("trainer.eps", "must be positive");
  if (trainer.adam.weight_decay < 0) throw ConfigError("trainer.weight_decay", "must be non-negative");
  if (is_lm(task.type)) {
    const std::size_t max_stage = trainer.curriculum.stages.back();
    if (max_stage > task.lm_history + 1) {
      throw ConfigError("trainer.stages", "stage of " + std::to_string(max_stage) +
                                              " segments needs task.lm_history >= " + std::to_string(max_stage - 1));
    }
    if (task.n_segments > task.lm_history + 1) {
      throw ConfigError("task.n_segments", "exceeds task.lm_history + 1");
    }
    if (task.lm_alphabet < 2) throw ConfigError("task.lm_alphabet", "must be at least 2");
    if (task.lm_families == 0) throw ConfigError("task.lm_families", "must be at least 1");
    if (task.lm_docs == 0) throw ConfigError("task.lm_docs", "must be at least 1");
    if (task.lm_eval_docs == 0) throw ConfigError("task.lm_eval_docs", "must be at least 1");
    if (task.lm_fidelity < 0 || task.lm_fidelity > 1) throw ConfigError("task.lm_fidelity", "must lie in [0, 1]");
    const std::size_t seg = task.payload == 0 ? capacity : task.payload;
    if (task.lm_doc_len < seg * (task.lm_history + 1)) {
      throw ConfigError("task.lm_doc_len", "shorter than lm_history + 1 segments of " + std::to_string(seg) + " tokens");
    }
  }
}

RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", e.message() + " at line " + std::to_string(e.line()));
  }
  RunConfig cfg;
  const auto& table = setters();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(section, "key outside a section");
    if (section != "model" && section != "task" && section != "trainer" && section != "output") {
      throw ConfigError(section, "unknown section");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      auto it = table.find(full);
      if (it == table.end()) throw ConfigError(full, "unknown key");
      it->second(cfg, full, value.get_value<std::string>());
    }
  }
  if (!cfg.task.corpus.empty() && cfg.task.corpus.is_relative() && !base_dir.empty()) {
    const auto candidate = base_dir / cfg.task.corpus;
    if (std::filesystem::exists(candidate)) cfg.task.corpus = candidate;
  }
  if (const char* env = std::getenv("RMT_OUT"); env != nullptr && *env != '\0') cfg.output_dir = env;
  cfg.trainer.output_dir = cfg.output_dir;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  return parse_run_config(in, path.parent_path());
}

void write_run_config(std::ostream& out, const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.task;
  const auto& r = c.trainer;
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << std::setprecision(17);
  out << "[model]\nmode = " << to_string(m.mode) << "\nn_layers = " << m.n_layers << "\nd_model = " << m.d_model
      << "\nn_heads = " << m.n_heads << "\nd_ffn = " << m.d_ffn << "\nvocab = " << m.vocab_size
      << "\nsegment_window = " << m.segment_window << "\nmemory_tokens = " << m.memory_tokens
      << "\nn_classes = " << m.n_classes << "\ndropout = " << m.dropout
      << "\nmemory_positions = " << b(m.memory_positions) << "\n\n";
  out << "[task]\ntype = " << to_string(t.type) << "\nn_segments = " << t.n_segments
      << "\ncorpus = " << std::filesystem::absolute(t.corpus).string() << "\nseed = " << t.seed
      << "\npayload = " << t.payload << "\nlm_docs = " << t.lm_docs << "\nlm_eval_docs = " << t.lm_eval_docs
      << "\nlm_doc_len = " << t.lm_doc_len << "\nlm_alphabet = " << t.lm_alphabet
      << "\nlm_families = " << t.lm_families << "\nlm_fidelity = " << t.lm_fidelity
      << "\nlm_history = " << t.lm_history << "\n\n";
  out << "[trainer]\nmode = " << to_string(r.mode) << "\nstages = ";
  for (std::size_t i = 0; i < r.curriculum.stages.size(); ++i) out << (i ? "," : "") << r.curriculum.stages[i];
  out << "\nthreshold = " << r.curriculum.threshold << "\npatience = " << r.curriculum.patience
      << "\nmixing = " << to_string(r.curriculum.mixing) << "\nstage_steps = " << r.curriculum.stage_steps
      << "\nnaive_steps = " << r.naive_steps << "\nbatch_size = " << r.batch_size << "\nlr = " << r.lr.peak
      << "\nwarmup = " << r.lr.warmup << "\nbeta1 = " << r.adam.beta1 << "\nbeta2 = " << r.adam.beta2
      << "\neps = " << r.adam.eps << "\nweight_decay = " << r.adam.weight_decay
      << "\nclip_norm = " << r.clip_norm << "\nbptt_unroll = " << r.bptt_unroll.value_or(0)
      << "\neval_every = " << r.eval_every << "\neval_samples = " << r.eval_samples
      << "\neval_batch = " << r.eval_batch << "\nseed = " << r.seed << "\neval_seed = " << r.eval_seed
      << "\nreset_optimizer = " << b(r.reset_optimizer_each_stage)
      << "\ntrain_initial_memory = " << b(r.train_initial_memory) << "\n\n";
  out << "[output]\ndir = " << c.output_dir.string() << "\n";
}

TaskContext::TaskContext(const RunConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto& m = cfg_.model;
  const std::size_t capacity = payload_capacity(m.segment_window, m.memory_tokens, m.mode);
  payload_ = cfg_.task.payload == 0 ? capacity : cfg_.task.payload;
  if (cfg_.task.type == TaskType::toy_lm) {
    const auto& t = cfg_.task;
    auto data = gen_toy_lm_documents(t.seed, t.lm_docs + t.lm_eval_docs, t.lm_doc_len, t.lm_alphabet,
                                     t.lm_families, t.lm_fidelity);
    vocab_ = std::make_unique<Vocab>(data.vocab);
    std::vector<std::vector<int>> train(data.docs.begin(), data.docs.begin() + static_cast<std::ptrdiff_t>(t.lm_docs));
    std::vector<std::vector<int>> held(data.docs.begin() + static_cast<std::ptrdiff_t>(t.lm_docs), data.docs.end());
    source_ = std::make_unique<LmTaskSource>(segment_lm_corpus(train, payload_, t.lm_history),
                                             segment_lm_corpus(held, payload_, t.lm_history));
  } else {
    if (!std::filesystem::exists(cfg_.task.corpus)) {
      throw ConfigError("task.corpus", "file not found: " + cfg_.task.corpus.string());
    }
    std::ifstream in(cfg_.task.corpus);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    vocab_ = std::make_unique<Vocab>(Vocab::build(tokenize(text)));
    noise_ = std::make_unique<NoiseCorpus>(text, *vocab_);
    gen_ = std::make_unique<TaskGenerator>(*vocab_, *noise_);
    TaskKind kind = cfg_.task.type == TaskType::memorize          ? TaskKind::memorize
                    : cfg_.task.type == TaskType::detect_memorize ? TaskKind::detect_memorize
                                                                  : TaskKind::reasoning;
    auto src = std::make_unique<MemoryTaskSource>(*gen_, kind, payload_);
    try {
      src->samples(cfg_.task.seed, 0, 1, cfg_.task.n_segments);
    } catch (const TaskError& e) {
      throw ConfigError("task.payload", e.what());
    }
    source_ = std::move(src);
  }
  if (m.vocab_size == 0) {
    m.vocab_size = vocab_->size();
  } else if (m.vocab_size < vocab_->size()) {
    throw ConfigError("model.vocab", std::to_string(m.vocab_size) + " is smaller than the data vocab of " +
                                         std::to_string(vocab_->size()));
  }
}

const MemoryTaskSource* TaskContext::memory_source() const {
  return dynamic_cast<const MemoryTaskSource*>(source_.get());
}

const LmTaskSource* TaskContext::lm_source() const { return dynamic_cast<const LmTaskSource*>(source_.get()); }

std::filesystem::path run_config_for(const std::filesystem::path& checkpoint) {
  return checkpoint.parent_path() / "run.cfg";
}

}  // namespace rmt
