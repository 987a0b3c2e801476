#include "rmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rmt {

namespace {

constexpr char kMagic[4] = {'R', 'M', 'T', '1'};

template <class T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    std::reverse(bytes, bytes + sizeof(T));
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

class Writer {
 public:
  template <class T>
  void put(T value) {
    value = to_little(value);
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::ifstream& in, std::string source) : in_(in), source_(std::move(source)) {}
  template <class T>
  T get() {
    T value;
    read(reinterpret_cast<char*>(&value), sizeof(T));
    return to_little(value);
  }
  void read(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError(source_ + ": truncated checkpoint");
    }
  }
  std::string get_string(std::size_t limit) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw CheckpointError(source_ + ": string length " + std::to_string(n) + " too large");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  const std::string& source() const { return source_; }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream& in_;
  std::string source_;
};

void put_config(Writer& w, const ModelConfig& c) {
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab_size, c.segment_window,
                        c.memory_tokens, c.n_classes}) {
    w.put(static_cast<std::uint64_t>(v));
  }
  w.put(static_cast<std::uint8_t>(c.mode == ModelMode::decoder ? 1 : 0));
  w.put(static_cast<std::uint8_t>(c.memory_positions ? 1 : 0));
  w.put(c.dropout);
}

ModelConfig get_config(Reader& r) {
  ModelConfig c;
  for (std::size_t* v : {&c.n_layers, &c.d_model, &c.n_heads, &c.d_ffn, &c.vocab_size,
                         &c.segment_window, &c.memory_tokens, &c.n_classes}) {
    *v = static_cast<std::size_t>(r.get<std::uint64_t>());
  }
  const auto mode = r.get<std::uint8_t>();
  if (mode > 1) throw CheckpointError(r.source() + ": bad model mode " + std::to_string(mode));
  c.mode = mode == 1 ? ModelMode::decoder : ModelMode::encoder;
  c.memory_positions = r.get<std::uint8_t>() != 0;
  c.dropout = r.get<double>();
  return c;
}

void put_tensor(Writer& w, const std::string& name, const Shape& shape, std::span<const float> data) {
  w.put_string(name);
  w.put(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.put(static_cast<std::uint64_t>(d));
  for (float x : data) w.put(x);
}

std::string config_diff(const ModelConfig& a, const ModelConfig& b) {
  std::ostringstream os;
  auto cmp = [&](const char* key, auto x, auto y) {
    if (x != y) os << " " << key << " " << x << " != " << y;
  };
  cmp("n_layers", a.n_layers, b.n_layers);
  cmp("d_model", a.d_model, b.d_model);
  cmp("n_heads", a.n_heads, b.n_heads);
  cmp("d_ffn", a.d_ffn, b.d_ffn);
  cmp("vocab_size", a.vocab_size, b.vocab_size);
  cmp("segment_window", a.segment_window, b.segment_window);
  cmp("memory_tokens", a.memory_tokens, b.memory_tokens);
  cmp("n_classes", a.n_classes, b.n_classes);
  cmp("mode", to_string(a.mode), to_string(b.mode));
  cmp("memory_positions", a.memory_positions, b.memory_positions);
  cmp("dropout", a.dropout, b.dropout);
  return os.str();
}

ModelConfig read_header(Reader& r) {
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(r.source() + ": not an RMT1 checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(r.source() + ": unsupported checkpoint version " + std::to_string(version));
  }
  auto cfg = get_config(r);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(r.source() + ": invalid stored config: " + e.what());
  }
  return cfg;
}

}  // namespace

Checkpoint make_checkpoint(const Model<float>& model, const AdamW<float>* optimizer,
                           std::size_t stage, std::string rng_state) {
  Checkpoint ckpt;
  ckpt.model = model;
  if (optimizer) {
    OptimizerSnapshot snap;
    snap.config = optimizer->config();
    snap.steps = optimizer->steps();
    snap.first = optimizer->first_moments();
    snap.second = optimizer->second_moments();
    ckpt.optimizer = std::move(snap);
  }
  ckpt.stage = stage;
  ckpt.rng_state = std::move(rng_state);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto params = ckpt.model.parameters();
  Writer w;
  w.put_raw(kMagic, 4);
  w.put(kCheckpointVersion);
  put_config(w, ckpt.model.config());
  w.put(static_cast<std::uint8_t>(ckpt.optimizer ? 1 : 0));
  const std::size_t n_tensors = params.size() * (ckpt.optimizer ? 3 : 1);
  w.put(static_cast<std::uint32_t>(n_tensors));
  for (const auto& p : params) put_tensor(w, p.name(), p.shape(), p.data());
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    if (o.first.size() != params.size() || o.second.size() != params.size()) {
      throw CheckpointError("optimizer snapshot does not match the model's parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_tensor(w, "adam.m/" + params[i].name(), params[i].shape(), o.first[i]);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_tensor(w, "adam.v/" + params[i].name(), params[i].shape(), o.second[i]);
    }
    w.put(o.config.beta1);
    w.put(o.config.beta2);
    w.put(o.config.eps);
    w.put(o.config.weight_decay);
    w.put(static_cast<std::uint64_t>(o.steps));
  }
  w.put(static_cast<std::uint64_t>(ckpt.stage));
  w.put_string(ckpt.rng_state);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw CheckpointError("write failed for checkpoint " + path.string());
}

ModelConfig peek_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  return read_header(r);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  const auto cfg = read_header(r);
  if (expected && !(*expected == cfg)) {
    throw CheckpointError(path.string() + ": config mismatch:" + config_diff(cfg, *expected));
  }
  const bool has_opt = r.get<std::uint8_t>() != 0;
  const auto n_tensors = r.get<std::uint32_t>();

  Checkpoint ckpt;
  ckpt.model = Model<float>(cfg, 0);
  auto params = ckpt.model.parameters();
  const std::size_t want = params.size() * (has_opt ? 3 : 1);
  if (n_tensors != want) {
    throw CheckpointError(path.string() + ": " + std::to_string(n_tensors) + " tensors, expected " +
                          std::to_string(want));
  }
  std::vector<std::vector<float>> first, second;
  for (std::size_t t = 0; t < n_tensors; ++t) {
    const std::size_t group = t / params.size();
    const auto& target = params[t % params.size()];
    const std::string prefix = group == 0 ? "" : group == 1 ? "adam.m/" : "adam.v/";
    const auto name = r.get_string(4096);
    if (name != prefix + target.name()) {
      throw CheckpointError(path.string() + ": tensor '" + name + "' where '" + prefix + target.name() +
                            "' was expected");
    }
    const auto ndim = r.get<std::uint32_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != target.shape()) {
      throw CheckpointError(path.string() + ": tensor '" + name + "' has shape " + shape_str(shape) +
                            ", expected " + shape_str(target.shape()));
    }
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = r.get<float>();
    if (group == 0) {
      auto dst = params[t].mutable_data();
      std::copy(values.begin(), values.end(), dst.begin());
    } else if (group == 1) {
      first.push_back(std::move(values));
    } else {
      second.push_back(std::move(values));
    }
  }
  if (has_opt) {
    OptimizerSnapshot snap;
    snap.config.beta1 = r.get<double>();
    snap.config.beta2 = r.get<double>();
    snap.config.eps = r.get<double>();
    snap.config.weight_decay = r.get<double>();
    snap.steps = static_cast<std::size_t>(r.get<std::uint64_t>());
    snap.first = std::move(first);
    snap.second = std::move(second);
    ckpt.optimizer = std::move(snap);
  }
  ckpt.stage = static_cast<std::size_t>(r.get<std::uint64_t>());
  ckpt.rng_state = r.get_string(1 << 20);
  if (!r.at_end()) throw CheckpointError(path.string() + ": trailing bytes after checkpoint");
  return ckpt;
}

void restore_optimizer(const OptimizerSnapshot& snap, AdamW<float>& optimizer) {
  auto& m = optimizer.first_moments();
  auto& v = optimizer.second_moments();
  if (snap.first.size() != m.size() || snap.second.size() != v.size()) {
    throw CheckpointError("optimizer snapshot has " + std::to_string(snap.first.size()) +
                          " parameters, optimizer has " + std::to_string(m.size()));
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (snap.first[i].size() != m[i].size() || snap.second[i].size() != v[i].size()) {
      throw CheckpointError("optimizer snapshot size mismatch at parameter " + std::to_string(i));
    }
    m[i] = snap.first[i];
    v[i] = snap.second[i];
  }
  optimizer.set_steps(snap.steps);
}

std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw CheckpointError("malformed rng state");
}

}  // namespace rmt
