#include "rmt/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace rmt {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isalnum(c) || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (c == '.' || c == ',' || c == ';' || c == ':' || c == '?' || c == '!') {
        out.emplace_back(1, static_cast<char>(c));
      }
    }
  }
  flush();
  return out;
}

std::vector<std::string> template_words() {
  std::vector<std::string> w = {"fact", ":", "question", "where", "is", "to", "the",
                                ".",    "?", "what",     "of"};
  for (auto p : kPersons) w.emplace_back(p);
  for (auto v : kMoveVerbs) w.emplace_back(v);
  for (auto p : kPlaces) w.emplace_back(p);
  for (auto d : kDirections) w.emplace_back(d);
  return w;
}

Vocab Vocab::from_words(std::vector<std::string> words) {
  Vocab v;
  for (auto& w : words) {
    if (v.index_.count(w)) continue;
    v.index_.emplace(w, static_cast<int>(v.words_.size()));
    v.words_.push_back(std::move(w));
  }
  return v;
}

Vocab Vocab::build(std::span<const std::string> corpus_words) {
  std::vector<std::string> words = {"[cls]", "[sep]", "[pad]", "[unk]"};
  for (auto& w : template_words()) words.push_back(w);
  words.insert(words.end(), corpus_words.begin(), corpus_words.end());
  return from_words(std::move(words));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) words.push_back(line);
  auto v = from_words(words);
  if (v.size() != words.size()) throw std::runtime_error("duplicate word in vocab file " + path.string());
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocab file " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

int Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

const std::string& Vocab::word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

std::vector<int> Vocab::encode(std::span<const std::string> words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

NoiseCorpus::NoiseCorpus(std::string_view text, const Vocab& vocab) {
  std::vector<int> banned;
  for (auto p : kPlaces) banned.push_back(vocab.id(p));
  for (auto p : kPersons) banned.push_back(vocab.id(p));
  for (const auto& w : tokenize(text)) {
    const int id = vocab.id(w);
    if (std::find(banned.begin(), banned.end(), id) == banned.end()) tokens_.push_back(id);
  }
}

NoiseCorpus NoiseCorpus::from_file(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open noise corpus " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return NoiseCorpus(ss.str(), vocab);
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::memorize: return "memorize";
    case TaskKind::detect_memorize: return "detect_memorize";
    case TaskKind::reasoning: return "reasoning";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& text) {
  if (text == "memorize") return TaskKind::memorize;
  if (text == "detect_memorize") return TaskKind::detect_memorize;
  if (text == "reasoning") return TaskKind::reasoning;
  throw std::invalid_argument("task type: expected memorize|detect_memorize|reasoning, got '" + text + "'");
}

std::size_t opposite_direction(std::size_t dir) {
  // north <-> south, east <-> west
  return dir ^ 1U;
}

std::vector<std::size_t> relation_answers(std::span<const Relation> facts, std::size_t subject,
                                          std::size_t dir) {
  std::vector<std::size_t> out;
  auto add = [&](std::size_t y) {
    if (std::find(out.begin(), out.end(), y) == out.end()) out.push_back(y);
  };
  for (const auto& f : facts) {
    if (f.a == subject && f.dir == dir) add(f.b);
    if (f.b == subject && opposite_direction(f.dir) == dir) add(f.a);
  }
  return out;
}

std::size_t payload_capacity(std::size_t window, std::size_t m, std::size_t specials,
                             std::size_t memory_copies) {
  const std::size_t overhead = m * memory_copies + specials;
  if (window <= overhead) {
    throw std::invalid_argument("payload_capacity: window " + std::to_string(window) +
                                " leaves no room after " + std::to_string(overhead) +
                                " reserved positions");
  }
  return window - overhead;
}

std::size_t payload_capacity(std::size_t window, std::size_t m, ModelMode mode) {
  return mode == ModelMode::decoder ? payload_capacity(window, m, 1, 2)
                                    : payload_capacity(window, m, 3, 1);
}

TaskGenerator::TaskGenerator(const Vocab& vocab, const NoiseCorpus& noise)
    : vocab_(&vocab), noise_(&noise) {
  for (std::size_t i = 0; i < kPlaces.size(); ++i) place_ids_[i] = vocab.id(kPlaces[i]);
  for (const auto& w : template_words()) {
    if (!vocab.contains(w)) throw TaskError("vocab lacks template word '" + w + "'");
  }
}

std::vector<int> TaskGenerator::words(std::initializer_list<std::string_view> ws) const {
  std::vector<int> out;
  for (auto w : ws) out.push_back(vocab_->id(w));
  return out;
}

std::vector<int> TaskGenerator::memorize_fact(std::size_t person, std::size_t verb,
                                              std::size_t place) const {
  return words({"fact", ":", kPersons.at(person), kMoveVerbs.at(verb), "to", "the",
                kPlaces.at(place), "."});
}

std::vector<int> TaskGenerator::memorize_question(std::size_t person) const {
  return words({"question", ":", "where", "is", kPersons.at(person), "?"});
}

std::vector<int> TaskGenerator::relation_fact(std::size_t a, std::size_t dir, std::size_t b) const {
  return words({"fact", ":", "the", kPlaces.at(a), "is", kDirections.at(dir), "of", "the",
                kPlaces.at(b), "."});
}

std::vector<int> TaskGenerator::relation_question(std::size_t subject, std::size_t dir) const {
  return words({"question", ":", "what", "is", "the", kPlaces.at(subject), kDirections.at(dir), "of",
                "?"});
}

namespace {

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

bool overlaps(const Span& a, const Span& b) {
  return a.segment == b.segment && a.offset < b.offset + b.length && b.offset < a.offset + a.length;
}

constexpr int kMaxRetries = 1000;

}  // namespace

TaskLayout TaskGenerator::layout(std::uint64_t seed, const TaskParams& params) const {
  const std::size_t n = params.n_segments, payload = params.segment_payload;
  if (n == 0) throw TaskError("n_segments must be positive");
  if (noise_->size() < payload) {
    throw TaskError("noise corpus has " + std::to_string(noise_->size()) +
                    " usable tokens, fewer than one segment payload of " + std::to_string(payload));
  }
  std::mt19937_64 rng(mix_seed(seed, 0));
  TaskLayout out;
  out.params = params;
  out.seed = seed;

  // Places a fact of `len` tokens in `segment`, clear of the question when
  // the segment is the last one.
  auto place_in = [&](std::size_t segment, std::size_t len, std::size_t qlen) {
    const std::size_t reserved = len + (segment == n - 1 ? qlen : 0);
    if (reserved > payload) {
      throw TaskError("segment payload " + std::to_string(payload) + " cannot hold a fact of " +
                      std::to_string(len) + " tokens and the question");
    }
    return Span{segment, uniform(rng, 0, payload - reserved), len};
  };

  if (params.kind == TaskKind::reasoning) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxRetries) throw TaskError("reasoning: no consistent fact pair found");
      const std::size_t center = uniform(rng, 0, 5);
      std::size_t a = uniform(rng, 0, 5), c = uniform(rng, 0, 5);
      if (a == center || c == center || a == c) continue;
      const std::size_t d1 = uniform(rng, 0, 3), d2 = uniform(rng, 0, 3);
      const bool center_first = uniform(rng, 0, 1) == 1;
      std::array<Relation, 2> facts = {Relation{a, d1, center},
                                       center_first ? Relation{center, d2, c} : Relation{c, d2, center}};
      const std::size_t qdir = uniform(rng, 0, 3);
      const auto answers = relation_answers(facts, center, qdir);
      // Both facts mention the subject; the asked direction must single out
      // exactly one of them.
      if (answers.size() != 1) continue;
      // The two facts must place the neighbours in different directions.
      bool consistent = true;
      for (std::size_t dir = 0; dir < 4; ++dir) {
        if (relation_answers(facts, center, dir).size() > 1) consistent = false;
      }
      if (!consistent) continue;
      out.label = static_cast<int>(answers.front());
      const std::size_t qlen = relation_question(center, qdir).size();
      out.question_tokens = relation_question(center, qdir);
      for (const auto& f : facts) out.fact_tokens.push_back(relation_fact(f.a, f.dir, f.b));
      if (payload < qlen) throw TaskError("segment payload too small for the question");
      std::array<Span, 2> spans{};
      int tries = 0;
      do {
        if (++tries > kMaxRetries) throw TaskError("reasoning: cannot place two facts");
        for (std::size_t i = 0; i < 2; ++i) {
          spans[i] = place_in(uniform(rng, 0, n - 1), out.fact_tokens[i].size(), qlen);
        }
      } while (overlaps(spans[0], spans[1]));
      out.facts.assign(spans.begin(), spans.end());
      out.question = Span{n - 1, payload - qlen, qlen};
      return out;
    }
  }

  const std::size_t person = uniform(rng, 0, kPersons.size() - 1);
  const std::size_t verb = uniform(rng, 0, kMoveVerbs.size() - 1);
  const std::size_t place = uniform(rng, 0, kPlaces.size() - 1);
  out.label = static_cast<int>(place);
  out.fact_tokens.push_back(memorize_fact(person, verb, place));
  out.question_tokens = memorize_question(person);
  const std::size_t flen = out.fact_tokens.front().size();
  const std::size_t qlen = out.question_tokens.size();
  if (params.kind == TaskKind::memorize) {
    if (flen + (n == 1 ? qlen : 0) > payload || qlen > payload) {
      throw TaskError("segment payload " + std::to_string(payload) + " cannot hold fact and question");
    }
    out.facts.push_back(Span{0, 0, flen});
  } else {
    out.facts.push_back(place_in(uniform(rng, 0, n - 1), flen, qlen));
  }
  out.question = Span{n - 1, payload - qlen, qlen};
  return out;
}

std::vector<int> TaskGenerator::segment_payload(const TaskLayout& layout, std::size_t index) const {
  const std::size_t payload = layout.params.segment_payload;
  if (index >= layout.params.n_segments) throw std::out_of_range("segment index past sample end");
  std::mt19937_64 rng(mix_seed(layout.seed, index + 1));
  const auto noise = noise_->tokens();
  std::size_t pos = uniform(rng, 0, noise.size() - 1);
  std::vector<int> out(payload);
  for (std::size_t i = 0; i < payload; ++i) {
    out[i] = noise[pos];
    pos = pos + 1 == noise.size() ? 0 : pos + 1;
  }
  auto paste = [&](const Span& span, const std::vector<int>& tokens) {
    if (span.segment == index) std::copy(tokens.begin(), tokens.end(), out.begin() + span.offset);
  };
  for (std::size_t i = 0; i < layout.facts.size(); ++i) paste(layout.facts[i], layout.fact_tokens[i]);
  paste(layout.question, layout.question_tokens);
  return out;
}

TaskSample TaskGenerator::materialize(const TaskLayout& layout) const {
  TaskSample s;
  s.params = layout.params;
  s.seed = layout.seed;
  s.facts = layout.facts;
  s.question = layout.question;
  s.label = layout.label;
  s.tokens.reserve(layout.params.n_segments * layout.params.segment_payload);
  for (std::size_t i = 0; i < layout.params.n_segments; ++i) {
    auto seg = segment_payload(layout, i);
    s.tokens.insert(s.tokens.end(), seg.begin(), seg.end());
  }
  return s;
}

TaskSample gen_memorize(std::uint64_t seed, std::size_t n_segments, std::size_t seg_payload,
                        const TaskGenerator& gen) {
  return gen.generate(seed, {TaskKind::memorize, n_segments, seg_payload});
}

TaskSample gen_detect_memorize(std::uint64_t seed, std::size_t n_segments,
                               std::size_t seg_payload, const TaskGenerator& gen) {
  return gen.generate(seed, {TaskKind::detect_memorize, n_segments, seg_payload});
}

TaskSample gen_reasoning(std::uint64_t seed, std::size_t n_segments, std::size_t seg_payload,
                         const TaskGenerator& gen) {
  return gen.generate(seed, {TaskKind::reasoning, n_segments, seg_payload});
}

LmCorpus segment_lm_corpus(const std::vector<std::vector<int>>& docs, std::size_t segment_len,
                           std::size_t n_history) {
  if (segment_len == 0) throw std::invalid_argument("segment_lm_corpus: segment length must be positive");
  LmCorpus out;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const auto& doc = docs[d];
    const std::size_t n_seg = doc.size() / segment_len;
    if (n_seg == 0) {
      ++out.skipped_docs;
      continue;
    }
    for (std::size_t j = 0; j < n_seg; ++j) {
      LmSample s;
      s.segment_len = segment_len;
      s.n_history = std::min(j, n_history);
      s.doc_index = d;
      s.target_index = j;
      const std::size_t first = j - s.n_history;
      s.tokens.assign(doc.begin() + static_cast<std::ptrdiff_t>(first * segment_len),
                      doc.begin() + static_cast<std::ptrdiff_t>((j + 1) * segment_len));
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

ToyLmData gen_toy_lm_documents(std::uint64_t seed, std::size_t n_docs, std::size_t doc_len,
                               std::size_t alphabet, std::size_t n_families, double fidelity) {
  if (alphabet < 2 || n_families == 0) throw std::invalid_argument("toy corpus: alphabet >= 2 and families >= 1");
  std::vector<std::string> words = {"[cls]", "[sep]", "[pad]", "[unk]"};
  for (std::size_t i = 0; i < alphabet; ++i) words.push_back("w" + std::to_string(i));
  ToyLmData data{Vocab::from_words(std::move(words)), {}};
  const int base = kUnkId + 1;

  std::mt19937_64 table_rng(mix_seed(seed, 0));
  std::vector<std::vector<int>> tables(n_families, std::vector<int>(alphabet));
  for (auto& t : tables) {
    std::iota(t.begin(), t.end(), 0);
    std::shuffle(t.begin(), t.end(), table_rng);
  }
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::mt19937_64 rng(mix_seed(seed, d + 1));
    const auto& table = tables[uniform(rng, 0, n_families - 1)];
    std::bernoulli_distribution follow(fidelity);
    std::vector<int> doc(doc_len);
    int cur = static_cast<int>(uniform(rng, 0, alphabet - 1));
    for (std::size_t i = 0; i < doc_len; ++i) {
      doc[i] = cur + base;
      cur = follow(rng) ? table[static_cast<std::size_t>(cur)] : static_cast<int>(uniform(rng, 0, alphabet - 1));
    }
    data.docs.push_back(std::move(doc));
  }
  return data;
}

void write_shard(const std::filesystem::path& path, std::span<const TaskSample> samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write shard " + path.string());
  for (const auto& s : samples) {
    nlohmann::json rec;
    rec["seed"] = s.seed;
    rec["params"] = {{"task", to_string(s.params.kind)},
                     {"n_segments", s.params.n_segments},
                     {"segment_payload", s.params.segment_payload}};
    rec["token_ids"] = s.tokens;
    auto segs = nlohmann::json::array();
    for (std::size_t i = 0; i < s.params.n_segments; ++i) {
      segs.push_back({i * s.params.segment_payload, (i + 1) * s.params.segment_payload});
    }
    rec["segments"] = segs;
    auto facts = nlohmann::json::array();
    for (const auto& f : s.facts) facts.push_back({f.segment, f.offset, f.length});
    rec["facts"] = facts;
    rec["question"] = {s.question.segment, s.question.offset, s.question.length};
    rec["label"] = s.label;
    out << rec.dump() << '\n';
  }
}

std::vector<TaskSample> read_shard(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open shard " + path.string());
  std::vector<TaskSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    TaskSample s;
    s.seed = rec.at("seed").get<std::uint64_t>();
    s.params.kind = parse_task_kind(rec.at("params").at("task").get<std::string>());
    s.params.n_segments = rec.at("params").at("n_segments").get<std::size_t>();
    s.params.segment_payload = rec.at("params").at("segment_payload").get<std::size_t>();
    s.tokens = rec.at("token_ids").get<std::vector<int>>();
    for (const auto& f : rec.at("facts")) s.facts.push_back(Span{f[0], f[1], f[2]});
    const auto& q = rec.at("question");
    s.question = Span{q[0], q[1], q[2]};
    s.label = rec.at("label").get<int>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace rmt
