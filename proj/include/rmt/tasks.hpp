#pragma once

// Synthetic long-context memory tasks and segmented language modelling.
//
// Every generator is a pure function of (seed, params): a sample's layout
// (fact placement, question, label) is derived from the seed, and each
// segment's payload is derived from (seed, segment index), so very long
// samples can be produced one segment at a time.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rmt/model.hpp"

namespace rmt {

inline constexpr std::array<std::string_view, 6> kPlaces = {"bathroom", "hallway", "garden",
                                                            "office",   "bedroom", "kitchen"};
inline constexpr std::array<std::string_view, 6> kPersons = {"mary",   "john", "daniel",
                                                             "sandra", "fred", "julie"};
inline constexpr std::array<std::string_view, 4> kMoveVerbs = {"went", "journeyed", "travelled",
                                                               "moved"};
inline constexpr std::array<std::string_view, 4> kDirections = {"north", "south", "east", "west"};

// Lowercased word-level tokens: runs of [a-z0-9'] plus the punctuation marks . , ; : ? !
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
 public:
  // Specials at ids 0..3 ([cls] [sep] [pad] [unk]), then template words, then
  // corpus words in order of first appearance.
  static Vocab build(std::span<const std::string> corpus_words);
  static Vocab from_words(std::vector<std::string> words);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(std::string_view word) const;  // kUnkId when absent
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  std::vector<int> encode(std::span<const std::string> words) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Template words of the fact/question grammar.
std::vector<std::string> template_words();

// Distractor token stream. Place and person words are removed so answers
// never leak into noise spans.
class NoiseCorpus {
 public:
  NoiseCorpus(std::string_view text, const Vocab& vocab);
  static NoiseCorpus from_file(const std::filesystem::path& path, const Vocab& vocab);
  std::span<const int> tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<int> tokens_;
};

enum class TaskKind { memorize, detect_memorize, reasoning };
std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

struct Span {
  std::size_t segment = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const Span&) const = default;
};

struct TaskParams {
  TaskKind kind = TaskKind::memorize;
  std::size_t n_segments = 1;
  std::size_t segment_payload = 57;
};

// Placement and content of one sample, without the noise.
struct TaskLayout {
  TaskParams params;
  std::uint64_t seed = 0;
  std::vector<Span> facts;
  std::vector<std::vector<int>> fact_tokens;
  Span question;
  std::vector<int> question_tokens;
  int label = 0;  // index into kPlaces
};

struct TaskSample {
  TaskParams params;
  std::uint64_t seed = 0;
  std::vector<int> tokens;  // n_segments * segment_payload payload ids
  std::vector<Span> facts;
  Span question;
  int label = 0;

  std::span<const int> segment(std::size_t i) const {
    return std::span<const int>(tokens).subspan(i * params.segment_payload, params.segment_payload);
  }
};

class TaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TaskGenerator {
 public:
  TaskGenerator(const Vocab& vocab, const NoiseCorpus& noise);

  TaskLayout layout(std::uint64_t seed, const TaskParams& params) const;
  // Payload of one segment of the sample described by `layout`.
  std::vector<int> segment_payload(const TaskLayout& layout, std::size_t index) const;
  TaskSample materialize(const TaskLayout& layout) const;
  TaskSample generate(std::uint64_t seed, const TaskParams& params) const {
    return materialize(layout(seed, params));
  }

  const Vocab& vocab() const { return *vocab_; }
  // Token ids of the six answer classes, in class order.
  const std::array<int, 6>& place_ids() const { return place_ids_; }

  std::vector<int> memorize_fact(std::size_t person, std::size_t verb, std::size_t place) const;
  std::vector<int> memorize_question(std::size_t person) const;
  std::vector<int> relation_fact(std::size_t a, std::size_t dir, std::size_t b) const;
  std::vector<int> relation_question(std::size_t subject, std::size_t dir) const;

 private:
  const Vocab* vocab_;
  const NoiseCorpus* noise_;
  std::array<int, 6> place_ids_{};
  std::vector<int> words(std::initializer_list<std::string_view> ws) const;
};

TaskSample gen_memorize(std::uint64_t seed, std::size_t n_segments, std::size_t seg_payload,
                        const TaskGenerator& gen);
TaskSample gen_detect_memorize(std::uint64_t seed, std::size_t n_segments,
                               std::size_t seg_payload, const TaskGenerator& gen);
TaskSample gen_reasoning(std::uint64_t seed, std::size_t n_segments, std::size_t seg_payload,
                         const TaskGenerator& gen);

// A directed relation "a is <dir> of b" between places.
struct Relation {
  std::size_t a = 0;
  std::size_t dir = 0;
  std::size_t b = 0;
};
std::size_t opposite_direction(std::size_t dir);
// Places y with "subject is <dir> of y" implied by the facts.
std::vector<std::size_t> relation_answers(std::span<const Relation> facts, std::size_t subject,
                                          std::size_t dir);

// Usable payload per segment: W - m - 3 (encoder) or W - 2m - 1 (decoder).
std::size_t payload_capacity(std::size_t window, std::size_t m, ModelMode mode);
std::size_t payload_capacity(std::size_t window, std::size_t m, std::size_t specials,
                             std::size_t memory_copies);

// Segmented language modelling: each target segment is preceded by up to
// n_history previous segments; loss applies to the target segment only.
struct LmSample {
  std::vector<int> tokens;  // history segments followed by the target segment
  std::size_t segment_len = 0;
  std::size_t n_history = 0;
  std::size_t doc_index = 0;
  std::size_t target_index = 0;
  std::size_t n_segments() const { return n_history + 1; }
  std::span<const int> segment(std::size_t i) const {
    return std::span<const int>(tokens).subspan(i * segment_len, segment_len);
  }
};

struct LmCorpus {
  std::vector<LmSample> samples;
  std::size_t skipped_docs = 0;
};

LmCorpus segment_lm_corpus(const std::vector<std::vector<int>>& docs, std::size_t segment_len,
                           std::size_t n_history);

// Toy long-range LM data: each document follows one of `n_families` hidden
// successor tables over `alphabet` words (next = table[prev] with
// probability `fidelity`, uniform otherwise). Token ids start after the
// specials of the returned vocab.
struct ToyLmData {
  Vocab vocab;
  std::vector<std::vector<int>> docs;
};
ToyLmData gen_toy_lm_documents(std::uint64_t seed, std::size_t n_docs, std::size_t doc_len,
                               std::size_t alphabet, std::size_t n_families, double fidelity);

// Line-delimited dataset shards: {seed, params, token_ids, segments, label}
// plus a vocab sidecar (one word per line, line number = id).
void write_shard(const std::filesystem::path& path, std::span<const TaskSample> samples);
std::vector<TaskSample> read_shard(const std::filesystem::path& path);

// 64-bit mixing of a seed with a stream index (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace rmt
