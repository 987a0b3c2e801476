#pragma once

// Independent validity checks for generated task samples: template
// re-parse, label leakage, and a geometric entailment oracle for the
// relation task.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "rmt/tasks.hpp"

namespace taskcheck {

inline std::vector<std::string> words_of(const rmt::Vocab& vocab, std::span<const int> ids) {
  std::vector<std::string> out;
  for (int id : ids) out.push_back(vocab.word(id));
  return out;
}

inline std::optional<std::size_t> index_in(std::span<const std::string_view> list, const std::string& w) {
  for (std::size_t i = 0; i < list.size(); ++i)
    if (list[i] == w) return i;
  return std::nullopt;
}

struct MoveFact {
  std::size_t person, place;
};
struct RelFact {
  std::size_t a, dir, b;
};

// "fact : <person> <verb> to the <place> ."
inline std::optional<MoveFact> parse_move_fact(const std::vector<std::string>& w) {
  if (w.size() != 8 || w[0] != "fact" || w[1] != ":" || w[4] != "to" || w[5] != "the" || w[7] != ".") return std::nullopt;
  auto p = index_in(rmt::kPersons, w[2]);
  auto v = index_in(rmt::kMoveVerbs, w[3]);
  auto l = index_in(rmt::kPlaces, w[6]);
  if (!p || !v || !l) return std::nullopt;
  return MoveFact{*p, *l};
}

// "question : where is <person> ?"
inline std::optional<std::size_t> parse_move_question(const std::vector<std::string>& w) {
  if (w.size() != 6 || w[0] != "question" || w[1] != ":" || w[2] != "where" || w[3] != "is" || w[5] != "?")
    return std::nullopt;
  return index_in(rmt::kPersons, w[4]);
}

// "fact : the <place> is <dir> of the <place> ."
inline std::optional<RelFact> parse_rel_fact(const std::vector<std::string>& w) {
  if (w.size() != 10 || w[0] != "fact" || w[1] != ":" || w[2] != "the" || w[4] != "is" || w[6] != "of" ||
      w[7] != "the" || w[9] != ".")
    return std::nullopt;
  auto a = index_in(rmt::kPlaces, w[3]);
  auto d = index_in(rmt::kDirections, w[5]);
  auto b = index_in(rmt::kPlaces, w[8]);
  if (!a || !d || !b) return std::nullopt;
  return RelFact{*a, *d, *b};
}

// "question : what is the <place> <dir> of ?"
inline std::optional<std::pair<std::size_t, std::size_t>> parse_rel_question(const std::vector<std::string>& w) {
  if (w.size() != 9 || w[0] != "question" || w[1] != ":" || w[2] != "what" || w[3] != "is" || w[4] != "the" ||
      w[7] != "of" || w[8] != "?")
    return std::nullopt;
  auto s = index_in(rmt::kPlaces, w[5]);
  auto d = index_in(rmt::kDirections, w[6]);
  if (!s || !d) return std::nullopt;
  return std::make_pair(*s, *d);
}

// Places y such that "subject is <dir> of y" holds in every placement of
// the mentioned places on a small grid consistent with the facts
// ("a is east of b" meaning a sits one step east of b).
inline std::vector<std::size_t> entailed_answers(const std::vector<RelFact>& facts, std::size_t subject, std::size_t dir) {
  static const std::array<std::pair<int, int>, 4> step = {{{0, 1}, {0, -1}, {1, 0}, {-1, 0}}};  // n s e w
  std::vector<std::size_t> places;
  auto mention = [&](std::size_t p) {
    if (std::find(places.begin(), places.end(), p) == places.end()) places.push_back(p);
  };
  mention(subject);
  for (const auto& f : facts) {
    mention(f.a);
    mention(f.b);
  }
  const int R = 2, side = 2 * R + 1;
  const std::size_t n = places.size();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= static_cast<std::size_t>(side * side);
  std::vector<bool> possible(rmt::kPlaces.size(), true);
  bool any_world = false;
  std::vector<std::pair<int, int>> pos(rmt::kPlaces.size());
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i) {
      const int cell = static_cast<int>(c % static_cast<std::size_t>(side * side));
      c /= static_cast<std::size_t>(side * side);
      pos[places[i]] = {cell % side - R, cell / side - R};
    }
    bool ok = true;
    for (const auto& f : facts) {
      ok &= pos[f.a].first == pos[f.b].first + step[f.dir].first && pos[f.a].second == pos[f.b].second + step[f.dir].second;
    }
    // Distinct places occupy distinct cells.
    for (std::size_t i = 0; i < n && ok; ++i)
      for (std::size_t j = i + 1; j < n && ok; ++j) ok &= pos[places[i]] != pos[places[j]];
    if (!ok) continue;
    any_world = true;
    for (std::size_t y = 0; y < rmt::kPlaces.size(); ++y) {
      const bool mentioned = std::find(places.begin(), places.end(), y) != places.end();
      if (!mentioned || y == subject) {
        possible[y] = false;
        continue;
      }
      if (!(pos[subject].first == pos[y].first + step[dir].first && pos[subject].second == pos[y].second + step[dir].second)) {
        possible[y] = false;
      }
    }
  }
  std::vector<std::size_t> out;
  if (!any_world) return out;
  for (std::size_t y = 0; y < possible.size(); ++y)
    if (possible[y]) out.push_back(y);
  return out;
}

struct Report {
  std::size_t samples = 0;
  std::size_t parse_failures = 0;
  std::size_t leaks = 0;
  std::size_t label_mismatches = 0;
  std::size_t layout_errors = 0;
  std::string first_problem;
  void fail(std::size_t& counter, const std::string& what) {
    ++counter;
    if (first_problem.empty()) first_problem = what;
  }
  bool ok() const { return parse_failures + leaks + label_mismatches + layout_errors == 0; }
};

// Checks one sample; fact segment indices and offsets are appended for
// the uniformity statistics.
inline void check_sample(const rmt::TaskSample& s, const rmt::Vocab& vocab, Report& rep,
                         std::vector<std::size_t>* fact_segments = nullptr,
                         std::vector<std::size_t>* fact_offsets = nullptr) {
  ++rep.samples;
  const std::size_t payload = s.params.segment_payload;
  const std::string tag = "seed " + std::to_string(s.seed) + ": ";
  if (s.tokens.size() != payload * s.params.n_segments) return rep.fail(rep.layout_errors, tag + "token count");
  auto span_words = [&](const rmt::Span& sp) {
    return words_of(vocab, std::span<const int>(s.tokens).subspan(sp.segment * payload + sp.offset, sp.length));
  };
  if (s.question.segment != s.params.n_segments - 1 || s.question.offset + s.question.length != payload) {
    rep.fail(rep.layout_errors, tag + "question not at the end of the final segment");
  }
  for (const auto& f : s.facts) {
    if (f.offset + f.length > payload || f.segment >= s.params.n_segments) rep.fail(rep.layout_errors, tag + "fact outside its segment");
    if (f.segment == s.question.segment && f.offset + f.length > s.question.offset) rep.fail(rep.layout_errors, tag + "fact overlaps question");
    if (fact_segments) fact_segments->push_back(f.segment);
    if (fact_offsets) fact_offsets->push_back(f.offset);
  }
  if (s.label < 0 || s.label >= 6) return rep.fail(rep.label_mismatches, tag + "label out of range");

  if (s.params.kind == rmt::TaskKind::reasoning) {
    std::vector<RelFact> facts;
    for (const auto& f : s.facts) {
      auto parsed = parse_rel_fact(span_words(f));
      if (!parsed) return rep.fail(rep.parse_failures, tag + "relation fact does not parse");
      facts.push_back(*parsed);
    }
    auto q = parse_rel_question(span_words(s.question));
    if (!q || facts.size() != 2) return rep.fail(rep.parse_failures, tag + "relation question does not parse");
    auto answers = entailed_answers(facts, q->first, q->second);
    if (answers.size() != 1 || static_cast<int>(answers[0]) != s.label) rep.fail(rep.label_mismatches, tag + "label not uniquely entailed");
    auto swapped = entailed_answers({facts[1], facts[0]}, q->first, q->second);
    if (swapped != answers) rep.fail(rep.label_mismatches, tag + "answer depends on fact order");
  } else {
    if (s.facts.size() != 1) return rep.fail(rep.layout_errors, tag + "expected one fact");
    auto f = parse_move_fact(span_words(s.facts[0]));
    auto q = parse_move_question(span_words(s.question));
    if (!f || !q) return rep.fail(rep.parse_failures, tag + "fact or question does not parse");
    if (f->person != *q) rep.fail(rep.label_mismatches, tag + "question asks about another person");
    if (static_cast<int>(f->place) != s.label) rep.fail(rep.label_mismatches, tag + "label differs from fact place");
    if (s.params.kind == rmt::TaskKind::memorize && (s.facts[0].segment != 0 || s.facts[0].offset != 0)) {
      rep.fail(rep.layout_errors, tag + "memorize fact not at the start");
    }
  }

  // The answer word appears only inside fact spans.
  const int answer = vocab.id(rmt::kPlaces[static_cast<std::size_t>(s.label)]);
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (s.tokens[i] != answer) continue;
    const std::size_t seg = i / payload, off = i % payload;
    bool inside = false;
    for (const auto& f : s.facts) inside |= f.segment == seg && off >= f.offset && off < f.offset + f.length;
    if (!inside) return rep.fail(rep.leaks, tag + "answer word outside fact spans at token " + std::to_string(i));
  }
}

}  // namespace taskcheck
