#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "avlem/common.hpp"
#include "avlem/corpus.hpp"
#include "avlem/model.hpp"

namespace avlem {

enum class Strategy { most_mentioned, random };

inline Strategy parse_strategy(std::string_view s) {
  if (s == "most_mentioned") return Strategy::most_mentioned;
  if (s == "random") return Strategy::random;
  throw Error("unknown question strategy '" + std::string(s) + "' (most_mentioned|random)");
}

inline const char* strategy_name(Strategy s) {
  return s == Strategy::most_mentioned ? "most_mentioned" : "random";
}

// yes -> +1, no -> -1, skip -> no answer.
enum class Answer { yes, no, skip };

inline Answer parse_answer(std::string_view s) {
  if (s == "yes") return Answer::yes;
  if (s == "no") return Answer::no;
  if (s == "skip") return Answer::skip;
  throw Error("unknown answer '" + std::string(s) + "' (yes|no|skip)");
}

inline const char* answer_name(Answer a) {
  switch (a) {
    case Answer::yes: return "yes";
    case Answer::no: return "no";
    case Answer::skip: return "skip";
  }
  return "skip";
}

// Which answered polarities a ranker is allowed to see.
enum class FeedbackMode { all, positive_only, negative_only };

inline FeedbackMode parse_feedback_mode(std::string_view s) {
  if (s == "all") return FeedbackMode::all;
  if (s == "pos" || s == "positive") return FeedbackMode::positive_only;
  if (s == "neg" || s == "negative") return FeedbackMode::negative_only;
  throw Error("unknown feedback mode '" + std::string(s) + "' (all|pos|neg)");
}

inline const char* feedback_mode_name(FeedbackMode m) {
  switch (m) {
    case FeedbackMode::all: return "all";
    case FeedbackMode::positive_only: return "pos";
    case FeedbackMode::negative_only: return "neg";
  }
  return "all";
}

struct Question {
  AspectId aspect = 0;
  ValueId value = 0;
  std::string text;
  friend bool operator==(const Question&, const Question&) = default;
};

inline std::string question_text(const Corpus& corpus, AspectId a, ValueId v) {
  return "Do you want " + corpus.aspect_text(a) + " to be " + corpus.value_vocab.token(v) + "?";
}

struct SessionState {
  UserId user = 0;
  bool anonymous = false;
  std::vector<WordId> query;
  std::vector<ItemId> shown;
  FeedbackSet feedback;
  std::set<std::pair<AspectId, ValueId>> asked;
  bool finished = false;

  std::size_t iteration() const { return shown.size(); }
  friend bool operator==(const SessionState&, const SessionState&) = default;
};

// Candidate pool: catalog pairs of the shown items not yet asked.
inline std::vector<Question> select_questions(const SessionState& state, const Corpus& corpus,
                                              std::size_t m, Strategy strategy, Rng& rng) {
  require(!state.finished, "select_questions: session is finished");
  require(!state.shown.empty(), "select_questions: nothing shown yet");
  std::map<std::pair<AspectId, ValueId>, std::uint64_t> pool;
  for (auto item : state.shown)
    for (const auto* p : corpus.item_av(item)) {
      const std::pair key{p->aspect, p->value};
      if (!state.asked.contains(key)) pool[key] += p->mentions;
    }
  std::vector<std::pair<std::pair<AspectId, ValueId>, std::uint64_t>> cands(pool.begin(), pool.end());
  if (strategy == Strategy::most_mentioned) {
    // The map already orders by (aspect, value); a stable sort keeps that as the tie-break.
    std::stable_sort(cands.begin(), cands.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
  } else {
    for (std::size_t k = 0; k + 1 < cands.size() && k < m; ++k)
      std::swap(cands[k], cands[k + uniform_index(rng, cands.size() - k)]);
  }
  std::vector<Question> out;
  for (std::size_t k = 0; k < cands.size() && k < m; ++k) {
    const auto [a, v] = cands[k].first;
    out.push_back({a, v, question_text(corpus, a, v)});
  }
  return out;
}

// The simulated user's knowledge: the target item's catalog.
struct TargetCatalog {
  std::set<AspectId> aspects;
  std::set<std::pair<AspectId, ValueId>> pairs;

  static TargetCatalog of(const Corpus& corpus, ItemId item) {
    TargetCatalog t;
    for (const auto* p : corpus.item_av(item)) {
      t.aspects.insert(p->aspect);
      t.pairs.insert({p->aspect, p->value});
    }
    return t;
  }
};

inline Answer simulate_answer(const TargetCatalog& target, const Question& q) {
  if (!target.aspects.contains(q.aspect)) return Answer::skip;
  return target.pairs.contains({q.aspect, q.value}) ? Answer::yes : Answer::no;
}

// Ranks candidate items for a session; shown items are removed by the caller.
class Ranker {
 public:
  virtual ~Ranker() = default;
  virtual std::vector<ItemId> rank(const SessionState& state, std::span<const ItemId> candidates) const = 0;
};

class AvlemRanker : public Ranker {
 public:
  AvlemRanker(const ModelParams& params, const Corpus& corpus, bool use_feedback = true)
      : params_(params), corpus_(corpus), use_feedback_(use_feedback), mean_user_(mean_user(params)) {}

  std::vector<ScoredItem> score(const SessionState& s, std::span<const ItemId> candidates) const {
    const std::span<const double> u = s.anonymous ? std::span<const double>(mean_user_) : params_.user(s.user);
    static const FeedbackSet kEmpty;
    return rank_items(u, s.query, use_feedback_ ? s.feedback : kEmpty, candidates, params_,
                      corpus_.aspects);
  }

  std::vector<ItemId> rank(const SessionState& s, std::span<const ItemId> candidates) const override {
    std::vector<ItemId> out;
    for (const auto& x : score(s, candidates)) out.push_back(x.item);
    return out;
  }

 private:
  const ModelParams& params_;
  const Corpus& corpus_;
  bool use_feedback_;
  Vec mean_user_;
};

inline std::vector<ItemId> remaining_candidates(const SessionState& s, std::span<const ItemId> candidates) {
  std::set<ItemId> shown(s.shown.begin(), s.shown.end());
  std::vector<ItemId> out;
  for (auto i : candidates)
    if (!shown.contains(i)) out.push_back(i);
  return out;
}

// Marks the questions asked and merges answers allowed by `mode`. Returns
// the number of answers merged into feedback.
inline std::size_t apply_answers(SessionState& s, std::span<const Question> questions,
                                 std::span<const Answer> answers, FeedbackMode mode = FeedbackMode::all) {
  require(questions.size() == answers.size(), "answers do not match the posed questions");
  std::size_t used = 0;
  for (std::size_t k = 0; k < questions.size(); ++k) {
    const std::pair key{questions[k].aspect, questions[k].value};
    require(!s.asked.contains(key), "question asked twice in one session");
    s.asked.insert(key);
    if (answers[k] == Answer::yes && mode != FeedbackMode::negative_only) {
      s.feedback.add_positive(key);
      ++used;
    } else if (answers[k] == Answer::no && mode != FeedbackMode::positive_only) {
      s.feedback.add_negative(key);
      ++used;
    }
  }
  return used;
}

// Ranks the unshown candidates and shows the top one. Returns the full
// reranked remainder (before the new item is appended to `shown`).
inline std::vector<ItemId> show_next(SessionState& s, const Ranker& ranker, std::span<const ItemId> candidates,
                                     std::size_t budget, const std::set<ItemId>* relevant = nullptr) {
  require(!s.finished, "session is finished");
  auto rest = ranker.rank(s, remaining_candidates(s, candidates));
  if (rest.empty()) {
    s.finished = true;
    return rest;
  }
  s.shown.push_back(rest.front());
  if (s.shown.size() >= budget || (relevant && relevant->contains(rest.front()))) s.finished = true;
  return rest;
}

inline SessionState start_session(UserId user, std::vector<WordId> query, bool anonymous = false) {
  require(!query.empty(), "empty query");
  SessionState s;
  s.user = user;
  s.anonymous = anonymous;
  s.query = std::move(query);
  return s;
}

// One conversation turn: merge answers to the pending questions, then show
// the next item.
inline SessionState advance_session(SessionState s, std::span<const Question> questions,
                                    std::span<const Answer> answers, const Ranker& ranker,
                                    std::span<const ItemId> candidates, std::size_t budget,
                                    const std::set<ItemId>* relevant = nullptr,
                                    FeedbackMode mode = FeedbackMode::all) {
  apply_answers(s, questions, answers, mode);
  show_next(s, ranker, candidates, budget, relevant);
  return s;
}

inline std::vector<ItemId> all_items(const Corpus& corpus) {
  std::vector<ItemId> out(corpus.num_items());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<ItemId>(i);
  return out;
}

}  // namespace avlem
