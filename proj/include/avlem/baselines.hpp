#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "avlem/common.hpp"
#include "avlem/conversation.hpp"
#include "avlem/corpus.hpp"
#include "avlem/model.hpp"

namespace avlem {

// Item documents are the concatenated training reviews of each item.
struct InvertedIndex {
  std::size_t num_docs = 0;
  std::vector<std::uint64_t> doc_len;
  std::uint64_t collection_len = 0;
  std::vector<std::uint64_t> df;  // per term
  std::vector<std::uint64_t> cf;  // collection term counts
  std::vector<std::vector<std::pair<ItemId, std::uint32_t>>> postings;  // ascending item
  std::vector<std::vector<std::pair<WordId, std::uint32_t>>> doc_terms;  // ascending term

  std::size_t vocab_size() const { return df.size(); }

  double avg_len() const {
    return num_docs ? static_cast<double>(collection_len) / static_cast<double>(num_docs) : 0.0;
  }

  std::uint32_t tf(WordId t, ItemId i) const {
    const auto& terms = doc_terms.at(i);
    auto it = std::lower_bound(terms.begin(), terms.end(), std::pair<WordId, std::uint32_t>{t, 0});
    return it != terms.end() && it->first == t ? it->second : 0;
  }

  double p_collection(WordId t) const {
    if (t >= cf.size() || collection_len == 0) return 0.0;
    return static_cast<double>(cf[t]) / static_cast<double>(collection_len);
  }
};

inline InvertedIndex build_index(const std::vector<std::vector<WordId>>& docs, std::size_t vocab_size) {
  InvertedIndex ix;
  ix.num_docs = docs.size();
  ix.doc_len.assign(docs.size(), 0);
  ix.df.assign(vocab_size, 0);
  ix.cf.assign(vocab_size, 0);
  ix.postings.assign(vocab_size, {});
  ix.doc_terms.assign(docs.size(), {});
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::map<WordId, std::uint32_t> tf;
    for (auto t : docs[d]) {
      require(t < vocab_size, "index: term id out of range");
      ++tf[t];
    }
    ix.doc_len[d] = docs[d].size();
    ix.collection_len += docs[d].size();
    for (auto [t, n] : tf) {
      ++ix.df[t];
      ix.cf[t] += n;
      ix.postings[t].push_back({static_cast<ItemId>(d), n});
      ix.doc_terms[d].push_back({t, n});
    }
  }
  return ix;
}

inline InvertedIndex build_index(const Corpus& corpus, const Split& split) {
  std::vector<std::vector<WordId>> docs(corpus.num_items());
  for (auto r : split.train_reviews) {
    const auto& rev = corpus.reviews[r];
    docs[rev.item].insert(docs[rev.item].end(), rev.tokens.begin(), rev.tokens.end());
  }
  return build_index(docs, corpus.review_vocab.size());
}

// ---------------------------------------------------------------------------
// BM25 and query likelihood

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

inline double bm25_idf(WordId t, const InvertedIndex& ix) {
  const double n = static_cast<double>(ix.num_docs);
  const double df = t < ix.df.size() ? static_cast<double>(ix.df[t]) : 0.0;
  return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

// Saturated term-frequency part of BM25 (without the IDF factor).
inline double bm25_tf_weight(double tf, ItemId i, const InvertedIndex& ix, const Bm25Params& p) {
  if (tf <= 0.0) return 0.0;
  const double avg = ix.avg_len();
  const double norm = avg > 0.0 ? static_cast<double>(ix.doc_len[i]) / avg : 1.0;
  return tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
}

inline double bm25_score(std::span<const WordId> query, ItemId i, const InvertedIndex& ix,
                         const Bm25Params& p = {}) {
  double s = 0.0;
  for (auto t : query) {
    if (t >= ix.vocab_size()) continue;
    const auto tf = ix.tf(t, i);
    if (tf) s += bm25_idf(t, ix) * bm25_tf_weight(tf, i, ix, p);
  }
  return s;
}

inline double ql_score(std::span<const WordId> query, ItemId i, const InvertedIndex& ix, double mu = 1500.0) {
  double s = 0.0;
  const double len = static_cast<double>(ix.doc_len.at(i));
  for (auto t : query) {
    const double pc = ix.p_collection(t);
    if (pc <= 0.0) continue;
    s += std::log((static_cast<double>(ix.tf(t, i)) + mu * pc) / (len + mu));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rocchio with negative feedback only, BM25 term weighting

using SparseVec = std::map<WordId, double>;

// Document vector: saturated tf weight per term. With the query vector
// idf * qtf, the dot product is exactly the BM25 score.
inline SparseVec doc_vector(ItemId i, const InvertedIndex& ix, const Bm25Params& p) {
  SparseVec v;
  for (auto [t, tf] : ix.doc_terms.at(i)) v[t] = bm25_tf_weight(tf, i, ix, p);
  return v;
}

inline SparseVec query_vector(std::span<const WordId> query, const InvertedIndex& ix) {
  SparseVec q;
  for (auto t : query)
    if (t < ix.vocab_size()) q[t] += bm25_idf(t, ix);
  return q;
}

// q - neg_weight * centroid(non-relevant document vectors)
inline SparseVec rocchio_query(std::span<const WordId> query, std::span<const ItemId> nonrel,
                               const InvertedIndex& ix, const Bm25Params& p, double neg_weight) {
  SparseVec q = query_vector(query, ix);
  if (nonrel.empty() || neg_weight == 0.0) return q;
  const double scale = neg_weight / static_cast<double>(nonrel.size());
  for (auto d : nonrel)
    for (const auto& [t, w] : doc_vector(d, ix, p)) q[t] -= scale * w;
  return q;
}

inline double vector_score(const SparseVec& q, ItemId i, const InvertedIndex& ix, const Bm25Params& p) {
  double s = 0.0;
  for (auto [t, tf] : ix.doc_terms.at(i)) {
    auto it = q.find(t);
    if (it != q.end()) s += it->second * bm25_tf_weight(tf, i, ix, p);
  }
  return s;
}

// Scores `candidates` (shown items must already be removed).
inline std::vector<ScoredItem> rocchio_rerank(std::span<const WordId> query, std::span<const ItemId> nonrel,
                                              std::span<const ItemId> candidates, const InvertedIndex& ix,
                                              double neg_weight, const Bm25Params& p = {}) {
  const auto q = rocchio_query(query, nonrel, ix, p, neg_weight);
  std::vector<ScoredItem> out;
  for (auto i : candidates) out.push_back({i, vector_score(q, i, ix, p)});
  sort_scored(out);
  return out;
}

// ---------------------------------------------------------------------------
// Negative topic models

struct NegTopicModel {
  std::vector<std::pair<WordId, double>> terms;  // probability descending
  bool degenerate = false;
};

struct NegModelParams {
  double background_weight = 0.5;  // fixed mixing weight of the collection model
  std::size_t top_n = 20;
  std::size_t em_iters = 20;
  double mu = 1500.0;
  double neg_doc_weight = 0.1;
};

// EM for a two-component mixture with a fixed collection background.
inline NegTopicModel estimate_negative_model(std::span<const ItemId> nonrel, const InvertedIndex& ix,
                                             double background_weight, std::size_t top_n,
                                             std::size_t em_iters) {
  require(!nonrel.empty(), "negative model: no non-relevant documents");
  require(background_weight >= 0.0 && background_weight < 1.0, "negative model: background weight in [0,1)");
  std::map<WordId, double> counts;
  for (auto d : nonrel)
    for (auto [t, tf] : ix.doc_terms.at(d)) counts[t] += tf;
  NegTopicModel model;
  if (counts.empty()) return model;
  double total = 0.0;
  for (auto& [t, c] : counts) total += c;
  std::map<WordId, double> p;
  for (auto& [t, c] : counts) p[t] = c / total;
  for (std::size_t it = 0; it < em_iters; ++it) {
    std::map<WordId, double> next;
    double z = 0.0;
    for (auto& [t, c] : counts) {
      const double neg = (1.0 - background_weight) * p[t];
      const double denom = neg + background_weight * ix.p_collection(t);
      const double e = denom > 0.0 ? c * neg / denom : 0.0;
      next[t] = e;
      z += e;
    }
    if (z <= 0.0) {
      for (auto& [t, c] : counts) p[t] = 1.0 / static_cast<double>(counts.size());
      model.degenerate = true;
      break;
    }
    for (auto& [t, e] : next) p[t] = e / z;
  }
  model.terms.assign(p.begin(), p.end());
  std::stable_sort(model.terms.begin(), model.terms.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (model.terms.size() > top_n) model.terms.resize(top_n);
  double z = 0.0;
  for (auto& [t, w] : model.terms) z += w;
  if (z > 0.0)
    for (auto& [t, w] : model.terms) w /= z;
  return model;
}

// Background-normalized cross entropy between the negative model and the
// item's Dirichlet-smoothed language model; zero when they share no term.
inline double negative_similarity(const NegTopicModel& neg, ItemId i, const InvertedIndex& ix, double mu) {
  double s = 0.0;
  for (auto [t, pn] : neg.terms) {
    const double pc = ix.p_collection(t);
    const auto tf = ix.tf(t, i);
    if (tf == 0 || pc <= 0.0) continue;
    s += pn * std::log1p(static_cast<double>(tf) / (mu * pc));
  }
  return s;
}

inline std::vector<ScoredItem> singleneg_rerank(std::span<const ScoredItem> initial, const NegTopicModel& neg,
                                                const InvertedIndex& ix, double mu, double neg_doc_weight) {
  std::vector<ScoredItem> out(initial.begin(), initial.end());
  for (auto& x : out) x.score -= neg_doc_weight * negative_similarity(neg, x.item, ix, mu);
  sort_scored(out);
  return out;
}

inline std::vector<ScoredItem> multineg_rerank(std::span<const ScoredItem> initial,
                                               std::span<const NegTopicModel> negs, const InvertedIndex& ix,
                                               double mu, double neg_doc_weight) {
  std::vector<ScoredItem> out(initial.begin(), initial.end());
  for (auto& x : out) {
    double worst = 0.0;
    for (const auto& neg : negs) worst = std::max(worst, negative_similarity(neg, x.item, ix, mu));
    x.score -= neg_doc_weight * worst;
  }
  sort_scored(out);
  return out;
}

// ---------------------------------------------------------------------------
// Rankers for the conversational protocol; shown items are the non-relevant
// feedback.

enum class BaselineKind { bm25, ql, rocchio, singleneg, multineg };

inline BaselineKind parse_baseline(std::string_view s) {
  if (s == "bm25") return BaselineKind::bm25;
  if (s == "ql") return BaselineKind::ql;
  if (s == "rocchio") return BaselineKind::rocchio;
  if (s == "singleneg") return BaselineKind::singleneg;
  if (s == "multineg") return BaselineKind::multineg;
  throw Error("unknown baseline '" + std::string(s) + "' (bm25|ql|rocchio|singleneg|multineg)");
}

inline const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::bm25: return "bm25";
    case BaselineKind::ql: return "ql";
    case BaselineKind::rocchio: return "rocchio";
    case BaselineKind::singleneg: return "singleneg";
    case BaselineKind::multineg: return "multineg";
  }
  return "";
}

struct BaselineParams {
  Bm25Params bm25;
  double rocchio_neg_weight = 0.5;
  NegModelParams neg;
};

class BaselineRanker : public Ranker {
 public:
  BaselineRanker(BaselineKind kind, const InvertedIndex& index, BaselineParams params = {})
      : kind_(kind), ix_(index), p_(params) {}

  std::vector<ScoredItem> score(const SessionState& s, std::span<const ItemId> candidates) const {
    std::vector<ScoredItem> out;
    switch (kind_) {
      case BaselineKind::bm25:
        for (auto i : candidates) out.push_back({i, bm25_score(s.query, i, ix_, p_.bm25)});
        break;
      case BaselineKind::rocchio:
        return rocchio_rerank(s.query, s.shown, candidates, ix_, p_.rocchio_neg_weight, p_.bm25);
      case BaselineKind::ql:
      case BaselineKind::singleneg:
      case BaselineKind::multineg: {
        for (auto i : candidates) out.push_back({i, ql_score(s.query, i, ix_, p_.neg.mu)});
        if (kind_ == BaselineKind::ql || s.shown.empty()) break;
        const auto& n = p_.neg;
        if (kind_ == BaselineKind::singleneg) {
          const auto model = estimate_negative_model(s.shown, ix_, n.background_weight, n.top_n, n.em_iters);
          return singleneg_rerank(out, model, ix_, n.mu, n.neg_doc_weight);
        }
        std::vector<NegTopicModel> models;
        for (auto d : s.shown) {
          const ItemId one[] = {d};
          models.push_back(estimate_negative_model(one, ix_, n.background_weight, n.top_n, n.em_iters));
        }
        return multineg_rerank(out, models, ix_, n.mu, n.neg_doc_weight);
      }
    }
    sort_scored(out);
    return out;
  }

  std::vector<ItemId> rank(const SessionState& s, std::span<const ItemId> candidates) const override {
    std::vector<ItemId> out;
    for (const auto& x : score(s, candidates)) out.push_back(x.item);
    return out;
  }

 private:
  BaselineKind kind_;
  const InvertedIndex& ix_;
  BaselineParams p_;
};

}  // namespace avlem
