#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "avlem/common.hpp"
#include "avlem/corpus.hpp"
#include "avlem/model.hpp"

namespace avlem {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr0 = 0.5;  // decays linearly to 0 over all steps
  double grad_clip = 5.0;
  std::size_t beta = 5;
  double l2_gamma = 0.0;
  double subsample_rate = 1e-5;  // <= 0 disables sub-sampling
  std::size_t nonrel_items_per_conv = 2;
  std::uint64_t seed = 1;
  // Each instance of a batch steps with lr / batch_size (mean-loss batches).
  bool scale_lr_by_batch = false;

  void validate() const {
    require(batch_size >= 1, "train: batch_size must be >= 1");
    require(lr0 >= 0.0, "train: lr0 must be >= 0");
    require(grad_clip > 0.0, "train: grad_clip must be > 0");
    require(beta >= 1, "train: beta must be >= 1");
    require(l2_gamma >= 0.0, "train: l2_gamma must be >= 0");
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr0", c.lr0},
          {"grad_clip", c.grad_clip},
          {"beta", c.beta},
          {"l2_gamma", c.l2_gamma},
          {"subsample_rate", c.subsample_rate},
          {"nonrel_items_per_conv", c.nonrel_items_per_conv},
          {"seed", c.seed},
          {"scale_lr_by_batch", c.scale_lr_by_batch}};
}

// Keys absent from `j` keep their current value.
inline void merge_json(TrainConfig& c, const nlohmann::json& j) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("lr0", c.lr0);
  get("grad_clip", c.grad_clip);
  get("beta", c.beta);
  get("l2_gamma", c.l2_gamma);
  get("subsample_rate", c.subsample_rate);
  get("nonrel_items_per_conv", c.nonrel_items_per_conv);
  get("seed", c.seed);
  get("scale_lr_by_batch", c.scale_lr_by_batch);
}

// ---------------------------------------------------------------------------
// Sampling

class Distribution {
 public:
  Distribution() = default;

  static Distribution uniform(std::size_t n) {
    Distribution d;
    d.prob_.assign(n, n ? 1.0 / static_cast<double>(n) : 0.0);
    d.uniform_ = true;
    return d;
  }

  // Unigram counts raised to `power`, normalized.
  static Distribution from_counts(std::span<const std::uint64_t> counts, double power = 0.75) {
    Distribution d;
    d.prob_.resize(counts.size());
    double z = 0.0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      d.prob_[k] = counts[k] ? std::pow(static_cast<double>(counts[k]), power) : 0.0;
      z += d.prob_[k];
    }
    require(z > 0.0, "sampling distribution has no mass");
    for (auto& p : d.prob_) p /= z;
    d.sampler_ = std::discrete_distribution<std::uint32_t>(d.prob_.begin(), d.prob_.end());
    return d;
  }

  std::uint32_t draw(Rng& rng) const {
    if (uniform_) return static_cast<std::uint32_t>(uniform_index(rng, prob_.size()));
    return sampler_(rng);
  }

  const std::vector<double>& prob() const { return prob_; }
  std::size_t size() const { return prob_.size(); }
  std::size_t support() const {
    return static_cast<std::size_t>(std::count_if(prob_.begin(), prob_.end(), [](double p) { return p > 0; }));
  }

 private:
  std::vector<double> prob_;
  bool uniform_ = false;
  mutable std::discrete_distribution<std::uint32_t> sampler_;
};

struct SamplingDists {
  Distribution word;    // training-review unigram^0.75
  Distribution item;    // uniform
  Distribution aspect;  // uniform
  Distribution value;   // uniform
  std::vector<double> word_freq;  // raw relative frequency, for sub-sampling

  static SamplingDists build(const Corpus& corpus, const Split& split) {
    std::vector<std::uint64_t> counts(corpus.review_vocab.size(), 0);
    for (auto r : split.train_reviews)
      for (auto w : corpus.reviews[r].tokens) ++counts[w];
    return from_counts(counts, corpus.num_items(), corpus.num_aspects(), corpus.num_values());
  }

  static SamplingDists from_counts(std::span<const std::uint64_t> word_counts, std::size_t items,
                                   std::size_t aspects, std::size_t values) {
    SamplingDists d;
    d.word = Distribution::from_counts(word_counts);
    d.item = Distribution::uniform(items);
    d.aspect = Distribution::uniform(aspects);
    d.value = Distribution::uniform(values);
    double total = 0.0;
    for (auto c : word_counts) total += static_cast<double>(c);
    d.word_freq.resize(word_counts.size());
    for (std::size_t k = 0; k < word_counts.size(); ++k)
      d.word_freq[k] = total > 0 ? static_cast<double>(word_counts[k]) / total : 0.0;
    return d;
  }
};

inline double subsample_keep_prob(double freq, double rate) {
  if (freq <= 0.0) return 1.0;
  return std::min(1.0, std::sqrt(rate / freq));
}

// Keeps word w with probability min(1, sqrt(rate / f(w))).
inline bool subsample_keep(WordId w, const SamplingDists& dists, double rate, Rng& rng) {
  require(rate > 0.0, "subsample rate must be > 0");
  const double p = subsample_keep_prob(dists.word_freq.at(w), rate);
  if (p >= 1.0) return true;
  return uniform01(rng) < p;
}

// beta i.i.d. draws from `dist`, rejecting ids in `exclude`.
inline std::vector<std::uint32_t> sample_negatives(const Distribution& dist,
                                                   std::span<const std::uint32_t> exclude,
                                                   std::size_t beta, Rng& rng) {
  std::size_t excluded_mass_ids = 0;
  std::set<std::uint32_t> ex(exclude.begin(), exclude.end());
  for (auto e : ex)
    if (e < dist.size() && dist.prob()[e] > 0) ++excluded_mass_ids;
  if (dist.support() <= excluded_mass_ids)
    throw Error("negative sampling: support exhausted by the exclusion set");
  std::vector<std::uint32_t> out;
  out.reserve(beta);
  while (out.size() < beta) {
    const auto x = dist.draw(rng);
    if (!ex.contains(x)) out.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training conversations and instances

struct AvTarget {
  AspectId aspect = 0;
  ValueId value = 0;
  std::vector<ValueId> non_values;  // sampled from S_v \ {value}
};

struct WordTarget {
  WordId word = 0;
  std::vector<WordId> negatives;
};

struct TrainInstance {
  UserId user = 0;
  ItemId item = 0;
  std::vector<WordId> query;
  std::vector<WordTarget> user_words;
  std::vector<WordTarget> item_words;
  std::vector<ItemId> item_negatives;
  std::vector<AspectId> aspects;           // A(i): aspects asked in the conversation
  std::vector<AspectId> aspect_negatives;  // sampled from S_a \ A(i)
  std::vector<AvTarget> positives;         // T+
  std::vector<AvTarget> negatives;         // T-
};

// One simulated training conversation before negative sampling.
struct TrainConversation {
  std::size_t review = 0;
  QueryId query = 0;
  std::vector<ItemId> nonrel_items;
  std::vector<std::pair<AspectId, ValueId>> positives;
  std::vector<std::pair<AspectId, ValueId>> negatives;
};

// Simulated answers of the purchased item to every catalog pair of the
// non-relevant items: same aspect and value -> positive, same aspect with a
// different value -> negative, unknown aspect -> no answer.
inline void simulate_training_feedback(const Corpus& corpus, ItemId purchased,
                                       std::span<const ItemId> nonrel, TrainConversation& conv) {
  std::set<AspectId> target_aspects;
  std::set<std::pair<AspectId, ValueId>> target_pairs;
  for (const auto* p : corpus.item_av(purchased)) {
    target_aspects.insert(p->aspect);
    target_pairs.insert({p->aspect, p->value});
  }
  std::set<std::pair<AspectId, ValueId>> pos, neg;
  for (auto j : nonrel)
    for (const auto* p : corpus.item_av(j)) {
      if (!target_aspects.contains(p->aspect)) continue;
      (target_pairs.contains({p->aspect, p->value}) ? pos : neg).insert({p->aspect, p->value});
    }
  conv.positives.assign(pos.begin(), pos.end());
  conv.negatives.assign(neg.begin(), neg.end());
}

// One conversation per (training review, training query of its item).
inline std::vector<TrainConversation> build_conversations(const Corpus& corpus, const Split& split,
                                                          const TrainConfig& cfg, Rng& rng) {
  std::vector<TrainConversation> out;
  for (auto r : split.train_reviews) {
    const auto& rev = corpus.reviews[r];
    for (auto q : corpus.item_queries[rev.item]) {
      if (split.is_test_query(q)) continue;
      TrainConversation conv;
      conv.review = r;
      conv.query = q;
      if (corpus.num_items() > 1) {
        const std::uint32_t excl[] = {rev.item};
        auto pool = Distribution::uniform(corpus.num_items());
        const auto n = std::min(cfg.nonrel_items_per_conv, corpus.num_items() - 1);
        std::set<ItemId> picked;
        while (picked.size() < n) picked.insert(sample_negatives(pool, excl, 1, rng)[0]);
        conv.nonrel_items.assign(picked.begin(), picked.end());
      }
      simulate_training_feedback(corpus, rev.item, conv.nonrel_items, conv);
      out.push_back(std::move(conv));
    }
  }
  return out;
}

inline TrainInstance sample_instance(const TrainConversation& conv, const Corpus& corpus,
                                     const SamplingDists& dists, const ModelConfig& mcfg,
                                     const TrainConfig& cfg, Rng& rng) {
  const auto& rev = corpus.reviews[conv.review];
  TrainInstance inst;
  inst.user = rev.user;
  inst.item = rev.item;
  inst.query = corpus.queries[conv.query];
  for (auto w : rev.tokens) {
    if (cfg.subsample_rate > 0 && !subsample_keep(w, dists, cfg.subsample_rate, rng)) continue;
    const std::uint32_t ex[] = {w};
    inst.user_words.push_back({w, sample_negatives(dists.word, ex, cfg.beta, rng)});
    inst.item_words.push_back({w, sample_negatives(dists.word, ex, cfg.beta, rng)});
  }
  const std::uint32_t item_ex[] = {rev.item};
  if (dists.item.size() > 1) inst.item_negatives = sample_negatives(dists.item, item_ex, cfg.beta, rng);

  if (!mcfg.uses_aspects()) return inst;
  std::set<AspectId> asked;
  for (auto& [a, v] : conv.positives) asked.insert(a);
  if (mcfg.use_negative_values)
    for (auto& [a, v] : conv.negatives) asked.insert(a);
  inst.aspects.assign(asked.begin(), asked.end());

  auto targets = [&](const std::vector<std::pair<AspectId, ValueId>>& pairs) {
    std::vector<AvTarget> out;
    for (auto [a, v] : pairs) {
      AvTarget t{a, v, {}};
      const std::uint32_t ex[] = {v};
      if (mcfg.use_value_net && dists.value.size() > 1)
        t.non_values = sample_negatives(dists.value, ex, cfg.beta, rng);
      out.push_back(std::move(t));
    }
    return out;
  };
  inst.positives = targets(conv.positives);
  if (mcfg.use_negative_values) inst.negatives = targets(conv.negatives);
  if (mcfg.use_aspect_net && dists.aspect.support() > inst.aspects.size())
    for (std::size_t k = 0; k < inst.aspects.size(); ++k)
      for (auto a : sample_negatives(dists.aspect, inst.aspects, cfg.beta, rng))
        inst.aspect_negatives.push_back(a);
  return inst;
}

// One epoch's worth of training instances, in conversation order.
inline std::vector<TrainInstance> build_train_conversations(const Split& split, const Corpus& corpus,
                                                            const SamplingDists& dists,
                                                            const ModelConfig& mcfg,
                                                            const TrainConfig& cfg, Rng& rng) {
  auto convs = build_conversations(corpus, split, cfg, rng);
  std::vector<TrainInstance> out;
  out.reserve(convs.size());
  for (const auto& c : convs) out.push_back(sample_instance(c, corpus, dists, mcfg, cfg, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

// Gradient rows keyed by (table, row), in first-touch order.
class SparseGrad {
 public:
  struct Key {
    TableId table;
    std::size_t row;
  };

  explicit SparseGrad(std::size_t dim = 0) : dim_(dim) {}

  std::span<double> row(TableId t, std::size_t r) {
    const auto key = (static_cast<std::uint64_t>(t) << 56) | static_cast<std::uint64_t>(r);
    auto [it, inserted] = index_.try_emplace(key, rows_.size());
    if (inserted) {
      keys_.push_back({t, r});
      rows_.emplace_back(dim_, 0.0);
    }
    return rows_[it->second];
  }

  const std::vector<Key>& keys() const { return keys_; }
  std::span<const double> row_at(std::size_t k) const { return rows_[k]; }
  std::span<double> row_at(std::size_t k) { return rows_[k]; }
  std::size_t size() const { return keys_.size(); }
  std::size_t dim() const { return dim_; }

  std::span<const double> find(TableId t, std::size_t r) const {
    const auto key = (static_cast<std::uint64_t>(t) << 56) | static_cast<std::uint64_t>(r);
    auto it = index_.find(key);
    if (it == index_.end()) return {};
    return rows_[it->second];
  }

  double norm() const {
    double s = 0.0;
    for (const auto& r : rows_)
      for (double x : r) s += x * x;
    return std::sqrt(s);
  }

  void scale(double f) {
    for (auto& r : rows_)
      for (auto& x : r) x *= f;
  }

 private:
  std::size_t dim_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<Key> keys_;
  std::vector<Vec> rows_;
};

enum class Term : std::size_t {
  item_generation,
  user_language,
  item_language,
  aspect_occurrence,
  aspect_nonoccurrence,
  positive_values,
  negative_values,
  l2,
};
inline constexpr std::size_t kNumTerms = 8;

inline const char* term_name(Term t) {
  static constexpr std::array<const char*, kNumTerms> names = {
      "item_generation", "user_language", "item_language", "aspect_occurrence",
      "aspect_nonoccurrence", "positive_values", "negative_values", "l2"};
  return names[static_cast<std::size_t>(t)];
}

struct LossResult {
  double loss = 0.0;
  std::array<double, kNumTerms> terms{};
  SparseGrad grad;
};

namespace detail {

inline void axpy(std::span<double> y, double a, std::span<const double> x) {
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += a * x[k];
}

// Rows contributing to the L2 term: every touched embedding row (projection
// matrices are not regularized).
inline bool regularized(TableId t) {
  return t != TableId::query_w && t != TableId::query_b && t != TableId::aspect_w &&
         t != TableId::aspect_b;
}

struct ProjectionCache {
  Vec mean;
  Vec out;
};

inline ProjectionCache forward_projection(std::span<const WordId> tokens, const Table& emb,
                                          const Table& w, const Table& b) {
  ProjectionCache c;
  const std::size_t d = emb.cols;
  c.mean.assign(d, 0.0);
  for (auto t : tokens) axpy(c.mean, 1.0, emb.row(t));
  for (auto& x : c.mean) x /= static_cast<double>(tokens.size());
  c.out.resize(d);
  for (std::size_t r = 0; r < d; ++r) c.out[r] = std::tanh(dot(w.row(r), c.mean) + b.data[r]);
  return c;
}

inline void backward_projection(std::span<const WordId> tokens, const ProjectionCache& c,
                                std::span<const double> grad_out, const Table& w, TableId emb_id,
                                TableId w_id, TableId b_id, SparseGrad& g) {
  const std::size_t d = c.out.size();
  Vec pre(d);
  for (std::size_t r = 0; r < d; ++r) pre[r] = grad_out[r] * (1.0 - c.out[r] * c.out[r]);
  for (std::size_t r = 0; r < d; ++r) axpy(g.row(w_id, r), pre[r], c.mean);
  axpy(g.row(b_id, 0), 1.0, pre);
  Vec grad_mean(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) axpy(grad_mean, pre[r], w.row(r));
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (auto t : tokens) axpy(g.row(emb_id, t), inv, grad_mean);
}

}  // namespace detail

// Negative log-likelihood of one training instance with its sparse gradient.
// `aspects` maps aspect ids to aspect-word ids.
inline LossResult loss_and_grads(const TrainInstance& inst, const ModelParams& p,
                                 const std::vector<std::vector<WordId>>& aspects, double l2_gamma) {
  const auto& cfg = p.config;
  const std::size_t d = cfg.dim;
  LossResult res{0.0, {}, SparseGrad(d)};
  auto& g = res.grad;
  auto& terms = res.terms;
  auto add_term = [&](Term t, double v) { terms[static_cast<std::size_t>(t)] += v; };

  // -log sigmoid(sign * x.y): accumulates into both rows' gradients.
  auto pair_term = [&](Term term, double sign, TableId tx, std::size_t rx, TableId ty, std::size_t ry) {
    const auto x = p.table(tx).row(rx);
    const auto y = p.table(ty).row(ry);
    const double s = dot(x, y);
    add_term(term, -log_sigmoid(sign * s));
    const double coef = -sign * sigmoid(-sign * s);
    detail::axpy(g.row(tx, rx), coef, y);
    detail::axpy(g.row(ty, ry), coef, x);
  };

  // Item generation: -log s(i.c) - sum log s(-i'.c), c = lambda Q0 + (1 - lambda) u.
  const auto qc = detail::forward_projection(inst.query, p.table(TableId::word),
                                             p.table(TableId::query_w), p.table(TableId::query_b));
  const Vec c = mix_query_user(qc.out, p.user(inst.user), cfg.lambda);
  Vec grad_c(d, 0.0);
  auto item_gen = [&](ItemId i, double sign) {
    const auto row = p.item(i);
    const double s = dot(row, c);
    add_term(Term::item_generation, -log_sigmoid(sign * s));
    const double coef = -sign * sigmoid(-sign * s);
    detail::axpy(g.row(TableId::item, i), coef, c);
    detail::axpy(grad_c, coef, row);
  };
  item_gen(inst.item, 1.0);
  for (auto j : inst.item_negatives) item_gen(j, -1.0);
  detail::axpy(g.row(TableId::user, inst.user), 1.0 - cfg.lambda, grad_c);
  Vec grad_q(d);
  for (std::size_t k = 0; k < d; ++k) grad_q[k] = cfg.lambda * grad_c[k];
  detail::backward_projection(inst.query, qc, grad_q, p.table(TableId::query_w), TableId::word,
                              TableId::query_w, TableId::query_b, g);

  // User and item language models with negative sampling.
  for (const auto& wt : inst.user_words) {
    pair_term(Term::user_language, 1.0, TableId::user, inst.user, TableId::word, wt.word);
    for (auto w : wt.negatives) pair_term(Term::user_language, -1.0, TableId::user, inst.user, TableId::word, w);
  }
  for (const auto& wt : inst.item_words) {
    pair_term(Term::item_language, 1.0, TableId::item, inst.item, TableId::word, wt.word);
    for (auto w : wt.negatives) pair_term(Term::item_language, -1.0, TableId::item, inst.item, TableId::word, w);
  }

  if (cfg.uses_aspects()) {
    const auto& item_row = p.item(inst.item);
    const auto& aw = p.table(TableId::aspect_word);
    const auto& w_a = p.table(p.aspect_w_id());
    const auto& b_a = p.table(p.aspect_b_id());
    std::map<AspectId, detail::ProjectionCache> cache;
    std::map<AspectId, Vec> grad_a;
    auto aspect_vec = [&](AspectId a) -> const Vec& {
      auto it = cache.find(a);
      if (it == cache.end()) {
        it = cache.emplace(a, detail::forward_projection(aspects.at(a), aw, w_a, b_a)).first;
        grad_a.emplace(a, Vec(d, 0.0));
      }
      return it->second.out;
    };
    // -log s(sign * a.i)
    auto aspect_item = [&](Term term, AspectId a, double sign) {
      const Vec& av = aspect_vec(a);
      const double s = dot(av, item_row);
      add_term(term, -log_sigmoid(sign * s));
      const double coef = -sign * sigmoid(-sign * s);
      detail::axpy(g.row(TableId::item, inst.item), coef, av);
      detail::axpy(grad_a[a], coef, item_row);
    };
    // -log s(sign * v.(i + a)) with v from `table`.
    auto value_item = [&](Term term, TableId table, ValueId v, AspectId a, double sign) {
      const Vec& av = aspect_vec(a);
      const auto vrow = p.table(table).row(v);
      Vec ipa(d);
      for (std::size_t k = 0; k < d; ++k) ipa[k] = item_row[k] + av[k];
      const double s = dot(vrow, ipa);
      add_term(term, -log_sigmoid(sign * s));
      const double coef = -sign * sigmoid(-sign * s);
      detail::axpy(g.row(table, v), coef, ipa);
      detail::axpy(g.row(TableId::item, inst.item), coef, vrow);
      detail::axpy(grad_a[a], coef, vrow);
    };

    for (const auto& t : inst.positives) {
      if (cfg.use_aspect_net) aspect_item(Term::aspect_occurrence, t.aspect, 1.0);
      if (cfg.use_value_net) {
        value_item(Term::positive_values, TableId::value_pos, t.value, t.aspect, 1.0);
        for (auto v : t.non_values) value_item(Term::positive_values, TableId::value_pos, v, t.aspect, -1.0);
      }
    }
    if (cfg.use_negative_values) {
      // Without a separate table P(v in V-) = 1 - s(v+.(i+a)) = s(-v+.(i+a)).
      const bool table_neg = cfg.has_negative_table();
      const TableId vt = table_neg ? TableId::value_neg : TableId::value_pos;
      const double occ = table_neg ? 1.0 : -1.0;
      for (const auto& t : inst.negatives) {
        if (cfg.use_aspect_net) aspect_item(Term::aspect_occurrence, t.aspect, 1.0);
        if (cfg.use_value_net) {
          value_item(Term::negative_values, vt, t.value, t.aspect, occ);
          for (auto v : t.non_values) value_item(Term::negative_values, vt, v, t.aspect, -occ);
        }
      }
    }
    if (cfg.use_aspect_net)
      for (auto a : inst.aspect_negatives) aspect_item(Term::aspect_nonoccurrence, a, -1.0);

    for (const auto& [a, pc] : cache)
      detail::backward_projection(aspects.at(a), pc, grad_a[a], w_a, TableId::aspect_word,
                                  p.aspect_w_id(), p.aspect_b_id(), g);
  }

  if (l2_gamma > 0.0) {
    const std::size_t n = g.size();
    for (std::size_t k = 0; k < n; ++k) {
      const auto key = g.keys()[k];
      if (!detail::regularized(key.table)) continue;
      const auto row = p.table(key.table).row(key.row);
      add_term(Term::l2, l2_gamma * dot(row, row));
      detail::axpy(g.row_at(k), 2.0 * l2_gamma, row);
    }
  }

  for (double t : terms) res.loss += t;
  if (!std::isfinite(res.loss)) {
    for (std::size_t k = 0; k < kNumTerms; ++k)
      if (!std::isfinite(terms[k]))
        throw Error(std::string("non-finite loss in term '") + term_name(static_cast<Term>(k)) +
                    "' (user " + std::to_string(inst.user) + ", item " + std::to_string(inst.item) + ")");
    throw Error("non-finite loss");
  }
  return res;
}

// Forward-only loss written against the model's probability functions; the
// reference for gradient checking.
inline double instance_loss(const TrainInstance& inst, const ModelParams& p,
                            const std::vector<std::vector<WordId>>& aspects, double l2_gamma) {
  const auto& cfg = p.config;
  std::set<std::pair<TableId, std::size_t>> touched;
  double loss = 0.0;
  const Vec q0 = project_query(inst.query, p);
  const Vec c = mix_query_user(q0, p.user(inst.user), cfg.lambda);
  for (auto w : inst.query) touched.insert({TableId::word, w});
  touched.insert({TableId::user, inst.user});
  touched.insert({TableId::item, inst.item});
  loss -= std::log(sigmoid(dot(p.item(inst.item), c)));
  for (auto j : inst.item_negatives) {
    loss -= std::log(1.0 - sigmoid(dot(p.item(j), c)));
    touched.insert({TableId::item, j});
  }
  auto lm = [&](TableId owner, std::size_t id, const std::vector<WordTarget>& targets) {
    for (const auto& wt : targets) {
      loss -= std::log(sigmoid(dot(p.table(owner).row(id), p.word(wt.word))));
      touched.insert({TableId::word, wt.word});
      for (auto w : wt.negatives) {
        loss -= std::log(1.0 - sigmoid(dot(p.table(owner).row(id), p.word(w))));
        touched.insert({TableId::word, w});
      }
    }
  };
  lm(TableId::user, inst.user, inst.user_words);
  lm(TableId::item, inst.item, inst.item_words);

  if (cfg.uses_aspects()) {
    auto touch_aspect = [&](AspectId a) {
      for (auto w : aspects.at(a)) touched.insert({TableId::aspect_word, w});
    };
    auto value_table = [&](Polarity pol) {
      return pol == Polarity::negative && cfg.has_negative_table() ? TableId::value_neg : TableId::value_pos;
    };
    auto entries = [&](const std::vector<AvTarget>& ts, Polarity pol) {
      for (const auto& t : ts) {
        const Vec a = embed_aspect(aspects.at(t.aspect), p);
        touch_aspect(t.aspect);
        if (cfg.use_aspect_net) loss -= std::log(prob_aspect(a, inst.item, p));
        if (cfg.use_value_net) {
          loss -= std::log(prob_value(t.value, pol, a, inst.item, p));
          touched.insert({value_table(pol), t.value});
          for (auto v : t.non_values) {
            loss -= std::log(1.0 - prob_value(v, pol, a, inst.item, p));
            touched.insert({value_table(pol), v});
          }
        }
      }
    };
    entries(inst.positives, Polarity::positive);
    if (cfg.use_negative_values) entries(inst.negatives, Polarity::negative);
    if (cfg.use_aspect_net)
      for (auto a : inst.aspect_negatives) {
        loss -= std::log(1.0 - prob_aspect(embed_aspect(aspects.at(a), p), inst.item, p));
        touch_aspect(a);
      }
  }
  if (l2_gamma > 0.0)
    for (const auto& [t, r] : touched) {
      const auto row = p.table(t).row(r);
      loss += l2_gamma * dot(row, row);
    }
  return loss;
}

// Clips the gradient to `clip` global norm, then params -= lr * grad.
// Returns the pre-clip norm.
inline double sgd_step(ModelParams& p, SparseGrad& grad, double lr, double clip) {
  require(lr >= 0.0, "sgd: negative learning rate");
  const double norm = grad.norm();
  if (norm > clip) grad.scale(clip / norm);
  for (std::size_t k = 0; k < grad.size(); ++k) {
    const auto key = grad.keys()[k];
    auto row = p.table(key.table).row(key.row);
    detail::axpy(row, -lr, grad.row_at(k));
  }
  return norm;
}

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_loss;  // mean instance loss per epoch
};

inline VocabSizes vocab_sizes(const Corpus& corpus) {
  return {corpus.review_vocab.size(), corpus.num_users(), corpus.num_items(),
          corpus.aspect_word_vocab.size(), corpus.value_vocab.size()};
}

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Reference-mode SGD: single-threaded and deterministic for a given seed.
// Instances of a batch are applied sequentially with step lr_t (divided by
// batch_size when scale_lr_by_batch), lr_t = lr0 * (1 - t / T) over T batches.
inline TrainResult train(const Corpus& corpus, const Split& split, const ModelConfig& mcfg,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  mcfg.validate();
  TrainResult res{init_params(mcfg, vocab_sizes(corpus), cfg.seed), {}};
  if (cfg.epochs == 0) return res;
  const auto dists = SamplingDists::build(corpus, split);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::size_t per_epoch = 0;
  for (auto r : split.train_reviews)
    for (auto q : corpus.item_queries[corpus.reviews[r].item])
      if (!split.is_test_query(q)) ++per_epoch;
  require(per_epoch > 0, "train: no training conversations (no training review has a training query)");
  const std::size_t batches_per_epoch = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(batches_per_epoch * cfg.epochs);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto instances = build_train_conversations(split, corpus, dists, mcfg, cfg, rng);
    std::shuffle(instances.begin(), instances.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < instances.size(); start += cfg.batch_size, ++step) {
      const double lr = cfg.lr0 * (1.0 - static_cast<double>(step) / total_steps);
      const std::size_t end = std::min(instances.size(), start + cfg.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        LossResult lr_res;
        try {
          lr_res = loss_and_grads(instances[k], res.params, corpus.aspects, cfg.l2_gamma);
        } catch (const Error& e) {
          std::string trace;
          for (double l : res.epoch_loss) trace += " " + std::to_string(l);
          throw Error(std::string("training diverged at epoch ") + std::to_string(epoch + 1) + ": " +
                      e.what() + "; loss trace:" + trace);
        }
        sum += lr_res.loss;
        const double step_lr = cfg.scale_lr_by_batch ? lr / static_cast<double>(cfg.batch_size) : lr;
        sgd_step(res.params, lr_res.grad, step_lr, cfg.grad_clip);
      }
    }
    const double mean = sum / static_cast<double>(instances.size());
    res.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  TableId worst_table = TableId::word;
  std::size_t worst_row = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

// Central differences on every scalar of every touched row, compared with
// `grad` (by default the analytic gradient of loss_and_grads).
inline GradCheckResult finite_difference_check(ModelParams p, const TrainInstance& inst,
                                               const std::vector<std::vector<WordId>>& aspects,
                                               double l2_gamma, double eps,
                                               const SparseGrad* grad = nullptr) {
  require(eps > 0.0, "finite differences: eps must be > 0");
  std::optional<LossResult> own;
  if (!grad) {
    own = loss_and_grads(inst, p, aspects, l2_gamma);
    grad = &own->grad;
  }
  GradCheckResult out;
  for (std::size_t k = 0; k < grad->size(); ++k) {
    const auto key = grad->keys()[k];
    auto row = p.table(key.table).row(key.row);
    const auto g = grad->row_at(k);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double orig = row[c];
      row[c] = orig + eps;
      const double up = instance_loss(inst, p, aspects, l2_gamma);
      row[c] = orig - eps;
      const double down = instance_loss(inst, p, aspects, l2_gamma);
      row[c] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(g[c], numeric);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst_table = key.table;
        out.worst_row = key.row;
      }
    }
  }
  return out;
}

// A random model and instance exercising every term that `cfg` enables.
struct GradCheckCase {
  ModelParams params;
  std::vector<std::vector<WordId>> aspects;
  TrainInstance instance;
};

inline GradCheckCase random_grad_check_case(const ModelConfig& cfg, std::uint64_t seed,
                                            std::size_t beta = 5, double scale = 0.5) {
  Rng rng(seed);
  VocabSizes sizes{30, 6, 12, 10, 15};
  GradCheckCase gc;
  gc.params = make_params(cfg, sizes);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& t : gc.params.tables)
    for (auto& x : t.data) x = dist(rng);
  const std::size_t n_aspects = 8;
  for (std::size_t a = 0; a < n_aspects; ++a) {
    std::vector<WordId> toks(1 + uniform_index(rng, 3));
    for (auto& w : toks) w = static_cast<WordId>(uniform_index(rng, sizes.aspect_words));
    gc.aspects.push_back(toks);
  }
  auto& inst = gc.instance;
  inst.user = static_cast<UserId>(uniform_index(rng, sizes.users));
  inst.item = static_cast<ItemId>(uniform_index(rng, sizes.items));
  inst.query.resize(1 + uniform_index(rng, 4));
  for (auto& w : inst.query) w = static_cast<WordId>(uniform_index(rng, sizes.words));
  auto draw_words = [&] {
    std::vector<WordId> v(beta);
    for (auto& w : v) w = static_cast<WordId>(uniform_index(rng, sizes.words));
    return v;
  };
  const std::size_t n_words = 1 + uniform_index(rng, 4);
  for (std::size_t k = 0; k < n_words; ++k) {
    const auto w = static_cast<WordId>(uniform_index(rng, sizes.words));
    inst.user_words.push_back({w, draw_words()});
    inst.item_words.push_back({w, draw_words()});
  }
  for (std::size_t k = 0; k < beta; ++k) {
    ItemId j;
    do j = static_cast<ItemId>(uniform_index(rng, sizes.items)); while (j == inst.item);
    inst.item_negatives.push_back(j);
  }
  if (!cfg.uses_aspects()) return gc;
  std::set<AspectId> asked;
  auto targets = [&](std::size_t n) {
    std::vector<AvTarget> out;
    for (std::size_t k = 0; k < n; ++k) {
      AvTarget t;
      t.aspect = static_cast<AspectId>(uniform_index(rng, 4));
      t.value = static_cast<ValueId>(uniform_index(rng, sizes.values));
      asked.insert(t.aspect);
      if (cfg.use_value_net)
        for (std::size_t b = 0; b < beta; ++b) {
          ValueId v;
          do v = static_cast<ValueId>(uniform_index(rng, sizes.values)); while (v == t.value);
          t.non_values.push_back(v);
        }
      out.push_back(std::move(t));
    }
    return out;
  };
  inst.positives = targets(1 + uniform_index(rng, 2));
  if (cfg.use_negative_values) inst.negatives = targets(1 + uniform_index(rng, 2));
  inst.aspects.assign(asked.begin(), asked.end());
  if (cfg.use_aspect_net)
    for (std::size_t k = 0; k < inst.aspects.size() * beta; ++k)
      inst.aspect_negatives.push_back(static_cast<AspectId>(4 + uniform_index(rng, n_aspects - 4)));
  return gc;
}

}  // namespace avlem
