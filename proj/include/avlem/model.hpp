#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "avlem/common.hpp"

namespace avlem {

struct ModelConfig {
  std::size_t dim = 64;
  double lambda = 0.5;
  bool use_aspect_net = true;
  bool use_value_net = true;
  bool use_negative_values = true;
  bool separate_negative_table = true;
  bool share_query_aspect_projection = false;

  bool has_negative_table() const {
    return use_value_net && use_negative_values && separate_negative_table;
  }
  bool uses_aspects() const { return use_aspect_net || use_value_net; }

  void validate() const {
    require(dim >= 1, "model: dim must be >= 1");
    require(lambda >= 0.0 && lambda <= 1.0, "model: lambda must be in [0,1]");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named configurations: the full model, the base model without aspect-value
// networks, and the four ablations.
enum class Variant { avlem, hem, no_aspect, no_value, no_negative, no_separate };

inline Variant parse_variant(std::string_view s) {
  if (s == "avlem") return Variant::avlem;
  if (s == "hem") return Variant::hem;
  if (s == "no-aspect") return Variant::no_aspect;
  if (s == "no-value") return Variant::no_value;
  if (s == "no-neg") return Variant::no_negative;
  if (s == "no-sep") return Variant::no_separate;
  throw Error("unknown model variant '" + std::string(s) +
              "' (expected avlem|hem|no-aspect|no-value|no-neg|no-sep)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::avlem: return "avlem";
    case Variant::hem: return "hem";
    case Variant::no_aspect: return "no-aspect";
    case Variant::no_value: return "no-value";
    case Variant::no_negative: return "no-neg";
    case Variant::no_separate: return "no-sep";
  }
  return "?";
}

inline ModelConfig apply_variant(ModelConfig cfg, Variant v) {
  cfg.use_aspect_net = cfg.use_value_net = cfg.use_negative_values = cfg.separate_negative_table = true;
  switch (v) {
    case Variant::avlem: break;
    case Variant::hem: cfg.use_aspect_net = cfg.use_value_net = false; break;
    case Variant::no_aspect: cfg.use_aspect_net = false; break;
    case Variant::no_value: cfg.use_value_net = false; break;
    case Variant::no_negative: cfg.use_negative_values = false; cfg.separate_negative_table = false; break;
    case Variant::no_separate: cfg.separate_negative_table = false; break;
  }
  return cfg;
}

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"dim", c.dim},
          {"lambda", c.lambda},
          {"use_aspect_net", c.use_aspect_net},
          {"use_value_net", c.use_value_net},
          {"use_negative_values", c.use_negative_values},
          {"separate_negative_table", c.separate_negative_table},
          {"share_query_aspect_projection", c.share_query_aspect_projection}};
}

// Keys absent from `j` keep their current value.
inline void merge_json(ModelConfig& c, const nlohmann::json& j) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("variant")) c = apply_variant(c, parse_variant(j.at("variant").get<std::string>()));
  get("dim", c.dim);
  get("lambda", c.lambda);
  get("use_aspect_net", c.use_aspect_net);
  get("use_value_net", c.use_value_net);
  get("use_negative_values", c.use_negative_values);
  get("separate_negative_table", c.separate_negative_table);
  get("share_query_aspect_projection", c.share_query_aspect_projection);
}

// Row-major dense table.
struct Table {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Table() = default;
  Table(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool empty() const { return rows == 0; }
  friend bool operator==(const Table&, const Table&) = default;
};

enum class TableId : std::uint8_t {
  word,
  user,
  item,
  aspect_word,
  value_pos,
  value_neg,
  query_w,
  query_b,
  aspect_w,
  aspect_b,
};
inline constexpr std::size_t kNumTables = 10;

inline const char* table_name(TableId t) {
  static constexpr std::array<const char*, kNumTables> names = {
      "word", "user", "item", "aspect_word", "value_pos",
      "value_neg", "query_W", "query_b", "aspect_W", "aspect_b"};
  return names[static_cast<std::size_t>(t)];
}

struct VocabSizes {
  std::size_t words = 0;
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t aspect_words = 0;
  std::size_t values = 0;
  friend bool operator==(const VocabSizes&, const VocabSizes&) = default;
};

struct ModelParams {
  ModelConfig config;
  VocabSizes sizes;
  // Indexed by TableId. Projections are stored d x d (W) and 1 x d (b);
  // value_neg is empty without a separate negative table and the aspect
  // projection is empty when shared with the query projection.
  std::array<Table, kNumTables> tables;

  Table& table(TableId t) { return tables[static_cast<std::size_t>(t)]; }
  const Table& table(TableId t) const { return tables[static_cast<std::size_t>(t)]; }

  std::span<const double> word(WordId w) const { return table(TableId::word).row(w); }
  std::span<const double> user(UserId u) const { return table(TableId::user).row(u); }
  std::span<const double> item(ItemId i) const { return table(TableId::item).row(i); }
  std::span<const double> value_pos(ValueId v) const { return table(TableId::value_pos).row(v); }
  std::span<const double> value_neg(ValueId v) const { return table(TableId::value_neg).row(v); }

  TableId aspect_w_id() const {
    return config.share_query_aspect_projection ? TableId::query_w : TableId::aspect_w;
  }
  TableId aspect_b_id() const {
    return config.share_query_aspect_projection ? TableId::query_b : TableId::aspect_b;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using Vec = std::vector<double>;

inline ModelParams make_params(const ModelConfig& config, const VocabSizes& sizes) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.sizes = sizes;
  const auto d = config.dim;
  p.table(TableId::word) = Table(sizes.words, d);
  p.table(TableId::user) = Table(sizes.users, d);
  p.table(TableId::item) = Table(sizes.items, d);
  p.table(TableId::query_w) = Table(d, d);
  p.table(TableId::query_b) = Table(1, d);
  if (config.uses_aspects()) {
    p.table(TableId::aspect_word) = Table(sizes.aspect_words, d);
    if (config.use_value_net) p.table(TableId::value_pos) = Table(sizes.values, d);
    if (config.has_negative_table()) p.table(TableId::value_neg) = Table(sizes.values, d);
    if (!config.share_query_aspect_projection) {
      p.table(TableId::aspect_w) = Table(d, d);
      p.table(TableId::aspect_b) = Table(1, d);
    }
  }
  return p;
}

// Every entry uniform in [-0.5/d, 0.5/d].
inline ModelParams init_params(const ModelConfig& config, const VocabSizes& sizes,
                               std::uint64_t seed) {
  auto p = make_params(config, sizes);
  Rng rng(seed);
  const double r = 0.5 / static_cast<double>(config.dim);
  std::uniform_real_distribution<double> dist(-r, r);
  for (auto& t : p.tables)
    for (auto& x : t.data) x = dist(rng);
  return p;
}

inline std::uint64_t checksum(const ModelParams& p) {
  std::uint64_t h = fnv1a(&p.config.dim, sizeof(p.config.dim));
  for (const auto& t : p.tables) {
    h = fnv1a(&t.rows, sizeof(t.rows), h);
    if (!t.data.empty()) h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
  }
  return h;
}

// tanh(W * mean(rows) + b) over rows of `emb`.
inline Vec project_mean(std::span<const WordId> tokens, const Table& emb, const Table& w,
                        const Table& b) {
  require(!tokens.empty(), "projection over an empty token list");
  const std::size_t d = emb.cols;
  Vec mean(d, 0.0);
  for (auto t : tokens) {
    require(t < emb.rows, "token id out of range");
    auto row = emb.row(t);
    for (std::size_t k = 0; k < d; ++k) mean[k] += row[k];
  }
  for (auto& x : mean) x /= static_cast<double>(tokens.size());
  Vec out(d);
  for (std::size_t r = 0; r < d; ++r) out[r] = std::tanh(dot(w.row(r), mean) + b.data[r]);
  return out;
}

inline Vec project_query(std::span<const WordId> tokens, const ModelParams& p) {
  return project_mean(tokens, p.table(TableId::word), p.table(TableId::query_w),
                      p.table(TableId::query_b));
}

inline Vec embed_aspect(std::span<const WordId> aspect_tokens, const ModelParams& p) {
  require(p.config.uses_aspects(), "model has no aspect tables");
  return project_mean(aspect_tokens, p.table(TableId::aspect_word), p.table(p.aspect_w_id()),
                      p.table(p.aspect_b_id()));
}

// Mean user embedding; the cold-start representation for anonymous users.
inline Vec mean_user(const ModelParams& p) {
  const auto& t = p.table(TableId::user);
  Vec out(t.cols, 0.0);
  if (t.rows == 0) return out;
  for (std::size_t u = 0; u < t.rows; ++u)
    for (std::size_t k = 0; k < t.cols; ++k) out[k] += t.row(u)[k];
  for (auto& x : out) x /= static_cast<double>(t.rows);
  return out;
}

// lambda * Q0 + (1 - lambda) * u
inline Vec mix_query_user(std::span<const double> q0, std::span<const double> user, double lambda) {
  Vec c(q0.size());
  for (std::size_t k = 0; k < c.size(); ++k) c[k] = lambda * q0[k] + (1.0 - lambda) * user[k];
  return c;
}

// Unnormalized item-generation logit; the softmax normalizer does not change
// the ranking for a fixed user and query.
inline double score_item_initial(std::span<const double> user, std::span<const double> q0,
                                 ItemId i, const ModelParams& p, double lambda) {
  return dot(p.item(i), mix_query_user(q0, user, lambda));
}

inline double score_item_initial(UserId u, std::span<const double> q0, ItemId i,
                                 const ModelParams& p, double lambda) {
  return score_item_initial(p.user(u), q0, i, p, lambda);
}

inline double prob_aspect(std::span<const double> aspect, ItemId i, const ModelParams& p) {
  return sigmoid(dot(aspect, p.item(i)));
}

enum class Polarity { positive, negative };

inline double value_logit(ValueId v, Polarity pol, std::span<const double> aspect, ItemId i,
                          const ModelParams& p) {
  const auto item = p.item(i);
  const auto emb = pol == Polarity::negative && p.config.has_negative_table() ? p.value_neg(v)
                                                                              : p.value_pos(v);
  double s = 0.0;
  for (std::size_t k = 0; k < item.size(); ++k) s += emb[k] * (item[k] + aspect[k]);
  return s;
}

inline double prob_value(ValueId v, Polarity pol, std::span<const double> aspect, ItemId i,
                         const ModelParams& p) {
  if (!p.config.use_value_net)
    throw Error("configuration error: value network disabled, no value probability available");
  const double x = value_logit(v, pol, aspect, i, p);
  if (pol == Polarity::positive || p.config.has_negative_table()) return sigmoid(x);
  return 1.0 - sigmoid(x);
}

// Answered aspect-value pairs of a session.
class FeedbackSet {
 public:
  using Pair = std::pair<AspectId, ValueId>;

  void add_positive(Pair pr) {
    require(!negative_.contains(pr), "feedback pair already marked negative");
    positive_.insert(pr);
  }
  void add_negative(Pair pr) {
    require(!positive_.contains(pr), "feedback pair already marked positive");
    negative_.insert(pr);
  }
  const std::set<Pair>& positive() const { return positive_; }
  const std::set<Pair>& negative() const { return negative_; }
  bool empty() const { return positive_.empty() && negative_.empty(); }
  std::size_t size() const { return positive_.size() + negative_.size(); }
  friend bool operator==(const FeedbackSet&, const FeedbackSet&) = default;

 private:
  std::set<Pair> positive_;
  std::set<Pair> negative_;
};

// A feedback pair with its aspect embedded once, ready for scoring.
struct EmbeddedPair {
  Vec aspect;
  ValueId value = 0;
  Polarity polarity = Polarity::positive;
};

inline std::vector<EmbeddedPair> embed_feedback(const FeedbackSet& fb,
                                                const std::vector<std::vector<WordId>>& aspects,
                                                const ModelParams& p) {
  std::vector<EmbeddedPair> out;
  if (!p.config.uses_aspects()) return out;
  for (const auto& [a, v] : fb.positive()) out.push_back({embed_aspect(aspects.at(a), p), v, Polarity::positive});
  for (const auto& [a, v] : fb.negative()) out.push_back({embed_aspect(aspects.at(a), p), v, Polarity::negative});
  return out;
}

// Per-pair log-probability contribution log(P(v|a,i) * P(a|i)); factors of
// disabled networks are omitted.
inline double feedback_term(const EmbeddedPair& pr, ItemId i, const ModelParams& p) {
  double s = 0.0;
  if (p.config.use_aspect_net) s += log_sigmoid(dot(pr.aspect, p.item(i)));
  if (p.config.use_value_net) {
    const double x = value_logit(pr.value, pr.polarity, pr.aspect, i, p);
    const bool flip = pr.polarity == Polarity::negative && !p.config.has_negative_table();
    s += flip ? log_sigmoid(-x) : log_sigmoid(x);
  }
  return s;
}

inline double score_item_feedback(std::span<const double> user, std::span<const double> q0,
                                  std::span<const EmbeddedPair> fb, ItemId i, const ModelParams& p) {
  double s = score_item_initial(user, q0, i, p, p.config.lambda);
  for (const auto& pr : fb) s += feedback_term(pr, i, p);
  if (!std::isfinite(s)) throw Error("non-finite score for item " + std::to_string(i));
  return s;
}

struct ScoredItem {
  ItemId item = 0;
  double score = 0.0;
  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

// Descending score, ties by ascending item id.
inline void sort_scored(std::vector<ScoredItem>& v) {
  std::sort(v.begin(), v.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
}

// O(m d |candidates|): aspect embeddings and value-aspect dot products are
// computed once per feedback pair.
inline std::vector<ScoredItem> rank_items(std::span<const double> user, std::span<const WordId> query,
                                          const FeedbackSet& fb, std::span<const ItemId> candidates,
                                          const ModelParams& p,
                                          const std::vector<std::vector<WordId>>& aspects) {
  const Vec q0 = project_query(query, p);
  const Vec c = mix_query_user(q0, user, p.config.lambda);
  const auto pairs = embed_feedback(fb, aspects, p);
  struct Prepared {
    const EmbeddedPair* pair;
    std::span<const double> value;
    double value_dot_aspect;
    bool flip;
  };
  std::vector<Prepared> prep;
  for (const auto& pr : pairs) {
    Prepared x{&pr, {}, 0.0, false};
    if (p.config.use_value_net) {
      const bool neg_table = pr.polarity == Polarity::negative && p.config.has_negative_table();
      x.value = neg_table ? p.value_neg(pr.value) : p.value_pos(pr.value);
      x.value_dot_aspect = dot(x.value, pr.aspect);
      x.flip = pr.polarity == Polarity::negative && !p.config.has_negative_table();
    }
    prep.push_back(x);
  }
  std::vector<ScoredItem> out;
  out.reserve(candidates.size());
  for (auto i : candidates) {
    const auto item = p.item(i);
    double s = dot(item, c);
    for (const auto& x : prep) {
      if (p.config.use_aspect_net) s += log_sigmoid(dot(x.pair->aspect, item));
      if (p.config.use_value_net) {
        const double z = dot(x.value, item) + x.value_dot_aspect;
        s += x.flip ? log_sigmoid(-z) : log_sigmoid(z);
      }
    }
    if (!std::isfinite(s)) throw Error("non-finite score for item " + std::to_string(i));
    out.push_back({i, s});
  }
  sort_scored(out);
  return out;
}

inline std::vector<ScoredItem> rank_items(UserId u, std::span<const WordId> query,
                                          const FeedbackSet& fb, std::span<const ItemId> candidates,
                                          const ModelParams& p,
                                          const std::vector<std::vector<WordId>>& aspects) {
  return rank_items(p.user(u), query, fb, candidates, p, aspects);
}

// ---------------------------------------------------------------------------
// Binary model file: magic, version, dim, lambda, flags, vocabulary sizes,
// then every non-empty table in TableId order as little-endian doubles.

inline constexpr std::array<char, 8> kModelMagic = {'A', 'V', 'L', 'E', 'M', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t k = 0; k < sizeof(T); ++k) out.put(static_cast<char>((u >> (8 * k)) & 0xff));
}

inline void put_f64(std::ostream& out, double x) { put_le(out, std::bit_cast<std::uint64_t>(x)); }

template <class T>
T get_le(std::istream& in) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t k = 0; k < sizeof(T); ++k) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw Error("model file truncated");
    u |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * k);
  }
  return static_cast<T>(u);
}

inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

inline std::uint32_t config_flags(const ModelConfig& c) {
  return (c.use_aspect_net ? 1u : 0u) | (c.use_value_net ? 2u : 0u) |
         (c.use_negative_values ? 4u : 0u) | (c.separate_negative_table ? 8u : 0u) |
         (c.share_query_aspect_projection ? 16u : 0u);
}

}  // namespace detail

inline void save_params(const ModelParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kModelMagic.data(), kModelMagic.size());
  detail::put_le<std::uint32_t>(out, kModelVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.config.dim));
  detail::put_f64(out, p.config.lambda);
  detail::put_le<std::uint32_t>(out, detail::config_flags(p.config));
  for (auto n : {p.sizes.words, p.sizes.users, p.sizes.items, p.sizes.aspect_words, p.sizes.values})
    detail::put_le<std::uint64_t>(out, n);
  for (const auto& t : p.tables)
    for (double x : t.data) detail::put_f64(out, x);
  if (!out) throw Error("write failed: " + path.string());
}

// Loads a model; when `expected` is given the vocabulary sizes must match.
inline ModelParams load_params(const std::filesystem::path& path,
                               const std::optional<VocabSizes>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kModelMagic) throw Error(path.string() + ": not a model file");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kModelVersion)
    throw Error(path.string() + ": unsupported model version " + std::to_string(version));
  ModelConfig cfg;
  cfg.dim = detail::get_le<std::uint32_t>(in);
  cfg.lambda = detail::get_f64(in);
  const auto flags = detail::get_le<std::uint32_t>(in);
  cfg.use_aspect_net = flags & 1u;
  cfg.use_value_net = flags & 2u;
  cfg.use_negative_values = flags & 4u;
  cfg.separate_negative_table = flags & 8u;
  cfg.share_query_aspect_projection = flags & 16u;
  VocabSizes sizes;
  sizes.words = detail::get_le<std::uint64_t>(in);
  sizes.users = detail::get_le<std::uint64_t>(in);
  sizes.items = detail::get_le<std::uint64_t>(in);
  sizes.aspect_words = detail::get_le<std::uint64_t>(in);
  sizes.values = detail::get_le<std::uint64_t>(in);
  if (expected && !(*expected == sizes))
    throw Error(path.string() + ": vocabulary sizes do not match the corpus (words " +
                std::to_string(sizes.words) + " vs " + std::to_string(expected->words) +
                ", users " + std::to_string(sizes.users) + " vs " + std::to_string(expected->users) +
                ", items " + std::to_string(sizes.items) + " vs " + std::to_string(expected->items) + ")");
  auto p = make_params(cfg, sizes);
  for (auto& t : p.tables)
    for (auto& x : t.data) x = detail::get_f64(in);
  if (in.peek() != std::char_traits<char>::eof()) throw Error(path.string() + ": trailing bytes");
  return p;
}

}  // namespace avlem
