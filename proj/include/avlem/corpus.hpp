#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "avlem/common.hpp"
#include "avlem/stopwords.hpp"

namespace avlem {

// Dense string <-> id table with per-entry occurrence counts.
class Vocab {
 public:
  std::uint32_t add(std::string_view token, std::uint64_t count = 1) {
    auto it = id_of_.find(std::string(token));
    if (it != id_of_.end()) {
      counts_[it->second] += count;
      return it->second;
    }
    const auto id = static_cast<std::uint32_t>(entries_.size());
    entries_.emplace_back(token);
    counts_.push_back(count);
    id_of_.emplace(entries_.back(), id);
    return id;
  }

  std::optional<std::uint32_t> find(std::string_view token) const {
    auto it = id_of_.find(std::string(token));
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
  }

  std::uint32_t id_of(std::string_view token) const {
    auto id = find(token);
    if (!id) throw Error("unknown token '" + std::string(token) + "'");
    return *id;
  }

  const std::string& token(std::uint32_t id) const { return entries_.at(id); }
  std::uint64_t count(std::uint32_t id) const { return counts_.at(id); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total_count() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.entries_ == b.entries_ && a.counts_ == b.counts_;
  }

 private:
  std::vector<std::string> entries_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::uint32_t> id_of_;
};

struct Review {
  UserId user = 0;
  ItemId item = 0;
  std::vector<WordId> tokens;
  friend bool operator==(const Review&, const Review&) = default;
};

struct AspectValuePair {
  ItemId item = 0;
  AspectId aspect = 0;
  ValueId value = 0;
  std::uint64_t mentions = 0;
  friend bool operator==(const AspectValuePair&, const AspectValuePair&) = default;
};

using CategoryPath = std::vector<std::string>;

struct Corpus {
  Vocab users;  // counts = number of reviews
  Vocab items;  // counts = number of reviews
  std::vector<Review> reviews;
  Vocab review_vocab;
  Vocab aspect_word_vocab;  // counts = catalog pairs whose aspect uses the word
  Vocab value_vocab;        // counts = catalog pairs with the value

  // An aspect is its normalized aspect-word sequence.
  std::vector<std::vector<WordId>> aspects;
  std::map<std::vector<WordId>, AspectId> aspect_index;
  std::vector<AspectValuePair> av_catalog;
  std::map<std::tuple<ItemId, AspectId, ValueId>, std::size_t> av_pair_index;

  std::vector<std::vector<CategoryPath>> item_categories;  // raw metadata, per item
  std::vector<std::vector<WordId>> queries;                // distinct queries
  std::vector<std::vector<QueryId>> item_queries;          // per item

  std::size_t num_users() const { return users.size(); }
  std::size_t num_items() const { return items.size(); }
  std::size_t num_aspects() const { return aspects.size(); }
  std::size_t num_values() const { return value_vocab.size(); }

  // Catalog rows of one item, in catalog order.
  std::vector<const AspectValuePair*> item_av(ItemId item) const {
    std::vector<const AspectValuePair*> out;
    if (item_av_index_.size() == num_items()) {
      for (auto k : item_av_index_[item]) out.push_back(&av_catalog[k]);
      return out;
    }
    for (const auto& p : av_catalog)
      if (p.item == item) out.push_back(&p);
    return out;
  }

  std::string aspect_text(AspectId a) const {
    std::vector<std::string> words;
    for (auto w : aspects.at(a)) words.push_back(aspect_word_vocab.token(w));
    return join(words);
  }

  std::string query_text(QueryId q) const {
    std::vector<std::string> words;
    for (auto w : queries.at(q)) words.push_back(review_vocab.token(w));
    return join(words);
  }

  void reindex() {
    item_av_index_.assign(num_items(), {});
    for (std::size_t k = 0; k < av_catalog.size(); ++k)
      item_av_index_[av_catalog[k].item].push_back(k);
    if (item_categories.size() < num_items()) item_categories.resize(num_items());
    if (item_queries.size() < num_items()) item_queries.resize(num_items());
  }

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.users == b.users && a.items == b.items && a.reviews == b.reviews &&
           a.review_vocab == b.review_vocab && a.aspect_word_vocab == b.aspect_word_vocab &&
           a.value_vocab == b.value_vocab && a.aspects == b.aspects &&
           a.av_catalog == b.av_catalog && a.item_categories == b.item_categories &&
           a.queries == b.queries && a.item_queries == b.item_queries;
  }

 private:
  std::vector<std::vector<std::size_t>> item_av_index_;
};

enum class SourceFormat { canonical, amazon };

inline SourceFormat parse_source_format(std::string_view s) {
  if (s == "canonical") return SourceFormat::canonical;
  if (s == "amazon") return SourceFormat::amazon;
  throw Error("unknown format '" + std::string(s) + "' (expected canonical|amazon)");
}

struct IngestStats {
  std::size_t lines = 0;
  std::size_t dropped_empty = 0;
  std::size_t skipped_multiword_value = 0;
  std::size_t skipped_unknown_item = 0;
  std::size_t merged_duplicates = 0;
};

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

inline std::string json_string(const nlohmann::json& rec, const char* key,
                               const std::filesystem::path& path, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end() || !it->is_string())
    throw Error(path.string() + ":" + std::to_string(line) + ": missing string field '" +
                key + "'");
  return it->get<std::string>();
}

inline nlohmann::json parse_json_line(const std::string& text,
                                      const std::filesystem::path& path, std::size_t line) {
  try {
    auto rec = nlohmann::json::parse(text);
    if (!rec.is_object()) throw Error("not an object");
    return rec;
  } catch (const std::exception& e) {
    throw Error(path.string() + ":" + std::to_string(line) + ": malformed record: " + e.what());
  }
}

inline bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace detail

// Reads a JSON-lines review file. Reviews that tokenize to nothing are dropped
// and counted in `stats`.
inline Corpus ingest_reviews(const std::filesystem::path& path, SourceFormat format,
                             IngestStats* stats = nullptr) {
  const char* user_key = format == SourceFormat::amazon ? "reviewerID" : "user";
  const char* item_key = format == SourceFormat::amazon ? "asin" : "item";
  const char* text_key = format == SourceFormat::amazon ? "reviewText" : "text";

  Corpus corpus;
  IngestStats local;
  auto in = detail::open_input(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    ++local.lines;
    auto rec = detail::parse_json_line(line, path, lineno);
    auto user = detail::json_string(rec, user_key, path, lineno);
    auto item = detail::json_string(rec, item_key, path, lineno);
    auto text = detail::json_string(rec, text_key, path, lineno);
    auto words = tokenize(text);
    if (words.empty()) {
      ++local.dropped_empty;
      continue;
    }
    Review r;
    r.user = corpus.users.add(user);
    r.item = corpus.items.add(item);
    r.tokens.reserve(words.size());
    for (const auto& w : words) r.tokens.push_back(corpus.review_vocab.add(w));
    corpus.reviews.push_back(std::move(r));
  }
  if (corpus.reviews.empty()) throw Error(path.string() + ": no usable reviews");
  corpus.reindex();
  if (stats) *stats = local;
  return corpus;
}

// Category paths -> queries: concatenate levels, tokenize, drop stopwords and
// repeated words (first occurrence wins). Identical results collapse to one.
inline std::vector<std::vector<std::string>> extract_queries(
    const std::vector<CategoryPath>& paths, const StopwordSet& stopwords) {
  std::vector<std::vector<std::string>> out;
  for (const auto& path : paths) {
    std::vector<std::string> query;
    std::set<std::string> seen;
    for (const auto& level : path)
      for (auto& tok : tokenize(level))
        if (!stopwords.contains(tok) && seen.insert(tok).second) query.push_back(tok);
    if (query.empty()) continue;
    if (std::find(out.begin(), out.end(), query) == out.end()) out.push_back(std::move(query));
  }
  return out;
}

// Registers category paths for an item and rebuilds its queries. Query terms
// outside the review vocabulary are dropped.
inline void set_item_categories(Corpus& corpus, ItemId item, std::vector<CategoryPath> paths,
                                const StopwordSet& stopwords) {
  corpus.reindex();
  corpus.item_categories[item] = std::move(paths);
  corpus.item_queries[item].clear();
  for (const auto& words : extract_queries(corpus.item_categories[item], stopwords)) {
    std::vector<WordId> ids;
    for (const auto& w : words)
      if (auto id = corpus.review_vocab.find(w)) ids.push_back(*id);
    if (ids.empty()) continue;
    auto it = std::find(corpus.queries.begin(), corpus.queries.end(), ids);
    QueryId q;
    if (it == corpus.queries.end()) {
      q = static_cast<QueryId>(corpus.queries.size());
      corpus.queries.push_back(ids);
    } else {
      q = static_cast<QueryId>(it - corpus.queries.begin());
    }
    auto& iq = corpus.item_queries[item];
    if (std::find(iq.begin(), iq.end(), q) == iq.end()) iq.push_back(q);
  }
}

// Item metadata: JSON-lines {"item", "categories": [[...], ...]} (amazon: "asin").
// Unknown items are skipped and counted.
inline IngestStats ingest_metadata(Corpus& corpus, const std::filesystem::path& path,
                                   SourceFormat format,
                                   const StopwordSet& stopwords = default_stopwords()) {
  const char* item_key = format == SourceFormat::amazon ? "asin" : "item";
  IngestStats stats;
  auto in = detail::open_input(path);
  std::string line;
  std::size_t lineno = 0;
  corpus.reindex();
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    ++stats.lines;
    auto rec = detail::parse_json_line(line, path, lineno);
    auto name = detail::json_string(rec, item_key, path, lineno);
    auto item = corpus.items.find(name);
    if (!item) {
      ++stats.skipped_unknown_item;
      continue;
    }
    std::vector<CategoryPath> paths;
    auto cats = rec.find("categories");
    if (cats != rec.end()) {
      if (!cats->is_array())
        throw Error(path.string() + ":" + std::to_string(lineno) + ": categories must be a list");
      for (const auto& p : *cats) {
        if (!p.is_array())
          throw Error(path.string() + ":" + std::to_string(lineno) +
                      ": each category path must be a list of strings");
        CategoryPath cp;
        for (const auto& level : p) cp.push_back(level.get<std::string>());
        paths.push_back(std::move(cp));
      }
    }
    set_item_categories(corpus, *item, std::move(paths), stopwords);
  }
  return stats;
}

// Adds one catalog row. Returns false when the row is rejected (multi-word or
// empty value, empty aspect). Duplicate (item, aspect, value) rows merge.
inline bool add_aspect_value(Corpus& corpus, ItemId item, std::string_view aspect_phrase,
                             std::string_view value_text, std::uint64_t mentions,
                             IngestStats* stats = nullptr) {
  auto value_words = tokenize(value_text);
  auto aspect_words = tokenize(aspect_phrase);
  if (value_words.size() != 1 || aspect_words.empty()) {
    if (stats) ++stats->skipped_multiword_value;
    return false;
  }
  std::vector<WordId> aspect_key;
  std::vector<std::optional<WordId>> known;
  for (const auto& w : aspect_words) known.push_back(corpus.aspect_word_vocab.find(w));
  auto value_known = corpus.value_vocab.find(value_words[0]);

  // Look up an existing pair before touching the vocabularies.
  if (value_known && std::all_of(known.begin(), known.end(), [](auto& k) { return k.has_value(); })) {
    for (auto& k : known) aspect_key.push_back(*k);
    auto ait = corpus.aspect_index.find(aspect_key);
    if (ait != corpus.aspect_index.end()) {
      auto pit = corpus.av_pair_index.find({item, ait->second, *value_known});
      if (pit != corpus.av_pair_index.end()) {
        corpus.av_catalog[pit->second].mentions += mentions;
        if (stats) ++stats->merged_duplicates;
        return true;
      }
    }
    aspect_key.clear();
  }
  for (const auto& w : aspect_words) aspect_key.push_back(corpus.aspect_word_vocab.add(w));
  AspectId aspect;
  auto ait = corpus.aspect_index.find(aspect_key);
  if (ait == corpus.aspect_index.end()) {
    aspect = static_cast<AspectId>(corpus.aspects.size());
    corpus.aspects.push_back(aspect_key);
    corpus.aspect_index.emplace(aspect_key, aspect);
  } else {
    aspect = ait->second;
  }
  const ValueId value = corpus.value_vocab.add(value_words[0]);
  corpus.av_pair_index.emplace(std::make_tuple(item, aspect, value), corpus.av_catalog.size());
  corpus.av_catalog.push_back({item, aspect, value, mentions});
  return true;
}

// TSV rows: item \t aspect phrase \t value \t mentions.
inline IngestStats ingest_aspect_values(Corpus& corpus, const std::filesystem::path& path) {
  IngestStats stats;
  auto in = detail::open_input(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::blank(line)) continue;
    ++stats.lines;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    std::uint64_t mentions = 0;
    try {
      std::size_t used = 0;
      const long long m = std::stoll(fields[3], &used);
      if (m < 0 || used != fields[3].size()) throw Error("bad");
      mentions = static_cast<std::uint64_t>(m);
    } catch (const std::exception&) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": bad mention count '" +
                  fields[3] + "'");
    }
    auto trimmed = fields[2];
    trimmed.erase(0, trimmed.find_first_not_of(" \t"));
    trimmed.erase(trimmed.find_last_not_of(" \t") + 1);
    if (trimmed.find_first_of(" \t") != std::string::npos) {
      ++stats.skipped_multiword_value;
      continue;
    }
    auto name = fields[0];
    name.erase(0, name.find_first_not_of(' '));
    name.erase(name.find_last_not_of(' ') + 1);
    auto item = corpus.items.find(name);
    if (!item) {
      ++stats.skipped_unknown_item;
      continue;
    }
    add_aspect_value(corpus, *item, fields[1], trimmed, mentions, &stats);
  }
  corpus.reindex();
  return stats;
}

// Plumbing extractor: counts, per item, reviews in which a lexicon value word
// occurs within `window` tokens of a lexicon aspect phrase.
inline std::size_t extract_cooccurrence_pairs(Corpus& corpus,
                                              const std::vector<std::string>& aspect_phrases,
                                              const std::vector<std::string>& value_words,
                                              std::size_t window = 2) {
  struct Key {
    ItemId item;
    std::size_t aspect, value;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, std::uint64_t> counts;
  std::vector<std::vector<std::optional<WordId>>> aspect_ids;
  for (const auto& a : aspect_phrases) {
    std::vector<std::optional<WordId>> ids;
    for (const auto& w : tokenize(a)) ids.push_back(corpus.review_vocab.find(w));
    aspect_ids.push_back(std::move(ids));
  }
  std::vector<std::optional<WordId>> value_ids;
  for (const auto& v : value_words) value_ids.push_back(corpus.review_vocab.find(v));

  for (const auto& r : corpus.reviews) {
    std::set<Key> found;
    const auto& t = r.tokens;
    for (std::size_t ai = 0; ai < aspect_ids.size(); ++ai) {
      const auto& phrase = aspect_ids[ai];
      if (phrase.empty() || std::any_of(phrase.begin(), phrase.end(),
                                        [](auto& x) { return !x.has_value(); }))
        continue;
      for (std::size_t s = 0; s + phrase.size() <= t.size(); ++s) {
        bool match = true;
        for (std::size_t k = 0; k < phrase.size() && match; ++k) match = t[s + k] == *phrase[k];
        if (!match) continue;
        const std::size_t lo = s >= window ? s - window : 0;
        const std::size_t hi = std::min(t.size(), s + phrase.size() + window);
        for (std::size_t p = lo; p < hi; ++p) {
          if (p >= s && p < s + phrase.size()) continue;
          for (std::size_t vi = 0; vi < value_ids.size(); ++vi)
            if (value_ids[vi] && t[p] == *value_ids[vi]) found.insert({r.item, ai, vi});
        }
      }
    }
    for (const auto& k : found) ++counts[k];
  }
  std::size_t added = 0;
  for (const auto& [k, c] : counts)
    if (add_aspect_value(corpus, k.item, aspect_phrases[k.aspect], value_words[k.value], c))
      ++added;
  corpus.reindex();
  return added;
}

// ---------------------------------------------------------------------------
// Train/test split

struct TestPair {
  UserId user = 0;
  QueryId query = 0;
  std::vector<ItemId> relevant_items;  // sorted
  friend bool operator==(const TestPair&, const TestPair&) = default;
};

struct Split {
  std::uint64_t seed = 0;
  std::vector<std::size_t> train_reviews;  // sorted indices into Corpus::reviews
  std::vector<std::size_t> test_reviews;
  std::vector<char> query_in_test;  // per QueryId
  std::vector<TestPair> test_pairs;  // sorted by (user, query)

  bool is_test_query(QueryId q) const { return q < query_in_test.size() && query_in_test[q]; }
  friend bool operator==(const Split&, const Split&) = default;
};

namespace detail {

inline std::vector<TestPair> build_test_pairs(const Corpus& corpus, const Split& split) {
  std::map<std::pair<UserId, QueryId>, std::set<ItemId>> pairs;
  for (auto r : split.test_reviews) {
    const auto& rev = corpus.reviews[r];
    for (auto q : corpus.item_queries[rev.item])
      if (split.is_test_query(q)) pairs[{rev.user, q}].insert(rev.item);
  }
  std::vector<TestPair> out;
  for (auto& [key, items] : pairs)
    out.push_back({key.first, key.second, std::vector<ItemId>(items.begin(), items.end())});
  return out;
}

}  // namespace detail

// Per-user review split (a single-review user keeps it in training), then a
// query-level split with the move-back repair so every item keeps a training
// query.
inline Split split_train_test(const Corpus& corpus, std::uint64_t seed, double review_frac = 0.7,
                              double query_test_frac = 0.3) {
  require(!corpus.reviews.empty(), "split: corpus has no reviews");
  require(review_frac > 0.0 && review_frac <= 1.0, "split: review_frac must be in (0,1]");
  require(query_test_frac >= 0.0 && query_test_frac < 1.0,
          "split: query_test_frac must be in [0,1)");
  Rng rng(seed);
  Split split;
  split.seed = seed;

  std::vector<std::vector<std::size_t>> by_user(corpus.num_users());
  for (std::size_t k = 0; k < corpus.reviews.size(); ++k)
    by_user[corpus.reviews[k].user].push_back(k);
  for (auto& revs : by_user) {
    if (revs.empty()) continue;
    std::shuffle(revs.begin(), revs.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(review_frac * static_cast<double>(revs.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, revs.size());
    split.train_reviews.insert(split.train_reviews.end(), revs.begin(), revs.begin() + n_train);
    split.test_reviews.insert(split.test_reviews.end(), revs.begin() + n_train, revs.end());
  }
  std::sort(split.train_reviews.begin(), split.train_reviews.end());
  std::sort(split.test_reviews.begin(), split.test_reviews.end());

  const std::size_t nq = corpus.queries.size();
  std::vector<QueryId> order(nq);
  for (std::size_t q = 0; q < nq; ++q) order[q] = static_cast<QueryId>(q);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(query_test_frac * static_cast<double>(nq)));
  split.query_in_test.assign(nq, 0);
  for (std::size_t k = 0; k < n_test && k < nq; ++k) split.query_in_test[order[k]] = 1;

  for (std::size_t i = 0; i < corpus.num_items(); ++i) {
    const auto& qs = corpus.item_queries[i];
    if (qs.empty()) continue;
    const bool all_test =
        std::all_of(qs.begin(), qs.end(), [&](QueryId q) { return split.query_in_test[q] != 0; });
    if (all_test) split.query_in_test[qs[uniform_index(rng, qs.size())]] = 0;
  }
  split.test_pairs = detail::build_test_pairs(corpus, split);
  return split;
}

// ---------------------------------------------------------------------------
// Canonical files

struct CorpusFiles {
  static constexpr const char* reviews = "reviews.jsonl";
  static constexpr const char* metadata = "meta.jsonl";
  static constexpr const char* catalog = "av.tsv";
  static constexpr const char* split = "split.json";
};

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / CorpusFiles::reviews);
    if (!out) throw Error("cannot write " + (dir / CorpusFiles::reviews).string());
    for (const auto& r : corpus.reviews) {
      std::vector<std::string> words;
      for (auto w : r.tokens) words.push_back(corpus.review_vocab.token(w));
      nlohmann::ordered_json rec;
      rec["user"] = corpus.users.token(r.user);
      rec["item"] = corpus.items.token(r.item);
      rec["text"] = join(words);
      out << rec.dump() << '\n';
    }
  }
  {
    std::ofstream out(dir / CorpusFiles::metadata);
    if (!out) throw Error("cannot write " + (dir / CorpusFiles::metadata).string());
    for (std::size_t i = 0; i < corpus.num_items(); ++i) {
      nlohmann::ordered_json rec;
      rec["item"] = corpus.items.token(static_cast<ItemId>(i));
      rec["categories"] = i < corpus.item_categories.size() ? corpus.item_categories[i]
                                                            : std::vector<CategoryPath>{};
      out << rec.dump() << '\n';
    }
  }
  {
    std::ofstream out(dir / CorpusFiles::catalog);
    if (!out) throw Error("cannot write " + (dir / CorpusFiles::catalog).string());
    for (const auto& p : corpus.av_catalog)
      out << corpus.items.token(p.item) << '\t' << corpus.aspect_text(p.aspect) << '\t'
          << corpus.value_vocab.token(p.value) << '\t' << p.mentions << '\n';
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir,
                          SourceFormat format = SourceFormat::canonical,
                          const StopwordSet& stopwords = default_stopwords()) {
  auto corpus = ingest_reviews(dir / CorpusFiles::reviews, format);
  if (std::filesystem::exists(dir / CorpusFiles::metadata))
    ingest_metadata(corpus, dir / CorpusFiles::metadata, format, stopwords);
  if (std::filesystem::exists(dir / CorpusFiles::catalog))
    ingest_aspect_values(corpus, dir / CorpusFiles::catalog);
  corpus.reindex();
  return corpus;
}

inline nlohmann::ordered_json split_to_json(const Corpus& corpus, const Split& split) {
  nlohmann::ordered_json j;
  j["seed"] = split.seed;
  j["train_reviews"] = split.train_reviews;
  j["test_reviews"] = split.test_reviews;
  std::vector<QueryId> test_queries;
  for (std::size_t q = 0; q < split.query_in_test.size(); ++q)
    if (split.query_in_test[q]) test_queries.push_back(static_cast<QueryId>(q));
  j["test_queries"] = test_queries;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& tp : split.test_pairs) {
    nlohmann::ordered_json p;
    p["user"] = corpus.users.token(tp.user);
    p["query"] = tp.query;
    p["query_text"] = corpus.query_text(tp.query);
    std::vector<std::string> rel;
    for (auto i : tp.relevant_items) rel.push_back(corpus.items.token(i));
    p["relevant_items"] = rel;
    pairs.push_back(std::move(p));
  }
  j["test_pairs"] = std::move(pairs);
  return j;
}

inline void write_split(const Corpus& corpus, const Split& split,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << split_to_json(corpus, split).dump(1) << '\n';
}

inline Split read_split(const Corpus& corpus, const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error(path.string() + ": malformed split file: " + e.what());
  }
  Split split;
  split.seed = j.value("seed", std::uint64_t{0});
  split.train_reviews = j.at("train_reviews").get<std::vector<std::size_t>>();
  split.test_reviews = j.at("test_reviews").get<std::vector<std::size_t>>();
  for (auto r : split.train_reviews)
    require(r < corpus.reviews.size(), path.string() + ": review index out of range");
  for (auto r : split.test_reviews)
    require(r < corpus.reviews.size(), path.string() + ": review index out of range");
  split.query_in_test.assign(corpus.queries.size(), 0);
  for (auto q : j.at("test_queries").get<std::vector<QueryId>>()) {
    require(q < corpus.queries.size(), path.string() + ": query id out of range");
    split.query_in_test[q] = 1;
  }
  for (const auto& p : j.at("test_pairs")) {
    TestPair tp;
    tp.user = corpus.users.id_of(p.at("user").get<std::string>());
    tp.query = p.at("query").get<QueryId>();
    require(tp.query < corpus.queries.size(), path.string() + ": query id out of range");
    for (const auto& name : p.at("relevant_items")) tp.relevant_items.push_back(corpus.items.id_of(name.get<std::string>()));
    std::sort(tp.relevant_items.begin(), tp.relevant_items.end());
    split.test_pairs.push_back(std::move(tp));
  }
  return split;
}

}  // namespace avlem
