#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "avlem/corpus.hpp"

namespace avlem {

// Sizes and mixture knobs of the planted-structure generator. The first six
// fields are the headline sizes; the rest shape the planted structure.
struct SynthConfig {
  std::size_t users = 50;
  std::size_t items = 200;
  std::size_t aspects = 20;
  std::size_t values = 30;
  std::size_t vocab = 500;
  std::size_t reviews_per_user = 12;  // target purchases per user

  std::size_t values_per_aspect = 4;
  std::size_t aspects_per_item = 4;
  std::size_t categories = 24;
  std::size_t category_groups = 4;
  std::size_t categories_per_item = 3;
  std::size_t aspects_per_category = 6;
  std::size_t groups_per_user = 0;         // category groups a user shops in; 0 = all
  std::size_t purchases_per_category = 0;  // per user and primary category; 0 = unlimited
  std::size_t review_length = 24;
  double item_word_rate = 0.3;       // share of review tokens drawn from item attributes
  double category_word_rate = 0.2;   // share drawn from the item's category names
  double user_word_rate = 0.3;       // share drawn from the reviewer's preferences
  std::uint64_t seed = 1;
};

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
  return {{"users", c.users},
          {"items", c.items},
          {"aspects", c.aspects},
          {"values", c.values},
          {"vocab", c.vocab},
          {"reviews_per_user", c.reviews_per_user},
          {"values_per_aspect", c.values_per_aspect},
          {"aspects_per_item", c.aspects_per_item},
          {"categories", c.categories},
          {"category_groups", c.category_groups},
          {"categories_per_item", c.categories_per_item},
          {"aspects_per_category", c.aspects_per_category},
          {"groups_per_user", c.groups_per_user},
          {"purchases_per_category", c.purchases_per_category},
          {"review_length", c.review_length},
          {"item_word_rate", c.item_word_rate},
          {"category_word_rate", c.category_word_rate},
          {"user_word_rate", c.user_word_rate},
          {"seed", c.seed}};
}

inline void merge_json(SynthConfig& c, const nlohmann::json& j) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("users", c.users);
  get("items", c.items);
  get("aspects", c.aspects);
  get("values", c.values);
  get("vocab", c.vocab);
  get("reviews_per_user", c.reviews_per_user);
  get("values_per_aspect", c.values_per_aspect);
  get("aspects_per_item", c.aspects_per_item);
  get("categories", c.categories);
  get("category_groups", c.category_groups);
  get("categories_per_item", c.categories_per_item);
  get("aspects_per_category", c.aspects_per_category);
  get("groups_per_user", c.groups_per_user);
  get("purchases_per_category", c.purchases_per_category);
  get("review_length", c.review_length);
  get("item_word_rate", c.item_word_rate);
  get("category_word_rate", c.category_word_rate);
  get("user_word_rate", c.user_word_rate);
  get("seed", c.seed);
}

// Planted ground truth, indexed by planted (generator-side) ids.
struct SyntheticTruth {
  // item -> aspect -> value
  std::vector<std::map<std::size_t, std::size_t>> item_attributes;
  std::vector<std::map<std::size_t, std::size_t>> user_preferences;
  std::vector<std::set<std::size_t>> user_groups;  // empty = every group
  std::vector<std::vector<std::size_t>> item_categories;  // primary category first
  std::vector<std::size_t> item_group;                    // group of the primary category
  std::vector<std::vector<std::size_t>> purchases;  // per user, planted item ids
  std::vector<std::string> item_names;
  std::vector<std::string> user_names;

  // Number of the user's preferred attributes the item carries.
  std::size_t matches(std::size_t user, std::size_t item) const {
    std::size_t n = 0;
    for (const auto& [a, v] : user_preferences[user]) {
      auto it = item_attributes[item].find(a);
      n += it != item_attributes[item].end() && it->second == v;
    }
    return n;
  }

  bool compatible(std::size_t user, std::size_t item) const {
    if (!user_groups.empty() && !user_groups[user].empty() &&
        !user_groups[user].contains(item_group[item]))
      return false;
    for (const auto& [a, v] : user_preferences[user]) {
      auto it = item_attributes[item].find(a);
      if (it != item_attributes[item].end() && it->second == v) return true;
    }
    return false;
  }
};

struct SyntheticData {
  Corpus corpus;
  Split split;
  SyntheticTruth truth;
};

namespace detail {

inline std::string numbered(const char* prefix, std::size_t k, int width = 0) {
  std::string n = std::to_string(k);
  if (static_cast<int>(n.size()) < width) n.insert(0, static_cast<std::size_t>(width) - n.size(), '0');
  return prefix + n;
}

inline std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> all(n);
  for (std::size_t j = 0; j < n; ++j) all[j] = j;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(n, k));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace detail

inline SyntheticData generate_synthetic(const SynthConfig& cfg) {
  require(cfg.items >= 2, "synth: need at least 2 items");
  require(cfg.aspects >= 1, "synth: need at least 1 aspect");
  require(cfg.values >= 2, "synth: need at least 2 values");
  require(cfg.users >= 1, "synth: need at least 1 user");
  require(cfg.reviews_per_user >= 1, "synth: reviews_per_user must be >= 1");
  require(cfg.values_per_aspect >= 1 && cfg.values_per_aspect <= cfg.values,
          "synth: values_per_aspect must be in [1, values]");
  require(cfg.aspects_per_item >= 1 && cfg.aspects_per_item <= cfg.aspects,
          "synth: aspects_per_item must be in [1, aspects]");
  require(cfg.categories >= 1 && cfg.category_groups >= 1, "synth: need categories");
  require(cfg.categories_per_item >= 1 && cfg.categories_per_item <= cfg.categories,
          "synth: categories_per_item must be in [1, categories]");
  require(cfg.review_length >= 1, "synth: review_length must be >= 1");
  require(cfg.item_word_rate >= 0 && cfg.category_word_rate >= 0 && cfg.user_word_rate >= 0 &&
              cfg.item_word_rate + cfg.category_word_rate + cfg.user_word_rate <= 1.0,
          "synth: word rates must be non-negative and sum to <= 1");

  Rng rng(cfg.seed);
  SyntheticTruth truth;

  // Surface forms. Every fourth aspect is a two-word phrase.
  std::vector<std::string> aspect_names(cfg.aspects);
  for (std::size_t a = 0; a < cfg.aspects; ++a)
    aspect_names[a] = detail::numbered("asp", a) + (a % 4 == 3 ? " size" : "");
  std::vector<std::string> value_names(cfg.values);
  for (std::size_t v = 0; v < cfg.values; ++v) value_names[v] = detail::numbered("val", v);
  std::vector<std::string> category_words(cfg.categories);
  for (std::size_t c = 0; c < cfg.categories; ++c) category_words[c] = detail::numbered("cat", c);

  std::vector<std::vector<std::size_t>> aspect_values(cfg.aspects);
  for (auto& vals : aspect_values) vals = detail::sample_distinct(rng, cfg.values, cfg.values_per_aspect);
  std::vector<std::vector<std::size_t>> category_aspects(cfg.categories);
  for (auto& as : category_aspects)
    as = detail::sample_distinct(rng, cfg.aspects, std::max(cfg.aspects_per_category, cfg.aspects_per_item));

  // Filler vocabulary tops the review vocabulary up to `vocab` word types.
  std::size_t named = cfg.aspects + cfg.values + cfg.categories + cfg.category_groups + 1;
  std::vector<std::string> filler{"store"};
  for (std::size_t k = 0; named + k < cfg.vocab || filler.size() < 8; ++k)
    filler.push_back(detail::numbered("w", k));
  // Zipf-like background weights.
  std::vector<double> filler_w(filler.size());
  for (std::size_t k = 0; k < filler.size(); ++k) filler_w[k] = 1.0 / static_cast<double>(k + 1);
  std::discrete_distribution<std::size_t> background(filler_w.begin(), filler_w.end());

  // Items.
  truth.item_attributes.resize(cfg.items);
  truth.item_categories.resize(cfg.items);
  for (std::size_t i = 0; i < cfg.items; ++i) {
    truth.item_names.push_back(detail::numbered("i", i, 4));
    const std::size_t primary = uniform_index(rng, cfg.categories);
    std::vector<std::size_t> cats{primary};
    std::vector<std::size_t> siblings;
    for (std::size_t c = 0; c < cfg.categories; ++c)
      if (c != primary && c % cfg.category_groups == primary % cfg.category_groups) siblings.push_back(c);
    if (siblings.size() + 1 < cfg.categories_per_item)
      for (std::size_t c = 0; c < cfg.categories; ++c)
        if (c != primary && c % cfg.category_groups != primary % cfg.category_groups) siblings.push_back(c);
    std::shuffle(siblings.begin(), siblings.end(), rng);
    for (std::size_t k = 0; k + 1 < cfg.categories_per_item && k < siblings.size(); ++k)
      cats.push_back(siblings[k]);
    truth.item_categories[i] = cats;
    truth.item_group.push_back(primary % cfg.category_groups);

    const auto& pool = category_aspects[primary];
    std::vector<std::size_t> chosen = pool;
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(cfg.aspects_per_item);
    std::sort(chosen.begin(), chosen.end());
    for (auto a : chosen) {
      const auto& vals = aspect_values[a];
      truth.item_attributes[i][a] = vals[uniform_index(rng, vals.size())];
    }
  }

  // Users adopt attributes of random items until enough items are compatible;
  // they purchase compatible items, at most `purchases_per_category` per
  // primary category (picked in a per-user random order).
  truth.user_preferences.resize(cfg.users);
  truth.purchases.resize(cfg.users);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    truth.user_names.push_back(detail::numbered("u", u, 4));
    auto& prefs = truth.user_preferences[u];
    auto& groups = truth.user_groups.emplace_back();
    if (cfg.groups_per_user > 0 && cfg.groups_per_user < cfg.category_groups)
      for (auto g : detail::sample_distinct(rng, cfg.category_groups, cfg.groups_per_user)) groups.insert(g);
    std::vector<std::size_t> shop;
    for (std::size_t i = 0; i < cfg.items; ++i)
      if (groups.empty() || groups.contains(truth.item_group[i])) shop.push_back(i);
    if (shop.empty()) throw Error("synth: infeasible config, user shops in empty groups");
    std::vector<std::size_t> order(cfg.items);
    for (std::size_t i = 0; i < cfg.items; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> bought;
    auto collect = [&] {
      bought.clear();
      std::map<std::size_t, std::size_t> per_category;
      // Best-matching items first; the random order breaks ties.
      std::vector<std::pair<std::size_t, std::size_t>> ranked;
      for (std::size_t k = 0; k < order.size(); ++k)
        if (truth.compatible(u, order[k])) ranked.push_back({truth.matches(u, order[k]), k});
      std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      for (auto [score, k] : ranked) {
        const auto i = order[k];
        auto& n = per_category[truth.item_categories[i][0]];
        if (cfg.purchases_per_category > 0 && n >= cfg.purchases_per_category) continue;
        ++n;
        bought.push_back(i);
      }
      std::sort(bought.begin(), bought.end());
    };
    for (std::size_t attempt = 0; attempt < 64 * cfg.aspects; ++attempt) {
      if (bought.size() >= cfg.reviews_per_user || prefs.size() == cfg.aspects) break;
      const auto& attrs = truth.item_attributes[shop[uniform_index(rng, shop.size())]];
      auto it = attrs.begin();
      std::advance(it, static_cast<std::ptrdiff_t>(uniform_index(rng, attrs.size())));
      if (prefs.contains(it->first)) continue;
      prefs[it->first] = it->second;
      collect();
    }
    if (bought.empty()) throw Error("synth: infeasible config, user has no matching item");
    truth.purchases[u] = bought;
  }

  // Reviews, in user order then item order.
  SyntheticData data;
  Corpus& corpus = data.corpus;
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> mentions;
  for (std::size_t u = 0; u < cfg.users; ++u) {
    std::vector<std::string> user_words;
    for (const auto& [a, v] : truth.user_preferences[u]) {
      for (auto& w : tokenize(aspect_names[a])) user_words.push_back(w);
      user_words.push_back(value_names[v]);
    }
    for (auto i : truth.purchases[u]) {
      const auto& attrs = truth.item_attributes[i];
      std::vector<std::pair<std::size_t, std::size_t>> attr_list(attrs.begin(), attrs.end());
      std::set<std::size_t> mentioned;
      Review r;
      r.user = corpus.users.add(truth.user_names[u]);
      r.item = corpus.items.add(truth.item_names[i]);
      const std::size_t len = cfg.review_length / 2 + uniform_index(rng, cfg.review_length + 1);
      for (std::size_t t = 0; t < std::max<std::size_t>(len, 1); ++t) {
        const double x = uniform01(rng);
        std::string word;
        if (x < cfg.item_word_rate) {
          const auto [a, v] = attr_list[uniform_index(rng, attr_list.size())];
          if (uniform01(rng) < 0.5) {
            auto words = tokenize(aspect_names[a]);
            word = words[uniform_index(rng, words.size())];
          } else {
            word = value_names[v];
            mentioned.insert(a);
          }
        } else if (x < cfg.item_word_rate + cfg.category_word_rate) {
          // The primary category dominates; group names are shared by siblings.
          const auto& cats = truth.item_categories[i];
          const double y = uniform01(rng);
          if (y < 0.5)
            word = category_words[cats[0]];
          else if (y < 0.8)
            word = category_words[cats[uniform_index(rng, cats.size())]];
          else
            word = detail::numbered("grp", cats[0] % cfg.category_groups);
        } else if (x < cfg.item_word_rate + cfg.category_word_rate + cfg.user_word_rate &&
                   !user_words.empty()) {
          word = user_words[uniform_index(rng, user_words.size())];
        } else {
          word = filler[background(rng)];
        }
        r.tokens.push_back(corpus.review_vocab.add(word));
      }
      for (auto a : mentioned) ++mentions[{i, a}];
      corpus.reviews.push_back(std::move(r));
    }
  }
  corpus.reindex();

  // Category paths, then the catalog, for items that received reviews.
  for (std::size_t id = 0; id < corpus.num_items(); ++id) {
    const auto& name = corpus.items.token(static_cast<ItemId>(id));
    const std::size_t i = static_cast<std::size_t>(std::stoul(name.substr(1)));
    std::vector<CategoryPath> paths;
    for (auto c : truth.item_categories[i])
      paths.push_back({"Store", detail::numbered("Grp", c % cfg.category_groups),
                       "The " + detail::numbered("Cat", c)});
    set_item_categories(corpus, static_cast<ItemId>(id), std::move(paths), default_stopwords());
  }
  for (std::size_t id = 0; id < corpus.num_items(); ++id) {
    const auto& name = corpus.items.token(static_cast<ItemId>(id));
    const std::size_t i = static_cast<std::size_t>(std::stoul(name.substr(1)));
    for (const auto& [a, v] : truth.item_attributes[i]) {
      auto it = mentions.find({i, a});
      const std::uint64_t m = 1 + (it == mentions.end() ? 0 : it->second);
      add_aspect_value(corpus, static_cast<ItemId>(id), aspect_names[a], value_names[v], m);
    }
  }
  corpus.reindex();
  data.split = split_train_test(corpus, cfg.seed);
  data.truth = std::move(truth);
  return data;
}

inline void write_synthetic(const SyntheticData& data, const SynthConfig& cfg,
                            const std::filesystem::path& dir) {
  write_corpus(data.corpus, dir);
  write_split(data.corpus, data.split, dir / CorpusFiles::split);
  nlohmann::ordered_json truth;
  truth["config"] = to_json(cfg);
  nlohmann::ordered_json users = nlohmann::ordered_json::object();
  for (std::size_t u = 0; u < data.truth.user_names.size(); ++u) {
    nlohmann::ordered_json prefs = nlohmann::ordered_json::object();
    for (const auto& [a, v] : data.truth.user_preferences[u])
      prefs[std::to_string(a)] = v;
    users[data.truth.user_names[u]] = prefs;
  }
  truth["user_preferences"] = users;
  nlohmann::ordered_json items = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < data.truth.item_names.size(); ++i) {
    nlohmann::ordered_json attrs = nlohmann::ordered_json::object();
    for (const auto& [a, v] : data.truth.item_attributes[i]) attrs[std::to_string(a)] = v;
    items[data.truth.item_names[i]] = {{"attributes", attrs},
                                       {"categories", data.truth.item_categories[i]}};
  }
  truth["items"] = items;
  std::ofstream out(dir / "truth.json");
  if (!out) throw Error("cannot write " + (dir / "truth.json").string());
  out << truth.dump(1) << '\n';
}

}  // namespace avlem
