#include <gtest/gtest.h>

#include <set>

#include "avlem/evaluation.hpp"
#include "avlem/synthetic.hpp"
#include "support.hpp"

using namespace avlem;
using avlem::testing::TempDir;

namespace {

std::size_t planted_item(const SyntheticData& d, ItemId i) {
  const auto& names = d.truth.item_names;
  return static_cast<std::size_t>(std::find(names.begin(), names.end(), d.corpus.items.token(i)) - names.begin());
}

std::size_t planted_user(const SyntheticData& d, UserId u) {
  const auto& names = d.truth.user_names;
  return static_cast<std::size_t>(std::find(names.begin(), names.end(), d.corpus.users.token(u)) - names.begin());
}

}  // namespace

TEST(Synthetic, SameSeedSameCorpusAndFiles) {
  const auto cfg = avlem::testing::tiny_synth(21);
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  EXPECT_TRUE(a.corpus == b.corpus);
  EXPECT_EQ(a.split, b.split);

  TempDir da("synth_a"), db("synth_b");
  write_synthetic(a, cfg, da.path);
  write_synthetic(b, cfg, db.path);
  for (const char* f : {"reviews.jsonl", "meta.jsonl", "av.tsv", "split.json", "truth.json"})
    EXPECT_EQ(avlem::testing::read_text(da.path / f), avlem::testing::read_text(db.path / f)) << f;

  auto other = cfg;
  other.seed = 22;
  EXPECT_FALSE(generate_synthetic(other).corpus == a.corpus);
}

TEST(Synthetic, EveryPurchaseMatchesAPreference) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    const auto d = generate_synthetic(cfg);
    for (const auto& r : d.corpus.reviews) {
      const auto u = planted_user(d, r.user);
      const auto i = planted_item(d, r.item);
      EXPECT_GE(d.truth.matches(u, i), 1u) << "seed " << seed;
    }
  }
}

TEST(Synthetic, CatalogReflectsPlantedAttributes) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(4));
  for (ItemId id = 0; id < d.corpus.num_items(); ++id) {
    const auto i = planted_item(d, id);
    std::set<std::pair<std::string, std::string>> expect, got;
    for (const auto& [a, v] : d.truth.item_attributes[i]) {
      auto name = detail::numbered("asp", a) + (a % 4 == 3 ? " size" : "");
      expect.insert({name, detail::numbered("val", v)});
    }
    for (const auto* p : d.corpus.item_av(id)) {
      got.insert({d.corpus.aspect_text(p->aspect), d.corpus.value_vocab.token(p->value)});
      EXPECT_GE(p->mentions, 1u);
    }
    EXPECT_EQ(got, expect);
    EXPECT_FALSE(d.corpus.item_queries[id].empty());
  }
}

TEST(Synthetic, OppositePreferencesBuyMatchingItem) {
  SynthConfig cfg;
  cfg.users = 2;
  cfg.items = 2;
  cfg.aspects = 1;
  cfg.values = 2;
  cfg.values_per_aspect = 2;
  cfg.aspects_per_item = 1;
  cfg.categories = 1;
  cfg.category_groups = 1;
  cfg.categories_per_item = 1;
  cfg.aspects_per_category = 1;
  cfg.reviews_per_user = 1;
  cfg.vocab = 20;
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 200 && checked < 5; ++seed) {
    cfg.seed = seed;
    const auto d = generate_synthetic(cfg);
    const auto& t = d.truth;
    if (t.item_attributes[0].at(0) == t.item_attributes[1].at(0)) continue;
    if (t.user_preferences[0].at(0) == t.user_preferences[1].at(0)) continue;
    ++checked;
    for (std::size_t u = 0; u < 2; ++u) {
      ASSERT_EQ(t.purchases[u].size(), 1u);
      const auto i = t.purchases[u][0];
      EXPECT_EQ(t.item_attributes[i].at(0), t.user_preferences[u].at(0));
    }
  }
  EXPECT_EQ(checked, 5);
}

// Relevance labels agree with the planted truth: an oracle that ranks the
// user's planted purchases carrying the query (minus training purchases)
// first puts a relevant item at rank 1 for every test pair.
TEST(Synthetic, PlantedPurchaseOracleHasMrrOne) {
  SynthConfig cfg;
  const auto d = generate_synthetic(cfg);
  const auto& c = d.corpus;
  std::set<std::pair<UserId, ItemId>> train;
  for (auto r : d.split.train_reviews) train.insert({c.reviews[r].user, c.reviews[r].item});
  ASSERT_FALSE(d.split.test_pairs.empty());
  double mrr = 0.0;
  for (const auto& tp : d.split.test_pairs) {
    const auto& bought = d.truth.purchases[planted_user(d, tp.user)];
    std::vector<ItemId> first, rest;
    for (ItemId i = 0; i < c.num_items(); ++i) {
      const bool carries = std::count(c.item_queries[i].begin(), c.item_queries[i].end(), tp.query) > 0;
      const bool planted = std::count(bought.begin(), bought.end(), planted_item(d, i)) > 0;
      (carries && planted && !train.contains({tp.user, i}) ? first : rest).push_back(i);
    }
    first.insert(first.end(), rest.begin(), rest.end());
    mrr += reciprocal_rank(first, std::set<ItemId>(tp.relevant_items.begin(), tp.relevant_items.end()));
  }
  EXPECT_DOUBLE_EQ(mrr / static_cast<double>(d.split.test_pairs.size()), 1.0);
}

TEST(Synthetic, DefaultDeskSizes) {
  SynthConfig cfg;
  EXPECT_EQ(cfg.users, 50u);
  EXPECT_EQ(cfg.items, 200u);
  EXPECT_EQ(cfg.aspects, 20u);
  EXPECT_EQ(cfg.values, 30u);
  EXPECT_EQ(cfg.vocab, 500u);
  const auto d = generate_synthetic(cfg);
  EXPECT_EQ(d.corpus.num_users(), 50u);
  EXPECT_LE(d.corpus.num_items(), 200u);
  EXPECT_LE(d.corpus.num_aspects(), 20u);
  EXPECT_LE(d.corpus.num_values(), 30u);
  EXPECT_GT(d.split.test_pairs.size(), 50u);
}

TEST(Synthetic, RejectsInvalidConfigs) {
  SynthConfig cfg;
  cfg.items = 1;
  EXPECT_THROW(generate_synthetic(cfg), Error);
  cfg = {};
  cfg.values = 1;
  EXPECT_THROW(generate_synthetic(cfg), Error);
  cfg = {};
  cfg.aspects = 0;
  EXPECT_THROW(generate_synthetic(cfg), Error);
  cfg = {};
  cfg.item_word_rate = 0.9;
  EXPECT_THROW(generate_synthetic(cfg), Error);
}

TEST(Synthetic, ConfigJsonRoundTrip) {
  auto cfg = avlem::testing::tiny_synth(77);
  cfg.user_word_rate = 0.25;
  SynthConfig back;
  merge_json(back, nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(back), to_json(cfg));
}
