#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "avlem/evaluation.hpp"
#include "avlem/sweep.hpp"
#include "oracles.hpp"
#include "replay.hpp"
#include "support.hpp"

using namespace avlem;

namespace {

// Puts the relevant items of a known (user, query) first.
class OracleRanker : public Ranker {
 public:
  OracleRanker(const Corpus& c, std::span<const TestPair> pairs) {
    for (const auto& tp : pairs) relevant_[{tp.user, c.queries.at(tp.query)}] = tp.relevant_items;
  }
  std::vector<ItemId> rank(const SessionState& s, std::span<const ItemId> candidates) const override {
    const auto& rel = relevant_.at({s.user, s.query});
    std::vector<ItemId> first, rest;
    for (auto i : candidates) (std::count(rel.begin(), rel.end(), i) ? first : rest).push_back(i);
    first.insert(first.end(), rest.begin(), rest.end());
    return first;
  }

 private:
  std::map<std::pair<UserId, std::vector<WordId>>, std::vector<ItemId>> relevant_;
};

// Reverse id order; never finds anything early on purpose.
class ReverseRanker : public Ranker {
 public:
  std::vector<ItemId> rank(const SessionState&, std::span<const ItemId> candidates) const override {
    std::vector<ItemId> out(candidates.begin(), candidates.end());
    std::sort(out.rbegin(), out.rend());
    return out;
  }
};

SynthConfig ten_items(std::uint64_t seed) {
  auto c = avlem::testing::tiny_synth(seed);
  c.users = 8;
  c.items = 10;
  c.categories = 3;
  c.category_groups = 1;
  c.reviews_per_user = 6;
  return c;
}

ModelParams random_model(const Corpus& c, std::uint64_t seed, double scale) {
  ModelConfig mc;
  mc.dim = 6;
  auto p = init_params(mc, {c.review_vocab.size(), c.num_users(), c.num_items(), c.aspect_word_vocab.size(),
                            c.num_values()},
                       seed);
  for (auto& t : p.tables)
    for (auto& x : t.data) x *= scale;
  return p;
}

}  // namespace

TEST(Metrics, HandComputedLists) {
  const auto cases = avlem::testing::metric_cases();
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const auto& c = cases[k];
    EXPECT_NEAR(average_precision(c.list, c.relevant), c.ap, 1e-12) << k;
    EXPECT_NEAR(reciprocal_rank(c.list, c.relevant), c.rr, 1e-12) << k;
    EXPECT_NEAR(ndcg_at(c.list, c.relevant), c.ndcg, 1e-12) << k;
  }
}

TEST(Metrics, CutoffsAndEdgeCases) {
  std::vector<ItemId> list(150);
  std::iota(list.begin(), list.end(), 0);
  const std::set<ItemId> late{120};
  EXPECT_EQ(reciprocal_rank(list, late), 0.0);
  EXPECT_EQ(average_precision(list, late), 0.0);
  EXPECT_NEAR(reciprocal_rank(list, late, 200), 1.0 / 121.0, 1e-15);
  EXPECT_EQ(average_precision(list, {}), 0.0);
  EXPECT_EQ(ndcg_at(list, {}), 0.0);
  EXPECT_EQ(ndcg_at(list, {10}), 0.0);
  EXPECT_NEAR(ndcg_at(list, {10}, 11), 1.0 / std::log2(12.0), 1e-15);
}

TEST(Metrics, SingleRelevantApEqualsRr) {
  Rng rng(17);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 150);
    std::vector<ItemId> list(n);
    std::iota(list.begin(), list.end(), 0);
    std::shuffle(list.begin(), list.end(), rng);
    const std::set<ItemId> rel{static_cast<ItemId>(uniform_index(rng, n + 5))};
    EXPECT_EQ(average_precision(list, rel), reciprocal_rank(list, rel));
  }
  for (auto m : kMetrics) EXPECT_EQ(parse_metric(metric_name(m)), m);
  EXPECT_THROW(parse_metric("P@5"), Error);
}

TEST(FreezeRank, KeepsPrefix) {
  const ItemId frozen[] = {4, 1};
  const ItemId rest[] = {3, 0, 2};
  EXPECT_EQ(freeze_rank(frozen, rest), (std::vector<ItemId>{4, 1, 3, 0, 2}));
  const ItemId dup[] = {4, 4};
  EXPECT_THROW(freeze_rank(dup, rest), Error);
  const ItemId clash[] = {3, 1};
  EXPECT_THROW(freeze_rank(frozen, clash), Error);
}

TEST(Conversational, MatchesBruteForceReplay) {
  std::size_t feedback_mattered = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto d = generate_synthetic(ten_items(seed));
    ASSERT_EQ(d.corpus.num_items(), 10u);
    ASSERT_FALSE(d.split.test_pairs.empty());
    const auto p = random_model(d.corpus, seed, 30.0);
    const AvlemRanker ranker(p, d.corpus), blind(p, d.corpus, false);
    for (auto mode : {FeedbackMode::all, FeedbackMode::negative_only}) {
      EvalConfig cfg;
      cfg.iterations = 5;
      cfg.m = 2;
      cfg.feedback = mode;
      const auto rep = evaluate_conversational(ranker, d.corpus, d.split.test_pairs, cfg, "x", true);
      for (std::size_t k = 0; k < d.split.test_pairs.size(); ++k) {
        const auto& tp = d.split.test_pairs[k];
        const auto want = avlem::testing::replay_session(ranker, d.corpus, tp, 5, 2, mode);
        ASSERT_EQ(rep.lists[k], want) << "seed " << seed << " pair " << k;
        if (want != avlem::testing::replay_session(blind, d.corpus, tp, 5, 2, mode)) ++feedback_mattered;
        const std::set<ItemId> rel(tp.relevant_items.begin(), tp.relevant_items.end());
        for (std::size_t it = 1; it <= 5; ++it)
          EXPECT_EQ(rep.values(it, Metric::mrr)[k], reciprocal_rank(want[it - 1], rel));
      }
    }
  }
  EXPECT_GT(feedback_mattered, 0u);
}

TEST(Conversational, OneIterationIsStaticRanking) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(6));
  const auto p = random_model(d.corpus, 2, 10.0);
  const AvlemRanker ranker(p, d.corpus);
  EvalConfig cfg;
  cfg.iterations = 1;
  const auto rep = evaluate_conversational(ranker, d.corpus, d.split.test_pairs, cfg);
  const auto items = all_items(d.corpus);
  double sum = 0;
  for (const auto& tp : d.split.test_pairs) {
    const auto s = start_session(tp.user, d.corpus.queries.at(tp.query));
    sum += reciprocal_rank(ranker.rank(s, items), {tp.relevant_items.begin(), tp.relevant_items.end()});
  }
  EXPECT_NEAR(rep.mean(1, Metric::mrr), sum / static_cast<double>(d.split.test_pairs.size()), 1e-12);
  EXPECT_EQ(rep.iterations[0].coverage, 0.0);
  EXPECT_EQ(rep.iterations[0].active, d.split.test_pairs.size());
}

TEST(Conversational, OracleRankerScoresOne) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(7));
  const OracleRanker oracle(d.corpus, d.split.test_pairs);
  const auto rep = evaluate_conversational(oracle, d.corpus, d.split.test_pairs, {});
  for (std::size_t it = 1; it <= 5; ++it)
    for (auto m : kMetrics) EXPECT_DOUBLE_EQ(rep.mean(it, m), 1.0);
  // Every session ends on the first item, so nothing stays active.
  EXPECT_EQ(rep.iterations[1].active, 0u);
  EXPECT_EQ(rep.iterations[1].coverage, 0.0);
}

TEST(Conversational, FeedbackFreeRankerIsMonotoneAndCoverageCounts) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(8));
  const ReverseRanker rev;
  EvalConfig cfg;
  const auto rep = evaluate_conversational(rev, d.corpus, d.split.test_pairs, cfg, "rev", true);
  for (std::size_t it = 2; it <= 5; ++it) {
    const auto& a = rep.values(it - 1, Metric::mrr);
    const auto& b = rep.values(it, Metric::mrr);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k], b[k]);
    EXPECT_LE(rep.iterations[it - 1].active, rep.iterations[it - 2].active);
    EXPECT_LE(rep.iterations[it - 1].influenced, rep.iterations[it - 1].active);
  }
  EXPECT_EQ(rep.lists.size(), d.split.test_pairs.size());
  for (const auto& l : rep.lists) EXPECT_EQ(l.size(), 5u);
  EXPECT_GT(rep.iterations[1].coverage, 0.0);
  EXPECT_EQ(rep.iterations[1].coverage,
            100.0 * static_cast<double>(rep.iterations[1].influenced) /
                static_cast<double>(rep.iterations[1].active));
}

TEST(Conversational, DeterministicAndTargetIsLowestRelevant) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(9));
  const auto p = random_model(d.corpus, 3, 10.0);
  const AvlemRanker ranker(p, d.corpus);
  EvalConfig cfg;
  cfg.strategy = Strategy::random;
  const auto a = evaluate_conversational(ranker, d.corpus, d.split.test_pairs, cfg, "a", true);
  const auto b = evaluate_conversational(ranker, d.corpus, d.split.test_pairs, cfg, "b", true);
  EXPECT_EQ(a.lists, b.lists);
  EXPECT_EQ(report_csv(a), report_csv(b));
  TestPair tp;
  tp.relevant_items = {7, 3, 5};
  EXPECT_EQ(simulation_target(tp), 3u);
  tp.relevant_items.clear();
  EXPECT_THROW(simulation_target(tp), Error);
  EXPECT_NE(pair_seed(1, 0), pair_seed(1, 1));
  EXPECT_NE(pair_seed(1, 0), pair_seed(2, 0));
}

TEST(Fisher, IdenticalSamplesGiveOne) {
  Rng rng(1);
  const std::vector<double> a{0.1, 0.5, 0.25, 1.0, 0.0};
  EXPECT_EQ(fisher_randomization_test(a, a, 1000, rng), 1.0);
  EXPECT_EQ(fisher_randomization_test({}, {}, 10, rng), 1.0);
  const std::vector<double> shorter{0.1};
  EXPECT_THROW(fisher_randomization_test(a, shorter, 10, rng), Error);
}

TEST(Fisher, SeparatedSamplesAreSignificant) {
  Rng gen(2), rng(3);
  std::vector<double> a(60), b(60);
  for (std::size_t k = 0; k < a.size(); ++k) {
    b[k] = uniform01(gen) * 0.3;
    a[k] = b[k] + 0.4 + uniform01(gen) * 0.1;
  }
  EXPECT_LT(fisher_randomization_test(a, b, 100000, rng), 0.001);
}

TEST(Fisher, SymmetricAndSinglePair) {
  Rng gen(4);
  std::vector<double> a(20), b(20);
  for (std::size_t k = 0; k < a.size(); ++k) {
    a[k] = uniform01(gen);
    b[k] = uniform01(gen);
  }
  Rng r1(5), r2(5);
  EXPECT_EQ(fisher_randomization_test(a, b, 5000, r1), fisher_randomization_test(b, a, 5000, r2));
  // One pair: every flip reaches the observed magnitude.
  Rng r3(6);
  const std::vector<double> x{0.9}, y{0.1};
  EXPECT_EQ(fisher_randomization_test(x, y, 1000, r3), 1.0);
}

TEST(Reports, CsvRoundTripAndJson) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(10));
  const ReverseRanker rev;
  EvalConfig cfg;
  const auto rep = evaluate_conversational(rev, d.corpus, d.split.test_pairs, cfg, "rev");
  std::istringstream in(report_csv(rep));
  const auto rows = parse_report_csv(in);
  EXPECT_EQ(rows, report_rows(rep));
  ASSERT_EQ(rows.size(), 15u);
  for (auto m : kMetrics)
    EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.metric == metric_name(m); }),
              5);
  const auto j = report_json(rep, true);
  EXPECT_EQ(j["system"], "rev");
  EXPECT_EQ(j["iterations"].size(), 5u);
  EXPECT_EQ(j["per_query"].size(), d.split.test_pairs.size());
  EXPECT_EQ(j["per_query"][0]["MRR@100"].size(), 5u);
  EXPECT_EQ(j["config"]["m"], 2);

  avlem::testing::TempDir dir("report");
  emit_report(rep, dir.path / "r.csv", ReportFormat::csv);
  EXPECT_EQ(avlem::testing::read_text(dir.path / "r.csv"), report_csv(rep));
  emit_report(rep, dir.path / "r.json", parse_report_format("json"));
  EXPECT_EQ(avlem::testing::read_json(dir.path / "r.json")["iterations"].size(), 5u);
  std::istringstream bad("iteration,metric\n");
  EXPECT_THROW(parse_report_csv(bad), Error);

  EvalConfig back;
  merge_json(back, nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(back), to_json(cfg));
}

TEST(Sweep, RowsMatchDirectEvaluation) {
  const auto d = generate_synthetic(avlem::testing::tiny_synth(11));
  ModelConfig mc;
  TrainConfig tc;
  tc.epochs = 2;
  EvalConfig ec;
  SweepGrid grid;
  grid.iterations = {1, 3};
  grid.m = {1, 2};
  grid.dims = {4};
  const auto rows = run_sweep(d.corpus, d.split, mc, tc, ec, grid);
  ASSERT_EQ(rows.size(), 4u);
  mc.dim = 4;
  const auto model = train(d.corpus, d.split, mc, tc).params;
  const AvlemRanker ranker(model, d.corpus);
  for (const auto& r : rows) {
    EvalConfig e = ec;
    e.m = r.m;
    e.iterations = r.iteration;
    const auto rep = evaluate_conversational(ranker, d.corpus, d.split.test_pairs, e);
    for (auto m : kMetrics) EXPECT_DOUBLE_EQ(r.mean[static_cast<std::size_t>(m)], rep.mean(r.iteration, m));
  }
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 3);
  EXPECT_EQ(parse_size_list("1,2,5"), (std::vector<std::size_t>{1, 2, 5}));
  EXPECT_THROW(parse_size_list("1,,2"), Error);
  EXPECT_THROW(parse_size_list("x"), Error);
  grid.iterations = {0};
  EXPECT_THROW(grid.validate(), Error);
}
