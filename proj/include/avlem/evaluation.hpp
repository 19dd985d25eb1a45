#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "avlem/common.hpp"
#include "avlem/conversation.hpp"
#include "avlem/corpus.hpp"

namespace avlem {

inline std::vector<ItemId> freeze_rank(std::span<const ItemId> frozen, std::span<const ItemId> rest) {
  std::set<ItemId> seen(frozen.begin(), frozen.end());
  require(seen.size() == frozen.size(), "freeze_rank: duplicate frozen item");
  for (auto i : rest)
    require(!seen.contains(i), "freeze_rank: item " + std::to_string(i) + " is both frozen and reranked");
  std::vector<ItemId> out(frozen.begin(), frozen.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

// ---------------------------------------------------------------------------
// Metrics (binary relevance)

inline double average_precision(std::span<const ItemId> list, const std::set<ItemId>& relevant,
                                std::size_t cutoff = 100) {
  if (relevant.empty() || cutoff == 0) return 0.0;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < list.size() && r < cutoff; ++r)
    if (relevant.contains(list[r])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  return sum / static_cast<double>(std::min(relevant.size(), cutoff));
}

inline double reciprocal_rank(std::span<const ItemId> list, const std::set<ItemId>& relevant,
                              std::size_t cutoff = 100) {
  for (std::size_t r = 0; r < list.size() && r < cutoff; ++r)
    if (relevant.contains(list[r])) return 1.0 / static_cast<double>(r + 1);
  return 0.0;
}

inline double ndcg_at(std::span<const ItemId> list, const std::set<ItemId>& relevant, std::size_t k = 10) {
  if (relevant.empty()) return 0.0;
  double dcg = 0.0, ideal = 0.0;
  for (std::size_t r = 0; r < list.size() && r < k; ++r)
    if (relevant.contains(list[r])) dcg += 1.0 / std::log2(static_cast<double>(r + 2));
  for (std::size_t r = 0; r < relevant.size() && r < k; ++r) ideal += 1.0 / std::log2(static_cast<double>(r + 2));
  return dcg / ideal;
}

enum class Metric : std::size_t { map, mrr, ndcg };
inline constexpr std::size_t kNumMetrics = 3;
inline constexpr std::array<Metric, kNumMetrics> kMetrics = {Metric::map, Metric::mrr, Metric::ndcg};

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::map: return "MAP@100";
    case Metric::mrr: return "MRR@100";
    case Metric::ndcg: return "NDCG@10";
  }
  return "";
}

inline Metric parse_metric(std::string_view s) {
  for (auto m : kMetrics)
    if (s == metric_name(m)) return m;
  throw Error("unknown metric '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Conversational evaluation with the freezing protocol

struct EvalConfig {
  std::size_t iterations = 5;
  std::size_t m = 2;
  Strategy strategy = Strategy::most_mentioned;
  FeedbackMode feedback = FeedbackMode::all;
  std::uint64_t seed = 1;
  std::size_t cutoff = 100;
  std::size_t ndcg_k = 10;

  void validate() const {
    require(iterations >= 1, "eval: iterations must be >= 1");
    require(cutoff >= 1 && ndcg_k >= 1, "eval: cutoffs must be >= 1");
  }
};

inline nlohmann::ordered_json to_json(const EvalConfig& c) {
  return {{"iterations", c.iterations},     {"m", c.m},
          {"strategy", strategy_name(c.strategy)}, {"feedback", feedback_mode_name(c.feedback)},
          {"seed", c.seed},                 {"cutoff", c.cutoff},
          {"ndcg_k", c.ndcg_k}};
}

inline void merge_json(EvalConfig& c, const nlohmann::json& j) {
  if (j.contains("iterations")) c.iterations = j.at("iterations").get<std::size_t>();
  if (j.contains("m")) c.m = j.at("m").get<std::size_t>();
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("feedback")) c.feedback = parse_feedback_mode(j.at("feedback").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("cutoff")) c.cutoff = j.at("cutoff").get<std::size_t>();
  if (j.contains("ndcg_k")) c.ndcg_k = j.at("ndcg_k").get<std::size_t>();
}

struct IterationSummary {
  std::size_t iteration = 0;
  std::array<double, kNumMetrics> mean{};
  std::size_t n_queries = 0;
  std::size_t active = 0;      // sessions still conversing at this iteration
  std::size_t influenced = 0;  // active sessions with >= 1 answer merged this iteration
  double coverage = 0.0;       // influenced / active, in percent
};

struct MetricReport {
  std::string system;
  EvalConfig config;
  std::vector<std::pair<UserId, QueryId>> pairs;
  // per_query[iteration - 1][metric][pair]
  std::vector<std::array<std::vector<double>, kNumMetrics>> per_query;
  std::vector<IterationSummary> iterations;
  // lists[pair][iteration - 1]: full frozen-prefix ranking; filled on request.
  std::vector<std::vector<std::vector<ItemId>>> lists;

  const std::vector<double>& values(std::size_t iteration, Metric m) const {
    return per_query.at(iteration - 1)[static_cast<std::size_t>(m)];
  }
  double mean(std::size_t iteration, Metric m) const {
    return iterations.at(iteration - 1).mean[static_cast<std::size_t>(m)];
  }
};

// The simulated user judges questions against the lowest-id relevant item.
inline ItemId simulation_target(const TestPair& pair) {
  require(!pair.relevant_items.empty(), "test pair without relevant items");
  return *std::min_element(pair.relevant_items.begin(), pair.relevant_items.end());
}

inline std::uint64_t pair_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline MetricReport evaluate_conversational(const Ranker& ranker, const Corpus& corpus,
                                            std::span<const TestPair> pairs, const EvalConfig& cfg,
                                            std::string system = "", bool keep_lists = false) {
  cfg.validate();
  MetricReport rep;
  rep.system = std::move(system);
  rep.config = cfg;
  const auto K = cfg.iterations;
  rep.per_query.resize(K);
  for (auto& it : rep.per_query)
    for (auto& v : it) v.assign(pairs.size(), 0.0);
  rep.iterations.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    rep.iterations[k].iteration = k + 1;
    rep.iterations[k].n_queries = pairs.size();
  }
  if (keep_lists) rep.lists.resize(pairs.size());
  const auto items = all_items(corpus);

  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& tp = pairs[p];
    rep.pairs.emplace_back(tp.user, tp.query);
    const std::set<ItemId> relevant(tp.relevant_items.begin(), tp.relevant_items.end());
    const auto target = TargetCatalog::of(corpus, simulation_target(tp));
    Rng rng(pair_seed(cfg.seed, p));

    auto s = start_session(tp.user, corpus.queries.at(tp.query));
    std::vector<ItemId> full;
    for (std::size_t k = 0; k < K; ++k) {
      auto& summary = rep.iterations[k];
      if (k == 0) {
        ++summary.active;
        full = show_next(s, ranker, items, K, &relevant);
      } else if (!s.finished) {
        ++summary.active;
        auto questions = select_questions(s, corpus, cfg.m, cfg.strategy, rng);
        std::vector<Answer> answers;
        for (const auto& q : questions) answers.push_back(simulate_answer(target, q));
        if (apply_answers(s, questions, answers, cfg.feedback) > 0) ++summary.influenced;
        const std::vector<ItemId> frozen = s.shown;
        auto rest = show_next(s, ranker, items, K, &relevant);
        full = freeze_rank(frozen, rest);
      }
      rep.per_query[k][0][p] = average_precision(full, relevant, cfg.cutoff);
      rep.per_query[k][1][p] = reciprocal_rank(full, relevant, cfg.cutoff);
      rep.per_query[k][2][p] = ndcg_at(full, relevant, cfg.ndcg_k);
      if (keep_lists) rep.lists[p].push_back(full);
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    auto& summary = rep.iterations[k];
    for (std::size_t m = 0; m < kNumMetrics; ++m) {
      double sum = 0.0;
      for (double v : rep.per_query[k][m]) sum += v;
      summary.mean[m] = pairs.empty() ? 0.0 : sum / static_cast<double>(pairs.size());
    }
    summary.coverage = summary.active ? 100.0 * static_cast<double>(summary.influenced) /
                                            static_cast<double>(summary.active)
                                      : 0.0;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Fisher randomization test (paired, two-sided)

inline double fisher_randomization_test(std::span<const double> a, std::span<const double> b,
                                        std::size_t trials, Rng& rng) {
  require(a.size() == b.size(), "fisher test: samples have different lengths");
  require(trials >= 1, "fisher test: trials must be >= 1");
  if (a.empty()) return 1.0;
  std::vector<double> d(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) d[k] = a[k] - b[k];
  const double n = static_cast<double>(d.size());
  double observed = 0.0;
  for (double x : d) observed += x;
  observed = std::abs(observed) / n;
  const double tol = 1e-12 * std::max(1.0, observed);
  std::bernoulli_distribution flip(0.5);
  std::size_t at_least = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    double s = 0.0;
    for (double x : d) s += flip(rng) ? -x : x;
    if (std::abs(s) / n >= observed - tol) ++at_least;
  }
  return static_cast<double>(at_least) / static_cast<double>(trials);
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_double(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline const char* kReportCsvHeader = "iteration,metric,mean,n_queries,coverage,active";

inline std::string report_csv(const MetricReport& rep) {
  std::ostringstream os;
  os << kReportCsvHeader << "\n";
  for (const auto& it : rep.iterations)
    for (auto m : kMetrics)
      os << it.iteration << "," << metric_name(m) << "," << format_double(it.mean[static_cast<std::size_t>(m)])
         << "," << it.n_queries << "," << format_double(it.coverage) << "," << it.active << "\n";
  return os.str();
}

inline nlohmann::ordered_json report_json(const MetricReport& rep, bool per_query = false) {
  nlohmann::ordered_json j;
  j["system"] = rep.system;
  j["config"] = to_json(rep.config);
  auto& its = j["iterations"] = nlohmann::ordered_json::array();
  for (const auto& it : rep.iterations) {
    nlohmann::ordered_json row;
    row["iteration"] = it.iteration;
    for (auto m : kMetrics) row["metrics"][metric_name(m)] = it.mean[static_cast<std::size_t>(m)];
    row["n_queries"] = it.n_queries;
    row["coverage"] = it.coverage;
    row["active"] = it.active;
    its.push_back(row);
  }
  if (per_query) {
    auto& pq = j["per_query"] = nlohmann::ordered_json::array();
    for (std::size_t p = 0; p < rep.pairs.size(); ++p) {
      nlohmann::ordered_json row{{"user", rep.pairs[p].first}, {"query", rep.pairs[p].second}};
      for (auto m : kMetrics) {
        auto& vals = row[metric_name(m)] = nlohmann::ordered_json::array();
        for (const auto& it : rep.per_query) vals.push_back(it[static_cast<std::size_t>(m)][p]);
      }
      pq.push_back(row);
    }
  }
  return j;
}

enum class ReportFormat { csv, json };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw Error("unknown report format '" + std::string(s) + "' (csv|json)");
}

inline void emit_report(const MetricReport& rep, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write report to " + path.string());
  if (format == ReportFormat::csv)
    out << report_csv(rep);
  else
    out << report_json(rep, true).dump(2) << "\n";
  if (!out) throw Error("failed writing report to " + path.string());
}

struct ReportRow {
  std::size_t iteration = 0;
  std::string metric;
  double mean = 0.0;
  std::size_t n_queries = 0;
  double coverage = 0.0;
  std::size_t active = 0;
  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

inline std::vector<ReportRow> parse_report_csv(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kReportCsvHeader, "report csv: bad header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    require(f.size() == 6, "report csv: expected 6 columns: " + line);
    rows.push_back({std::stoul(f[0]), f[1], std::stod(f[2]), std::stoul(f[3]), std::stod(f[4]), std::stoul(f[5])});
  }
  return rows;
}

inline std::vector<ReportRow> report_rows(const MetricReport& rep) {
  std::vector<ReportRow> rows;
  for (const auto& it : rep.iterations)
    for (auto m : kMetrics)
      rows.push_back({it.iteration, metric_name(m), it.mean[static_cast<std::size_t>(m)], it.n_queries,
                      it.coverage, it.active});
  return rows;
}

}  // namespace avlem
