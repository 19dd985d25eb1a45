#pragma once

#include <algorithm>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "avlem/evaluation.hpp"
#include "avlem/training.hpp"

namespace avlem {

// Sensitivity grid: one model per embedding size, one evaluation per m.
// Iteration counts are read off a single run with the largest budget, since
// the first k iterations of a session do not depend on the budget beyond k.
struct SweepGrid {
  std::vector<std::size_t> iterations = {1, 2, 3, 4, 5};
  std::vector<std::size_t> m = {1, 2, 3};
  std::vector<std::size_t> dims = {32};

  void validate() const {
    require(!iterations.empty() && !m.empty() && !dims.empty(), "sweep: empty grid axis");
    for (auto k : iterations) require(k >= 1, "sweep: iterations must be >= 1");
    for (auto d : dims) require(d >= 1, "sweep: dims must be >= 1");
  }
};

struct SweepRow {
  std::size_t dim = 0;
  std::size_t m = 0;
  std::size_t iteration = 0;
  std::array<double, kNumMetrics> mean{};
  double coverage = 0.0;
  std::size_t active = 0;
};

using SweepProgress = std::function<void(const std::string&)>;

inline std::vector<SweepRow> run_sweep(const Corpus& corpus, const Split& split, const ModelConfig& mcfg,
                                       const TrainConfig& tcfg, EvalConfig ecfg, const SweepGrid& grid,
                                       const SweepProgress& progress = {}) {
  grid.validate();
  ecfg.iterations = *std::max_element(grid.iterations.begin(), grid.iterations.end());
  std::vector<SweepRow> rows;
  for (auto d : grid.dims) {
    auto mc = mcfg;
    mc.dim = d;
    if (progress) progress("training dim=" + std::to_string(d));
    const auto model = train(corpus, split, mc, tcfg).params;
    const AvlemRanker ranker(model, corpus);
    for (auto m : grid.m) {
      ecfg.m = m;
      if (progress) progress("evaluating dim=" + std::to_string(d) + " m=" + std::to_string(m));
      const auto rep = evaluate_conversational(ranker, corpus, split.test_pairs, ecfg);
      for (auto k : grid.iterations) {
        const auto& it = rep.iterations.at(k - 1);
        rows.push_back({d, m, k, it.mean, it.coverage, it.active});
      }
    }
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "dim,m,iteration,metric,mean,coverage,active\n";
  for (const auto& r : rows)
    for (auto metric : kMetrics)
      os << r.dim << "," << r.m << "," << r.iteration << "," << metric_name(metric) << ","
         << format_double(r.mean[static_cast<std::size_t>(metric)]) << "," << format_double(r.coverage) << ","
         << r.active << "\n";
  return os.str();
}

// "1,2,5" -> {1, 2, 5}
inline std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string cell; std::getline(ss, cell, ',');) {
    require(!cell.empty() && cell.find_first_not_of("0123456789") == std::string::npos,
            "bad list element '" + cell + "' in '" + text + "'");
    out.push_back(std::stoul(cell));
  }
  require(!out.empty(), "empty list");
  return out;
}

}  // namespace avlem
