// avlem: corpus preparation, training, evaluation, sweeps and the session service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"

#include "avlem/baselines.hpp"
#include "avlem/evaluation.hpp"
#include "avlem/service.hpp"
#include "avlem/sweep.hpp"
#include "avlem/synthetic.hpp"
#include "avlem/training.hpp"

namespace fs = std::filesystem;
using namespace avlem;
using ojson = nlohmann::ordered_json;

namespace {

// Optional flag values: only flags actually given override the config file.
template <class T>
void override_with(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json section(const char* name) const {
    return config.contains(name) ? config.at(name) : nlohmann::json::object();
  }

  void load() {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) throw Error("cannot open config file " + config_path);
    config = nlohmann::json::parse(in, nullptr, false);
    if (config.is_discarded() || !config.is_object()) throw Error(config_path + ": config must be a JSON object");
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file (sections: synth, model, train, eval, service, sweep)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Random seed");
}

void banner(const std::string& command, const ojson& resolved) {
  std::cout << "# avlem " << command << " resolved config: " << resolved.dump() << std::endl;
}

struct ModelFlags {
  std::optional<std::string> variant;
  std::optional<std::size_t> dim;
  std::optional<double> lambda;

  void add(CLI::App* sub) {
    sub->add_option("--variant", variant, "avlem|hem|no-aspect|no-value|no-neg|no-sep");
    sub->add_option("--dim", dim, "Embedding size");
    sub->add_option("--lambda", lambda, "Query/user mixing weight");
  }

  ModelConfig resolve(const Common& c) const {
    ModelConfig m;
    merge_json(m, c.section("model"));
    if (variant) m = apply_variant(m, parse_variant(*variant));
    override_with(dim, m.dim);
    override_with(lambda, m.lambda);
    m.validate();
    return m;
  }
};

struct TrainFlags {
  std::optional<std::size_t> epochs, batch_size, beta, nonrel;
  std::optional<double> lr, clip, l2, subsample;
  std::optional<bool> scale_lr;

  void add(CLI::App* sub) {
    sub->add_option("--epochs", epochs);
    sub->add_option("--batch-size", batch_size);
    sub->add_option("--lr", lr, "Initial learning rate (decays linearly to 0)");
    sub->add_option("--clip", clip, "Global gradient norm clip");
    sub->add_option("--beta", beta, "Negative samples");
    sub->add_option("--l2", l2, "L2 strength on touched embedding rows");
    sub->add_option("--subsample", subsample, "Word sub-sampling threshold; <= 0 disables");
    sub->add_option("--nonrel", nonrel, "Non-relevant items per training conversation");
    sub->add_option("--scale-lr-by-batch", scale_lr, "Divide the per-instance step by the batch size");
  }

  TrainConfig resolve(const Common& c) const {
    TrainConfig t;
    merge_json(t, c.section("train"));
    override_with(epochs, t.epochs);
    override_with(batch_size, t.batch_size);
    override_with(lr, t.lr0);
    override_with(clip, t.grad_clip);
    override_with(beta, t.beta);
    override_with(l2, t.l2_gamma);
    override_with(subsample, t.subsample_rate);
    override_with(nonrel, t.nonrel_items_per_conv);
    override_with(scale_lr, t.scale_lr_by_batch);
    override_with(c.seed, t.seed);
    t.validate();
    return t;
  }
};

struct EvalFlags {
  std::optional<std::size_t> iterations, m, cutoff;
  std::optional<std::string> strategy, feedback;

  void add(CLI::App* sub) {
    sub->add_option("--iterations", iterations, "Conversation iterations");
    sub->add_option("--m", m, "Questions per iteration");
    sub->add_option("--strategy", strategy, "most_mentioned|random");
    sub->add_option("--feedback", feedback, "Answers the ranker sees: all|pos|neg");
    sub->add_option("--cutoff", cutoff, "MAP/MRR cutoff");
  }

  EvalConfig resolve(const Common& c) const {
    EvalConfig e;
    merge_json(e, c.section("eval"));
    override_with(iterations, e.iterations);
    override_with(m, e.m);
    override_with(cutoff, e.cutoff);
    if (strategy) e.strategy = parse_strategy(*strategy);
    if (feedback) e.feedback = parse_feedback_mode(*feedback);
    override_with(c.seed, e.seed);
    e.validate();
    return e;
  }
};

struct CorpusArgs {
  std::string dir;
  std::string split;

  void add(CLI::App* sub, bool with_split = true) {
    sub->add_option("--corpus", dir, "Canonical corpus directory")->required()->check(CLI::ExistingDirectory);
    if (with_split) sub->add_option("--split", split, "Split file (default: <corpus>/split.json)");
  }

  fs::path split_path() const { return split.empty() ? fs::path(dir) / CorpusFiles::split : fs::path(split); }

  ojson to_json() const { return {{"corpus", dir}, {"split", split_path().string()}}; }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

ReportFormat format_for(const std::string& format, const fs::path& out) {
  if (!format.empty()) return parse_report_format(format);
  return out.extension() == ".json" ? ReportFormat::json : ReportFormat::csv;
}

void print_report(const MetricReport& rep) {
  std::cout << report_csv(rep);
}

std::sig_atomic_t volatile g_stop = 0;
httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AVLEM conversational product search"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "avlem 1.0");

  // ingest
  Common ingest_c;
  std::string in_reviews, in_meta, in_av, in_format = "canonical", ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Ingest raw reviews, metadata and an aspect-value catalog");
  add_common(ingest, ingest_c);
  ingest->add_option("--reviews", in_reviews, "JSON-lines reviews")->required()->check(CLI::ExistingFile);
  ingest->add_option("--meta", in_meta, "JSON-lines item metadata")->check(CLI::ExistingFile);
  ingest->add_option("--av", in_av, "Aspect-value catalog TSV")->check(CLI::ExistingFile);
  ingest->add_option("--format", in_format, "canonical|amazon")->capture_default_str();
  ingest->add_option("--out", ingest_out, "Output corpus directory")->required();

  // synth
  Common synth_c;
  std::optional<std::size_t> s_users, s_items, s_aspects, s_values;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with planted structure");
  add_common(synth, synth_c);
  synth->add_option("--users", s_users);
  synth->add_option("--items", s_items);
  synth->add_option("--aspects", s_aspects);
  synth->add_option("--values", s_values);
  synth->add_option("--out", synth_out, "Output corpus directory")->required();

  // split
  Common split_c;
  std::string split_dir, split_out;
  double review_frac = 0.7, query_test_frac = 0.3;
  auto* split = app.add_subcommand("split", "Split reviews and queries into train and test");
  add_common(split, split_c);
  split->add_option("--corpus", split_dir)->required()->check(CLI::ExistingDirectory);
  split->add_option("--review-frac", review_frac, "Per-user share of training reviews")->capture_default_str();
  split->add_option("--query-test-frac", query_test_frac, "Share of test queries")->capture_default_str();
  split->add_option("--out", split_out, "Split file (default: <corpus>/split.json)");

  // train
  Common train_c;
  CorpusArgs train_corpus;
  ModelFlags train_m;
  TrainFlags train_t;
  std::string train_out;
  bool train_quiet = false;
  auto* trn = app.add_subcommand("train", "Train an AVLEM model");
  add_common(trn, train_c);
  train_corpus.add(trn);
  train_m.add(trn);
  train_t.add(trn);
  trn->add_option("--out", train_out, "Model file")->required();
  trn->add_flag("--quiet", train_quiet, "No per-epoch loss lines");

  // eval
  Common eval_c;
  CorpusArgs eval_corpus;
  EvalFlags eval_e;
  std::string eval_model, eval_out, eval_format;
  bool eval_static = false;
  auto* evl = app.add_subcommand("eval", "Conversational evaluation of a trained model");
  add_common(evl, eval_c);
  eval_corpus.add(evl);
  eval_e.add(evl);
  evl->add_option("--model", eval_model, "Model file")->required()->check(CLI::ExistingFile);
  evl->add_flag("--no-feedback", eval_static, "Rank without using answers (AVLEM_init at every iteration)");
  evl->add_option("--out", eval_out, "Report file (.csv or .json)");
  evl->add_option("--format", eval_format, "csv|json (default: from --out extension)");

  // baseline-eval
  Common base_c;
  CorpusArgs base_corpus;
  EvalFlags base_e;
  std::string base_kind = "bm25", base_out, base_format;
  double base_rocchio = 0.5, base_neg_w = 0.1;
  auto* base = app.add_subcommand("baseline-eval", "Conversational evaluation of a term-based baseline");
  add_common(base, base_c);
  base_corpus.add(base);
  base_e.add(base);
  base->add_option("--baseline", base_kind, "bm25|ql|rocchio|singleneg|multineg")->capture_default_str();
  base->add_option("--rocchio-weight", base_rocchio, "Rocchio non-relevant weight")->capture_default_str();
  base->add_option("--neg-weight", base_neg_w, "SingleNeg/MultiNeg penalty weight")->capture_default_str();
  base->add_option("--out", base_out, "Report file (.csv or .json)");
  base->add_option("--format", base_format, "csv|json");

  // check-grad
  Common grad_c;
  std::size_t grad_trials = 100, grad_dim = 8;
  double grad_eps = 1e-4, grad_l2 = 1e-3, grad_tol = 1e-3;
  std::string grad_variant = "all";
  auto* grad = app.add_subcommand("check-grad", "Compare analytic gradients with central differences");
  add_common(grad, grad_c);
  grad->add_option("--trials", grad_trials, "Random instances per variant")->capture_default_str();
  grad->add_option("--dim", grad_dim)->capture_default_str();
  grad->add_option("--eps", grad_eps)->capture_default_str();
  grad->add_option("--l2", grad_l2)->capture_default_str();
  grad->add_option("--tolerance", grad_tol, "Fail at or above this relative error")->capture_default_str();
  grad->add_option("--variant", grad_variant, "all or one variant name")->capture_default_str();

  // sweep
  Common sweep_c;
  CorpusArgs sweep_corpus;
  ModelFlags sweep_m;
  TrainFlags sweep_t;
  EvalFlags sweep_e;
  std::optional<std::string> grid_iters, grid_m, grid_dims;
  std::string sweep_out;
  auto* swp = app.add_subcommand("sweep", "Sensitivity grid over iterations, m and embedding size");
  add_common(swp, sweep_c);
  sweep_corpus.add(swp);
  sweep_m.add(swp);
  sweep_t.add(swp);
  sweep_e.add(swp);
  swp->add_option("--grid-iterations", grid_iters, "e.g. 1,2,3,4,5");
  swp->add_option("--grid-m", grid_m, "e.g. 1,2,3");
  swp->add_option("--grid-dims", grid_dims, "e.g. 16,32,64");
  swp->add_option("--out", sweep_out, "CSV file");

  // serve
  Common serve_c;
  std::string serve_model, serve_corpus, serve_host = "127.0.0.1";
  std::optional<std::size_t> serve_m, serve_iters;
  std::optional<bool> serve_anon;
  std::optional<double> serve_ttl;
  int serve_port = 8080;
  auto* srv = app.add_subcommand("serve", "HTTP session API over a trained model");
  add_common(srv, serve_c);
  srv->add_option("--model", serve_model)->required()->envname("AVLEM_MODEL")->check(CLI::ExistingFile);
  srv->add_option("--corpus", serve_corpus)->required()->envname("AVLEM_CORPUS")->check(CLI::ExistingDirectory);
  srv->add_option("--m", serve_m, "Questions per turn")->envname("AVLEM_M");
  srv->add_option("--iterations", serve_iters, "Iteration budget per session")->envname("AVLEM_ITERATIONS");
  srv->add_option("--anonymous", serve_anon, "Allow unknown users (mean user embedding)")->envname("AVLEM_ANONYMOUS");
  srv->add_option("--ttl", serve_ttl, "Session time-to-live in seconds");
  srv->add_option("--host", serve_host)->envname("AVLEM_HOST")->capture_default_str();
  srv->add_option("--port", serve_port)->envname("AVLEM_PORT")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      ingest_c.load();
      const auto format = parse_source_format(in_format);
      banner("ingest", {{"reviews", in_reviews}, {"meta", in_meta}, {"av", in_av}, {"format", in_format},
                        {"out", ingest_out}});
      IngestStats rs;
      auto corpus = ingest_reviews(in_reviews, format, &rs);
      IngestStats ms, as;
      if (!in_meta.empty()) ms = ingest_metadata(corpus, in_meta, format);
      if (!in_av.empty()) as = ingest_aspect_values(corpus, in_av);
      corpus.reindex();
      write_corpus(corpus, ingest_out);
      std::cout << "reviews " << corpus.reviews.size() << " (dropped empty " << rs.dropped_empty << ")\n"
                << "users " << corpus.num_users() << " items " << corpus.num_items() << " words "
                << corpus.review_vocab.size() << " queries " << corpus.queries.size() << "\n"
                << "metadata skipped unknown items " << ms.skipped_unknown_item << "\n"
                << "catalog pairs " << corpus.av_catalog.size() << " aspects " << corpus.num_aspects()
                << " values " << corpus.num_values() << " (skipped multi-word " << as.skipped_multiword_value
                << ", unknown items " << as.skipped_unknown_item << ", merged " << as.merged_duplicates << ")\n";
      return 0;
    }

    if (*synth) {
      synth_c.load();
      SynthConfig cfg;
      merge_json(cfg, synth_c.section("synth"));
      override_with(s_users, cfg.users);
      override_with(s_items, cfg.items);
      override_with(s_aspects, cfg.aspects);
      override_with(s_values, cfg.values);
      override_with(synth_c.seed, cfg.seed);
      banner("synth", {{"synth", to_json(cfg)}, {"out", synth_out}});
      const auto data = generate_synthetic(cfg);
      write_synthetic(data, cfg, synth_out);
      std::cout << "users " << data.corpus.num_users() << " items " << data.corpus.num_items() << " reviews "
                << data.corpus.reviews.size() << " catalog pairs " << data.corpus.av_catalog.size()
                << " test pairs " << data.split.test_pairs.size() << "\n";
      return 0;
    }

    if (*split) {
      split_c.load();
      const std::uint64_t seed = split_c.seed.value_or(split_c.section("split").value("seed", 1ULL));
      const fs::path out = split_out.empty() ? fs::path(split_dir) / CorpusFiles::split : fs::path(split_out);
      banner("split", {{"corpus", split_dir}, {"seed", seed}, {"review_frac", review_frac},
                       {"query_test_frac", query_test_frac}, {"out", out.string()}});
      const auto corpus = load_corpus(split_dir);
      const auto s = split_train_test(corpus, seed, review_frac, query_test_frac);
      write_split(corpus, s, out);
      std::cout << "train reviews " << s.train_reviews.size() << " test reviews " << s.test_reviews.size()
                << " test pairs " << s.test_pairs.size() << "\n";
      return 0;
    }

    if (*trn) {
      train_c.load();
      const auto mcfg = train_m.resolve(train_c);
      const auto tcfg = train_t.resolve(train_c);
      ojson resolved = train_corpus.to_json();
      resolved["model"] = to_json(mcfg);
      resolved["train"] = to_json(tcfg);
      resolved["out"] = train_out;
      banner("train", resolved);
      const auto corpus = load_corpus(train_corpus.dir);
      const auto sp = read_split(corpus, train_corpus.split_path());
      auto res = train(corpus, sp, mcfg, tcfg, [&](std::size_t epoch, double loss) {
        if (!train_quiet) std::cout << "epoch " << epoch << " loss " << format_double(loss) << std::endl;
      });
      if (fs::path(train_out).has_parent_path()) fs::create_directories(fs::path(train_out).parent_path());
      save_params(res.params, train_out);
      write_text(train_out + ".json", resolved.dump(2) + "\n");
      std::cout << "saved " << train_out << " checksum " << checksum(res.params) << "\n";
      return 0;
    }

    if (*evl || *base) {
      const bool is_base = base->parsed();
      auto& c = is_base ? base_c : eval_c;
      auto& ca = is_base ? base_corpus : eval_corpus;
      c.load();
      const auto ecfg = (is_base ? base_e : eval_e).resolve(c);
      const auto& out = is_base ? base_out : eval_out;
      const auto& fmt = is_base ? base_format : eval_format;
      ojson resolved = ca.to_json();
      resolved["eval"] = to_json(ecfg);
      const auto corpus = load_corpus(ca.dir);
      const auto sp = read_split(corpus, ca.split_path());
      MetricReport rep;
      if (is_base) {
        const auto kind = parse_baseline(base_kind);
        BaselineParams bp;
        bp.rocchio_neg_weight = base_rocchio;
        bp.neg.neg_doc_weight = base_neg_w;
        resolved["baseline"] = {{"kind", baseline_name(kind)}, {"rocchio_weight", base_rocchio},
                                {"neg_weight", base_neg_w}};
        resolved["out"] = out;
        banner("baseline-eval", resolved);
        const auto ix = build_index(corpus, sp);
        const BaselineRanker ranker(kind, ix, bp);
        rep = evaluate_conversational(ranker, corpus, sp.test_pairs, ecfg, baseline_name(kind));
      } else {
        resolved["model"] = eval_model;
        resolved["no_feedback"] = eval_static;
        resolved["out"] = out;
        banner("eval", resolved);
        const auto params = load_params(eval_model, vocab_sizes(corpus));
        const AvlemRanker ranker(params, corpus, !eval_static);
        rep = evaluate_conversational(ranker, corpus, sp.test_pairs, ecfg, eval_static ? "avlem_init" : "avlem");
      }
      print_report(rep);
      if (!out.empty()) emit_report(rep, out, format_for(fmt, out));
      return 0;
    }

    if (*grad) {
      grad_c.load();
      const std::uint64_t seed = grad_c.seed.value_or(1);
      std::vector<Variant> variants;
      if (grad_variant == "all")
        variants = {Variant::avlem, Variant::hem, Variant::no_aspect, Variant::no_value, Variant::no_negative,
                    Variant::no_separate};
      else
        variants = {parse_variant(grad_variant)};
      require(grad_trials >= 1, "check-grad: trials must be >= 1");
      banner("check-grad", {{"trials", grad_trials}, {"dim", grad_dim}, {"eps", grad_eps}, {"l2", grad_l2},
                            {"tolerance", grad_tol}, {"variant", grad_variant}, {"seed", seed}});
      double worst = 0.0;
      for (auto v : variants) {
        ModelConfig mc;
        mc.dim = grad_dim;
        mc = apply_variant(mc, v);
        double vmax = 0.0;
        std::size_t checked = 0;
        for (std::size_t t = 0; t < grad_trials; ++t) {
          const auto gc = random_grad_check_case(mc, seed * 1000003ULL + t);
          const auto r = finite_difference_check(gc.params, gc.instance, gc.aspects, grad_l2, grad_eps);
          vmax = std::max(vmax, r.max_rel_error);
          checked += r.checked;
        }
        std::cout << "variant " << variant_name(v) << " scalars " << checked << " max_rel_error "
                  << format_double(vmax) << "\n";
        worst = std::max(worst, vmax);
      }
      std::cout << "max relative error " << format_double(worst) << (worst < grad_tol ? " OK" : " FAIL") << "\n";
      return worst < grad_tol ? 0 : 1;
    }

    if (*swp) {
      sweep_c.load();
      const auto mcfg = sweep_m.resolve(sweep_c);
      const auto tcfg = sweep_t.resolve(sweep_c);
      const auto ecfg = sweep_e.resolve(sweep_c);
      SweepGrid grid;
      const auto gj = sweep_c.section("sweep");
      if (gj.contains("iterations")) grid.iterations = gj.at("iterations").get<std::vector<std::size_t>>();
      if (gj.contains("m")) grid.m = gj.at("m").get<std::vector<std::size_t>>();
      if (gj.contains("dims")) grid.dims = gj.at("dims").get<std::vector<std::size_t>>();
      if (grid_iters) grid.iterations = parse_size_list(*grid_iters);
      if (grid_m) grid.m = parse_size_list(*grid_m);
      if (grid_dims) grid.dims = parse_size_list(*grid_dims);
      grid.validate();
      ojson resolved = sweep_corpus.to_json();
      resolved["model"] = to_json(mcfg);
      resolved["train"] = to_json(tcfg);
      resolved["eval"] = to_json(ecfg);
      resolved["sweep"] = {{"iterations", grid.iterations}, {"m", grid.m}, {"dims", grid.dims}};
      resolved["out"] = sweep_out;
      banner("sweep", resolved);
      const auto corpus = load_corpus(sweep_corpus.dir);
      const auto sp = read_split(corpus, sweep_corpus.split_path());
      const auto rows = run_sweep(corpus, sp, mcfg, tcfg, ecfg, grid,
                                  [](const std::string& msg) { std::cerr << msg << std::endl; });
      const auto csv = sweep_csv(rows);
      std::cout << csv;
      if (!sweep_out.empty()) write_text(sweep_out, csv);
      return 0;
    }

    if (*srv) {
      serve_c.load();
      ServiceConfig sc;
      const auto sj = serve_c.section("service");
      if (sj.contains("m")) sc.m = sj.at("m").get<std::size_t>();
      if (sj.contains("iterations")) sc.iterations = sj.at("iterations").get<std::size_t>();
      if (sj.contains("anonymous")) sc.anonymous = sj.at("anonymous").get<bool>();
      if (sj.contains("ttl_seconds")) sc.ttl_seconds = sj.at("ttl_seconds").get<double>();
      if (sj.contains("strategy")) sc.strategy = parse_strategy(sj.at("strategy").get<std::string>());
      override_with(serve_m, sc.m);
      override_with(serve_iters, sc.iterations);
      override_with(serve_anon, sc.anonymous);
      override_with(serve_ttl, sc.ttl_seconds);
      override_with(serve_c.seed, sc.seed);
      ojson resolved = {{"model", serve_model}, {"corpus", serve_corpus}, {"host", serve_host}, {"port", serve_port}};
      resolved["service"] = to_json(sc);
      banner("serve", resolved);
      const auto corpus = load_corpus(serve_corpus);
      const auto params = load_params(serve_model, vocab_sizes(corpus));
      Service service(corpus, params, sc);
      httplib::Server server;
      service.bind(server);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        g_stop = 1;
        if (g_server) g_server->stop();
      });
      std::signal(SIGTERM, [](int) {
        g_stop = 1;
        if (g_server) g_server->stop();
      });
      std::cout << "listening on http://" << serve_host << ":" << serve_port << std::endl;
      if (!server.listen(serve_host, serve_port) && !g_stop) throw Error("cannot listen on port " + std::to_string(serve_port));
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "avlem: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
