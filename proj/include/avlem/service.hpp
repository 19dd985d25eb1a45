#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "avlem/common.hpp"
#include "avlem/conversation.hpp"
#include "avlem/corpus.hpp"
#include "avlem/model.hpp"

namespace httplib {
class Server;
}

namespace avlem {

struct ServiceConfig {
  std::size_t m = 2;
  std::size_t iterations = 5;
  bool anonymous = true;  // unknown or missing users fall back to the mean user
  Strategy strategy = Strategy::most_mentioned;
  double ttl_seconds = 3600.0;
  std::uint64_t seed = 1;
};

inline nlohmann::ordered_json to_json(const ServiceConfig& c) {
  return {{"m", c.m},
          {"iterations", c.iterations},
          {"anonymous", c.anonymous},
          {"strategy", strategy_name(c.strategy)},
          {"ttl_seconds", c.ttl_seconds},
          {"seed", c.seed}};
}

struct HttpResponse {
  int status = 200;
  nlohmann::ordered_json body;
};

// Session API over a read-only model. handle() is transport independent;
// bind() attaches it to an httplib server.
class Service {
 public:
  using Clock = std::function<double()>;  // seconds

  Service(const Corpus& corpus, const ModelParams& params, ServiceConfig cfg, Clock clock = {})
      : corpus_(corpus),
        params_(params),
        cfg_(cfg),
        ranker_(params, corpus),
        items_(all_items(corpus)),
        clock_(clock ? std::move(clock) : Clock(steady_seconds)),
        rng_(cfg.seed) {
    require(cfg_.iterations >= 1, "service: iterations must be >= 1");
  }

  HttpResponse handle(std::string_view method, std::string_view path, std::string_view body) {
    try {
      evict_expired();
      const auto parts = split_path(path);
      if (parts.size() == 1 && parts[0] == "sessions") {
        if (method != "POST") return error(405, "method not allowed");
        return create_session(parse_body(body));
      }
      if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "answers") {
        if (method != "POST") return error(405, "method not allowed");
        return post_answers(parts[1], parse_body(body));
      }
      if (parts.size() == 2 && parts[0] == "sessions") {
        if (method != "GET") return error(405, "method not allowed");
        return get_session(parts[1]);
      }
      if (parts.size() == 2 && parts[0] == "items") {
        if (method != "GET") return error(405, "method not allowed");
        return get_item(parts[1]);
      }
      return error(404, "no such endpoint");
    } catch (const BadRequest& e) {
      return error(400, e.what());
    } catch (const std::exception& e) {
      return error(500, e.what());
    }
  }

  void bind(httplib::Server& server);

  std::size_t session_count() const {
    std::lock_guard lock(store_mu_);
    return sessions_.size();
  }

  const ServiceConfig& config() const { return cfg_; }

 private:
  struct BadRequest : Error {
    using Error::Error;
  };

  struct Turn {
    std::size_t iteration = 0;
    ItemId item = 0;
    std::vector<std::pair<Question, Answer>> answers;
  };

  struct Record {
    std::string id;
    std::string user_name;
    SessionState state;
    std::vector<Question> pending;
    std::vector<Turn> history;
    Rng rng;
    double created = 0.0;
    double updated = 0.0;
    std::mutex mu;
  };

  static double steady_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  }

  static std::vector<std::string> split_path(std::string_view path) {
    if (auto q = path.find('?'); q != std::string_view::npos) path = path.substr(0, q);
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= path.size()) {
      auto end = path.find('/', start);
      if (end == std::string_view::npos) end = path.size();
      if (end > start) out.emplace_back(path.substr(start, end - start));
      start = end + 1;
    }
    return out;
  }

  static nlohmann::json parse_body(std::string_view body) {
    if (body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw BadRequest("request body must be a JSON object");
    return j;
  }

  static HttpResponse error(int status, const std::string& msg) {
    return {status, {{"error", msg}, {"status", status}}};
  }

  std::string new_id() {
    static constexpr char hex[] = "0123456789abcdef";
    std::string id;
    for (int k = 0; k < 16; ++k) id += hex[uniform_index(rng_, 16)];
    return id;
  }

  void evict_expired() {
    const double now = clock_();
    std::lock_guard lock(store_mu_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (now - it->second->updated > cfg_.ttl_seconds)
        it = sessions_.erase(it);
      else
        ++it;
    }
  }

  std::shared_ptr<Record> find_session(const std::string& id) const {
    std::lock_guard lock(store_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  nlohmann::ordered_json item_json(ItemId i) const {
    auto pairs = corpus_.item_av(i);
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto* a, const auto* b) { return a->mentions > b->mentions; });
    nlohmann::ordered_json avs = nlohmann::ordered_json::array();
    for (const auto* p : pairs)
      avs.push_back({{"aspect", corpus_.aspect_text(p->aspect)},
                     {"value", corpus_.value_vocab.token(p->value)},
                     {"mentions", p->mentions}});
    nlohmann::ordered_json cats = nlohmann::ordered_json::array();
    std::string title = corpus_.items.token(i);
    if (i < corpus_.item_categories.size())
      for (const auto& path : corpus_.item_categories[i]) {
        cats.push_back(path);
        if (!path.empty() && title == corpus_.items.token(i)) title += " (" + path.back() + ")";
      }
    return {{"item_id", corpus_.items.token(i)}, {"title", title}, {"categories", cats},
            {"aspect_values", avs}};
  }

  nlohmann::ordered_json questions_json(const std::vector<Question>& qs) const {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& q : qs)
      out.push_back({{"aspect", corpus_.aspect_text(q.aspect)},
                     {"value", corpus_.value_vocab.token(q.value)},
                     {"text", q.text}});
    return out;
  }

  nlohmann::ordered_json turn_json(const Record& r) const {
    return {{"session_id", r.id},
            {"iteration", r.state.iteration()},
            {"shown_item", item_json(r.state.shown.back())},
            {"questions", questions_json(r.pending)},
            {"finished", r.state.finished},
            {"personalization", !r.state.anonymous}};
  }

  void ask(Record& r) {
    r.pending.clear();
    if (!r.state.finished) r.pending = select_questions(r.state, corpus_, cfg_.m, cfg_.strategy, r.rng);
  }

  HttpResponse create_session(const nlohmann::json& req) {
    if (!req.contains("query") || !req["query"].is_string()) throw BadRequest("missing string field 'query'");
    const auto text = req["query"].get<std::string>();
    if (tokenize(text).empty()) return error(400, "empty query");
    std::vector<WordId> query;
    for (const auto& tok : tokenize(text))
      if (auto w = corpus_.review_vocab.find(tok)) query.push_back(*w);
    if (query.empty()) return error(400, "query has no known terms");

    std::optional<UserId> user;
    std::string user_name;
    if (req.contains("user_id") && !req["user_id"].is_null()) {
      if (!req["user_id"].is_string()) throw BadRequest("'user_id' must be a string");
      user_name = req["user_id"].get<std::string>();
      user = corpus_.users.find(user_name);
    }
    if (!user && !cfg_.anonymous) return error(404, "unknown user '" + user_name + "'");

    auto rec = std::make_shared<Record>();
    {
      std::lock_guard lock(store_mu_);
      do rec->id = new_id(); while (sessions_.contains(rec->id));
      rec->rng = Rng(rng_());
    }
    rec->user_name = user ? user_name : "";
    rec->state = start_session(user.value_or(0), std::move(query), !user);
    rec->created = rec->updated = clock_();
    show_next(rec->state, ranker_, items_, cfg_.iterations);
    if (rec->state.shown.empty()) return error(500, "no items to show");
    rec->history.push_back({1, rec->state.shown.back(), {}});
    ask(*rec);
    auto body = turn_json(*rec);
    std::lock_guard lock(store_mu_);
    sessions_[rec->id] = rec;
    return {201, body};
  }

  HttpResponse post_answers(const std::string& id, const nlohmann::json& req) {
    auto rec = find_session(id);
    if (!rec) return error(404, "unknown session '" + id + "'");
    std::unique_lock lock(rec->mu, std::try_to_lock);
    if (!lock.owns_lock()) return error(409, "session is being updated concurrently");
    if (rec->state.finished) return error(410, "session finished");
    if (!req.contains("answers") || !req["answers"].is_array()) throw BadRequest("missing array field 'answers'");
    // Optional guard so clients can detect that another post already advanced the session.
    if (req.contains("iteration")) {
      if (!req["iteration"].is_number_integer()) throw BadRequest("'iteration' must be an integer");
      if (req["iteration"].get<std::int64_t>() != static_cast<std::int64_t>(rec->state.iteration()))
        return error(409, "stale iteration");
    }

    std::vector<Answer> answers(rec->pending.size(), Answer::skip);
    std::vector<char> seen(rec->pending.size(), 0);
    for (const auto& a : req["answers"]) {
      if (!a.is_object() || !a.contains("aspect") || !a.contains("value") || !a.contains("answer") ||
          !a["aspect"].is_string() || !a["value"].is_string() || !a["answer"].is_string())
        throw BadRequest("each answer needs string fields aspect, value, answer");
      Answer ans;
      try {
        ans = parse_answer(a["answer"].get<std::string>());
      } catch (const Error& e) {
        throw BadRequest(e.what());
      }
      const auto aspect = a["aspect"].get<std::string>();
      const auto value = a["value"].get<std::string>();
      std::size_t k = 0;
      for (; k < rec->pending.size(); ++k)
        if (corpus_.aspect_text(rec->pending[k].aspect) == aspect &&
            corpus_.value_vocab.token(rec->pending[k].value) == value)
          break;
      if (k == rec->pending.size() || seen[k])
        return error(409, "answer to a question that is not pending: (" + aspect + ", " + value + ")");
      seen[k] = 1;
      answers[k] = ans;
    }
    auto& turn = rec->history.back();
    for (std::size_t k = 0; k < rec->pending.size(); ++k) turn.answers.push_back({rec->pending[k], answers[k]});
    apply_answers(rec->state, rec->pending, answers);
    show_next(rec->state, ranker_, items_, cfg_.iterations);
    rec->history.push_back({rec->state.iteration(), rec->state.shown.back(), {}});
    ask(*rec);
    rec->updated = clock_();
    return {200, turn_json(*rec)};
  }

  HttpResponse get_session(const std::string& id) {
    auto rec = find_session(id);
    if (!rec) return error(404, "unknown session '" + id + "'");
    std::lock_guard lock(rec->mu);
    const auto& s = rec->state;
    nlohmann::ordered_json shown = nlohmann::ordered_json::array();
    for (auto i : s.shown) shown.push_back(item_json(i));
    nlohmann::ordered_json fb = {{"positive", nlohmann::ordered_json::array()},
                                 {"negative", nlohmann::ordered_json::array()}};
    for (const auto& [a, v] : s.feedback.positive())
      fb["positive"].push_back({{"aspect", corpus_.aspect_text(a)}, {"value", corpus_.value_vocab.token(v)}});
    for (const auto& [a, v] : s.feedback.negative())
      fb["negative"].push_back({{"aspect", corpus_.aspect_text(a)}, {"value", corpus_.value_vocab.token(v)}});
    nlohmann::ordered_json history = nlohmann::ordered_json::array();
    for (const auto& t : rec->history) {
      nlohmann::ordered_json answers = nlohmann::ordered_json::array();
      for (const auto& [q, a] : t.answers)
        answers.push_back({{"aspect", corpus_.aspect_text(q.aspect)},
                           {"value", corpus_.value_vocab.token(q.value)},
                           {"answer", answer_name(a)}});
      history.push_back({{"iteration", t.iteration}, {"item_id", corpus_.items.token(t.item)}, {"answers", answers}});
    }
    std::vector<std::string> words;
    for (auto w : s.query) words.push_back(corpus_.review_vocab.token(w));
    nlohmann::ordered_json body = {
        {"session_id", rec->id},
        {"user_id", s.anonymous ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(rec->user_name)},
        {"personalization", !s.anonymous},
        {"query", join(words)},
        {"iteration", s.iteration()},
        {"max_iterations", cfg_.iterations},
        {"finished", s.finished},
        {"shown", shown},
        {"feedback", fb},
        {"questions", questions_json(rec->pending)},
        {"history", history},
        {"age_seconds", clock_() - rec->created}};
    return {200, body};
  }

  HttpResponse get_item(const std::string& name) {
    auto i = corpus_.items.find(name);
    if (!i) return error(404, "unknown item '" + name + "'");
    return {200, item_json(*i)};
  }

  const Corpus& corpus_;
  const ModelParams& params_;
  ServiceConfig cfg_;
  AvlemRanker ranker_;
  std::vector<ItemId> items_;
  Clock clock_;
  mutable std::mutex store_mu_;
  Rng rng_;
  std::unordered_map<std::string, std::shared_ptr<Record>> sessions_;
};

}  // namespace avlem

#ifdef CPPHTTPLIB_HTTPLIB_H
namespace avlem {
inline void Service::bind(httplib::Server& server) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    auto r = handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body.dump(), "application/json");
  };
  server.Post("/sessions", route);
  server.Post(R"(/sessions/[^/]+/answers)", route);
  server.Get(R"(/sessions/[^/]+)", route);
  server.Get(R"(/items/[^/]+)", route);
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}
}  // namespace avlem
#endif
