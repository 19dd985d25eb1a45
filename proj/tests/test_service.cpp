#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "httplib.h"

#include "avlem/service.hpp"
#include "avlem/training.hpp"
#include "support.hpp"

using namespace avlem;
using avlem::testing::SchemaValidator;
using json = nlohmann::json;

namespace {

struct Fixture : ::testing::Test {
  SyntheticData data = generate_synthetic(avlem::testing::tiny_synth(5));
  ModelParams params;
  SchemaValidator schema{avlem::testing::read_json(avlem::testing::source_dir() / "schemas/session_api.schema.json")};
  double now = 1000.0;

  Fixture() {
    ModelConfig mc;
    mc.dim = 8;
    params = init_params(mc, vocab_sizes(data.corpus), 11);
  }

  ServiceConfig config(bool anonymous = true) {
    ServiceConfig c;
    c.m = 2;
    c.iterations = 3;
    c.anonymous = anonymous;
    return c;
  }

  std::unique_ptr<Service> make(ServiceConfig c) {
    return std::make_unique<Service>(data.corpus, params, c, [this] { return now; });
  }

  std::string query_text() const { return data.corpus.query_text(0); }
  std::string user_name() const { return data.corpus.users.token(0); }

  void expect_valid(const HttpResponse& r, const std::string& def) {
    const auto errors = schema.validate(json::parse(r.body.dump()), def);
    for (const auto& e : errors) ADD_FAILURE() << def << ": " << e << "\n" << r.body.dump();
  }

  HttpResponse create(Service& s, const json& body) {
    auto r = s.handle("POST", "/sessions", body.dump());
    expect_valid(r, r.status < 300 ? "turn" : "error");
    return r;
  }

  static json skip_all(const HttpResponse& turn) {
    json answers = json::array();
    for (const auto& q : turn.body["questions"])
      answers.push_back({{"aspect", q["aspect"]}, {"value", q["value"]}, {"answer", "skip"}});
    return {{"answers", answers}};
  }
};

}  // namespace

TEST_F(Fixture, CreateReturnsOneItemAndAtMostMQuestions) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  ASSERT_EQ(r.status, 201);
  EXPECT_EQ(r.body["iteration"], 1);
  EXPECT_LE(r.body["questions"].size(), 2u);
  EXPECT_TRUE(r.body["personalization"].get<bool>());
  EXPECT_FALSE(r.body["finished"].get<bool>());
}

TEST_F(Fixture, ShownItemIsTopOfInitialRanking) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  auto ranked = rank_items(0, data.corpus.queries[0], {}, all_items(data.corpus), params, data.corpus.aspects);
  EXPECT_EQ(r.body["shown_item"]["item_id"], data.corpus.items.token(ranked.front().item));
}

TEST_F(Fixture, EmptyQueryIs400) {
  auto svc = make(config());
  EXPECT_EQ(create(*svc, {{"user_id", user_name()}, {"query", "   "}}).status, 400);
  EXPECT_EQ(create(*svc, {{"user_id", user_name()}, {"query", "qqqunknownzzz"}}).status, 400);
  EXPECT_EQ(create(*svc, {{"user_id", user_name()}}).status, 400);
  EXPECT_EQ(svc->handle("POST", "/sessions", "{not json").status, 400);
}

TEST_F(Fixture, UnknownUserIs404WithoutAnonymousMode) {
  auto svc = make(config(false));
  EXPECT_EQ(create(*svc, {{"user_id", "nobody"}, {"query", query_text()}}).status, 404);
  EXPECT_EQ(create(*svc, {{"query", query_text()}}).status, 404);
}

TEST_F(Fixture, AnonymousUsesMeanUser) {
  auto svc = make(config(true));
  auto r = create(*svc, {{"user_id", "nobody"}, {"query", query_text()}});
  ASSERT_EQ(r.status, 201);
  EXPECT_FALSE(r.body["personalization"].get<bool>());
  const auto mu = mean_user(params);
  auto ranked = rank_items(mu, data.corpus.queries[0], {}, all_items(data.corpus), params, data.corpus.aspects);
  EXPECT_EQ(r.body["shown_item"]["item_id"], data.corpus.items.token(ranked.front().item));
}

TEST_F(Fixture, AllSkipEqualsFeedbackFreeRerank) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  const auto first = *data.corpus.items.find(r.body["shown_item"]["item_id"].get<std::string>());
  auto id = r.body["session_id"].get<std::string>();
  auto next = svc->handle("POST", "/sessions/" + id + "/answers", skip_all(r).dump());
  ASSERT_EQ(next.status, 200);
  expect_valid(next, "turn");
  EXPECT_EQ(next.body["iteration"], 2);

  std::vector<ItemId> rest;
  for (auto i : all_items(data.corpus))
    if (i != first) rest.push_back(i);
  auto ranked = rank_items(0, data.corpus.queries[0], {}, rest, params, data.corpus.aspects);
  EXPECT_EQ(next.body["shown_item"]["item_id"], data.corpus.items.token(ranked.front().item));
}

TEST_F(Fixture, AnswersMergeIntoFeedback) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  ASSERT_GE(r.body["questions"].size(), 2u);
  auto id = r.body["session_id"].get<std::string>();
  const auto& q = r.body["questions"];
  json body = {{"answers",
                {{{"aspect", q[0]["aspect"]}, {"value", q[0]["value"]}, {"answer", "yes"}},
                 {{"aspect", q[1]["aspect"]}, {"value", q[1]["value"]}, {"answer", "no"}}}}};
  ASSERT_EQ(svc->handle("POST", "/sessions/" + id + "/answers", body.dump()).status, 200);
  auto state = svc->handle("GET", "/sessions/" + id, "");
  ASSERT_EQ(state.status, 200);
  expect_valid(state, "session");
  EXPECT_EQ(state.body["feedback"]["positive"].size(), 1u);
  EXPECT_EQ(state.body["feedback"]["negative"].size(), 1u);
  EXPECT_EQ(state.body["feedback"]["positive"][0]["value"], q[0]["value"]);
  EXPECT_EQ(state.body["history"][0]["answers"][1]["answer"], "no");
}

TEST_F(Fixture, StaleQuestionIs409) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  auto id = r.body["session_id"].get<std::string>();
  ASSERT_EQ(svc->handle("POST", "/sessions/" + id + "/answers", skip_all(r).dump()).status, 200);
  // The first turn's questions are no longer pending.
  auto stale = skip_all(r);
  if (stale["answers"].empty())
    stale["answers"].push_back({{"aspect", "nope"}, {"value", "nope"}, {"answer", "yes"}});
  auto again = svc->handle("POST", "/sessions/" + id + "/answers", stale.dump());
  EXPECT_EQ(again.status, 409);
  expect_valid(again, "error");
}

TEST_F(Fixture, BudgetReachedIs410) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  auto id = r.body["session_id"].get<std::string>();
  for (int k = 0; k < 2; ++k) {
    r = svc->handle("POST", "/sessions/" + id + "/answers", skip_all(r).dump());
    ASSERT_EQ(r.status, 200);
  }
  EXPECT_EQ(r.body["iteration"], 3);
  EXPECT_TRUE(r.body["finished"].get<bool>());
  EXPECT_TRUE(r.body["questions"].empty());
  EXPECT_EQ(svc->handle("POST", "/sessions/" + id + "/answers", R"({"answers":[]})").status, 410);
}

TEST_F(Fixture, GetSessionAndItems) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  auto id = r.body["session_id"].get<std::string>();
  auto s = svc->handle("GET", "/sessions/" + id, "");
  ASSERT_EQ(s.status, 200);
  EXPECT_EQ(s.body["iteration"], 1);
  EXPECT_EQ(s.body["user_id"], user_name());
  EXPECT_EQ(svc->handle("GET", "/sessions/deadbeef", "").status, 404);
  EXPECT_EQ(svc->handle("POST", "/sessions/deadbeef/answers", R"({"answers":[]})").status, 404);
  EXPECT_EQ(svc->handle("GET", "/items/no-such-item", "").status, 404);
  EXPECT_EQ(svc->handle("GET", "/nowhere", "").status, 404);
  EXPECT_EQ(svc->handle("DELETE", "/sessions", "").status, 405);

  for (ItemId i = 0; i < data.corpus.num_items(); ++i) {
    auto item = svc->handle("GET", "/items/" + data.corpus.items.token(i), "");
    ASSERT_EQ(item.status, 200);
    expect_valid(item, "item");
    const auto& avs = item.body["aspect_values"];
    EXPECT_EQ(avs.size(), data.corpus.item_av(i).size());
    for (std::size_t k = 1; k < avs.size(); ++k)
      EXPECT_GE(avs[k - 1]["mentions"].get<std::uint64_t>(), avs[k]["mentions"].get<std::uint64_t>());
  }
}

TEST_F(Fixture, NoAnswerChangesNextItemVersusSkip) {
  // Find a session where a "no" answer moves the next item.
  auto svc = make(config());
  bool changed = false;
  for (QueryId qid = 0; qid < data.corpus.queries.size() && !changed; ++qid) {
    const json req = {{"user_id", user_name()}, {"query", data.corpus.query_text(qid)}};
    auto a = create(*svc, req);
    auto b = create(*svc, req);
    if (a.body["questions"].empty()) continue;
    auto no = skip_all(a);
    for (auto& x : no["answers"]) x["answer"] = "no";
    auto na = svc->handle("POST", "/sessions/" + a.body["session_id"].get<std::string>() + "/answers", no.dump());
    auto nb = svc->handle("POST", "/sessions/" + b.body["session_id"].get<std::string>() + "/answers",
                          skip_all(b).dump());
    ASSERT_EQ(na.status, 200);
    ASSERT_EQ(nb.status, 200);
    changed = na.body["shown_item"]["item_id"] != nb.body["shown_item"]["item_id"];
  }
  EXPECT_TRUE(changed);
}

TEST_F(Fixture, ModelIsNeverMutated) {
  const auto before = checksum(params);
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  auto id = r.body["session_id"].get<std::string>();
  auto no = skip_all(r);
  for (auto& x : no["answers"]) x["answer"] = "no";
  svc->handle("POST", "/sessions/" + id + "/answers", no.dump());
  svc->handle("GET", "/sessions/" + id, "");
  EXPECT_EQ(checksum(params), before);
}

TEST_F(Fixture, SessionsExpireAfterTtl) {
  auto svc = make(config());
  auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
  auto id = r.body["session_id"].get<std::string>();
  EXPECT_EQ(svc->config().ttl_seconds, 3600.0);
  now += 3599;
  EXPECT_EQ(svc->handle("GET", "/sessions/" + id, "").status, 200);
  now += 2;
  EXPECT_EQ(svc->handle("GET", "/sessions/" + id, "").status, 404);
  EXPECT_EQ(svc->session_count(), 0u);
}

TEST_F(Fixture, ConcurrentAnswersSerialize) {
  auto svc = make(config());
  for (int round = 0; round < 20; ++round) {
    auto r = create(*svc, {{"user_id", user_name()}, {"query", query_text()}});
    auto id = r.body["session_id"].get<std::string>();
    auto req = skip_all(r);
    req["iteration"] = 1;
    const auto body = req.dump();
    std::atomic<int> ok{0}, conflict{0}, other{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
      threads.emplace_back([&] {
        auto x = svc->handle("POST", "/sessions/" + id + "/answers", body);
        (x.status == 200 ? ok : x.status == 409 ? conflict : other)++;
      });
    for (auto& t : threads) t.join();
    // Exactly one post wins; the rest either lose the lock or find the questions gone.
    EXPECT_EQ(ok.load(), 1);
    EXPECT_EQ(conflict.load(), 3);
    EXPECT_EQ(other.load(), 0);
    auto s = svc->handle("GET", "/sessions/" + id, "");
    EXPECT_EQ(s.body["iteration"], 2);
  }
}

TEST_F(Fixture, HttpBinding) {
  auto svc = make(config());
  httplib::Server server;
  svc->bind(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto created = client.Post("/sessions", json{{"user_id", user_name()}, {"query", query_text()}}.dump(),
                             "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  auto body = json::parse(created->body);
  EXPECT_TRUE(schema.validate(body, "turn").empty());
  auto got = client.Get("/sessions/" + body["session_id"].get<std::string>());
  ASSERT_TRUE(got);
  EXPECT_EQ(got->status, 200);
  EXPECT_TRUE(schema.validate(json::parse(got->body), "session").empty());
  auto missing = client.Get("/sessions/zzz");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  server.stop();
  th.join();
}
