#include "care/error.hpp"
#include "care/http_api.hpp"
#include "care/session_service.hpp"
#include "care/session_store.hpp"

#include "scenarios.hpp"
#include "support.hpp"

#include <httplib.h>

#include <gtest/gtest.h>

#include <fstream>

using namespace care;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return ErrorCode::BadRequest;
}

std::vector<Fixture> all_fixtures() {
    std::vector<Fixture> out;
    for (const auto& name : test::scenario_names()) {
        auto f = test::fixture_script(name);
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

std::string panel_dump(const PanelSnapshot& p) { return panel_to_json(p).dump(); }

}  // namespace

TEST(Store, MemoryAppendLoadTruncate) {
    MemorySessionStore store;
    for (int i = 0; i < 5; ++i) store.append("a", ordered_json{{"i", i}});
    EXPECT_EQ(store.load_records("a").size(), 5u);
    EXPECT_EQ(store.load_records("a", 3).front()["i"], 3);
    store.truncate("a", 2);
    EXPECT_EQ(store.load_records("a").size(), 2u);
    EXPECT_FALSE(store.load_snapshot("a"));
    store.write_snapshot("a", ordered_json{{"record_count", 2}});
    EXPECT_EQ((*store.load_snapshot("a"))["record_count"], 2);
    EXPECT_EQ(store.list(), std::vector<std::string>{"a"});
}

TEST(Store, FileLogSurvivesReopenAndIgnoresTornLine) {
    test::TempDir dir;
    {
        FileSessionStore store(dir.path());
        store.append("s-1", ordered_json{{"op", "x"}, {"n", 1}});
        store.append("s-1", ordered_json{{"op", "y"}, {"n", 2}});
        store.write_snapshot("s-1", ordered_json{{"record_count", 1}});
    }
    {
        std::ofstream torn(dir.path() / "s-1" / "log.jsonl", std::ios::app);
        torn << R"({"op":"z","n":)";
    }
    FileSessionStore store(dir.path());
    auto records = store.load_records("s-1");
    ASSERT_EQ(records.size(), 2u);
    EXPECT_EQ(records[1]["n"], 2);
    EXPECT_EQ(store.load_records("s-1", 1).size(), 1u);
    EXPECT_EQ((*store.load_snapshot("s-1"))["record_count"], 1);
    EXPECT_EQ(store.list(), std::vector<std::string>{"s-1"});
    EXPECT_EQ(code_of([&] { store.append("../evil", ordered_json::object()); }), ErrorCode::StorageError);
}

TEST(Panels, JsonShape) {
    MemorySessionStore store;
    auto result = test::run_fixture("hawaii", true, &store);
    const auto& p = result.panels;
    EXPECT_EQ(p["mode"], "care");
    EXPECT_EQ(p["busy"], false);
    EXPECT_EQ(p["needs"]["slots"].size(), 10u);
    EXPECT_EQ(p["needs"]["slots"][0]["need_id"], "000");
    EXPECT_EQ(p["chat"][0]["author"], "user");
    for (const auto& m : p["chat"]) {
        EXPECT_EQ(m["text"].get<std::string>().find("[Inquiry]"), std::string::npos);
    }
    EXPECT_TRUE(p["solution"]["revision_basis"].is_number());
    const auto body = p["solution"]["body"].get<std::string>();
    ASSERT_FALSE(p["solution"]["need_refs"].empty());
    for (const auto& r : p["solution"]["need_refs"]) {
        auto slice = body.substr(r["start"].get<std::size_t>(), r["end"].get<std::size_t>() - r["start"].get<std::size_t>());
        EXPECT_EQ(slice, "Need ID: " + r["need_id"].get<std::string>());
    }
}

TEST(Panels, HideQuestionsNotYetAsked) {
    auto scenario = test::fixture_scenario("hawaii");
    ScriptedBackend backend(test::fixture_script("hawaii"), true);
    Session s("p", scenario.session_tag, test::prompts(), backend);
    s.start(scenario.query, false);
    // First batch posted: 002-004 of the 002-009 questions.
    std::set<std::string> shown;
    for (const auto& slot : make_panel_snapshot(s.state()).needs) shown.insert(slot.id.str());
    EXPECT_EQ(shown, (std::set<std::string>{"000", "001", "002", "003", "004"}));
    EXPECT_EQ(s.state().memo.slots().size(), 10u);
}

TEST(Service, RunsAScenarioEndToEnd) {
    ScriptedBackend backend(all_fixtures(), true);
    MemorySessionStore store;
    SessionService service(test::prompts(), backend, store);
    auto scenario = test::fixture_scenario("hawaii");
    auto id = test::drive_service(service, scenario);
    auto panel = service.panels(id);
    EXPECT_EQ(panel.phase.kind, PhaseKind::SolutionReady);
    EXPECT_FALSE(panel.busy);
    ASSERT_TRUE(panel.solution);
    auto direct = test::run_fixture("hawaii");
    auto events = service.events_since(id, 0);
    ASSERT_EQ(events.size(), direct.events.size());
    EXPECT_EQ(panel.last_seq, events.back().seq);
    EXPECT_EQ(service.events_since(id, events.size() - 2).size(), 2u);
}

TEST(Service, RejectsMessagesInWrongPhase) {
    ScriptedBackend backend(all_fixtures(), true);
    MemorySessionStore store;
    SessionService service(test::prompts(), backend, store);
    EXPECT_EQ(code_of([&] { service.create_session("  ", SessionMode::Care); }), ErrorCode::EmptyQuery);
    EXPECT_EQ(code_of([&] { service.panels("nope"); }), ErrorCode::UnknownSession);
    auto id = service.create_session("Plan a 5-day trip to Hawaii", SessionMode::Care, "hawaii");
    service.wait_idle(id);
    EXPECT_EQ(code_of([&] { service.post_message(id, "   "); }), ErrorCode::EmptyQuery);
    EXPECT_EQ(code_of([&] { service.resume(id); }), ErrorCode::WrongPhase);
    EXPECT_EQ(code_of([&] { service.edit_needs(id, DeleteNeed{NeedId{99}}); }), ErrorCode::UnknownNeedId);
    EXPECT_EQ(service.panels(id).phase.kind, PhaseKind::Inquiring);
}

TEST(Service, EditReturnsRevisionAndReplans) {
    ScriptedBackend backend(all_fixtures(), true);
    MemorySessionStore store;
    SessionService service(test::prompts(), backend, store);
    auto scenario = test::fixture_scenario("hawaii_edit");
    auto id = test::drive_service(service, scenario);
    std::size_t drafting = 0;
    service.inspect(id, [&](const SessionState& s) { drafting = s.drafting_runs; });
    EXPECT_EQ(drafting, 2u);
    EXPECT_EQ(service.panels(id).phase.kind, PhaseKind::SolutionReady);
}

TEST(Service, BackendFailureRaisesErrorEventAndResumes) {
    auto script = test::fixture_script("hawaii");
    std::vector<Fixture> missing_ranking;
    for (const auto& f : script) {
        if (!(f.key.role == "ranking" && f.key.turn_index == 1)) missing_ranking.push_back(f);
    }
    ScriptedBackend broken(missing_ranking, true);
    test::TempDir dir;
    FileSessionStore store(dir.path());
    std::string id;
    {
        SessionService service(test::prompts(), broken, store);
        id = service.create_session("Plan a 5-day trip to Hawaii", SessionMode::Care, "hawaii");
        service.wait_idle(id);
        auto events = service.events_since(id, 0);
        ASSERT_FALSE(events.empty());
        EXPECT_EQ(events.back().event.kind, UiEventKind::ErrorRaised);
        EXPECT_EQ(events.back().event.code, "FixtureMiss");
        EXPECT_EQ(service.panels(id).phase.kind, PhaseKind::Ranking);
    }
    // The failed call used up ranking turn 1, so the retried ranking asks for turns 2 and 3.
    std::vector<Fixture> shifted;
    for (const auto& f : script) {
        if (f.key.role == "ranking") {
            auto moved = f;
            moved.key.turn_index += 2;
            shifted.push_back(moved);
        }
    }
    ScriptedBackend fixed(test::patch_script(script, shifted), false);
    SessionService service(test::prompts(), fixed, store);
    EXPECT_EQ(service.recover_all(), 1u);
    service.resume(id);
    service.wait_idle(id);
    EXPECT_EQ(service.panels(id).phase.kind, PhaseKind::Inquiring);
}

TEST(Service, RecoverAllRestoresPanels) {
    ScriptedBackend backend(all_fixtures(), true);
    test::TempDir dir;
    std::map<std::string, std::string> before;
    {
        FileSessionStore store(dir.path());
        ServiceConfig config;
        config.snapshot_every = 7;
        SessionService service(test::prompts(), backend, store, config);
        for (const auto& name : test::scenario_names()) {
            auto id = test::drive_service(service, test::fixture_scenario(name));
            before[id] = panel_dump(service.panels(id));
        }
    }
    FileSessionStore store(dir.path());
    SessionService service(test::prompts(), backend, store);
    EXPECT_EQ(service.recover_all(), before.size());
    for (const auto& [id, dump] : before) EXPECT_EQ(panel_dump(service.panels(id)), dump) << id;
}

TEST(Service, RecoveredSessionKeepsGoing) {
    ScriptedBackend backend(all_fixtures(), true);
    test::TempDir dir;
    auto scenario = test::fixture_scenario("hawaii");
    std::string id;
    {
        FileSessionStore store(dir.path());
        SessionService service(test::prompts(), backend, store);
        id = service.create_session(scenario.query, SessionMode::Care, scenario.session_tag);
        service.wait_idle(id);
        service.post_message(id, scenario.steps[0].text);
        service.wait_idle(id);
    }
    FileSessionStore store(dir.path());
    SessionService service(test::prompts(), backend, store);
    service.recover_all();
    service.post_message(id, scenario.steps[1].text);
    service.wait_idle(id);
    service.post_message(id, scenario.steps[2].text);
    service.wait_idle(id);
    auto direct = test::run_fixture("hawaii");
    auto panel = panel_to_json(service.panels(id));
    EXPECT_EQ(panel["solution"].dump(), direct.panels["solution"].dump());
    EXPECT_EQ(panel["needs"].dump(), direct.panels["needs"].dump());
}

TEST(Http, StatusMapping) {
    EXPECT_EQ(http_status(ErrorCode::UnknownSession), 404);
    EXPECT_EQ(http_status(ErrorCode::UnknownNeedId), 404);
    EXPECT_EQ(http_status(ErrorCode::WrongPhase), 409);
    EXPECT_EQ(http_status(ErrorCode::DuplicateNeed), 409);
    EXPECT_EQ(http_status(ErrorCode::MalformedJson), 400);
    EXPECT_EQ(http_status(ErrorCode::EmptyNeed), 422);
    EXPECT_EQ(http_status(ErrorCode::FixtureMiss), 502);
    EXPECT_EQ(http_status(ErrorCode::StorageError), 500);
    auto body = problem_json(Error(ErrorCode::DuplicateNeed, "dup", json{{"need_id", "003"}}));
    EXPECT_EQ(body["status"], 409);
    EXPECT_EQ(body["code"], "DuplicateNeed");
    EXPECT_EQ(body["detail"], "dup");
    EXPECT_EQ(body["details"]["need_id"], "003");
}

class HttpApiTest : public ::testing::Test {
protected:
    void SetUp() override {
        backend = std::make_unique<ScriptedBackend>(all_fixtures(), true);
        service = std::make_unique<SessionService>(test::prompts(), *backend, store);
        api = std::make_unique<HttpApi>(*service);
        port = api->bind("127.0.0.1", 0);
        api->start();
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(std::chrono::seconds(10));
    }
    void TearDown() override {
        client.reset();
        api->stop();
    }

    std::string create(const std::string& tag, const std::string& mode = "care") {
        auto res = client->Post("/sessions",
                                json{{"query", "Plan a 5-day trip to Hawaii"}, {"mode", mode}, {"tag", tag}}.dump(),
                                "application/json");
        EXPECT_TRUE(res);
        EXPECT_EQ(res->status, 201);
        auto id = json::parse(res->body)["session_id"].get<std::string>();
        service->wait_idle(id);
        return id;
    }

    MemorySessionStore store;
    std::unique_ptr<ScriptedBackend> backend;
    std::unique_ptr<SessionService> service;
    std::unique_ptr<HttpApi> api;
    std::unique_ptr<httplib::Client> client;
    int port = 0;
};

TEST_F(HttpApiTest, SessionLifecycle) {
    auto id = create("hawaii");
    auto panels = client->Get("/sessions/" + id + "/panels");
    ASSERT_TRUE(panels);
    EXPECT_EQ(panels->status, 200);
    EXPECT_EQ(json::parse(panels->body)["phase"]["kind"], "Inquiring");

    auto list = client->Get("/sessions");
    EXPECT_EQ(json::parse(list->body).size(), 1u);

    auto msg = client->Post("/sessions/" + id + "/messages",
                            json{{"text", "Two adults, no kids. Our budget is about $6000 and we're going in early June."}}.dump(),
                            "application/json");
    ASSERT_TRUE(msg);
    EXPECT_EQ(msg->status, 202);
    service->wait_idle(id);

    auto events = client->Get("/sessions/" + id + "/events?since=0&follow=0");
    ASSERT_TRUE(events);
    EXPECT_EQ(events->get_header_value("Content-Type").rfind("text/event-stream", 0), 0u);
    EXPECT_NE(events->body.find("event: QuestionsPosted"), std::string::npos);
    EXPECT_NE(events->body.find("id: 1\n"), std::string::npos);
    auto tail = client->Get("/sessions/" + id + "/events?since=5&follow=0");
    EXPECT_EQ(tail->body.find("id: 5\n"), std::string::npos);
    EXPECT_NE(tail->body.find("id: 6\n"), std::string::npos);
}

TEST_F(HttpApiTest, NeedsEditsAndErrors) {
    auto id = create("hawaii_edit_inquiring");
    auto added = client->Post("/sessions/" + id + "/needs", json{{"text", "I want to stay on Maui only."}}.dump(),
                              "application/json");
    ASSERT_TRUE(added);
    EXPECT_EQ(added->status, 201);
    EXPECT_TRUE(json::parse(added->body)["revision"].is_number());
    service->wait_idle(id);

    auto dup = client->Post("/sessions/" + id + "/needs", json{{"text", "i want to stay on maui only."}}.dump(),
                            "application/json");
    EXPECT_EQ(dup->status, 409);
    EXPECT_EQ(json::parse(dup->body)["code"], "DuplicateNeed");

    auto empty = client->Patch("/sessions/" + id + "/needs/000", json{{"text", " "}}.dump(), "application/json");
    EXPECT_EQ(empty->status, 422);
    auto missing = client->Delete("/sessions/" + id + "/needs/999");
    EXPECT_EQ(missing->status, 404);
    auto bad_id = client->Delete("/sessions/" + id + "/needs/abc");
    EXPECT_EQ(bad_id->status, 400);
    auto unknown = client->Get("/sessions/zzz/panels");
    EXPECT_EQ(unknown->status, 404);
    auto malformed = client->Post("/sessions", "{not json", "application/json");
    EXPECT_EQ(malformed->status, 400);
    auto no_query = client->Post("/sessions", json{{"query", ""}}.dump(), "application/json");
    EXPECT_EQ(no_query->status, 422);
    auto bad_mode = client->Post("/sessions", json{{"query", "x"}, {"mode", "turbo"}}.dump(), "application/json");
    EXPECT_EQ(bad_mode->status, 400);
    auto bad_intent = client->Post("/sessions/" + id + "/messages", json{{"text", "x"}, {"intent", "shout"}}.dump(),
                                   "application/json");
    EXPECT_EQ(bad_intent->status, 400);
}

TEST_F(HttpApiTest, BaselineModeAndWrongPhase) {
    auto id = create("baseline", "baseline");
    auto panels = json::parse(client->Get("/sessions/" + id + "/panels")->body);
    EXPECT_EQ(panels["mode"], "baseline");
    EXPECT_EQ(panels["phase"]["kind"], "SolutionReady");
    EXPECT_TRUE(panels["needs"]["slots"].empty());
    auto edit = client->Post("/sessions/" + id + "/needs", json{{"text", "x"}}.dump(), "application/json");
    EXPECT_EQ(edit->status, 409);
    auto resume = client->Post("/sessions/" + id + "/resume", "", "application/json");
    EXPECT_EQ(resume->status, 409);
}

TEST_F(HttpApiTest, FollowStreamDeliversLiveEvents) {
    auto id = create("hawaii");
    httplib::Client streamer("127.0.0.1", port);
    std::string received;
    std::thread reader([&] {
        streamer.Get("/sessions/" + id + "/events?since=0", [&](const char* data, size_t n) {
            received.append(data, n);
            return received.find("event: NeedsUpdated") == std::string::npos ||
                   received.find("id: 9\n") == std::string::npos;
        });
    });
    client->Post("/sessions/" + id + "/messages",
                 json{{"text", "Two adults, no kids. Our budget is about $6000 and we're going in early June."}}.dump(),
                 "application/json");
    reader.join();
    EXPECT_NE(received.find("id: 9\n"), std::string::npos);
}
