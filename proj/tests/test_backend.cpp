#include "care/error.hpp"
#include "care/http_backend.hpp"
#include "care/llm_backend.hpp"

#include "support.hpp"

#include <httplib.h>

#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

using namespace care;
using nlohmann::json;

namespace {

ChatRequest sample_request(std::string tag = "s", std::string role = "inquiry", std::uint32_t turn = 0) {
    ChatRequest r;
    r.messages = {ChatMessage{MessageRole::System, "", "You are the inquiry agent.", {}, ""},
                  ChatMessage{MessageRole::User, "user", "Plan a trip\nto Hawaii", {}, ""}};
    r.key = CallKey{std::move(tag), std::move(role), turn};
    return r;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return ErrorCode::BadRequest;
}

// Local stand-in for a chat/completions endpoint.
struct FakeServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit FakeServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server.Post("/v1/chat/completions", std::move(handler));
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~FakeServer() {
        server.stop();
        thread.join();
    }
    [[nodiscard]] std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1"; }
};

HttpBackendConfig local_config(const FakeServer& fake) {
    ::setenv("CARE_TEST_KEY", "sk-test", 1);
    HttpBackendConfig config;
    config.base_url = fake.base_url();
    config.api_key_env = "CARE_TEST_KEY";
    config.timeout = std::chrono::seconds(5);
    config.retry_backoff = std::chrono::milliseconds(1);
    config.max_retries = 2;
    return config;
}

const char* kTextCompletion =
    R"({"choices":[{"message":{"role":"assistant","content":"hi [Inquiry]"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}})";

}  // namespace

TEST(Request, ValidateRequiresLeadingSystemMessage) {
    ChatRequest empty;
    EXPECT_EQ(code_of([&] { validate_request(empty); }), ErrorCode::BackendError);
    auto r = sample_request();
    std::swap(r.messages[0], r.messages[1]);
    EXPECT_EQ(code_of([&] { validate_request(r); }), ErrorCode::BackendError);
    EXPECT_NO_THROW(validate_request(sample_request()));
}

TEST(Request, DigestIgnoresLineEndingsAndToolCallIds) {
    auto a = sample_request();
    auto b = sample_request();
    b.messages[1].content = "Plan a trip  \r\nto Hawaii\n\n";
    EXPECT_EQ(request_digest(a), request_digest(b));

    a.messages.push_back(ChatMessage{MessageRole::Assistant, "inquiry", "", {ToolCall{"call_1", "get_all_needs", json::object()}}, ""});
    b.messages.push_back(ChatMessage{MessageRole::Assistant, "inquiry", "", {ToolCall{"call_9", "get_all_needs", json::object()}}, ""});
    EXPECT_EQ(request_digest(a), request_digest(b));
    EXPECT_EQ(request_digest(a).size(), 64u);

    b.messages[1].content = "Plan a trip to Maui";
    EXPECT_NE(request_digest(a), request_digest(b));
}

TEST(Request, DigestIgnoresKeyAndSampling) {
    auto a = sample_request("x", "ranking", 3);
    auto b = sample_request("y", "inquiry", 0);
    b.temperature = 0.7;
    EXPECT_EQ(request_digest(a), request_digest(b));
}

TEST(Request, DigestOfEmptyMessageListIsSha256OfEmptyString) {
    ChatRequest r;
    EXPECT_EQ(request_digest(r), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Wire, MessageAndResponseJsonRoundTrip) {
    ChatMessage m{MessageRole::Assistant, "ranking", "", {ToolCall{"c1", "get_clarify_needs", json::object()}}, ""};
    EXPECT_EQ(message_from_json(json::parse(message_to_json(m).dump())), m);
    ChatMessage t{MessageRole::Tool, "", "{}", {}, "c1"};
    EXPECT_EQ(message_from_json(json::parse(message_to_json(t).dump())), t);
    auto text = ChatResponse::from_text("hello");
    text.usage = Usage{5, 6};
    EXPECT_EQ(response_from_json(json::parse(response_to_json(text).dump())), text);
    auto tools = ChatResponse::from_tool_calls({ToolCall{"a", "add_need_slot", json{{"need", "x"}}}});
    EXPECT_EQ(response_from_json(json::parse(response_to_json(tools).dump())), tools);
    EXPECT_THROW(message_role_from_string("robot"), Error);
}

TEST(Fixtures, SaveLoadRoundTrip) {
    test::TempDir dir;
    std::vector<Fixture> fixtures = {
        test::text_fixture("s", "inquiry", 0, "Hello [BeginMilestone]"),
        test::tool_fixture("s", "needs_discovery", 1, {test::call("get_all_needs", json::object(), "c1")}),
    };
    fixtures[0].request_digest = "abc";
    auto path = dir.path() / "f.jsonl";
    save_fixtures(path, fixtures);
    auto loaded = load_fixtures(path);
    ASSERT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded[0].key, fixtures[0].key);
    EXPECT_EQ(loaded[0].request_digest, "abc");
    EXPECT_EQ(loaded[0].response, fixtures[0].response);
    EXPECT_EQ(loaded[1].response, fixtures[1].response);
    EXPECT_EQ(code_of([&] { load_fixtures(dir.path() / "missing.jsonl"); }), ErrorCode::StorageError);
}

TEST(Scripted, LooksUpByKey) {
    ScriptedBackend backend({test::text_fixture("s", "inquiry", 0, "first"), test::text_fixture("s", "inquiry", 1, "second")});
    EXPECT_EQ(backend.complete(sample_request("s", "inquiry", 1)).text, "second");
    EXPECT_EQ(backend.complete(sample_request("s", "inquiry", 0)).text, "first");
    EXPECT_EQ(backend.call_count(), 2u);
    EXPECT_EQ(backend.size(), 2u);
}

TEST(Scripted, MissReportsNearestKeys) {
    ScriptedBackend backend({test::text_fixture("s", "inquiry", 0, "first")});
    try {
        backend.complete(sample_request("s", "inquiry", 4));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::FixtureMiss);
        EXPECT_EQ(e.details().at("missing"), CallKey("s", "inquiry", 4).str());
        EXPECT_FALSE(e.details().at("nearest").empty());
    }
}

TEST(Scripted, DuplicateKeysRejected) {
    EXPECT_EQ(code_of([] {
                  ScriptedBackend b({test::text_fixture("s", "inquiry", 0, "a"), test::text_fixture("s", "inquiry", 0, "b")});
              }),
              ErrorCode::StorageError);
}

TEST(Scripted, StrictModeChecksDigest) {
    auto request = sample_request();
    auto fixture = test::text_fixture("s", "inquiry", 0, "ok");
    fixture.request_digest = request_digest(request);

    ScriptedBackend strict({fixture}, true);
    EXPECT_EQ(strict.complete(request).text, "ok");
    auto drifted = request;
    drifted.messages[1].content = "Plan a trip to Japan";
    EXPECT_EQ(code_of([&] { strict.complete(drifted); }), ErrorCode::DigestMismatch);

    ScriptedBackend loose({fixture}, false);
    EXPECT_EQ(loose.complete(drifted).text, "ok");

    ScriptedBackend no_digest({test::text_fixture("s", "inquiry", 0, "ok")}, true);
    EXPECT_EQ(no_digest.complete(drifted).text, "ok");
}

TEST(Recording, CapturesCallsWithDigests) {
    test::TempDir dir;
    ScriptedBackend inner({test::text_fixture("s", "inquiry", 0, "hello")});
    auto path = dir.path() / "rec.jsonl";
    {
        RecordingBackend rec(inner, path);
        auto request = sample_request();
        EXPECT_EQ(rec.complete(request).text, "hello");
        ASSERT_EQ(rec.fixtures().size(), 1u);
        EXPECT_EQ(rec.fixtures()[0].request_digest, request_digest(request));
    }
    auto loaded = load_fixtures(path);
    ASSERT_EQ(loaded.size(), 1u);
    ScriptedBackend replay(loaded, true);
    EXPECT_EQ(replay.complete(sample_request()).text, "hello");
}

TEST(Http, MissingCredentialIsConfigError) {
    ::unsetenv("CARE_TEST_ABSENT_KEY");
    HttpBackendConfig config;
    config.api_key_env = "CARE_TEST_ABSENT_KEY";
    EXPECT_EQ(code_of([&] { HttpBackend b(config); }), ErrorCode::ConfigError);
}

TEST(Http, PayloadShape) {
    FakeServer fake([](const httplib::Request&, httplib::Response& res) { res.set_content("{}", "application/json"); });
    HttpBackend backend(local_config(fake));
    auto request = sample_request();
    request.messages.push_back(
        ChatMessage{MessageRole::Assistant, "Inquiry Agent", "", {ToolCall{"c1", "get_all_needs", json::object()}}, ""});
    request.messages.push_back(ChatMessage{MessageRole::Tool, "", "{\"wanted\":[]}", {}, "c1"});
    request.tool_schemas = json::array({json{{"type", "function"}, {"function", {{"name", "get_all_needs"}}}}});
    auto payload = backend.build_payload(request);
    EXPECT_EQ(payload["model"], "gpt-4o");
    EXPECT_EQ(payload["messages"].size(), 4u);
    EXPECT_EQ(payload["messages"][1]["name"], "user");
    EXPECT_FALSE(payload["messages"][2].contains("name"));  // spaces are not allowed in wire names
    EXPECT_EQ(payload["messages"][2]["tool_calls"][0]["function"]["arguments"], "{}");
    EXPECT_EQ(payload["messages"][3]["tool_call_id"], "c1");
    EXPECT_EQ(payload["tools"].size(), 1u);
}

TEST(Http, ParsesTextAndToolCompletions) {
    auto text = HttpBackend::parse_completion(json::parse(kTextCompletion));
    EXPECT_EQ(text.text, "hi [Inquiry]");
    EXPECT_EQ(text.usage, (Usage{12, 3}));
    auto tools = HttpBackend::parse_completion(json::parse(
        R"({"choices":[{"message":{"content":null,"tool_calls":[{"id":"x","type":"function","function":{"name":"fill_need_slot","arguments":"{\"need_id\":\"003\"}"}}]}}]})"));
    ASSERT_TRUE(tools.is_tool_call());
    EXPECT_EQ(tools.tool_calls[0].args["need_id"], "003");
    EXPECT_THROW(HttpBackend::parse_completion(json{{"choices", json::array()}}), Error);
}

TEST(Http, RetriesTransientFailures) {
    std::atomic<int> hits{0};
    std::string auth;
    FakeServer fake([&](const httplib::Request& req, httplib::Response& res) {
        auth = req.get_header_value("Authorization");
        if (hits++ < 2) {
            res.status = 503;
            return;
        }
        res.set_content(kTextCompletion, "application/json");
    });
    HttpBackend backend(local_config(fake));
    auto response = backend.complete(sample_request());
    EXPECT_EQ(response.text, "hi [Inquiry]");
    EXPECT_EQ(hits.load(), 3);
    EXPECT_EQ(auth, "Bearer sk-test");
}

TEST(Http, GivesUpAfterRetryBudget) {
    std::atomic<int> hits{0};
    FakeServer fake([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 429;
    });
    HttpBackend backend(local_config(fake));
    EXPECT_EQ(code_of([&] { backend.complete(sample_request()); }), ErrorCode::BackendError);
    EXPECT_EQ(hits.load(), 3);
}

TEST(Http, ClientErrorsAreNotRetried) {
    std::atomic<int> hits{0};
    FakeServer fake([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 400;
        res.set_content(R"({"error":"bad"})", "application/json");
    });
    HttpBackend backend(local_config(fake));
    EXPECT_EQ(code_of([&] { backend.complete(sample_request()); }), ErrorCode::BackendError);
    EXPECT_EQ(hits.load(), 1);
}
