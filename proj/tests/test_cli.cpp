#include "care/cli.hpp"

#include "scenarios.hpp"
#include "support.hpp"

#include <httplib.h>

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace care;
using nlohmann::json;

namespace {

struct CliRun {
    int code = -1;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args, const std::string& input = "") {
    args.insert(args.begin(), "care_cli");
    std::istringstream in(input);
    std::ostringstream out, err;
    CliRun r;
    r.code = run_cli(args, in, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// Sets an environment variable for the lifetime of the guard.
struct EnvGuard {
    std::string name;
    EnvGuard(std::string n, const std::string& value) : name(std::move(n)) { ::setenv(name.c_str(), value.c_str(), 1); }
    ~EnvGuard() { ::unsetenv(name.c_str()); }
};

std::string hawaii_fixtures() { return (test::fixture_dir() / "hawaii.jsonl").string(); }

const std::string kChatInput = "Plan a 5-day trip to Hawaii\n/needs\n/quit\n";

}  // namespace

TEST(Cli, ExitCodeMapping) {
    EXPECT_EQ(exit_code_for(ErrorCode::ConfigError), kExitConfig);
    EXPECT_EQ(exit_code_for(ErrorCode::BindError), kExitConfig);
    EXPECT_EQ(exit_code_for(ErrorCode::BackendError), kExitBackend);
    EXPECT_EQ(exit_code_for(ErrorCode::FixtureMiss), kExitBackend);
    EXPECT_EQ(exit_code_for(ErrorCode::DigestMismatch), kExitBackend);
    EXPECT_EQ(exit_code_for(ErrorCode::ExpectationMismatch), kExitMismatch);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cli({}).code, kExitConfig);
    EXPECT_EQ(cli({"fly"}).code, kExitConfig);
    EXPECT_EQ(cli({"serve"}).code, kExitConfig);  // --storage is required
    EXPECT_EQ(cli({"chat", "--backend", "psychic"}).code, kExitConfig);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(Cli, ReplayShippedScenariosPass) {
    std::vector<std::string> args = {"replay"};
    for (const auto& name : test::scenario_names()) {
        args.push_back((test::fixture_dir() / (name + ".scenario.json")).string());
    }
    auto r = cli(args);
    EXPECT_EQ(r.code, kExitOk) << r.err;
    for (const auto& name : test::scenario_names()) EXPECT_NE(r.out.find("PASS " + name + " "), std::string::npos);
}

TEST(Cli, ReplayDetectsDrift) {
    test::TempDir dir;
    auto scenario = test::fixture_scenario("baseline");
    (*scenario.expected_events)[0]["event"]["phase"]["kind"] = "Ranking";
    auto path = dir.path() / "baseline.scenario.json";
    save_scenario(path, scenario);
    std::filesystem::copy_file(test::fixture_dir() / "baseline.jsonl", dir.path() / "baseline.jsonl");
    auto r = cli({"replay", path.string()});
    EXPECT_EQ(r.code, kExitMismatch);
    EXPECT_NE(r.out.find("FAIL baseline"), std::string::npos);
}

TEST(Cli, ReplayDigestMismatchIsBackendFailure) {
    test::TempDir dir;
    auto fixtures = test::fixture_script("baseline");
    fixtures[0].request_digest = std::string(64, '0');
    save_fixtures(dir.path() / "baseline.jsonl", fixtures);
    save_scenario(dir.path() / "baseline.scenario.json", test::fixture_scenario("baseline"));
    auto r = cli({"replay", (dir.path() / "baseline.scenario.json").string()});
    EXPECT_EQ(r.code, kExitBackend);
    EXPECT_NE(r.err.find("DigestMismatch"), std::string::npos);
}

TEST(Cli, BlessRecordsExpectations) {
    test::TempDir dir;
    auto scenario = test::fixture_scenario("hawaii_skip");
    scenario.expected_events.reset();
    scenario.expected_panels.reset();
    auto path = dir.path() / "hawaii_skip.scenario.json";
    save_scenario(path, scenario);
    auto fixtures = test::fixture_script("hawaii_skip");
    for (auto& f : fixtures) f.request_digest.clear();
    save_fixtures(dir.path() / "hawaii_skip.jsonl", fixtures);

    auto blessed = cli({"replay", "--bless", path.string()});
    EXPECT_EQ(blessed.code, kExitOk) << blessed.err;
    EXPECT_NE(blessed.out.find("BLESSED hawaii_skip"), std::string::npos);
    EXPECT_TRUE(load_scenario(path).expected_events.has_value());
    for (const auto& f : load_fixtures(dir.path() / "hawaii_skip.jsonl")) EXPECT_EQ(f.request_digest.size(), 64u);

    auto checked = cli({"replay", path.string()});
    EXPECT_EQ(checked.code, kExitOk) << checked.err;
}

TEST(Cli, ChatRunsOnFixtures) {
    auto r = cli({"chat", "--fixtures", hawaii_fixtures(), "--session", "hawaii"}, kChatInput);
    EXPECT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("Inquiry-Agent:"), std::string::npos);
    EXPECT_NE(r.out.find("000  +  The destination is Hawaii."), std::string::npos);
}

TEST(Cli, LiveBackendWithoutCredentialIsConfigError) {
    ::unsetenv("CARE_TEST_NO_KEY");
    auto r = cli({"chat", "--backend", "live", "--api-key-env", "CARE_TEST_NO_KEY"}, kChatInput);
    EXPECT_EQ(r.code, kExitConfig);
    EXPECT_NE(r.err.find("ConfigError"), std::string::npos);
}

TEST(Cli, FlagsBeatEnvBeatConfigFile) {
    ::unsetenv("CARE_TEST_NO_KEY");
    test::TempDir dir;
    auto config = dir.path() / "care.toml";
    std::ofstream(config) << "[chat]\nbackend = \"live\"\napi-key-env = \"CARE_TEST_NO_KEY\"\n";
    const std::vector<std::string> base = {"--config", config.string(), "chat", "--fixtures", hawaii_fixtures(),
                                           "--session", "hawaii"};

    EXPECT_EQ(cli(base, kChatInput).code, kExitConfig);  // file alone: live
    {
        EnvGuard env("CARE_BACKEND", "scripted");
        EXPECT_EQ(cli(base, kChatInput).code, kExitOk);  // env beats file
        auto with_flag = base;
        with_flag.push_back("--backend=live");
        EXPECT_EQ(cli(with_flag, kChatInput).code, kExitConfig);  // flag beats env
    }
    {
        EnvGuard env("CARE_BACKEND", "live");
        auto with_flag = base;
        with_flag.insert(with_flag.end(), {"--backend", "scripted"});
        EXPECT_EQ(cli(with_flag, kChatInput).code, kExitOk);
    }
}

TEST(Cli, ExportPrintsStoredSession) {
    test::TempDir dir;
    auto storage = (dir.path() / "store").string();
    auto chat = cli({"chat", "--fixtures", hawaii_fixtures(), "--session", "hawaii", "--storage", storage}, kChatInput);
    ASSERT_EQ(chat.code, kExitOk) << chat.err;
    auto r = cli({"export", "--storage", storage, "hawaii"});
    EXPECT_EQ(r.code, kExitOk) << r.err;
    auto snapshot = json::parse(r.out);
    EXPECT_GT(snapshot["record_count"].get<int>(), 0);
    EXPECT_EQ(cli({"export", "--storage", storage, "nobody"}).code, kExitMismatch);
}

TEST(Cli, ServeFailsOnBusyPort) {
    test::TempDir dir;
    httplib::Server blocker;
    blocker.set_socket_options([](socket_t) {});
    int port = blocker.bind_to_any_port("127.0.0.1");
    auto r = cli({"serve", "--storage", dir.path().string(), "--listen", "127.0.0.1:" + std::to_string(port),
                  "--fixtures", hawaii_fixtures()});
    EXPECT_EQ(r.code, kExitConfig);
}
