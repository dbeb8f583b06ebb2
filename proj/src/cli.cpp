#include "care/cli.hpp"

#include "care/agents.hpp"
#include "care/http_api.hpp"
#include "care/http_backend.hpp"
#include "care/llm_backend.hpp"
#include "care/orchestrator.hpp"
#include "care/scenario.hpp"
#include "care/session_service.hpp"
#include "care/session_store.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <sstream>

#ifndef CARE_DEFAULT_PROMPT_DIR
#define CARE_DEFAULT_PROMPT_DIR "prompts"
#endif

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

int exit_code_for(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::ConfigError:
        case ErrorCode::BindError:
            return kExitConfig;
        case ErrorCode::BackendError:
        case ErrorCode::FixtureMiss:
        case ErrorCode::DigestMismatch:
            return kExitBackend;
        default:
            return kExitMismatch;
    }
}

namespace {

struct BackendOptions {
    std::string backend = "scripted";
    std::vector<std::string> fixtures;
    bool strict = false;
    std::string prompts = CARE_DEFAULT_PROMPT_DIR;
    std::string base_url = HttpBackendConfig{}.base_url;
    std::string model = HttpBackendConfig{}.model;
    std::string api_key_env = HttpBackendConfig{}.api_key_env;
    double temperature = 0.0;
    int max_retries = 2;
};

// Long option name -> environment variable.
const std::vector<std::pair<std::string, std::string>> kEnvOptions = {
    {"backend", "CARE_BACKEND"},   {"fixtures", "CARE_FIXTURES"},       {"prompts", "CARE_PROMPTS"},
    {"storage", "CARE_STORAGE"},   {"listen", "CARE_LISTEN"},           {"mode", "CARE_MODE"},
    {"base-url", "CARE_BASE_URL"}, {"model", "CARE_MODEL"},             {"api-key-env", "CARE_API_KEY_ENV"},
    {"temperature", "CARE_TEMPERATURE"},
};

void add_backend_options(CLI::App* cmd, BackendOptions& o) {
    cmd->add_option("--backend", o.backend, "scripted or live")->check(CLI::IsMember({"scripted", "live"}));
    cmd->add_option("--fixtures", o.fixtures, "fixture files or directories (scripted backend)");
    cmd->add_flag("--strict,!--no-strict", o.strict, "check request digests against fixtures");
    cmd->add_option("--prompts", o.prompts, "prompt pack directory");
    cmd->add_option("--base-url", o.base_url, "chat completions endpoint base (live backend)");
    cmd->add_option("--model", o.model, "model name");
    cmd->add_option("--api-key-env", o.api_key_env, "environment variable holding the API key");
    cmd->add_option("--temperature", o.temperature, "sampling temperature");
    cmd->add_option("--max-retries", o.max_retries, "corrective retries per agent turn")->check(CLI::Range(0, 10));
}

std::vector<Fixture> load_fixture_paths(const std::vector<std::string>& paths) {
    std::vector<Fixture> out;
    for (const auto& p : paths) {
        std::filesystem::path path(p);
        if (std::filesystem::is_directory(path)) {
            std::vector<std::filesystem::path> files;
            for (const auto& e : std::filesystem::directory_iterator(path)) {
                if (e.path().extension() == ".jsonl") files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                auto more = load_fixtures(f);
                out.insert(out.end(), more.begin(), more.end());
            }
        } else {
            if (!std::filesystem::exists(path)) throw Error(ErrorCode::ConfigError, "no fixture file " + p);
            auto more = load_fixtures(path);
            out.insert(out.end(), more.begin(), more.end());
        }
    }
    return out;
}

std::unique_ptr<Backend> make_backend(const BackendOptions& o) {
    if (o.backend == "live") {
        HttpBackendConfig config;
        config.base_url = o.base_url;
        config.model = o.model;
        config.api_key_env = o.api_key_env;
        return std::make_unique<HttpBackend>(config);
    }
    try {
        return std::make_unique<ScriptedBackend>(load_fixture_paths(o.fixtures), o.strict);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::StorageError) throw Error(ErrorCode::ConfigError, e.message());
        throw;
    }
}

EngineConfig engine_config(const BackendOptions& o) {
    EngineConfig config;
    config.model = o.model;
    config.temperature = o.temperature;
    config.max_retries = o.max_retries;
    return config;
}

std::pair<std::string, int> split_listen(const std::string& listen) {
    auto colon = listen.rfind(':');
    if (colon == std::string::npos) throw Error(ErrorCode::ConfigError, "--listen wants host:port, got " + listen);
    int port = 0;
    try {
        port = std::stoi(listen.substr(colon + 1));
    } catch (const std::exception&) {
        throw Error(ErrorCode::ConfigError, "bad port in " + listen);
    }
    if (port < 0 || port > 65535) throw Error(ErrorCode::ConfigError, "bad port in " + listen);
    return {listen.substr(0, colon), port};
}

std::filesystem::path fixture_path_for(const std::filesystem::path& scenario) {
    auto name = scenario.filename().string();
    const std::string suffix = ".scenario.json";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return scenario.parent_path() / (name.substr(0, name.size() - suffix.size()) + ".jsonl");
    }
    auto p = scenario;
    return p.replace_extension(".jsonl");
}

void print_event(std::ostream& out, const UiEvent& e) {
    switch (e.kind) {
        case UiEventKind::AgentMessage: out << "\nInquiry-Agent: " << e.text << "\n"; break;
        case UiEventKind::QuestionsPosted:
            out << "  [" << e.topic << ": " << e.questions.size() << " question(s)]\n";
            break;
        case UiEventKind::NeedsUpdated: out << "  (needs memo revision " << e.revision << ")\n"; break;
        case UiEventKind::SolutionUpdated: out << "  (solution updated at revision " << e.revision << ")\n"; break;
        case UiEventKind::PhaseChanged: out << "  (phase: " << to_string(e.phase.kind) << ")\n"; break;
        case UiEventKind::SolutionReadyNotice: out << "  (solution ready: /solution to view)\n"; break;
        case UiEventKind::GroundingFailure: {
            out << "  (warning: solution cites unknown needs:";
            for (auto id : e.need_ids) out << " " << id.str();
            out << ")\n";
            break;
        }
        case UiEventKind::ErrorRaised: out << "  (error " << e.code << ": " << e.text << ")\n"; break;
    }
}

void print_needs(std::ostream& out, const NeedsMemo& memo) {
    if (memo.empty()) {
        out << "(no needs yet)\n";
        return;
    }
    for (const auto& [id, slot] : memo.slots()) {
        out << id.str() << "  " << (slot.clarify ? "?" : (slot.want == WantStatus::Wanted ? "+" : "-")) << "  "
            << slot.need << "\n";
    }
}

int cmd_serve(const BackendOptions& bo, const std::string& listen, const std::string& storage,
              std::size_t snapshot_every, std::ostream& out) {
    auto [host, port] = split_listen(listen);
    auto prompts = PromptPack::load(bo.prompts);
    auto backend = make_backend(bo);
    FileSessionStore store(storage);
    ServiceConfig config;
    config.engine = engine_config(bo);
    config.snapshot_every = snapshot_every;
    SessionService service(prompts, *backend, store, config);
    auto recovered = service.recover_all();
    HttpApi api(service);
    int bound = api.bind(host, port);
    out << "listening on " << host << ":" << bound << " (" << recovered << " session(s) recovered)" << std::endl;
    api.serve();
    return kExitOk;
}

int cmd_chat(const BackendOptions& bo, const std::string& mode_text, const std::string& tag,
             const std::string& storage, std::istream& in, std::ostream& out) {
    auto mode = mode_from_string(mode_text);
    if (!mode) throw Error(ErrorCode::ConfigError, "--mode must be care or baseline");
    auto prompts = PromptPack::load(bo.prompts);
    auto backend = make_backend(bo);
    std::unique_ptr<FileSessionStore> store;
    if (!storage.empty()) store = std::make_unique<FileSessionStore>(storage);

    Session session(tag, tag, prompts, *backend, engine_config(bo));
    if (store) session.set_record_sink([&](const ordered_json& r) { store->append(tag, r); });
    session.set_event_listener([&](const SequencedEvent& e) { print_event(out, e.event); });

    out << "What can I help you with? (/needs /solution /skip /skipgroup /edit /quit)\n> " << std::flush;
    std::string line;
    while (std::getline(in, line)) {
        try {
            if (line == "/quit") break;
            if (line == "/needs") {
                print_needs(out, session.state().memo);
            } else if (line == "/solution") {
                const auto& s = session.state().solution();
                out << (s ? s->body : std::string("(no solution yet)")) << "\n";
            } else if (line.rfind("/edit ", 0) == 0) {
                std::istringstream words(line.substr(6));
                std::string verb, id;
                words >> verb;
                std::string rest;
                if (verb == "add") {
                    std::getline(words >> std::ws, rest);
                    session.apply_manual_edit(AddManual{rest});
                } else if (verb == "update" || verb == "delete") {
                    words >> id;
                    auto need = NeedId::parse(id);
                    if (!need) throw Error(ErrorCode::UnknownNeedId, "bad need id '" + id + "'");
                    if (verb == "delete") {
                        session.apply_manual_edit(DeleteNeed{*need});
                    } else {
                        std::getline(words >> std::ws, rest);
                        session.apply_manual_edit(UpdateNeed{*need, rest});
                    }
                } else {
                    out << "usage: /edit add TEXT | /edit update ID TEXT | /edit delete ID\n";
                }
            } else if (!session.state().started) {
                session.start(line, *mode == SessionMode::Baseline);
            } else if (line == "/skip") {
                session.handle_user_message("", MessageIntent::SkipQuestions);
            } else if (line == "/skipgroup") {
                session.handle_user_message("", MessageIntent::SkipGroup);
            } else {
                session.handle_user_message(line);
            }
        } catch (const Error& e) {
            out << "error: " << e.what() << "\n";
            if (exit_code_for(e.code()) == kExitBackend) return kExitBackend;
        }
        out << "> " << std::flush;
    }
    return kExitOk;
}

int cmd_replay(const BackendOptions& bo, const std::vector<std::string>& scenarios, bool bless, std::ostream& out,
               std::ostream& err) {
    auto prompts = PromptPack::load(bo.prompts);
    int status = kExitOk;
    for (const auto& path_text : scenarios) {
        std::filesystem::path path(path_text);
        auto scenario = load_scenario(path);
        auto fixtures_path = bo.fixtures.empty() ? fixture_path_for(path) : std::filesystem::path(bo.fixtures.front());
        BackendOptions local = bo;
        local.fixtures = {fixtures_path.string()};
        if (bless) {
            local.strict = false;
            auto scripted = make_backend(local);
            ScenarioResult result;
            std::vector<Fixture> captured;
            {
                RecordingBackend recorder(*scripted, fixtures_path);
                result = run_scenario(scenario, prompts, recorder, engine_config(bo));
                captured = recorder.fixtures();
                recorder.flush();
            }
            scenario.expected_events = json::parse(result.events.dump());
            scenario.expected_panels = json::parse(result.panels.dump());
            save_scenario(path, scenario);
            out << "BLESSED " << scenario.name << " (" << captured.size() << " calls, " << result.events.size()
                << " events)\n";
            continue;
        }
        local.strict = true;
        auto backend = make_backend(local);
        auto result = run_scenario(scenario, prompts, *backend, engine_config(bo));
        auto diffs = compare_expectations(scenario, result);
        if (diffs.empty()) {
            out << "PASS " << scenario.name << " (" << result.events.size() << " events)\n";
        } else {
            out << "FAIL " << scenario.name << "\n";
            for (const auto& d : diffs) err << "  " << d << "\n";
            status = kExitMismatch;
        }
    }
    return status;
}

int cmd_export(const BackendOptions& bo, const std::string& storage, const std::string& session_id,
               std::ostream& out) {
    auto prompts = PromptPack::load(bo.prompts);
    ScriptedBackend idle;
    FileSessionStore store(storage);
    if (store.load_records(session_id).empty() && !store.load_snapshot(session_id)) {
        throw Error(ErrorCode::UnknownSession, "no session '" + session_id + "' in " + storage);
    }
    SessionService service(prompts, idle, store);
    auto session = service.load_session(session_id);
    out << session->snapshot_json().dump(2) << "\n";
    return kExitOk;
}

// Puts CARE_* environment values on the command line unless the flag is
// already there, so flags beat env and env beats the config file.
std::vector<std::string> with_env(std::vector<std::string> args, CLI::App& app) {
    auto sub = std::find_if(args.begin() + (args.empty() ? 0 : 1), args.end(), [](const std::string& a) {
        return a == "serve" || a == "chat" || a == "replay" || a == "export";
    });
    if (sub == args.end()) return args;
    auto at = static_cast<std::size_t>(sub - args.begin()) + 1;
    auto* cmd = app.get_subcommand(*sub);
    std::vector<std::string> extra;
    for (const auto& [name, var] : kEnvOptions) {
        if (!cmd->get_option_no_throw("--" + name)) continue;
        const char* value = std::getenv(var.c_str());
        if (!value || !*value) continue;
        std::string flag = "--" + name;
        bool present = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
            return a == flag || a.rfind(flag + "=", 0) == 0;
        });
        if (!present) extra.push_back(flag + "=" + value);
    }
    // After the subcommand name, where its options are understood.
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
    return args;
}

}  // namespace

int run_cli(std::vector<std::string> args, std::istream& in, std::ostream& out, std::ostream& err) {
    CLI::App app{"Collaborative needs-elicitation assistant"};
    app.set_config("--config", "", "TOML or INI config file");
    app.require_subcommand(1);
    app.fallthrough();

    BackendOptions bo;
    std::string listen = "127.0.0.1:8080";
    std::string storage;
    std::string mode = "care";
    std::string tag = "chat";
    std::size_t snapshot_every = 64;
    std::vector<std::string> scenarios;
    bool bless = false;
    std::string session_id;

    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    add_backend_options(serve, bo);
    serve->add_option("--listen", listen, "host:port");
    serve->add_option("--storage", storage, "session log directory")->required();
    serve->add_option("--snapshot-every", snapshot_every, "records between snapshots");

    auto* chat = app.add_subcommand("chat", "converse on the terminal");
    add_backend_options(chat, bo);
    chat->add_option("--mode", mode, "care or baseline");
    chat->add_option("--session", tag, "session tag for fixture keys");
    chat->add_option("--storage", storage, "session log directory");

    auto* replay = app.add_subcommand("replay", "re-run scripted scenarios and compare with their expectations");
    add_backend_options(replay, bo);
    replay->add_option("scenarios", scenarios, "scenario files")->required()->check(CLI::ExistingFile);
    replay->add_flag("--bless", bless, "record digests and expectations instead of checking them");

    auto* exp = app.add_subcommand("export", "print a stored session as JSON");
    add_backend_options(exp, bo);
    exp->add_option("--storage", storage, "session log directory")->required();
    exp->add_option("session", session_id, "session id")->required();

    // CLI11 wants argv-style input in reverse order.
    args = with_env(std::move(args), app);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::ostringstream o, r;
        app.exit(e, o, r);
        err << r.str() << o.str();
        return e.get_exit_code() == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*serve) return cmd_serve(bo, listen, storage, snapshot_every, out);
        if (*chat) return cmd_chat(bo, mode, tag, storage, in, out);
        if (*replay) return cmd_replay(bo, scenarios, bless, out, err);
        if (*exp) return cmd_export(bo, storage, session_id, out);
    } catch (const Error& e) {
        err << "care_cli: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "care_cli: " << e.what() << "\n";
        return kExitMismatch;
    }
    return kExitOk;
}

}  // namespace care
