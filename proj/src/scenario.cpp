#include "care/scenario.hpp"

#include "care/error.hpp"
#include "care/json_util.hpp"

#include <fstream>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string_view intent_name(MessageIntent intent) {
    switch (intent) {
        case MessageIntent::Reply: return "reply";
        case MessageIntent::SkipQuestions: return "skip";
        case MessageIntent::SkipGroup: return "skip_group";
    }
    return "reply";
}

MessageIntent intent_from(const std::string& text) {
    if (text.empty() || text == "reply") return MessageIntent::Reply;
    if (text == "skip") return MessageIntent::SkipQuestions;
    if (text == "skip_group") return MessageIntent::SkipGroup;
    throw Error(ErrorCode::ConfigError, "unknown intent '" + text + "'");
}

class CountingBackend final : public Backend {
public:
    explicit CountingBackend(Backend& inner) : inner_(inner) {}
    ChatResponse complete(const ChatRequest& request) override {
        ++calls;
        return inner_.complete(request);
    }
    std::size_t calls = 0;

private:
    Backend& inner_;
};

}  // namespace

Scenario scenario_from_json(const json& value) {
    Scenario s;
    s.name = value.at("name").get<std::string>();
    s.session_tag = value.value("session", s.name);
    s.query = value.at("query").get<std::string>();
    auto mode = mode_from_string(value.value("mode", std::string("care")));
    if (!mode) throw Error(ErrorCode::ConfigError, "scenario mode must be care or baseline");
    s.mode = *mode;
    for (const auto& step : value.value("steps", json::array())) {
        ScenarioStep st;
        if (step.contains("message")) {
            st.kind = ScenarioStep::Kind::Message;
            st.text = step.at("message").get<std::string>();
            st.intent = intent_from(step.value("intent", std::string{}));
        } else if (step.contains("edit")) {
            st.kind = ScenarioStep::Kind::Edit;
            st.edit = user_edit_from_json(step.at("edit"));
        } else if (step.contains("resume")) {
            st.kind = ScenarioStep::Kind::Resume;
        } else {
            throw Error(ErrorCode::ConfigError, "scenario step needs message, edit or resume: " + step.dump());
        }
        st.expect_error = step.value("expect_error", std::string{});
        s.steps.push_back(std::move(st));
    }
    if (value.contains("expect")) {
        const auto& expect = value.at("expect");
        if (expect.contains("events")) s.expected_events = expect.at("events");
        if (expect.contains("panels")) s.expected_panels = expect.at("panels");
    }
    return s;
}

ordered_json scenario_to_json(const Scenario& s) {
    ordered_json steps = ordered_json::array();
    for (const auto& st : s.steps) {
        ordered_json item;
        switch (st.kind) {
            case ScenarioStep::Kind::Message:
                item["message"] = st.text;
                if (st.intent != MessageIntent::Reply) item["intent"] = intent_name(st.intent);
                break;
            case ScenarioStep::Kind::Edit: item["edit"] = to_ordered(user_edit_to_json(*st.edit)); break;
            case ScenarioStep::Kind::Resume: item["resume"] = true; break;
        }
        if (!st.expect_error.empty()) item["expect_error"] = st.expect_error;
        steps.push_back(std::move(item));
    }
    ordered_json out{{"name", s.name},
                     {"session", s.session_tag},
                     {"query", s.query},
                     {"mode", to_string(s.mode)},
                     {"steps", steps}};
    if (s.expected_events || s.expected_panels) {
        ordered_json expect = ordered_json::object();
        if (s.expected_events) expect["events"] = to_ordered(*s.expected_events);
        if (s.expected_panels) expect["panels"] = to_ordered(*s.expected_panels);
        out["expect"] = expect;
    }
    return out;
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open scenario " + path.string());
    try {
        return scenario_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
    }
}

void save_scenario(const std::filesystem::path& path, const Scenario& scenario) {
    std::ofstream out(path, std::ios::trunc);
    out << scenario_to_json(scenario).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::StorageError, "cannot write " + path.string());
}

ScenarioResult run_scenario(const Scenario& scenario, const PromptPack& prompts, Backend& backend,
                            const EngineConfig& config, SessionStore* store) {
    CountingBackend counting(backend);
    Session session(scenario.session_tag, scenario.session_tag, prompts, counting, config);
    if (store) {
        session.set_record_sink([&](const ordered_json& r) { store->append(scenario.session_tag, r); });
    }
    ScenarioResult result;
    result.step_events.push_back(session.start(scenario.query, scenario.mode == SessionMode::Baseline));

    for (std::size_t i = 0; i < scenario.steps.size(); ++i) {
        const auto& step = scenario.steps[i];
        try {
            switch (step.kind) {
                case ScenarioStep::Kind::Message:
                    result.step_events.push_back(session.handle_user_message(step.text, step.intent));
                    break;
                case ScenarioStep::Kind::Edit:
                    result.step_events.push_back(session.apply_manual_edit(*step.edit));
                    break;
                case ScenarioStep::Kind::Resume: result.step_events.push_back(session.resume()); break;
            }
        } catch (const Error& e) {
            if (step.expect_error == error_code_name(e.code())) {
                result.step_events.emplace_back();
                continue;
            }
            throw;
        }
        if (!step.expect_error.empty()) {
            throw Error(ErrorCode::ExpectationMismatch,
                        "step " + std::to_string(i + 1) + " should have raised " + step.expect_error);
        }
    }

    const auto& state = session.state();
    for (const auto& e : state.events) result.events.push_back({{"seq", e.seq}, {"event", ui_event_to_json(e.event)}});
    result.panels = panel_to_json(make_panel_snapshot(state));
    result.drafting_runs = state.drafting_runs;
    result.milestones = state.milestones.size();
    result.backend_calls = counting.calls;
    result.snapshot = session.snapshot_json();
    return result;
}

std::vector<std::string> compare_expectations(const Scenario& scenario, const ScenarioResult& result) {
    std::vector<std::string> out;
    if (scenario.expected_events) {
        json actual = json::parse(result.events.dump());
        const auto& expected = *scenario.expected_events;
        auto n = std::max(actual.size(), expected.size());
        for (std::size_t i = 0; i < n; ++i) {
            if (i >= actual.size()) {
                out.push_back("missing event " + expected[i].dump());
                break;
            }
            if (i >= expected.size()) {
                out.push_back("unexpected event " + actual[i].dump());
                break;
            }
            if (actual[i] != expected[i]) {
                out.push_back("event " + std::to_string(i + 1) + ": expected " + expected[i].dump() + ", got " +
                              actual[i].dump());
                break;
            }
        }
    }
    if (scenario.expected_panels) {
        json actual = json::parse(result.panels.dump());
        if (actual != *scenario.expected_panels) {
            out.push_back("panels differ: " + json::diff(*scenario.expected_panels, actual).dump());
        }
    }
    return out;
}

}  // namespace care
