#pragma once

#include "care/agents.hpp"
#include "care/llm_backend.hpp"
#include "care/orchestrator.hpp"
#include "care/session_service.hpp"
#include "care/session_store.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace care {

/// A scripted conversation: the query, then user messages and needs edits
/// in order. Optional expectations hold the events and final panels a
/// blessed run produced.
struct ScenarioStep {
    enum class Kind { Message, Edit, Resume };
    Kind kind = Kind::Message;
    std::string text;
    MessageIntent intent = MessageIntent::Reply;
    std::optional<UserEdit> edit;
    std::string expect_error;  // error code name the step must raise, if any
};

struct Scenario {
    std::string name;
    std::string session_tag;
    std::string query;
    SessionMode mode = SessionMode::Care;
    std::vector<ScenarioStep> steps;
    std::optional<nlohmann::json> expected_events;
    std::optional<nlohmann::json> expected_panels;
};

Scenario scenario_from_json(const nlohmann::json& value);
nlohmann::ordered_json scenario_to_json(const Scenario& scenario);
Scenario load_scenario(const std::filesystem::path& path);
void save_scenario(const std::filesystem::path& path, const Scenario& scenario);

struct ScenarioResult {
    nlohmann::ordered_json events = nlohmann::ordered_json::array();  // [{seq, event}]
    nlohmann::ordered_json panels;
    std::vector<std::vector<UiEvent>> step_events;  // index 0: start
    std::size_t drafting_runs = 0;
    std::size_t milestones = 0;
    std::size_t backend_calls = 0;
    nlohmann::ordered_json snapshot;
};

/// Runs the scenario on a fresh session. Records go to `store` when given.
/// Throws ExpectationMismatch when a step's expected error does not occur.
ScenarioResult run_scenario(const Scenario& scenario, const PromptPack& prompts, Backend& backend,
                            const EngineConfig& config = {}, SessionStore* store = nullptr);

/// Differences between the scenario's expectations and a run; empty when
/// they match or nothing is expected.
std::vector<std::string> compare_expectations(const Scenario& scenario, const ScenarioResult& result);

}  // namespace care
