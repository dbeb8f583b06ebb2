#pragma once

#include "care/agents.hpp"
#include "care/error.hpp"
#include "care/llm_backend.hpp"
#include "care/needs_memo.hpp"
#include "care/protocol.hpp"
#include "care/solution_store.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace care {

enum class PhaseKind {
    AwaitUserQuery,
    MilestoneDecision,
    NeedsDiscovery,
    Ranking,
    Inquiring,
    SolutionDrafting,
    SolutionReady,
};

std::string_view to_string(PhaseKind kind) noexcept;
std::optional<PhaseKind> phase_kind_from_string(std::string_view text) noexcept;

struct Phase {
    PhaseKind kind = PhaseKind::AwaitUserQuery;
    std::size_t group_cursor = 0;  // Inquiring only
    std::size_t batch_cursor = 0;  // Inquiring only

    [[nodiscard]] bool awaits_user() const noexcept;
    bool operator==(const Phase&) const = default;
};

nlohmann::ordered_json phase_to_json(const Phase& phase);
Phase phase_from_json(const nlohmann::json& value);

/// Whether `from -> to` is an edge of the session workflow.
bool is_valid_transition(PhaseKind from, PhaseKind to) noexcept;

struct Milestone {
    std::string text;
    std::string explanation;
    std::string feedback;  // the "User query/feedback" part of the block
    std::size_t seq = 0;

    bool operator==(const Milestone&) const = default;
};

/// Reads a milestone block: the "Next milestone:" line, its explanation and
/// the user query/feedback. Without a "Next milestone:" line the whole body
/// is the milestone.
Milestone parse_milestone_block(std::string_view body);

inline constexpr std::size_t kMaxBatchQuestions = 4;

/// One posting of questions to the user: at most four, all from one group.
struct QuestionBatch {
    std::size_t group_index = 0;
    std::size_t batch_index = 0;
    std::string topic;
    std::vector<RankedQuestion> questions;

    bool operator==(const QuestionBatch&) const = default;
};

/// Splits each group into the fewest batches of at most four questions,
/// keeping batch sizes within one of each other (5 -> 3+2, 7 -> 4+3).
std::vector<QuestionBatch> plan_batches(const std::vector<QuestionGroup>& groups);

nlohmann::ordered_json batch_to_json(const QuestionBatch& batch);
QuestionBatch batch_from_json(const nlohmann::json& value);

/// Number of enumerated lines ("1. ...", "2) ...") in an agent message.
std::size_t count_enumerated_questions(std::string_view text);

enum class UiEventKind {
    AgentMessage,
    QuestionsPosted,
    NeedsUpdated,
    SolutionUpdated,
    PhaseChanged,
    SolutionReadyNotice,
    GroundingFailure,
    ErrorRaised,
};

std::string_view to_string(UiEventKind kind) noexcept;

struct UiEvent {
    UiEventKind kind = UiEventKind::AgentMessage;
    std::string text;                      // AgentMessage, ErrorRaised message
    std::string topic;                     // QuestionsPosted
    std::vector<RankedQuestion> questions; // QuestionsPosted
    std::uint64_t revision = 0;            // NeedsUpdated, SolutionUpdated (revision basis)
    Phase phase;                           // PhaseChanged
    std::vector<NeedId> need_ids;          // GroundingFailure: dangling ids
    std::string code;                      // ErrorRaised

    static UiEvent agent_message(std::string text);
    static UiEvent questions_posted(const QuestionBatch& batch);
    static UiEvent needs_updated(std::uint64_t revision);
    static UiEvent solution_updated(std::uint64_t revision_basis);
    static UiEvent phase_changed(Phase phase);
    static UiEvent solution_ready_notice();
    static UiEvent grounding_failure(std::vector<NeedId> dangling);
    static UiEvent error_raised(const Error& error);

    bool operator==(const UiEvent&) const = default;
};

nlohmann::ordered_json ui_event_to_json(const UiEvent& event);
UiEvent ui_event_from_json(const nlohmann::json& value);

struct SequencedEvent {
    std::uint64_t seq = 0;
    UiEvent event;

    bool operator==(const SequencedEvent&) const = default;
};

struct SessionState {
    std::string id;
    std::string tag;  // fixture session tag for backend call keys
    bool baseline_mode = false;
    bool started = false;
    Phase phase;
    NeedsMemo memo;
    std::vector<Milestone> milestones;
    std::vector<QuestionBatch> pending_groups;  // front is the posted batch
    SolutionStore solutions;
    std::vector<TranscriptEntry> transcript;
    bool skip_requested = false;
    bool manual_update_pending = false;
    std::map<std::string, std::uint32_t> call_counters;
    std::vector<SequencedEvent> events;
    std::size_t drafting_runs = 0;
    std::size_t tool_executions = 0;
    std::size_t record_count = 0;

    [[nodiscard]] const std::optional<AnnotatedSolution>& solution() const noexcept { return solutions.load(); }
};

struct EngineConfig {
    std::string model;
    double temperature = 0.0;
    int max_tokens = 4096;
    int max_retries = 2;
    int max_tool_rounds = 8;
    int max_workflow_steps = 16;  // agent phases per advance() before giving up
    std::string baseline_system_prompt = "You are a helpful assistant.";
};

enum class MessageIntent { Reply, SkipQuestions, SkipGroup };

/// One conversation. Drives the agents through the workflow and records
/// every state change as a replayable record:
///
///   AwaitUserQuery -> MilestoneDecision
///   MilestoneDecision -[MilestoneEnd]-> NeedsDiscovery -[DISCOVEREND]-> Ranking -> Inquiring
///   MilestoneDecision -[BeginPlan]-> SolutionDrafting -[SolutionEnd]-> SolutionReady
///   Inquiring -> Inquiring | MilestoneDecision;  SolutionReady -> MilestoneDecision
///
/// Not thread-safe; callers serialize access (the service keeps one queue
/// per session).
class Session {
public:
    using RecordSink = std::function<void(const nlohmann::ordered_json& record)>;
    using EventListener = std::function<void(const SequencedEvent& event)>;

    Session(std::string id, std::string tag, const PromptPack& prompts, Backend& backend,
            EngineConfig config = {});
    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    std::vector<UiEvent> start(std::string_view query, bool baseline_mode);
    std::vector<UiEvent> advance();
    std::vector<UiEvent> handle_user_message(std::string_view text,
                                             MessageIntent intent = MessageIntent::Reply);
    std::vector<UiEvent> apply_manual_edit(const UserEdit& edit);
    /// Re-runs advance() for a session an error left in a working phase.
    std::vector<UiEvent> resume();
    /// Records an ErrorRaised event.
    std::vector<UiEvent> report_error(const Error& error);

    [[nodiscard]] const SessionState& state() const noexcept { return state_; }

    void set_record_sink(RecordSink sink) { sink_ = std::move(sink); }
    void set_event_listener(EventListener listener) { listener_ = std::move(listener); }

    /// Applies one record from a session log.
    void apply_record(const nlohmann::json& record);

    [[nodiscard]] nlohmann::ordered_json snapshot_json() const;
    void restore_snapshot(const nlohmann::json& snapshot);

private:
    template <class F>
    std::vector<UiEvent> collect(F&& body);

    void apply(const nlohmann::json& record);
    void persist(const nlohmann::ordered_json& record);
    void commit(nlohmann::ordered_json record);
    std::uint32_t next_call(std::string_view role);
    void install_listeners();
    void emit(UiEvent event);
    void set_phase(Phase phase);
    void append(std::string author, Channel channel, std::string content);
    void set_pending(std::vector<QuestionBatch> batches);
    void set_flags(bool skip_requested, bool manual_update_pending);

    AgentTurnResult run_turn(AgentRole role, std::string_view directive,
                             std::set<ControlToken> accepted, bool require_token,
                             TurnValidator validator = {});
    void record_tool_trace(AgentRole role, const AgentTurnResult& result);

    void run_workflow();
    void run_milestone();
    void run_discovery();
    void run_ranking();
    void run_solution_craft();
    void run_baseline();
    void present_batch();
    void answer_batch();
    void skip_questions(std::string_view text);
    void skip_group();
    void relay_all_asked();
    void relay_feedback();
    void notify_solution_ready();
    void begin_manual_replan(const std::string& summary);
    bool prune_pending();
    std::size_t filled_in(const QuestionBatch& batch) const;

    [[nodiscard]] Phase inquiring_phase() const;

    SessionState state_;
    const PromptPack& prompts_;
    Backend& backend_;
    EngineConfig config_;
    std::map<AgentRole, AgentSpec> specs_;
    RecordSink sink_;
    EventListener listener_;
    bool replaying_ = false;
    std::vector<UiEvent>* collected_ = nullptr;
};

}  // namespace care
