#include "care/orchestrator.hpp"

#include "care/json_util.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::string_view kBaselineRole = "baseline";

std::string trim(std::string_view text) {
    auto b = text.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(b, e - b + 1));
}

std::string lower(std::string_view text) {
    std::string out(text);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// Strips list bullets and bold markers from the front of a line.
std::string_view strip_decoration(std::string_view line) {
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t' || line.front() == '-' ||
                             line.front() == '*' || line.front() == '#')) {
        line.remove_prefix(1);
    }
    return line;
}

std::string strip_bold(std::string text) {
    std::string out;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '*' && i + 1 < text.size() && text[i + 1] == '*') {
            ++i;
            continue;
        }
        out.push_back(text[i]);
    }
    return trim(out);
}

std::string list_questions(const QuestionBatch& batch) {
    std::ostringstream out;
    out << "Topic: " << batch.topic << "\n";
    for (std::size_t i = 0; i < batch.questions.size(); ++i) {
        out << i + 1 << ". (Need ID: " << batch.questions[i].need_id.str() << ") "
            << batch.questions[i].question << "\n";
    }
    return out.str();
}

std::string id_list(const std::vector<NeedId>& ids) {
    std::string out;
    for (auto id : ids) {
        if (!out.empty()) out += ", ";
        out += id.str();
    }
    return out;
}

std::string describe_edit(const UserEdit& edit) {
    return std::visit(
        [](const auto& e) -> std::string {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, AddManual>) {
                return "added the need \"" + e.text + "\"";
            } else if constexpr (std::is_same_v<T, UpdateNeed>) {
                return "changed need " + e.id.str() + " to \"" + e.text + "\"";
            } else {
                return "deleted need " + e.id.str();
            }
        },
        edit);
}

}  // namespace

// ---------------------------------------------------------------------------
// Phase
// ---------------------------------------------------------------------------

std::string_view to_string(PhaseKind kind) noexcept {
    switch (kind) {
        case PhaseKind::AwaitUserQuery: return "AwaitUserQuery";
        case PhaseKind::MilestoneDecision: return "MilestoneDecision";
        case PhaseKind::NeedsDiscovery: return "NeedsDiscovery";
        case PhaseKind::Ranking: return "Ranking";
        case PhaseKind::Inquiring: return "Inquiring";
        case PhaseKind::SolutionDrafting: return "SolutionDrafting";
        case PhaseKind::SolutionReady: return "SolutionReady";
    }
    return "?";
}

std::optional<PhaseKind> phase_kind_from_string(std::string_view text) noexcept {
    for (auto k : {PhaseKind::AwaitUserQuery, PhaseKind::MilestoneDecision, PhaseKind::NeedsDiscovery,
                   PhaseKind::Ranking, PhaseKind::Inquiring, PhaseKind::SolutionDrafting,
                   PhaseKind::SolutionReady}) {
        if (to_string(k) == text) return k;
    }
    return std::nullopt;
}

bool Phase::awaits_user() const noexcept {
    return kind == PhaseKind::AwaitUserQuery || kind == PhaseKind::Inquiring ||
           kind == PhaseKind::SolutionReady;
}

ordered_json phase_to_json(const Phase& phase) {
    ordered_json out{{"kind", to_string(phase.kind)}};
    if (phase.kind == PhaseKind::Inquiring) {
        out["group_cursor"] = phase.group_cursor;
        out["batch_cursor"] = phase.batch_cursor;
    }
    return out;
}

Phase phase_from_json(const json& value) {
    auto kind = phase_kind_from_string(value.at("kind").get<std::string>());
    if (!kind) throw Error(ErrorCode::StorageError, "unknown phase " + value.at("kind").dump());
    return Phase{*kind, value.value("group_cursor", std::size_t{0}), value.value("batch_cursor", std::size_t{0})};
}

bool is_valid_transition(PhaseKind from, PhaseKind to) noexcept {
    using P = PhaseKind;
    // Any phase may fall back to milestone planning (feedback, skips, manual edits).
    if (to == P::MilestoneDecision) return from != P::MilestoneDecision;
    switch (from) {
        case P::AwaitUserQuery: return to == P::SolutionReady;  // baseline answers
        case P::MilestoneDecision: return to == P::NeedsDiscovery || to == P::SolutionDrafting;
        case P::NeedsDiscovery: return to == P::Ranking;
        case P::Ranking: return to == P::Inquiring;
        case P::Inquiring: return to == P::Inquiring;
        case P::SolutionDrafting: return to == P::SolutionReady;
        case P::SolutionReady: return false;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Milestones and batches
// ---------------------------------------------------------------------------

Milestone parse_milestone_block(std::string_view body) {
    Milestone m;
    std::string* open = nullptr;  // field collecting continuation lines
    std::istringstream in{std::string(body)};
    std::string line;
    while (std::getline(in, line)) {
        auto stripped = strip_decoration(line);
        auto low = lower(stripped);
        auto take = [&](std::string_view label, std::string& field) {
            if (low.rfind(label, 0) != 0) return false;
            field = strip_bold(std::string(stripped.substr(label.size())));
            open = &field;
            return true;
        };
        if (take("next milestone:", m.text) || take("next milestone**:", m.text)) continue;
        if (take("explanation:", m.explanation) || take("explanation**:", m.explanation)) continue;
        if (take("user query/feedback:", m.feedback) || take("user query/feedback**:", m.feedback)) continue;
        if (open && !trim(line).empty()) {
            if (!open->empty()) *open += "\n";
            *open += trim(line);
        }
    }
    if (m.text.empty()) m.text = trim(body);
    return m;
}

std::vector<QuestionBatch> plan_batches(const std::vector<QuestionGroup>& groups) {
    std::vector<QuestionBatch> out;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& qs = groups[g].questions;
        if (qs.empty()) continue;
        std::size_t k = (qs.size() + kMaxBatchQuestions - 1) / kMaxBatchQuestions;
        std::size_t base = qs.size() / k;
        std::size_t extra = qs.size() % k;
        std::size_t at = 0;
        for (std::size_t b = 0; b < k; ++b) {
            std::size_t n = base + (b < extra ? 1 : 0);
            QuestionBatch batch{g, b, groups[g].topic, {}};
            batch.questions.assign(qs.begin() + static_cast<std::ptrdiff_t>(at),
                                   qs.begin() + static_cast<std::ptrdiff_t>(at + n));
            at += n;
            out.push_back(std::move(batch));
        }
    }
    return out;
}

ordered_json batch_to_json(const QuestionBatch& batch) {
    ordered_json qs = ordered_json::array();
    for (const auto& q : batch.questions) qs.push_back({{"need_id", q.need_id.str()}, {"question", q.question}});
    return {{"group_index", batch.group_index},
            {"batch_index", batch.batch_index},
            {"topic", batch.topic},
            {"questions", qs}};
}

QuestionBatch batch_from_json(const json& value) {
    QuestionBatch b;
    b.group_index = value.at("group_index").get<std::size_t>();
    b.batch_index = value.at("batch_index").get<std::size_t>();
    b.topic = value.at("topic").get<std::string>();
    for (const auto& q : value.at("questions")) {
        auto id = NeedId::parse(q.at("need_id").get<std::string>());
        if (!id) throw Error(ErrorCode::StorageError, "bad need_id in batch");
        b.questions.push_back({*id, q.at("question").get<std::string>()});
    }
    return b;
}

std::size_t count_enumerated_questions(std::string_view text) {
    std::size_t count = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        std::size_t i = line.find_first_not_of(" \t");
        if (i == std::string::npos) continue;
        std::size_t digits = 0;
        while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i, ++digits;
        if (digits == 0 || digits > 3 || i >= line.size()) continue;
        if (line[i] != '.' && line[i] != ')') continue;
        if (i + 1 < line.size() && line[i + 1] != ' ' && line[i + 1] != '\t') continue;
        ++count;
    }
    return count;
}

// ---------------------------------------------------------------------------
// UI events
// ---------------------------------------------------------------------------

std::string_view to_string(UiEventKind kind) noexcept {
    switch (kind) {
        case UiEventKind::AgentMessage: return "AgentMessage";
        case UiEventKind::QuestionsPosted: return "QuestionsPosted";
        case UiEventKind::NeedsUpdated: return "NeedsUpdated";
        case UiEventKind::SolutionUpdated: return "SolutionUpdated";
        case UiEventKind::PhaseChanged: return "PhaseChanged";
        case UiEventKind::SolutionReadyNotice: return "SolutionReadyNotice";
        case UiEventKind::GroundingFailure: return "GroundingFailure";
        case UiEventKind::ErrorRaised: return "ErrorRaised";
    }
    return "?";
}

UiEvent UiEvent::agent_message(std::string text) {
    UiEvent e;
    e.kind = UiEventKind::AgentMessage;
    e.text = std::move(text);
    return e;
}

UiEvent UiEvent::questions_posted(const QuestionBatch& batch) {
    UiEvent e;
    e.kind = UiEventKind::QuestionsPosted;
    e.topic = batch.topic;
    e.questions = batch.questions;
    return e;
}

UiEvent UiEvent::needs_updated(std::uint64_t revision) {
    UiEvent e;
    e.kind = UiEventKind::NeedsUpdated;
    e.revision = revision;
    return e;
}

UiEvent UiEvent::solution_updated(std::uint64_t revision_basis) {
    UiEvent e;
    e.kind = UiEventKind::SolutionUpdated;
    e.revision = revision_basis;
    return e;
}

UiEvent UiEvent::phase_changed(Phase phase) {
    UiEvent e;
    e.kind = UiEventKind::PhaseChanged;
    e.phase = phase;
    return e;
}

UiEvent UiEvent::solution_ready_notice() {
    UiEvent e;
    e.kind = UiEventKind::SolutionReadyNotice;
    return e;
}

UiEvent UiEvent::grounding_failure(std::vector<NeedId> dangling) {
    UiEvent e;
    e.kind = UiEventKind::GroundingFailure;
    e.need_ids = std::move(dangling);
    return e;
}

UiEvent UiEvent::error_raised(const Error& error) {
    UiEvent e;
    e.kind = UiEventKind::ErrorRaised;
    e.code = std::string(error_code_name(error.code()));
    e.text = error.message();
    return e;
}

ordered_json ui_event_to_json(const UiEvent& event) {
    ordered_json out{{"type", to_string(event.kind)}};
    switch (event.kind) {
        case UiEventKind::AgentMessage: out["text"] = event.text; break;
        case UiEventKind::QuestionsPosted: {
            ordered_json qs = ordered_json::array();
            for (const auto& q : event.questions) qs.push_back({{"need_id", q.need_id.str()}, {"question", q.question}});
            out["topic"] = event.topic;
            out["questions"] = qs;
            break;
        }
        case UiEventKind::NeedsUpdated: out["revision"] = event.revision; break;
        case UiEventKind::SolutionUpdated: out["revision_basis"] = event.revision; break;
        case UiEventKind::PhaseChanged: out["phase"] = phase_to_json(event.phase); break;
        case UiEventKind::SolutionReadyNotice: break;
        case UiEventKind::GroundingFailure: {
            ordered_json ids = ordered_json::array();
            for (auto id : event.need_ids) ids.push_back(id.str());
            out["dangling"] = ids;
            break;
        }
        case UiEventKind::ErrorRaised:
            out["code"] = event.code;
            out["message"] = event.text;
            break;
    }
    return out;
}

UiEvent ui_event_from_json(const json& value) {
    auto type = value.at("type").get<std::string>();
    UiEvent e;
    if (type == "AgentMessage") {
        e = UiEvent::agent_message(value.at("text").get<std::string>());
    } else if (type == "QuestionsPosted") {
        e.kind = UiEventKind::QuestionsPosted;
        e.topic = value.at("topic").get<std::string>();
        for (const auto& q : value.at("questions")) {
            auto id = NeedId::parse(q.at("need_id").get<std::string>());
            if (!id) throw Error(ErrorCode::StorageError, "bad need_id in event");
            e.questions.push_back({*id, q.at("question").get<std::string>()});
        }
    } else if (type == "NeedsUpdated") {
        e = UiEvent::needs_updated(value.at("revision").get<std::uint64_t>());
    } else if (type == "SolutionUpdated") {
        e = UiEvent::solution_updated(value.at("revision_basis").get<std::uint64_t>());
    } else if (type == "PhaseChanged") {
        e = UiEvent::phase_changed(phase_from_json(value.at("phase")));
    } else if (type == "SolutionReadyNotice") {
        e = UiEvent::solution_ready_notice();
    } else if (type == "GroundingFailure") {
        e.kind = UiEventKind::GroundingFailure;
        for (const auto& id : value.at("dangling")) {
            auto parsed = NeedId::parse(id.get<std::string>());
            if (!parsed) throw Error(ErrorCode::StorageError, "bad need_id in event");
            e.need_ids.push_back(*parsed);
        }
    } else if (type == "ErrorRaised") {
        e.kind = UiEventKind::ErrorRaised;
        e.code = value.at("code").get<std::string>();
        e.text = value.at("message").get<std::string>();
    } else {
        throw Error(ErrorCode::StorageError, "unknown event type '" + type + "'");
    }
    return e;
}

// ---------------------------------------------------------------------------
// Session: records
// ---------------------------------------------------------------------------

Session::Session(std::string id, std::string tag, const PromptPack& prompts, Backend& backend,
                 EngineConfig config)
    : prompts_(prompts), backend_(backend), config_(std::move(config)) {
    state_.id = std::move(id);
    state_.tag = std::move(tag);
    for (auto role : kAllRoles) {
        auto spec = make_agent_spec(role, prompts_);
        spec.max_retries = config_.max_retries;
        spec.max_tool_rounds = config_.max_tool_rounds;
        specs_.emplace(role, std::move(spec));
    }
    install_listeners();
}

void Session::install_listeners() {
    state_.memo.set_mutation_listener([this](const json& record) {
        if (!replaying_) persist(to_ordered(record));
    });
    state_.solutions.set_write_listener([this](const AnnotatedSolution& solution) {
        if (!replaying_) persist(ordered_json{{"op", "solution"}, {"solution", solution_to_json(solution)}});
    });
}

void Session::persist(const ordered_json& record) {
    ++state_.record_count;
    if (sink_) sink_(record);
}

void Session::commit(ordered_json record) {
    apply(json(record));
    persist(record);
}

void Session::apply_record(const json& record) {
    replaying_ = true;
    try {
        apply(record);
    } catch (...) {
        replaying_ = false;
        throw;
    }
    replaying_ = false;
    ++state_.record_count;
}

void Session::apply(const json& record) {
    auto op = record.at("op").get<std::string>();
    if (op.rfind("memo.", 0) == 0) {
        state_.memo.replay(record);
    } else if (op == "session.init") {
        state_.id = record.at("id").get<std::string>();
        state_.tag = record.at("tag").get<std::string>();
        state_.baseline_mode = record.at("baseline_mode").get<bool>();
        state_.started = true;
    } else if (op == "phase") {
        state_.phase = phase_from_json(record.at("phase"));
        if (state_.phase.kind == PhaseKind::SolutionDrafting) ++state_.drafting_runs;
    } else if (op == "transcript") {
        auto entry = transcript_entry_from_json(record.at("entry"));
        if (entry.channel == Channel::Trace) ++state_.tool_executions;
        state_.transcript.push_back(std::move(entry));
    } else if (op == "milestone") {
        Milestone m{record.at("text").get<std::string>(), record.value("explanation", std::string{}),
                    record.value("feedback", std::string{}), state_.milestones.size() + 1};
        state_.milestones.push_back(std::move(m));
    } else if (op == "pending") {
        state_.pending_groups.clear();
        for (const auto& b : record.at("batches")) state_.pending_groups.push_back(batch_from_json(b));
    } else if (op == "flags") {
        state_.skip_requested = record.at("skip_requested").get<bool>();
        state_.manual_update_pending = record.at("manual_update_pending").get<bool>();
    } else if (op == "call") {
        ++state_.call_counters[record.at("role").get<std::string>()];
    } else if (op == "solution") {
        state_.solutions.put(solution_from_json(record.at("solution")));
    } else if (op == "event") {
        auto seq = record.at("seq").get<std::uint64_t>();
        if (seq != state_.events.size() + 1) {
            throw Error(ErrorCode::StorageError, "event sequence gap at " + std::to_string(seq));
        }
        state_.events.push_back({seq, ui_event_from_json(record.at("event"))});
    } else {
        throw Error(ErrorCode::StorageError, "unknown record '" + op + "'");
    }
}

ordered_json Session::snapshot_json() const {
    const auto& s = state_;
    ordered_json milestones = ordered_json::array();
    for (const auto& m : s.milestones) {
        milestones.push_back({{"text", m.text}, {"explanation", m.explanation}, {"feedback", m.feedback}});
    }
    ordered_json pending = ordered_json::array();
    for (const auto& b : s.pending_groups) pending.push_back(batch_to_json(b));
    ordered_json transcript = ordered_json::array();
    for (const auto& t : s.transcript) transcript.push_back(transcript_entry_to_json(t));
    ordered_json counters = ordered_json::object();
    for (const auto& [role, n] : s.call_counters) counters[role] = n;
    ordered_json events = ordered_json::array();
    for (const auto& e : s.events) events.push_back({{"seq", e.seq}, {"event", ui_event_to_json(e.event)}});

    return ordered_json{
        {"id", s.id},
        {"tag", s.tag},
        {"baseline_mode", s.baseline_mode},
        {"started", s.started},
        {"phase", phase_to_json(s.phase)},
        {"memo", s.memo.to_snapshot_json()},
        {"milestones", milestones},
        {"pending", pending},
        {"solution", s.solution() ? solution_to_json(*s.solution()) : ordered_json(nullptr)},
        {"solution_writes", s.solutions.write_count()},
        {"transcript", transcript},
        {"skip_requested", s.skip_requested},
        {"manual_update_pending", s.manual_update_pending},
        {"call_counters", counters},
        {"events", events},
        {"drafting_runs", s.drafting_runs},
        {"tool_executions", s.tool_executions},
        {"record_count", s.record_count},
    };
}

void Session::restore_snapshot(const json& snap) {
    SessionState s;
    s.id = snap.at("id").get<std::string>();
    s.tag = snap.at("tag").get<std::string>();
    s.baseline_mode = snap.at("baseline_mode").get<bool>();
    s.started = snap.at("started").get<bool>();
    s.phase = phase_from_json(snap.at("phase"));
    s.memo = NeedsMemo::from_snapshot_json(snap.at("memo"));
    for (const auto& m : snap.at("milestones")) {
        s.milestones.push_back({m.at("text").get<std::string>(), m.at("explanation").get<std::string>(),
                                m.at("feedback").get<std::string>(), s.milestones.size() + 1});
    }
    for (const auto& b : snap.at("pending")) s.pending_groups.push_back(batch_from_json(b));
    if (!snap.at("solution").is_null()) {
        // put() counts a write; replay the remaining count so write_count matches.
        auto writes = snap.value("solution_writes", std::size_t{1});
        for (std::size_t i = 0; i < std::max<std::size_t>(writes, 1); ++i) {
            s.solutions.put(solution_from_json(snap.at("solution")));
        }
    }
    for (const auto& t : snap.at("transcript")) s.transcript.push_back(transcript_entry_from_json(t));
    s.skip_requested = snap.at("skip_requested").get<bool>();
    s.manual_update_pending = snap.at("manual_update_pending").get<bool>();
    for (const auto& [role, n] : snap.at("call_counters").items()) s.call_counters[role] = n.get<std::uint32_t>();
    for (const auto& e : snap.at("events")) {
        s.events.push_back({e.at("seq").get<std::uint64_t>(), ui_event_from_json(e.at("event"))});
    }
    s.drafting_runs = snap.at("drafting_runs").get<std::size_t>();
    s.tool_executions = snap.at("tool_executions").get<std::size_t>();
    s.record_count = snap.at("record_count").get<std::size_t>();
    state_ = std::move(s);
    install_listeners();
}

std::uint32_t Session::next_call(std::string_view role) {
    auto index = state_.call_counters[std::string(role)];
    commit(ordered_json{{"op", "call"}, {"role", role}});
    return index;
}

void Session::emit(UiEvent event) {
    std::uint64_t seq = state_.events.size() + 1;
    commit(ordered_json{{"op", "event"}, {"seq", seq}, {"event", ui_event_to_json(event)}});
    if (collected_) collected_->push_back(event);
    if (listener_) listener_(state_.events.back());
}

void Session::set_phase(Phase phase) {
    if (phase == state_.phase) return;
    if (!is_valid_transition(state_.phase.kind, phase.kind) &&
        !(phase.kind == PhaseKind::Inquiring && state_.phase.kind == PhaseKind::Inquiring)) {
        throw Error(ErrorCode::WrongPhase, std::string("no transition from ") +
                                               std::string(to_string(state_.phase.kind)) + " to " +
                                               std::string(to_string(phase.kind)));
    }
    commit(ordered_json{{"op", "phase"}, {"phase", phase_to_json(phase)}});
    emit(UiEvent::phase_changed(phase));
}

void Session::append(std::string author, Channel channel, std::string content) {
    commit(ordered_json{{"op", "transcript"},
                        {"entry", transcript_entry_to_json({std::move(author), channel, std::move(content)})}});
}

void Session::set_pending(std::vector<QuestionBatch> batches) {
    if (batches == state_.pending_groups) return;
    ordered_json list = ordered_json::array();
    for (const auto& b : batches) list.push_back(batch_to_json(b));
    commit(ordered_json{{"op", "pending"}, {"batches", list}});
}

void Session::set_flags(bool skip_requested, bool manual_update_pending) {
    if (skip_requested == state_.skip_requested && manual_update_pending == state_.manual_update_pending) return;
    commit(ordered_json{{"op", "flags"},
                        {"skip_requested", skip_requested},
                        {"manual_update_pending", manual_update_pending}});
}

// ---------------------------------------------------------------------------
// Session: turns
// ---------------------------------------------------------------------------

template <class F>
std::vector<UiEvent> Session::collect(F&& body) {
    std::vector<UiEvent> out;
    auto* previous = collected_;
    collected_ = &out;
    try {
        body();
    } catch (const Error& e) {
        collected_ = previous;
        json details = e.details().is_object() ? e.details() : json::object();
        if (!e.details().is_null() && !e.details().is_object()) details["cause"] = e.details();
        if (!details.contains("phase")) details["phase"] = to_string(state_.phase.kind);
        throw Error(e.code(), e.message(), details);
    } catch (...) {
        collected_ = previous;
        throw;
    }
    collected_ = previous;
    return out;
}

AgentTurnResult Session::run_turn(AgentRole role, std::string_view directive, std::set<ControlToken> accepted,
                                  bool require_token, TurnValidator validator) {
    auto context = assemble_context(role, prompts_, state_.transcript, directive);
    TurnOptions options;
    options.session_tag = state_.tag;
    options.next_turn_index = [this, role] { return next_call(role_name(role)); };
    options.model = config_.model;
    options.temperature = config_.temperature;
    options.max_tokens = config_.max_tokens;
    options.accepted_tokens = std::move(accepted);
    options.require_token = require_token;
    options.validator = std::move(validator);
    auto result = run_agent_turn(specs_.at(role), std::move(context), backend_, state_.memo, state_.solutions, options);
    record_tool_trace(role, result);
    return result;
}

void Session::record_tool_trace(AgentRole role, const AgentTurnResult& result) {
    for (const auto& executed : result.tool_calls_executed) {
        ordered_json trace{{"tool", executed.call.name},
                           {"args", to_ordered(executed.call.args)},
                           {"ok", executed.ok},
                           {"result", to_ordered(executed.result)}};
        append(std::string(role_name(role)), Channel::Trace, trace.dump());
    }
}

std::size_t Session::filled_in(const QuestionBatch& batch) const {
    std::size_t n = 0;
    for (const auto& q : batch.questions) {
        const auto* slot = state_.memo.find(q.need_id);
        if (slot && !slot->clarify) ++n;
    }
    return n;
}

Phase Session::inquiring_phase() const {
    const auto& front = state_.pending_groups.front();
    return Phase{PhaseKind::Inquiring, front.group_index, front.batch_index};
}

bool Session::prune_pending() {
    auto batches = state_.pending_groups;
    if (batches.empty()) return false;
    auto front = std::make_pair(batches.front().group_index, batches.front().batch_index);
    for (auto& b : batches) {
        std::erase_if(b.questions, [&](const RankedQuestion& q) {
            const auto* slot = state_.memo.find(q.need_id);
            return !slot || !slot->clarify;
        });
    }
    std::erase_if(batches, [](const QuestionBatch& b) { return b.questions.empty(); });
    bool front_changed = batches.empty() ||
                         std::make_pair(batches.front().group_index, batches.front().batch_index) != front;
    set_pending(std::move(batches));
    return front_changed;
}

void Session::run_workflow() {
    for (int step = 0; !state_.phase.awaits_user(); ++step) {
        if (step >= config_.max_workflow_steps) {
            throw Error(ErrorCode::ProtocolTimeout,
                        "workflow did not reach a user-facing phase after " + std::to_string(step) + " agent turns");
        }
        switch (state_.phase.kind) {
            case PhaseKind::MilestoneDecision: run_milestone(); break;
            case PhaseKind::NeedsDiscovery: run_discovery(); break;
            case PhaseKind::Ranking: run_ranking(); break;
            case PhaseKind::SolutionDrafting: run_solution_craft(); break;
            default: return;
        }
    }
}

void Session::run_milestone() {
    const auto& spec = specs_.at(AgentRole::Milestone);
    std::optional<Milestone> parsed;
    auto validator = [&](const AgentTurnResult& r) -> std::optional<TurnViolation> {
        parsed.reset();
        bool end = r.has_token(ControlToken::MilestoneEnd);
        bool plan = r.has_token(ControlToken::BeginPlan);
        if (end && plan) {
            return TurnViolation{ErrorCode::ProtocolTimeout,
                                 "Generate either [MilestoneEnd] or [BeginPlan], not both. " + spec.token_rule};
        }
        if (end) {
            if (state_.manual_update_pending) {
                return TurnViolation{
                    ErrorCode::ProtocolTimeout,
                    prompts_.rule_line(AgentRole::Milestone, "manually updated",
                                       "The user has manually updated their requirements; generate [BeginPlan].")};
            }
            if (state_.skip_requested) {
                return TurnViolation{ErrorCode::ProtocolTimeout,
                                     "The user wants to see the solution immediately. Notify the SolutionCraft-Agent "
                                     "and generate [BeginPlan]."};
            }
            auto m = parse_milestone_block(r.visible_text);
            auto key = normalize_need_text(m.text);
            for (const auto& existing : state_.milestones) {
                if (normalize_need_text(existing.text) == key) {
                    return TurnViolation{
                        ErrorCode::DuplicateMilestone,
                        "The milestone \"" + m.text + "\" has already been established. " +
                            prompts_.rule_line(AgentRole::Milestone, "cannot set milestones",
                                               "You cannot set milestones that have already been established."),
                        1};
                }
            }
            parsed = std::move(m);
        }
        if (plan && !state_.skip_requested && !state_.manual_update_pending &&
            state_.memo.get_user_want_needs().empty()) {
            return TurnViolation{
                ErrorCode::ProtocolTimeout,
                "The User Needs Memo has no needs the user wants yet. " +
                    prompts_.rule_line(AgentRole::Milestone, "the first milestone should be",
                                       "Collect detailed basic user needs first.")};
        }
        return std::nullopt;
    };

    auto result = run_turn(AgentRole::Milestone, {}, {}, true, validator);
    append(std::string(role_name(AgentRole::Milestone)), Channel::Team, result.raw_text);
    if (result.has_token(ControlToken::BeginPlan)) {
        set_flags(false, false);
        set_phase({PhaseKind::SolutionDrafting});
        return;
    }
    commit(ordered_json{{"op", "milestone"},
                        {"text", parsed->text},
                        {"explanation", parsed->explanation},
                        {"feedback", parsed->feedback}});
    set_phase({PhaseKind::NeedsDiscovery});
}

void Session::run_discovery() {
    auto before = state_.memo.revision();
    auto result = run_turn(AgentRole::NeedsDiscovery, {}, {}, true);
    append(std::string(role_name(AgentRole::NeedsDiscovery)), Channel::Team, result.raw_text);
    if (state_.memo.revision() != before) emit(UiEvent::needs_updated(state_.memo.revision()));
    if (state_.memo.get_clarify_needs().empty()) {
        append(std::string(kEngineAuthor), Channel::Team,
               "No needs are waiting for clarification. Choose the next milestone or begin planning.");
        set_phase({PhaseKind::MilestoneDecision});
        return;
    }
    set_phase({PhaseKind::Ranking});
}

void Session::run_ranking() {
    std::optional<RankingResult> ranking;
    auto validator = [&](const AgentTurnResult& r) -> std::optional<TurnViolation> {
        try {
            ranking = parse_ranking_output(r.raw_text, state_.memo);
            return std::nullopt;
        } catch (const Error& e) {
            std::string note = "Your ranking could not be used (" + e.message() + ").";
            if (e.details().is_object() && e.details().contains("dropped")) {
                note += " Dropped: " + e.details().at("dropped").dump() + ".";
            }
            note += " Use only need_id values returned by get_clarify_needs. " +
                    prompts_.rule_line(AgentRole::Ranking, "json-formatted", "Generate the json-formatted text.");
            return TurnViolation{e.code(), note};
        }
    };
    auto result = run_turn(AgentRole::Ranking, {}, {}, false, validator);
    append(std::string(role_name(AgentRole::Ranking)), Channel::Team, result.raw_text);
    set_pending(plan_batches(ranking->groups));
    set_phase(inquiring_phase());
    present_batch();
}

void Session::present_batch() {
    const auto batch = state_.pending_groups.front();
    std::string directive =
        "Ask the user the following questions from the Ranking-Agent, and only these. Simplify them and offer "
        "default options where it helps. End with [Inquiry].\n" +
        list_questions(batch);
    auto validator = [&](const AgentTurnResult& r) -> std::optional<TurnViolation> {
        if (count_enumerated_questions(r.visible_text) > kMaxBatchQuestions) {
            return TurnViolation{ErrorCode::ProtocolTimeout,
                                 "Too many questions at once. " +
                                     prompts_.rule_line(AgentRole::Inquiry, "3~4 questions",
                                                        "Ask at most 4 questions at a time.")};
        }
        return std::nullopt;
    };
    auto result = run_turn(AgentRole::Inquiry, directive, {ControlToken::Inquiry}, true, validator);
    append(std::string(role_name(AgentRole::Inquiry)), Channel::Chat, result.raw_text);
    emit(UiEvent::agent_message(result.visible_text));
    emit(UiEvent::questions_posted(batch));
}

void Session::answer_batch() {
    const auto current = state_.pending_groups.front();
    const bool manual = state_.manual_update_pending;
    std::optional<QuestionBatch> next;
    if (!manual && state_.pending_groups.size() > 1) next = state_.pending_groups[1];

    std::string directive =
        "The user has replied to these questions. For each one they answered, call fill_need_slot with the need_id, "
        "a detailed need sentence and user_want (false when they do not want it).\n" +
        list_questions(current);
    if (manual) {
        directive += "The user has also updated their requirements manually. After recording the answers, notify the "
                     "Milestone-Agent that the user has updated their own requirements and generate "
                     "[BeginMilestone].";
    } else if (next) {
        directive += "Then ask the next questions, ending with [Inquiry]:\n" + list_questions(*next);
    } else {
        directive += "These were the last questions. Then inform the Milestone-Agent and generate [BeginMilestone].";
    }
    directive += "\nIf the reply does not answer the questions, respond to it and end with [Inquiry]. If the user "
                 "wants to see the solution immediately, stop asking, notify the Milestone-Agent and generate "
                 "[BeginMilestone].";

    auto validator = [&](const AgentTurnResult& r) -> std::optional<TurnViolation> {
        if (!r.has_token(ControlToken::Inquiry)) return std::nullopt;
        if (filled_in(current) > 0 && !next) {
            return TurnViolation{ErrorCode::ProtocolTimeout,
                                 prompts_.rule_line(AgentRole::Inquiry, "After all the questions have been asked",
                                                    "All questions have been asked; generate [BeginMilestone].")};
        }
        if (count_enumerated_questions(r.visible_text) > kMaxBatchQuestions) {
            return TurnViolation{ErrorCode::ProtocolTimeout,
                                 "Too many questions at once. " +
                                     prompts_.rule_line(AgentRole::Inquiry, "3~4 questions",
                                                        "Ask at most 4 questions at a time.")};
        }
        return std::nullopt;
    };

    auto before = state_.memo.revision();
    auto result = run_turn(AgentRole::Inquiry, directive, {ControlToken::Inquiry, ControlToken::BeginMilestone},
                           true, validator);
    bool changed = state_.memo.revision() != before;

    if (result.has_token(ControlToken::BeginMilestone)) {
        append(std::string(role_name(AgentRole::Inquiry)), Channel::Team, result.raw_text);
        if (changed) emit(UiEvent::needs_updated(state_.memo.revision()));
        // Leaving with batches still queued means the user asked to stop.
        if (!manual && state_.pending_groups.size() > 1) set_flags(true, state_.manual_update_pending);
        set_pending({});
        set_phase({PhaseKind::MilestoneDecision});
        return;
    }

    append(std::string(role_name(AgentRole::Inquiry)), Channel::Chat, result.raw_text);
    if (changed) emit(UiEvent::needs_updated(state_.memo.revision()));
    if (filled_in(current) == 0) {
        emit(UiEvent::agent_message(result.visible_text));
        return;
    }
    auto rest = std::vector<QuestionBatch>(state_.pending_groups.begin() + 1, state_.pending_groups.end());
    set_pending(std::move(rest));
    prune_pending();
    if (state_.pending_groups.empty()) {
        relay_all_asked();
        return;
    }
    set_phase(inquiring_phase());
    emit(UiEvent::agent_message(result.visible_text));
    emit(UiEvent::questions_posted(state_.pending_groups.front()));
}

void Session::skip_questions(std::string_view text) {
    // Relayed on the Inquiry agent's behalf; no model call needed.
    std::string relay = "The user wants to see the solution immediately and does not want to answer more questions.";
    auto feedback = trim(text);
    if (!feedback.empty()) relay += "\nUser feedback: " + feedback;
    relay += "\n" + std::string(token_text(ControlToken::BeginMilestone));
    append(std::string(role_name(AgentRole::Inquiry)), Channel::Team, relay);
    set_flags(true, state_.manual_update_pending);
    set_pending({});
    set_phase({PhaseKind::MilestoneDecision});
}

void Session::skip_group() {
    auto group = state_.pending_groups.front().group_index;
    auto before = state_.memo.revision();
    for (const auto& b : state_.pending_groups) {
        if (b.group_index != group) continue;
        for (const auto& q : b.questions) {
            const auto* slot = state_.memo.find(q.need_id);
            if (!slot || !slot->clarify) continue;
            state_.memo.fill_need_slot(q.need_id, "The user chose not to answer: " + q.question, WantStatus::Declined);
        }
    }
    if (state_.memo.revision() != before) emit(UiEvent::needs_updated(state_.memo.revision()));
    auto rest = state_.pending_groups;
    std::erase_if(rest, [&](const QuestionBatch& b) { return b.group_index == group; });
    set_pending(std::move(rest));
    if (state_.pending_groups.empty()) {
        relay_all_asked();
        return;
    }
    set_phase(inquiring_phase());
    present_batch();
}

void Session::relay_all_asked() {
    std::string relay = "All questions have been asked and the answers are recorded in the User Needs Memo.\n" +
                        std::string(token_text(ControlToken::BeginMilestone));
    append(std::string(role_name(AgentRole::Inquiry)), Channel::Team, relay);
    set_pending({});
    set_phase({PhaseKind::MilestoneDecision});
}

void Session::relay_feedback() {
    std::string directive =
        "The user has reviewed the solution. Organize their feedback, convey it to the Milestone-Agent and generate "
        "[BeginMilestone]. If the message is only a question for you, answer it and end with [Inquiry].";
    auto result = run_turn(AgentRole::Inquiry, directive, {ControlToken::BeginMilestone, ControlToken::Inquiry}, true);
    if (result.has_token(ControlToken::BeginMilestone)) {
        append(std::string(role_name(AgentRole::Inquiry)), Channel::Team, result.raw_text);
        set_phase({PhaseKind::MilestoneDecision});
        return;
    }
    append(std::string(role_name(AgentRole::Inquiry)), Channel::Chat, result.raw_text);
    emit(UiEvent::agent_message(result.visible_text));
}

void Session::run_solution_craft() {
    struct DraftingScope {
        SolutionStore& store;
        explicit DraftingScope(SolutionStore& s) : store(s) { store.begin_drafting(); }
        ~DraftingScope() { store.end_drafting(); }
    };

    const auto& spec = specs_.at(AgentRole::SolutionCraft);
    auto saved = [](const AgentTurnResult& r) {
        return std::any_of(r.tool_calls_executed.begin(), r.tool_calls_executed.end(), [](const auto& c) {
            return c.ok && c.call.name == tool_name_text(ToolName::WriteSolution);
        });
    };
    auto validator = [&](const AgentTurnResult& r) -> std::optional<TurnViolation> {
        if (saved(r)) return std::nullopt;
        return TurnViolation{ErrorCode::ProtocolTimeout,
                             "Save the solution with write_solution before finishing. " + spec.token_rule};
    };

    {
        DraftingScope scope(state_.solutions);
        std::string directive;
        for (int attempt = 0;; ++attempt) {
            auto writes = state_.solutions.write_count();
            auto result = run_turn(AgentRole::SolutionCraft, directive, {}, true, validator);
            append(std::string(role_name(AgentRole::SolutionCraft)), Channel::Team, result.raw_text);
            if (state_.solutions.write_count() != writes) {
                emit(UiEvent::solution_updated(state_.solution()->revision_basis));
            }
            auto report = validate_solution_refs(*state_.solution(), state_.memo);
            if (report.dangling.empty()) break;
            if (attempt >= config_.max_retries) {
                emit(UiEvent::grounding_failure(report.dangling));
                break;
            }
            directive = "Your solution cites Need IDs that are not needs the user wants: " + id_list(report.dangling) +
                        ". " +
                        prompts_.rule_line(AgentRole::SolutionCraft, "fabricate",
                                           "Only cite Need IDs that exist in the User Needs Memo.") +
                        " Rewrite the solution and save it with write_solution.";
        }
    }
    set_phase({PhaseKind::SolutionReady});
    notify_solution_ready();
}

void Session::notify_solution_ready() {
    std::string directive =
        "The SolutionCraft-Agent has finished the solution. Tell the user it is ready in the Solution Panel without "
        "repeating its content. End with [Inquiry].";
    auto result = run_turn(AgentRole::Inquiry, directive, {ControlToken::Inquiry}, false);
    append(std::string(role_name(AgentRole::Inquiry)), Channel::Chat, result.raw_text);
    emit(UiEvent::agent_message(result.visible_text));
    emit(UiEvent::solution_ready_notice());
}

void Session::run_baseline() {
    ChatRequest request;
    request.messages.push_back({MessageRole::System, "", config_.baseline_system_prompt, {}, {}});
    for (const auto& entry : state_.transcript) {
        if (entry.channel != Channel::Chat) continue;
        bool mine = entry.author == kBaselineRole;
        request.messages.push_back({mine ? MessageRole::Assistant : MessageRole::User, "", entry.content, {}, {}});
    }
    request.temperature = config_.temperature;
    request.model = config_.model;
    request.max_tokens = config_.max_tokens;
    request.key = CallKey{state_.tag, std::string(kBaselineRole), next_call(kBaselineRole)};
    auto response = backend_.complete(request);
    if (response.is_tool_call()) {
        throw Error(ErrorCode::PolicyViolation, "baseline mode executes no tools");
    }
    auto text = response.text.value_or("");
    append(std::string(kBaselineRole), Channel::Chat, text);
    emit(UiEvent::agent_message(text));
    const auto& solution = state_.solutions.put(annotate_solution(text, state_.memo.revision()));
    emit(UiEvent::solution_updated(solution.revision_basis));
    set_phase({PhaseKind::SolutionReady});
}

void Session::begin_manual_replan(const std::string& summary) {
    std::string relay = "User has updated their requirements by themselves: " + summary +
                        ". Please have the SolutionCraft-Agent update the solution.\n" +
                        std::string(token_text(ControlToken::BeginMilestone));
    append(std::string(role_name(AgentRole::Inquiry)), Channel::Team, relay);
    set_pending({});
    set_flags(state_.skip_requested, true);
    set_phase({PhaseKind::MilestoneDecision});
    run_workflow();
}

// ---------------------------------------------------------------------------
// Session: public operations
// ---------------------------------------------------------------------------

std::vector<UiEvent> Session::start(std::string_view query, bool baseline_mode) {
    return collect([&] {
        if (state_.started) throw Error(ErrorCode::WrongPhase, "session already started");
        auto text = trim(query);
        if (text.empty()) throw Error(ErrorCode::EmptyQuery, "the query is empty");
        commit(ordered_json{{"op", "session.init"},
                            {"id", state_.id},
                            {"tag", state_.tag},
                            {"baseline_mode", baseline_mode}});
        append(std::string(kUserAuthor), Channel::Chat, text);
        if (baseline_mode) {
            run_baseline();
            return;
        }
        auto result = run_turn(AgentRole::Inquiry,
                               "Pass the user's query to the Milestone-Agent exactly as it is and generate "
                               "[BeginMilestone].",
                               {ControlToken::BeginMilestone}, true);
        append(std::string(role_name(AgentRole::Inquiry)), Channel::Team, result.raw_text);
        set_phase({PhaseKind::MilestoneDecision});
        run_workflow();
    });
}

std::vector<UiEvent> Session::advance() {
    return collect([&] { run_workflow(); });
}

std::vector<UiEvent> Session::resume() { return advance(); }

std::vector<UiEvent> Session::handle_user_message(std::string_view text, MessageIntent intent) {
    return collect([&] {
        if (!state_.started) throw Error(ErrorCode::WrongPhase, "the session has no query yet");
        auto message = trim(text);
        if (message.empty() && intent == MessageIntent::Reply) throw Error(ErrorCode::EmptyQuery, "the message is empty");
        auto kind = state_.phase.kind;
        if (kind != PhaseKind::Inquiring && kind != PhaseKind::SolutionReady) {
            throw Error(ErrorCode::WrongPhase,
                        "messages are not accepted during " + std::string(to_string(kind)));
        }
        if (!message.empty()) append(std::string(kUserAuthor), Channel::Chat, message);
        if (state_.baseline_mode) {
            run_baseline();
            return;
        }
        if (kind == PhaseKind::SolutionReady) {
            relay_feedback();
        } else if (intent == MessageIntent::SkipQuestions) {
            skip_questions(message);
        } else if (intent == MessageIntent::SkipGroup) {
            skip_group();
        } else {
            answer_batch();
        }
        run_workflow();
    });
}

std::vector<UiEvent> Session::apply_manual_edit(const UserEdit& edit) {
    return collect([&] {
        if (!state_.started) throw Error(ErrorCode::WrongPhase, "the session has no query yet");
        if (state_.baseline_mode) throw Error(ErrorCode::WrongPhase, "baseline sessions have no needs memo");
        auto revision = state_.memo.apply_user_edit(edit);
        emit(UiEvent::needs_updated(revision));
        bool front_changed = prune_pending();
        if (state_.phase.kind == PhaseKind::Inquiring && !front_changed) {
            // Let the user finish the posted batch; replan right after it.
            set_flags(state_.skip_requested, true);
            return;
        }
        begin_manual_replan(describe_edit(edit));
    });
}

std::vector<UiEvent> Session::report_error(const Error& error) {
    return collect([&] { emit(UiEvent::error_raised(error)); });
}

}  // namespace care
