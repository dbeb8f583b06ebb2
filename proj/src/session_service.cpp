#include "care/session_service.hpp"

#include "care/error.hpp"

#include <cstdio>
#include <future>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string new_session_id() {
    static std::mutex mutex;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(mutex);
    std::ostringstream out;
    out << "s-" << std::hex << std::setw(12) << std::setfill('0') << (rng() & 0xFFFFFFFFFFFFull);
    return out.str();
}

std::string chat_author(const std::string& author) {
    if (author == kUserAuthor) return "user";
    if (auto role = role_from_name(author)) return std::string(role_display_name(*role));
    return "assistant";
}

}  // namespace

std::optional<SessionMode> mode_from_string(std::string_view text) noexcept {
    if (text == "care") return SessionMode::Care;
    if (text == "baseline") return SessionMode::Baseline;
    return std::nullopt;
}

std::string_view to_string(SessionMode mode) noexcept {
    return mode == SessionMode::Baseline ? "baseline" : "care";
}

PanelSnapshot make_panel_snapshot(const SessionState& state) {
    PanelSnapshot p;
    p.session_id = state.id;
    p.baseline_mode = state.baseline_mode;
    p.phase = state.phase;
    for (const auto& entry : state.transcript) {
        if (entry.channel != Channel::Chat) continue;
        p.chat.push_back({{"author", chat_author(entry.author)}, {"text", parse_control_tokens(entry.content).body}});
    }
    p.solution = state.solution();
    p.needs_revision = state.memo.revision();
    // Open questions stay hidden until the user has been asked them.
    std::set<NeedId> asked;
    for (const auto& e : state.events) {
        if (e.event.kind != UiEventKind::QuestionsPosted) continue;
        for (const auto& q : e.event.questions) asked.insert(q.need_id);
    }
    for (const auto& [id, slot] : state.memo.slots()) {
        if (slot.clarify && slot.want == WantStatus::Unanswered && !asked.contains(id)) continue;
        p.needs.push_back(slot);
    }
    p.last_seq = state.events.size();
    return p;
}

ordered_json panel_to_json(const PanelSnapshot& panel) {
    ordered_json solution = nullptr;
    if (panel.solution) {
        ordered_json refs = ordered_json::array();
        // Byte offsets into body; the client anchors these instead of re-parsing.
        for (const auto& r : panel.solution->refs) {
            refs.push_back({{"need_id", r.id.str()}, {"start", r.start}, {"end", r.end}});
        }
        solution = {{"body", panel.solution->body},
                    {"revision_basis", panel.solution->revision_basis},
                    {"need_refs", refs}};
    }
    ordered_json slots = ordered_json::array();
    for (const auto& s : panel.needs) {
        ordered_json item{{"need_id", s.id.str()}};
        auto fields = slot_to_json(s);
        for (auto& [k, v] : fields.items()) item[k] = v;
        slots.push_back(std::move(item));
    }
    return ordered_json{
        {"session_id", panel.session_id},
        {"mode", panel.baseline_mode ? "baseline" : "care"},
        {"phase", phase_to_json(panel.phase)},
        {"busy", panel.busy},
        {"last_seq", panel.last_seq},
        {"chat", panel.chat},
        {"solution", solution},
        {"needs", {{"revision", panel.needs_revision}, {"slots", slots}}},
    };
}

// ---------------------------------------------------------------------------

struct SessionService::Slot {
    std::string id;
    std::unique_ptr<Session> session;

    mutable std::mutex mutex;
    mutable std::condition_variable cv;
    std::deque<std::function<void(Session&)>> jobs;
    bool running = false;
    bool stopping = false;
    PanelSnapshot panel;
    std::vector<SequencedEvent> events;
    std::size_t snapshot_records = 0;

    // Worker-thread only: resolves an edit request on its NeedsUpdated event.
    std::shared_ptr<std::promise<std::uint64_t>> edit_promise;

    std::thread worker;

    [[nodiscard]] bool idle() const { return jobs.empty() && !running; }
};

SessionService::SessionService(const PromptPack& prompts, Backend& backend, SessionStore& store,
                               ServiceConfig config)
    : prompts_(prompts), backend_(backend), store_(store), config_(std::move(config)) {}

SessionService::~SessionService() {
    std::vector<Slot*> all;
    {
        std::lock_guard lock(mutex_);
        for (auto& [_, s] : slots_) all.push_back(s.get());
    }
    for (auto* s : all) {
        {
            std::lock_guard lock(s->mutex);
            s->stopping = true;
        }
        s->cv.notify_all();
    }
    for (auto* s : all) {
        if (s->worker.joinable()) s->worker.join();
    }
}

SessionService::Slot& SessionService::slot(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    auto it = slots_.find(session_id);
    if (it == slots_.end()) throw Error(ErrorCode::UnknownSession, "no session '" + session_id + "'");
    return *it->second;
}

SessionService::Slot& SessionService::register_session(const std::string& id, std::unique_ptr<Session> session) {
    auto owned = std::make_unique<Slot>();
    Slot& s = *owned;
    s.id = id;
    s.session = std::move(session);
    s.snapshot_records = s.session->state().record_count;
    s.session->set_record_sink([this, &s](const ordered_json& record) {
        store_.append(s.id, record);
        if (config_.record_observer) config_.record_observer(s.session->state(), record);
    });
    s.session->set_event_listener([this, &s](const SequencedEvent& event) {
        if (s.edit_promise && event.event.kind == UiEventKind::NeedsUpdated) {
            s.edit_promise->set_value(event.event.revision);
            s.edit_promise.reset();
        }
        {
            std::lock_guard lock(s.mutex);
            s.events.push_back(event);
        }
        publish(s);
    });
    s.events = s.session->state().events;
    s.panel = make_panel_snapshot(s.session->state());
    {
        std::lock_guard lock(mutex_);
        if (slots_.contains(id)) throw Error(ErrorCode::StorageError, "duplicate session id '" + id + "'");
        slots_.emplace(id, std::move(owned));
    }
    s.worker = std::thread([this, &s] { worker_loop(s); });
    return s;
}

void SessionService::publish(Slot& s) {
    auto panel = make_panel_snapshot(s.session->state());
    {
        std::lock_guard lock(s.mutex);
        panel.busy = !s.idle();
        s.panel = std::move(panel);
    }
    s.cv.notify_all();
}

void SessionService::maybe_snapshot(Slot& s) {
    auto count = s.session->state().record_count;
    if (count - s.snapshot_records < config_.snapshot_every) return;
    try {
        store_.write_snapshot(s.id, s.session->snapshot_json());
        s.snapshot_records = count;
    } catch (const Error& e) {
        std::fprintf(stderr, "care: snapshot of %s failed: %s\n", s.id.c_str(), e.what());
    }
}

void SessionService::enqueue(Slot& s, std::function<void(Session&)> job) {
    {
        std::lock_guard lock(s.mutex);
        s.jobs.push_back(std::move(job));
        s.panel.busy = true;
    }
    s.cv.notify_all();
}

void SessionService::worker_loop(Slot& s) {
    for (;;) {
        std::function<void(Session&)> job;
        {
            std::unique_lock lock(s.mutex);
            s.cv.wait(lock, [&] { return s.stopping || !s.jobs.empty(); });
            if (s.jobs.empty()) return;
            job = std::move(s.jobs.front());
            s.jobs.pop_front();
            s.running = true;
        }
        try {
            job(*s.session);
        } catch (const Error& e) {
            std::fprintf(stderr, "care: session %s: %s\n", s.id.c_str(), e.what());
            try {
                s.session->report_error(e);
            } catch (const std::exception& inner) {
                std::fprintf(stderr, "care: session %s: cannot record error: %s\n", s.id.c_str(), inner.what());
            }
        } catch (const std::exception& e) {
            std::fprintf(stderr, "care: session %s: %s\n", s.id.c_str(), e.what());
            try {
                s.session->report_error(Error(ErrorCode::BackendError, e.what()));
            } catch (...) {
            }
        }
        maybe_snapshot(s);
        {
            std::lock_guard lock(s.mutex);
            s.running = false;
        }
        publish(s);
    }
}

std::unique_ptr<Session> SessionService::load_session(const std::string& session_id) const {
    auto session = std::make_unique<Session>(session_id, session_id, prompts_, backend_, config_.engine);
    std::size_t from = 0;
    if (auto snap = store_.load_snapshot(session_id)) {
        session->restore_snapshot(*snap);
        from = session->state().record_count;
    }
    for (const auto& record : store_.load_records(session_id, from)) session->apply_record(record);
    return session;
}

std::size_t SessionService::recover_all() {
    std::size_t n = 0;
    for (const auto& id : store_.list()) {
        {
            std::lock_guard lock(mutex_);
            if (slots_.contains(id)) continue;
        }
        register_session(id, load_session(id));
        ++n;
    }
    return n;
}

std::string SessionService::create_session(std::string_view query, SessionMode mode, std::optional<std::string> tag) {
    if (query.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        throw Error(ErrorCode::EmptyQuery, "the query is empty");
    }
    auto id = new_session_id();
    auto session = std::make_unique<Session>(id, tag.value_or(id), prompts_, backend_, config_.engine);
    auto& s = register_session(id, std::move(session));
    enqueue(s, [q = std::string(query), mode](Session& session) {
        session.start(q, mode == SessionMode::Baseline);
    });
    return id;
}

void SessionService::post_message(const std::string& session_id, std::string_view text, MessageIntent intent) {
    auto& s = slot(session_id);
    if (intent == MessageIntent::Reply && text.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        throw Error(ErrorCode::EmptyQuery, "the message is empty");
    }
    {
        std::lock_guard lock(s.mutex);
        auto kind = s.panel.phase.kind;
        if (!s.idle()) {
            throw Error(ErrorCode::WrongPhase, "the session is busy (" + std::string(to_string(kind)) + ")");
        }
        if (kind != PhaseKind::Inquiring && kind != PhaseKind::SolutionReady) {
            throw Error(ErrorCode::WrongPhase, "messages are not accepted during " + std::string(to_string(kind)));
        }
        s.jobs.push_back([t = std::string(text), intent](Session& session) { session.handle_user_message(t, intent); });
        s.panel.busy = true;
    }
    s.cv.notify_all();
}

std::uint64_t SessionService::edit_needs(const std::string& session_id, const UserEdit& edit) {
    auto& s = slot(session_id);
    auto promise = std::make_shared<std::promise<std::uint64_t>>();
    auto future = promise->get_future();
    {
        std::lock_guard lock(s.mutex);
        if (!s.idle()) throw Error(ErrorCode::WrongPhase, "the session is busy; edit the needs once it is idle");
        s.jobs.push_back([&s, promise, edit](Session& session) {
            s.edit_promise = promise;
            try {
                session.apply_manual_edit(edit);
            } catch (...) {
                if (s.edit_promise) {
                    // Rejected before any change: report to the caller only.
                    s.edit_promise->set_exception(std::current_exception());
                    s.edit_promise.reset();
                    return;
                }
                throw;
            }
        });
        s.panel.busy = true;
    }
    s.cv.notify_all();
    try {
        return future.get();
    } catch (...) {
        // A rejected edit changes nothing; let the worker settle so the
        // caller sees an idle session.
        wait_idle(session_id);
        throw;
    }
}

void SessionService::resume(const std::string& session_id) {
    auto& s = slot(session_id);
    {
        std::lock_guard lock(s.mutex);
        if (!s.idle()) throw Error(ErrorCode::WrongPhase, "the session is busy");
        if (s.panel.phase.awaits_user()) throw Error(ErrorCode::WrongPhase, "nothing to resume");
    }
    enqueue(s, [](Session& session) { session.resume(); });
}

PanelSnapshot SessionService::panels(const std::string& session_id) const {
    auto& s = slot(session_id);
    std::lock_guard lock(s.mutex);
    return s.panel;
}

std::vector<SequencedEvent> SessionService::events_since(const std::string& session_id, std::uint64_t since) const {
    auto& s = slot(session_id);
    std::lock_guard lock(s.mutex);
    if (since >= s.events.size()) return {};
    return {s.events.begin() + static_cast<std::ptrdiff_t>(since), s.events.end()};
}

std::vector<SequencedEvent> SessionService::wait_events(const std::string& session_id, std::uint64_t since,
                                                        std::chrono::milliseconds timeout) const {
    auto& s = slot(session_id);
    std::unique_lock lock(s.mutex);
    s.cv.wait_for(lock, timeout, [&] { return s.events.size() > since || s.stopping; });
    if (since >= s.events.size()) return {};
    return {s.events.begin() + static_cast<std::ptrdiff_t>(since), s.events.end()};
}

bool SessionService::wait_idle(const std::string& session_id, std::chrono::milliseconds timeout) const {
    auto& s = slot(session_id);
    std::unique_lock lock(s.mutex);
    return s.cv.wait_for(lock, timeout, [&] { return s.idle(); });
}

bool SessionService::busy(const std::string& session_id) const {
    auto& s = slot(session_id);
    std::lock_guard lock(s.mutex);
    return !s.idle();
}

std::vector<std::string> SessionService::session_ids() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, _] : slots_) out.push_back(id);
    return out;
}

void SessionService::inspect(const std::string& session_id, const std::function<void(const SessionState&)>& fn) {
    auto& s = slot(session_id);
    std::promise<void> done;
    auto future = done.get_future();
    enqueue(s, [&](Session& session) {
        try {
            fn(session.state());
            done.set_value();
        } catch (...) {
            done.set_exception(std::current_exception());
        }
    });
    future.get();
}

}  // namespace care
