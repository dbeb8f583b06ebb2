#pragma once

#include "care/agents.hpp"
#include "care/llm_backend.hpp"
#include "care/orchestrator.hpp"
#include "care/session_store.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace care {

/// Everything the three UI panels render, as of event `last_seq`.
struct PanelSnapshot {
    std::string session_id;
    bool baseline_mode = false;
    Phase phase;
    nlohmann::ordered_json chat = nlohmann::ordered_json::array();
    std::optional<AnnotatedSolution> solution;
    std::uint64_t needs_revision = 0;
    std::vector<NeedSlot> needs;
    std::uint64_t last_seq = 0;
    bool busy = false;
};

PanelSnapshot make_panel_snapshot(const SessionState& state);
nlohmann::ordered_json panel_to_json(const PanelSnapshot& panel);

struct ServiceConfig {
    EngineConfig engine;
    std::size_t snapshot_every = 64;  // records between snapshots
    /// Called on the session worker after each record is stored.
    std::function<void(const SessionState&, const nlohmann::ordered_json& record)> record_observer;
};

enum class SessionMode { Care, Baseline };

std::optional<SessionMode> mode_from_string(std::string_view text) noexcept;
std::string_view to_string(SessionMode mode) noexcept;

/// Owns live sessions. Each session runs its jobs on its own worker thread,
/// so requests return immediately and state is only touched by that worker.
/// Panels and events are published copies, safe to read at any time.
class SessionService {
public:
    SessionService(const PromptPack& prompts, Backend& backend, SessionStore& store, ServiceConfig config = {});
    ~SessionService();
    SessionService(const SessionService&) = delete;
    SessionService& operator=(const SessionService&) = delete;

    /// Reloads every session found in the store (snapshot + log tail).
    std::size_t recover_all();
    /// Rebuilds one session from the store without registering it.
    std::unique_ptr<Session> load_session(const std::string& session_id) const;

    /// Returns the new session id; the query is processed in the background.
    std::string create_session(std::string_view query, SessionMode mode, std::optional<std::string> tag = {});
    void post_message(const std::string& session_id, std::string_view text,
                      MessageIntent intent = MessageIntent::Reply);
    /// Applies the edit and returns the new memo revision. Replanning
    /// continues in the background.
    std::uint64_t edit_needs(const std::string& session_id, const UserEdit& edit);
    void resume(const std::string& session_id);

    [[nodiscard]] PanelSnapshot panels(const std::string& session_id) const;
    [[nodiscard]] std::vector<SequencedEvent> events_since(const std::string& session_id, std::uint64_t since) const;
    /// Blocks until an event past `since` exists or the timeout passes.
    std::vector<SequencedEvent> wait_events(const std::string& session_id, std::uint64_t since,
                                            std::chrono::milliseconds timeout) const;
    /// Blocks until the session's queue is drained. False on timeout.
    bool wait_idle(const std::string& session_id,
                   std::chrono::milliseconds timeout = std::chrono::milliseconds(30000)) const;
    [[nodiscard]] bool busy(const std::string& session_id) const;
    [[nodiscard]] std::vector<std::string> session_ids() const;

    /// Runs `fn` on the session's worker against its live state and waits.
    void inspect(const std::string& session_id, const std::function<void(const SessionState&)>& fn);

private:
    struct Slot;

    Slot& slot(const std::string& session_id) const;
    Slot& register_session(const std::string& id, std::unique_ptr<Session> session);
    void enqueue(Slot& slot, std::function<void(Session&)> job);
    void worker_loop(Slot& slot);
    void publish(Slot& slot);
    void maybe_snapshot(Slot& slot);

    const PromptPack& prompts_;
    Backend& backend_;
    SessionStore& store_;
    ServiceConfig config_;

    mutable std::mutex mutex_;
    std::map<std::string, std::unique_ptr<Slot>> slots_;
};

}  // namespace care
