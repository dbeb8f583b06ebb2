#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace care {

/// Durable home of session logs: an append-only record list plus an
/// optional snapshot carrying the number of records it covers.
class SessionStore {
public:
    virtual ~SessionStore() = default;

    virtual void append(const std::string& session_id, const nlohmann::ordered_json& record) = 0;
    virtual void write_snapshot(const std::string& session_id, const nlohmann::ordered_json& snapshot) = 0;
    [[nodiscard]] virtual std::optional<nlohmann::json> load_snapshot(const std::string& session_id) const = 0;
    /// Records with index >= `from`.
    [[nodiscard]] virtual std::vector<nlohmann::json> load_records(const std::string& session_id,
                                                                   std::size_t from = 0) const = 0;
    [[nodiscard]] virtual std::vector<std::string> list() const = 0;
};

class MemorySessionStore final : public SessionStore {
public:
    void append(const std::string& session_id, const nlohmann::ordered_json& record) override;
    void write_snapshot(const std::string& session_id, const nlohmann::ordered_json& snapshot) override;
    [[nodiscard]] std::optional<nlohmann::json> load_snapshot(const std::string& session_id) const override;
    [[nodiscard]] std::vector<nlohmann::json> load_records(const std::string& session_id,
                                                           std::size_t from = 0) const override;
    [[nodiscard]] std::vector<std::string> list() const override;

    /// Drops every record past `count`, as if the process died there.
    void truncate(const std::string& session_id, std::size_t count);

private:
    mutable std::mutex mutex_;
    std::map<std::string, std::vector<nlohmann::json>> records_;
    std::map<std::string, nlohmann::json> snapshots_;
};

/// <root>/<session id>/log.jsonl and snapshot.json. Each record is flushed
/// as it is written; a torn final line is ignored on load.
class FileSessionStore final : public SessionStore {
public:
    explicit FileSessionStore(std::filesystem::path root);

    void append(const std::string& session_id, const nlohmann::ordered_json& record) override;
    void write_snapshot(const std::string& session_id, const nlohmann::ordered_json& snapshot) override;
    [[nodiscard]] std::optional<nlohmann::json> load_snapshot(const std::string& session_id) const override;
    [[nodiscard]] std::vector<nlohmann::json> load_records(const std::string& session_id,
                                                           std::size_t from = 0) const override;
    [[nodiscard]] std::vector<std::string> list() const override;

    [[nodiscard]] const std::filesystem::path& root() const noexcept { return root_; }
    [[nodiscard]] std::filesystem::path log_path(const std::string& session_id) const;
    [[nodiscard]] std::filesystem::path snapshot_path(const std::string& session_id) const;

private:
    std::filesystem::path root_;
    mutable std::mutex mutex_;
    std::map<std::string, std::ofstream> logs_;
};

}  // namespace care
