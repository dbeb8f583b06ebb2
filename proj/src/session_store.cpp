#include "care/session_store.hpp"

#include "care/error.hpp"

#include <algorithm>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

bool valid_id(const std::string& id) {
    return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
    });
}

void require_valid(const std::string& id) {
    if (!valid_id(id)) throw Error(ErrorCode::StorageError, "invalid session id '" + id + "'");
}

}  // namespace

// --- memory -----------------------------------------------------------------

void MemorySessionStore::append(const std::string& session_id, const ordered_json& record) {
    std::lock_guard lock(mutex_);
    records_[session_id].push_back(json::parse(record.dump()));
}

void MemorySessionStore::write_snapshot(const std::string& session_id, const ordered_json& snapshot) {
    std::lock_guard lock(mutex_);
    snapshots_[session_id] = json::parse(snapshot.dump());
    records_.try_emplace(session_id);
}

std::optional<json> MemorySessionStore::load_snapshot(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    auto it = snapshots_.find(session_id);
    if (it == snapshots_.end()) return std::nullopt;
    return std::optional<json>(std::in_place, it->second);
}

std::vector<json> MemorySessionStore::load_records(const std::string& session_id, std::size_t from) const {
    std::lock_guard lock(mutex_);
    auto it = records_.find(session_id);
    if (it == records_.end() || from >= it->second.size()) return {};
    return {it->second.begin() + static_cast<std::ptrdiff_t>(from), it->second.end()};
}

std::vector<std::string> MemorySessionStore::list() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, _] : records_) out.push_back(id);
    return out;
}

void MemorySessionStore::truncate(const std::string& session_id, std::size_t count) {
    std::lock_guard lock(mutex_);
    auto& list = records_[session_id];
    if (list.size() > count) list.resize(count);
    auto snap = snapshots_.find(session_id);
    if (snap != snapshots_.end() && snap->second.value("record_count", std::size_t{0}) > count) {
        snapshots_.erase(snap);
    }
}

// --- files ------------------------------------------------------------------

FileSessionStore::FileSessionStore(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw Error(ErrorCode::StorageError, "cannot create " + root_.string() + ": " + ec.message());
}

std::filesystem::path FileSessionStore::log_path(const std::string& session_id) const {
    return root_ / session_id / "log.jsonl";
}

std::filesystem::path FileSessionStore::snapshot_path(const std::string& session_id) const {
    return root_ / session_id / "snapshot.json";
}

void FileSessionStore::append(const std::string& session_id, const ordered_json& record) {
    require_valid(session_id);
    std::lock_guard lock(mutex_);
    auto it = logs_.find(session_id);
    if (it == logs_.end()) {
        std::filesystem::create_directories(root_ / session_id);
        it = logs_.emplace(session_id, std::ofstream(log_path(session_id), std::ios::app)).first;
    }
    auto& out = it->second;
    out << record.dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::StorageError, "cannot append to " + log_path(session_id).string());
}

void FileSessionStore::write_snapshot(const std::string& session_id, const ordered_json& snapshot) {
    require_valid(session_id);
    std::lock_guard lock(mutex_);
    std::filesystem::create_directories(root_ / session_id);
    auto target = snapshot_path(session_id);
    auto tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << snapshot.dump();
        out.flush();
        if (!out) throw Error(ErrorCode::StorageError, "cannot write " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) throw Error(ErrorCode::StorageError, "cannot replace " + target.string() + ": " + ec.message());
}

std::optional<json> FileSessionStore::load_snapshot(const std::string& session_id) const {
    require_valid(session_id);
    std::ifstream in(snapshot_path(session_id));
    if (!in) return std::nullopt;
    try {
        return std::optional<json>(std::in_place, json::parse(in));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::StorageError, "corrupt snapshot for " + session_id + ": " + e.what());
    }
}

std::vector<json> FileSessionStore::load_records(const std::string& session_id, std::size_t from) const {
    require_valid(session_id);
    std::ifstream in(log_path(session_id));
    if (!in) return {};
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) lines.push_back(std::move(line));
    }
    std::vector<json> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        json record;
        try {
            record = json::parse(lines[i]);
        } catch (const json::exception&) {
            if (i + 1 == lines.size()) break;  // torn last write
            throw Error(ErrorCode::StorageError,
                        "corrupt record " + std::to_string(i) + " in " + log_path(session_id).string());
        }
        if (i >= from) out.push_back(std::move(record));
    }
    return out;
}

std::vector<std::string> FileSessionStore::list() const {
    std::vector<std::string> out;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(root_, ec)) {
        auto id = entry.path().filename().string();
        if (entry.is_directory() && valid_id(id) && std::filesystem::exists(entry.path() / "log.jsonl")) {
            out.push_back(id);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace care
