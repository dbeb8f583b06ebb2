#pragma once

#include "care/agents.hpp"
#include "care/llm_backend.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#ifndef CARE_SOURCE_DIR
#error "CARE_SOURCE_DIR must point at the source tree"
#endif

namespace care::test {

inline std::filesystem::path source_dir() { return CARE_SOURCE_DIR; }
inline std::filesystem::path prompt_dir() { return source_dir() / "prompts"; }
inline std::filesystem::path fixture_dir() { return source_dir() / "fixtures"; }
inline std::filesystem::path golden_dir() { return source_dir() / "tests" / "golden"; }

inline const PromptPack& prompts() {
    static const PromptPack pack = PromptPack::load(prompt_dir());
    return pack;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("care-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    [[nodiscard]] const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// Fixture builders for inline scripts.
inline Fixture text_fixture(const std::string& tag, const std::string& role, std::uint32_t turn, std::string text) {
    return Fixture{CallKey{tag, role, turn}, "", ChatResponse::from_text(std::move(text))};
}

inline Fixture tool_fixture(const std::string& tag, const std::string& role, std::uint32_t turn,
                            std::vector<ToolCall> calls) {
    return Fixture{CallKey{tag, role, turn}, "", ChatResponse::from_tool_calls(std::move(calls))};
}

inline ToolCall call(std::string name, nlohmann::json args, std::string id = "") {
    return ToolCall{std::move(id), std::move(name), std::move(args)};
}

}  // namespace care::test
