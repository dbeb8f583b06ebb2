#pragma once

#include "care/llm_backend.hpp"

#include <chrono>
#include <memory>
#include <semaphore>
#include <string>

namespace care {

struct HttpBackendConfig {
    std::string base_url = "https://api.openai.com/v1";
    std::string model = "gpt-4o";
    std::string api_key_env = "OPENAI_API_KEY";
    std::chrono::seconds timeout{120};
    int max_retries = 3;
    std::chrono::milliseconds retry_backoff{500};
    int max_in_flight = 4;
};

/// OpenAI-compatible chat/completions client with tool calling.
///
/// Transient failures (connection errors, 429, 5xx) are retried with
/// exponential backoff up to `max_retries`; anything else surfaces as
/// BackendError immediately. The credential is read from the configured
/// environment variable at construction and never leaves this class.
class HttpBackend final : public Backend {
public:
    explicit HttpBackend(HttpBackendConfig config);
    ~HttpBackend() override;

    ChatResponse complete(const ChatRequest& request) override;

    /// Body sent for `request`; exposed for wire-format tests.
    [[nodiscard]] nlohmann::json build_payload(const ChatRequest& request) const;
    static ChatResponse parse_completion(const nlohmann::json& body);

private:
    HttpBackendConfig config_;
    std::string api_key_;
    std::string origin_;       // scheme://host[:port]
    std::string path_prefix_;  // e.g. /v1
    std::counting_semaphore<1024> in_flight_;
};

}  // namespace care
