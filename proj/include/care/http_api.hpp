#pragma once

#include "care/error.hpp"
#include "care/session_service.hpp"

#include <atomic>
#include <memory>
#include <string>
#include <thread>

namespace care {

/// HTTP status for an error code.
int http_status(ErrorCode code) noexcept;
/// Problem-details body: {type, title, status, code, detail}.
nlohmann::ordered_json problem_json(const Error& error);

/// JSON over HTTP in front of a SessionService:
///
///   POST   /sessions                          {query, mode?, tag?}
///   GET    /sessions
///   POST   /sessions/{id}/messages            {text, intent?}
///   POST   /sessions/{id}/resume
///   GET    /sessions/{id}/panels
///   POST   /sessions/{id}/needs               {text}
///   PATCH  /sessions/{id}/needs/{need_id}     {text}
///   DELETE /sessions/{id}/needs/{need_id}
///   GET    /sessions/{id}/events?since=N      text/event-stream
class HttpApi {
public:
    explicit HttpApi(SessionService& service);
    ~HttpApi();
    HttpApi(const HttpApi&) = delete;
    HttpApi& operator=(const HttpApi&) = delete;

    /// Binds without serving; port 0 picks a free port. Returns the port.
    /// Throws BindError.
    int bind(const std::string& host, int port);
    /// Serves until stop(). Call after bind().
    void serve();
    /// serve() on a background thread.
    void start();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace care
