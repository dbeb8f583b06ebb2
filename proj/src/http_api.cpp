#include "care/http_api.hpp"

#include "care/json_util.hpp"

#include <httplib.h>

#include <charconv>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

int http_status(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::UnknownSession:
        case ErrorCode::UnknownNeedId:
            return 404;
        case ErrorCode::WrongPhase:
        case ErrorCode::DuplicateNeed:
            return 409;
        case ErrorCode::BadRequest:
        case ErrorCode::MalformedJson:
            return 400;
        case ErrorCode::EmptyQuery:
        case ErrorCode::EmptyNeed:
        case ErrorCode::InvalidCombination:
        case ErrorCode::InvalidWant:
        case ErrorCode::AlreadyClarified:
        case ErrorCode::ReopenNotSupported:
            return 422;
        case ErrorCode::BackendError:
        case ErrorCode::FixtureMiss:
        case ErrorCode::DigestMismatch:
            return 502;
        default:
            return 500;
    }
}

ordered_json problem_json(const Error& error) {
    auto status = http_status(error.code());
    ordered_json out{{"type", "about:blank"},
                     {"title", httplib::status_message(status)},
                     {"status", status},
                     {"code", error_code_name(error.code())},
                     {"detail", error.message()}};
    if (!error.details().is_null()) out["details"] = to_ordered(error.details());
    return out;
}

namespace {

void send_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json body_json(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        auto value = json::parse(req.body);
        if (!value.is_object()) throw Error(ErrorCode::BadRequest, "request body must be a JSON object");
        return value;
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::BadRequest, std::string("invalid JSON body: ") + e.what());
    }
}

std::string string_field(const json& body, const char* name, bool required = true) {
    auto it = body.find(name);
    if (it == body.end() || it->is_null()) {
        if (required) throw Error(ErrorCode::BadRequest, std::string("missing field '") + name + "'");
        return {};
    }
    if (!it->is_string()) throw Error(ErrorCode::BadRequest, std::string("field '") + name + "' must be a string");
    return it->get<std::string>();
}

NeedId need_id_param(const std::string& text) {
    auto id = NeedId::parse(text);
    if (!id) throw Error(ErrorCode::BadRequest, "bad need id '" + text + "'");
    return *id;
}

std::uint64_t since_param(const httplib::Request& req) {
    std::string text;
    if (req.has_param("since")) {
        text = req.get_param_value("since");
    } else if (req.has_header("Last-Event-ID")) {
        text = req.get_header_value("Last-Event-ID");
    } else {
        return 0;
    }
    std::uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw Error(ErrorCode::BadRequest, "bad since value '" + text + "'");
    }
    return value;
}

std::string sse_frame(const SequencedEvent& e) {
    return "id: " + std::to_string(e.seq) + "\nevent: " + std::string(to_string(e.event.kind)) +
           "\ndata: " + ui_event_to_json(e.event).dump() + "\n\n";
}

template <class F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const Error& e) {
            send_json(res, http_status(e.code()), problem_json(e));
        } catch (const json::exception& e) {
            send_json(res, 400, problem_json(Error(ErrorCode::BadRequest, e.what())));
        } catch (const std::exception& e) {
            send_json(res, 500, problem_json(Error(ErrorCode::StorageError, e.what())));
        }
    };
}

}  // namespace

struct HttpApi::Impl {
    SessionService& service;
    httplib::Server server;
    std::thread thread;
    std::atomic<bool> stopping{false};

    explicit Impl(SessionService& s) : service(s) {
        // No SO_REUSEPORT: a second server on a taken port must fail, not share it.
        server.set_socket_options([](socket_t sock) {
            int yes = 1;
            ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
        });
        routes();
    }

    void routes() {
        server.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto body = body_json(req);
            auto query = string_field(body, "query");
            auto mode_text = string_field(body, "mode", false);
            auto mode = mode_text.empty() ? SessionMode::Care : mode_from_string(mode_text).value_or(SessionMode::Care);
            if (!mode_text.empty() && !mode_from_string(mode_text)) {
                throw Error(ErrorCode::BadRequest, "mode must be 'care' or 'baseline'");
            }
            auto tag = string_field(body, "tag", false);
            auto id = service.create_session(query, mode, tag.empty() ? std::nullopt : std::optional(tag));
            res.set_header("Location", "/sessions/" + id);
            send_json(res, 201, {{"session_id", id}, {"mode", to_string(mode)}});
        }));

        server.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, {{"sessions", service.session_ids()}});
        }));

        server.Post(R"(/sessions/([^/]+)/messages)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto body = body_json(req);
            auto intent_text = string_field(body, "intent", false);
            MessageIntent intent = MessageIntent::Reply;
            if (intent_text == "skip") {
                intent = MessageIntent::SkipQuestions;
            } else if (intent_text == "skip_group") {
                intent = MessageIntent::SkipGroup;
            } else if (!intent_text.empty() && intent_text != "reply") {
                throw Error(ErrorCode::BadRequest, "intent must be reply, skip or skip_group");
            }
            service.post_message(req.matches[1], string_field(body, "text", intent == MessageIntent::Reply), intent);
            send_json(res, 202, {{"accepted", true}});
        }));

        server.Post(R"(/sessions/([^/]+)/resume)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            service.resume(req.matches[1]);
            send_json(res, 202, {{"accepted", true}});
        }));

        server.Get(R"(/sessions/([^/]+)/panels)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, panel_to_json(service.panels(req.matches[1])));
        }));

        server.Post(R"(/sessions/([^/]+)/needs)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto body = body_json(req);
            auto revision = service.edit_needs(req.matches[1], AddManual{string_field(body, "text")});
            send_json(res, 201, {{"revision", revision}});
        }));

        server.Patch(R"(/sessions/([^/]+)/needs/([^/]+))",
                     guarded([this](const httplib::Request& req, httplib::Response& res) {
                         auto body = body_json(req);
                         auto revision = service.edit_needs(
                             req.matches[1], UpdateNeed{need_id_param(req.matches[2]), string_field(body, "text")});
                         send_json(res, 200, {{"revision", revision}});
                     }));

        server.Delete(R"(/sessions/([^/]+)/needs/([^/]+))",
                      guarded([this](const httplib::Request& req, httplib::Response& res) {
                          auto revision =
                              service.edit_needs(req.matches[1], DeleteNeed{need_id_param(req.matches[2])});
                          send_json(res, 200, {{"revision", revision}});
                      }));

        server.Get(R"(/sessions/([^/]+)/events)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::string id = req.matches[1];
            auto since = since_param(req);
            (void)service.panels(id);  // 404 before committing to a stream
            bool follow = !(req.has_param("follow") && req.get_param_value("follow") == "0");
            res.set_header("Cache-Control", "no-cache");
            if (!follow) {
                std::string out;
                for (const auto& e : service.events_since(id, since)) out += sse_frame(e);
                res.set_content(out, "text/event-stream");
                return;
            }
            auto cursor = std::make_shared<std::uint64_t>(since);
            res.set_chunked_content_provider(
                "text/event-stream", [this, id, cursor](std::size_t, httplib::DataSink& sink) {
                    if (stopping) return false;
                    auto events = service.wait_events(id, *cursor, std::chrono::milliseconds(500));
                    std::string out;
                    for (const auto& e : events) {
                        out += sse_frame(e);
                        *cursor = e.seq;
                    }
                    if (out.empty()) out = ": keep-alive\n\n";
                    return sink.write(out.data(), out.size());
                });
        }));
    }
};

HttpApi::HttpApi(SessionService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpApi::~HttpApi() { stop(); }

int HttpApi::bind(const std::string& host, int port) {
    int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound <= 0) {
        throw Error(ErrorCode::BindError, "cannot listen on " + host + ":" + std::to_string(port));
    }
    return bound;
}

void HttpApi::serve() { impl_->server.listen_after_bind(); }

void HttpApi::start() {
    impl_->thread = std::thread([this] { serve(); });
    impl_->server.wait_until_ready();
}

void HttpApi::stop() {
    if (!impl_) return;
    impl_->stopping = true;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace care
