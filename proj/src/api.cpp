#include "ctimp/api.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <atomic>

using nlohmann::json;

namespace ctimp::platform {

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message,
                json extra = json::object()) {
    extra["error"] = code;
    extra["message"] = message;
    send_json(res, status, extra);
}

struct Caller {
    Role role;
    std::string actor;
};

std::optional<Caller> authenticate(const PlatformConfig& config, const httplib::Request& req) {
    std::string token;
    auto header = req.get_header_value("Authorization");
    if (header.rfind("Bearer ", 0) == 0) {
        token = header.substr(7);
    } else if (req.has_param("access_token")) {
        // EventSource cannot set headers; the stream accepts the token as a query parameter.
        token = req.get_param_value("access_token");
    }
    if (token.empty()) return std::nullopt;
    for (const auto& t : config.api.tokens)
        if (t.token == token) return Caller{t.role, t.actor};
    return std::nullopt;
}

json rule_json(const detect::DetectionRule& r, const std::map<std::string, std::string>& manifest) {
    json j{{"rule_id", r.rule_id},
           {"origin", r.origin == detect::RuleOrigin::sigma ? "sigma" : "native"},
           {"level", r.level},
           {"threat_type", r.threat_type},
           {"threat_group", r.threat_group},
           {"description", r.description},
           {"condition", r.conditions.str()}};
    if (auto it = manifest.find(r.rule_id); it != manifest.end()) j["stix_id"] = it->second;
    if (r.frequency) {
        j["frequency"] = {{"count", r.frequency->count},
                          {"window_seconds", r.frequency->window_seconds},
                          {"key_field", r.frequency->key_field}};
    }
    return j;
}

}  // namespace

ApiServer::ApiServer(Platform& platform) : platform_(platform), server_(std::make_unique<httplib::Server>()) {
    install_routes();
}

ApiServer::~ApiServer() {
    stop();
}

int ApiServer::start(const std::string& host, int port) {
    if (port == 0) {
        port_ = server_->bind_to_any_port(host);
    } else {
        port_ = server_->bind_to_port(host, port) ? port : -1;
    }
    if (port_ < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port_;
}

void ApiServer::stop() {
    stopping_->store(true);
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

void ApiServer::install_routes() {
    auto& srv = *server_;
    Platform& p = platform_;
    const PlatformConfig& cfg = p.config();

    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        } catch (...) {
            send_error(res, 500, "internal", "unknown error");
        }
    });

    // Every /api route except health requires a token; mutating routes check roles below.
    srv.set_pre_routing_handler([&cfg](const httplib::Request& req, httplib::Response& res) {
        if (req.path == "/api/health" || req.path.rfind("/api/", 0) != 0) return httplib::Server::HandlerResponse::Unhandled;
        if (!authenticate(cfg, req)) {
            res.set_header("WWW-Authenticate", "Bearer");
            send_error(res, 401, "unauthorized", "missing or unknown bearer token");
            return httplib::Server::HandlerResponse::Handled;
        }
        return httplib::Server::HandlerResponse::Unhandled;
    });

    auto require_admin = [&cfg](const httplib::Request& req, httplib::Response& res) {
        auto caller = authenticate(cfg, req);
        if (caller && caller->role == Role::admin) return true;
        send_error(res, 403, "forbidden", "this action requires the admin role");
        return false;
    };

    srv.Get("/api/health", [&p](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200,
                  {{"status", "ok"},
                   {"rules_generation", p.rules_generation()},
                   {"alerts", p.alert_store().size()},
                   {"events_published", p.bus().published()}});
    });

    // ---- alerts ------------------------------------------------------------

    srv.Get("/api/alerts", [&p](const httplib::Request& req, httplib::Response& res) {
        std::optional<alerts::Status> filter;
        if (req.has_param("status")) {
            filter = alerts::status_from_string(req.get_param_value("status"));
            if (!filter) return send_error(res, 400, "bad_request", "unknown status filter");
        }
        json out = json::array();
        for (const auto& a : p.alert_store().list(filter)) out.push_back(alerts::to_json(a));
        send_json(res, 200, out);
    });

    srv.Get(R"(/api/alerts/([^/]+))", [&p](const httplib::Request& req, httplib::Response& res) {
        auto a = p.alert_store().get(req.matches[1].str());
        if (!a) return send_error(res, 404, "not_found", "no such alert");
        send_json(res, 200, alerts::to_json(*a));
    });

    srv.Patch(R"(/api/alerts/([^/]+))", [&p, &cfg](const httplib::Request& req, httplib::Response& res) {
        auto caller = authenticate(cfg, req);
        auto id = req.matches[1].str();
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            return send_error(res, 400, "bad_request", "body is not JSON");
        }
        if (!body.is_object() || (!body.contains("status") && !body.contains("assignee"))) {
            return send_error(res, 400, "bad_request", "expected status and/or assignee");
        }
        auto current = p.alert_store().get(id);
        if (!current) return send_error(res, 404, "not_found", "no such alert");
        if (caller->role == Role::analyst) {
            if (body.contains("assignee")) return send_error(res, 403, "forbidden", "analysts cannot reassign alerts");
            if (current->assignee != caller->actor) {
                return send_error(res, 403, "forbidden", "analysts may only update alerts assigned to them");
            }
        }
        std::optional<alerts::Status> next;
        if (body.contains("status")) {
            if (!body["status"].is_string()) return send_error(res, 400, "bad_request", "status must be a string");
            next = alerts::status_from_string(body["status"].get<std::string>());
            if (!next) return send_error(res, 400, "bad_request", "unknown status");
        }
        std::optional<std::string> assignee;
        if (body.contains("assignee")) {
            if (!body["assignee"].is_null() && !body["assignee"].is_string()) {
                return send_error(res, 400, "bad_request", "assignee must be a string or null");
            }
            if (body["assignee"].is_string()) assignee = body["assignee"].get<std::string>();
        }
        try {
            alerts::Alert out = *current;
            if (next) out = p.alert_store().set_status(id, *next);
            if (body.contains("assignee")) out = p.alert_store().assign(id, assignee);
            send_json(res, 200, alerts::to_json(out));
        } catch (const IllegalTransition& e) {
            send_error(res, 409, "illegal_transition", e.what(), {{"from", e.from()}, {"to", e.to()}});
        } catch (const NotFound& e) {
            send_error(res, 404, "not_found", e.what());
        }
    });

    // ---- commands ----------------------------------------------------------

    srv.Get("/api/commands", [&p](const httplib::Request& req, httplib::Response& res) {
        std::optional<selfheal::CommandState> filter;
        if (req.has_param("state")) {
            filter = selfheal::command_state_from_string(req.get_param_value("state"));
            if (!filter) return send_error(res, 400, "bad_request", "unknown state filter");
        }
        json out = json::array();
        for (const auto& r : p.selfheal().list(filter)) out.push_back(selfheal::to_json(r));
        send_json(res, 200, out);
    });

    srv.Get(R"(/api/commands/([^/]+))", [&p](const httplib::Request& req, httplib::Response& res) {
        auto r = p.selfheal().get(req.matches[1].str());
        if (!r) return send_error(res, 404, "not_found", "no such command");
        send_json(res, 200, selfheal::to_json(*r));
    });

    srv.Post(R"(/api/commands/([^/]+)/verdict)", [&p, &cfg, require_admin](const httplib::Request& req,
                                                                           httplib::Response& res) {
        if (!require_admin(req, res)) return;
        auto caller = authenticate(cfg, req);
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            return send_error(res, 400, "bad_request", "body is not JSON");
        }
        if (!body.is_object() || !body.contains("verdict") || !body["verdict"].is_string()) {
            return send_error(res, 400, "bad_request", "expected {\"verdict\": \"approved\" | \"rejected\"}");
        }
        auto verdict = selfheal::verdict_from_string(body["verdict"].get<std::string>());
        if (!verdict) return send_error(res, 400, "bad_request", "verdict must be approved or rejected");
        try {
            auto r = p.selfheal().apply_verdict(req.matches[1].str(), *verdict, caller->actor);
            send_json(res, 200, selfheal::to_json(r));
        } catch (const NotFound& e) {
            send_error(res, 404, "not_found", e.what());
        } catch (const IllegalTransition& e) {
            send_error(res, 409, "illegal_transition", e.what(), {{"from", e.from()}, {"to", e.to()}});
        }
    });

    // ---- asset map ---------------------------------------------------------

    srv.Get("/api/assetmap", [&p](const httplib::Request&, httplib::Response& res) {
        res.status = 200;
        res.set_content(assets::save_map(*p.assets().snapshot()), "application/json");
    });

    srv.Put("/api/assetmap", [&p, require_admin](const httplib::Request& req, httplib::Response& res) {
        if (!require_admin(req, res)) return;
        try {
            auto map = assets::load_map(req.body);
            auto stored = p.put_asset_map(std::move(map));
            res.status = 200;
            res.set_content(assets::save_map(*stored), "application/json");
        } catch (const assets::SchemaError& e) {
            send_error(res, 400, "schema", e.what(), {{"path", e.path()}});
        } catch (const assets::IntegrityError& e) {
            send_error(res, 400, "integrity", e.what(), {{"ids", e.offending_ids()}});
        } catch (const IllegalTransition& e) {
            send_error(res, 409, "illegal_transition", e.what(), {{"from", e.from()}, {"to", e.to()}});
        }
    });

    // ---- rules and feeds ---------------------------------------------------

    srv.Get("/api/rules", [&p](const httplib::Request&, httplib::Response& res) {
        auto manifest = p.rule_manifest();
        json rules = json::array();
        for (const auto& r : *p.detection().rules()) rules.push_back(rule_json(r, manifest));
        send_json(res, 200, {{"generation", p.rules_generation()}, {"rules", rules}});
    });

    srv.Get("/api/feeds", [&p](const httplib::Request&, httplib::Response& res) {
        json out = json::array();
        for (const auto& [source, status] : p.feeds()) out.push_back(to_json(status, source));
        send_json(res, 200, out);
    });

    srv.Post(R"(/api/feeds/([^/]+)/sync)", [&p, require_admin](const httplib::Request& req, httplib::Response& res) {
        if (!require_admin(req, res)) return;
        auto id = req.matches[1].str();
        if (!p.feed(id)) return send_error(res, 404, "not_found", "no such feed");
        auto report = p.run_pipeline_cycle(now_utc(), id);
        send_json(res, 200, to_json(report));
    });

    // ---- event stream ------------------------------------------------------

    srv.Get("/api/stream", [&p, stopping = stopping_](const httplib::Request&, httplib::Response& res) {
        auto sub = p.bus().subscribe();
        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider(
            "text/event-stream",
            [sub, stopping](std::size_t, httplib::DataSink& sink) {
                if (sub->closed() || stopping->load()) {
                    sink.done();
                    return false;
                }
                auto ev = sub->next(std::chrono::milliseconds{500});
                std::string frame;
                if (ev) {
                    frame = "id: " + std::to_string(ev->seq) + "\nevent: " + ev->type + "\ndata: " + ev->data.dump() + "\n\n";
                } else {
                    frame = ": keepalive\n\n";
                }
                return sink.write(frame.data(), frame.size());
            },
            [sub](bool) { sub->close(); });
    });
}

}  // namespace ctimp::platform
