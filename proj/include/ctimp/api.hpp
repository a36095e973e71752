// ctimp/api.hpp - HTTP + server-sent events front end over a Platform
//
//   GET   /api/health                      no auth
//   GET   /api/alerts?status=              any role
//   GET   /api/alerts/{id}                 any role
//   PATCH /api/alerts/{id}                 {"status"} / {"assignee"}; analysts only on alerts assigned to them
//   GET   /api/commands?state=             any role
//   GET   /api/commands/{id}               any role
//   POST  /api/commands/{id}/verdict       admin, {"verdict": "approved" | "rejected"}
//   GET   /api/assetmap                    any role
//   PUT   /api/assetmap                    admin
//   GET   /api/rules                       any role
//   GET   /api/feeds                       any role
//   POST  /api/feeds/{id}/sync             admin
//   GET   /api/stream                      any role, text/event-stream
//
// Errors are {"error": <code>, "message": ...}: 400 bad_request, 401
// unauthorized, 403 forbidden, 404 not_found, 409 illegal_transition (with
// "from" and "to").

#pragma once

#include "ctimp/platform.hpp"

#include <atomic>
#include <memory>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace ctimp::platform {

class ApiServer {
public:
    explicit ApiServer(Platform& platform);
    ~ApiServer();
    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    /// Binds and serves on a background thread. Port 0 picks a free port;
    /// returns the bound port.
    int start(const std::string& host, int port);
    void stop();
    int port() const { return port_; }

private:
    void install_routes();

    Platform& platform_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::shared_ptr<std::atomic<bool>> stopping_ = std::make_shared<std::atomic<bool>>(false);
    int port_ = 0;
};

}  // namespace ctimp::platform
