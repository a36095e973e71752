// ctimp/alerts.hpp - alert creation, suppression and triage lifecycle

#pragma once

#include "ctimp/detection.hpp"

#include <json.hpp>

#include <chrono>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ctimp::alerts {

enum class Status { fresh, ongoing, complete };

/// "new", "ongoing", "complete".
std::string_view to_string(Status s);
std::optional<Status> status_from_string(std::string_view s);

/// Forward moves only: new -> ongoing -> complete, and new -> complete.
bool can_transition(Status from, Status to);

struct Alert {
    std::string alert_id;
    Timestamp raised_at{};
    Timestamp last_seen{};
    std::string rule_id;
    int level = 0;
    std::string threat_type;
    std::string threat_group;
    detect::DecodedEvent event;
    int count = 1;
    Status status = Status::fresh;
    std::optional<std::string> assignee;
    detect::Fields signature;

    friend bool operator==(const Alert&, const Alert&) = default;
};

nlohmann::json to_json(const Alert& alert);
Alert alert_from_json(const nlohmann::json& j);
nlohmann::json to_json(const detect::DecodedEvent& event);
detect::DecodedEvent decoded_event_from_json(const nlohmann::json& j);

enum class ChangeKind { created, updated };

struct AlertChange {
    ChangeKind kind;
    Alert alert;
};

using AlertListener = std::function<void(const AlertChange&)>;
using IdGenerator = std::function<std::string()>;

struct RaiseResult {
    Alert alert;
    bool created = false;
};

inline constexpr std::chrono::seconds kDefaultSuppression{300};

/// In-memory alert set. Suppression compares event times: a match whose
/// (rule_id, signature) equals a non-complete alert raised at most
/// `suppression` earlier folds into that alert.
class AlertStore {
public:
    explicit AlertStore(std::chrono::seconds suppression = kDefaultSuppression, IdGenerator ids = {});

    RaiseResult raise(const detect::RuleMatch& match, const detect::DetectionRule& rule);

    /// Throws NotFound or IllegalTransition.
    Alert set_status(const std::string& alert_id, Status next);
    Alert assign(const std::string& alert_id, std::optional<std::string> assignee);

    std::optional<Alert> get(const std::string& alert_id) const;
    /// Sorted by (raised_at, alert_id).
    std::vector<Alert> list(std::optional<Status> status = std::nullopt) const;
    std::size_t size() const;

    /// Listeners run under the store lock, in commit order.
    void subscribe(AlertListener listener);

    /// Reinstates persisted alerts without notifying listeners.
    void restore(std::vector<Alert> alerts);

private:
    void notify(ChangeKind kind, const Alert& alert);

    std::chrono::seconds suppression_;
    IdGenerator ids_;
    mutable std::mutex mutex_;
    std::map<std::string, Alert> alerts_;
    /// (rule_id, signature) -> most recent alert id with that signature.
    std::map<std::pair<std::string, detect::Fields>, std::string> latest_;
    std::vector<AlertListener> listeners_;
};

}  // namespace ctimp::alerts
