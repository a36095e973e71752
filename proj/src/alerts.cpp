#include "ctimp/alerts.hpp"

#include <algorithm>

namespace ctimp::alerts {

std::string_view to_string(Status s) {
    switch (s) {
        case Status::fresh: return "new";
        case Status::ongoing: return "ongoing";
        case Status::complete: return "complete";
    }
    return "new";
}

std::optional<Status> status_from_string(std::string_view s) {
    if (s == "new") return Status::fresh;
    if (s == "ongoing") return Status::ongoing;
    if (s == "complete") return Status::complete;
    return std::nullopt;
}

bool can_transition(Status from, Status to) {
    return static_cast<int>(to) > static_cast<int>(from);
}

nlohmann::json to_json(const detect::DecodedEvent& event) {
    nlohmann::json j;
    j["received_at"] = format_rfc3339(event.base.received_at);
    j["source_host"] = event.base.source_host;
    j["program"] = event.base.program ? nlohmann::json(*event.base.program) : nlohmann::json();
    j["message"] = event.base.message;
    j["decoder"] = event.decoder;
    j["fields"] = event.fields;
    return j;
}

detect::DecodedEvent decoded_event_from_json(const nlohmann::json& j) {
    detect::DecodedEvent e;
    auto ts = parse_rfc3339(j.at("received_at").get<std::string>());
    if (!ts) throw Error("event received_at is not RFC 3339");
    e.base.received_at = *ts;
    e.base.source_host = j.at("source_host").get<std::string>();
    if (!j.at("program").is_null()) e.base.program = j.at("program").get<std::string>();
    e.base.message = j.at("message").get<std::string>();
    e.decoder = j.at("decoder").get<std::string>();
    e.fields = j.at("fields").get<detect::Fields>();
    return e;
}

nlohmann::json to_json(const Alert& a) {
    nlohmann::json j;
    j["alert_id"] = a.alert_id;
    j["raised_at"] = format_rfc3339(a.raised_at);
    j["last_seen"] = format_rfc3339(a.last_seen);
    j["rule_id"] = a.rule_id;
    j["level"] = a.level;
    j["threat_type"] = a.threat_type;
    j["threat_group"] = a.threat_group;
    j["event"] = to_json(a.event);
    j["count"] = a.count;
    j["status"] = std::string(to_string(a.status));
    j["assignee"] = a.assignee ? nlohmann::json(*a.assignee) : nlohmann::json();
    j["signature"] = a.signature;
    return j;
}

Alert alert_from_json(const nlohmann::json& j) {
    Alert a;
    a.alert_id = j.at("alert_id").get<std::string>();
    auto raised = parse_rfc3339(j.at("raised_at").get<std::string>());
    auto seen = parse_rfc3339(j.at("last_seen").get<std::string>());
    if (!raised || !seen) throw Error("alert " + a.alert_id + ": bad timestamp");
    a.raised_at = *raised;
    a.last_seen = *seen;
    a.rule_id = j.at("rule_id").get<std::string>();
    a.level = j.at("level").get<int>();
    a.threat_type = j.at("threat_type").get<std::string>();
    a.threat_group = j.at("threat_group").get<std::string>();
    a.event = decoded_event_from_json(j.at("event"));
    a.count = j.at("count").get<int>();
    auto st = status_from_string(j.at("status").get<std::string>());
    if (!st) throw Error("alert " + a.alert_id + ": unknown status");
    a.status = *st;
    if (!j.at("assignee").is_null()) a.assignee = j.at("assignee").get<std::string>();
    a.signature = j.at("signature").get<detect::Fields>();
    return a;
}

AlertStore::AlertStore(std::chrono::seconds suppression, IdGenerator ids)
    : suppression_(suppression), ids_(ids ? std::move(ids) : IdGenerator([] { return uuid_v4().str(); })) {}

RaiseResult AlertStore::raise(const detect::RuleMatch& match, const detect::DetectionRule& rule) {
    std::lock_guard lock(mutex_);
    auto at = match.event.base.received_at;
    auto key = std::make_pair(match.rule_id, match.key);
    if (auto it = latest_.find(key); it != latest_.end()) {
        auto& prior = alerts_.at(it->second);
        if (prior.status != Status::complete && at >= prior.raised_at && at - prior.raised_at <= suppression_) {
            prior.count += match.count;
            prior.last_seen = std::max(prior.last_seen, at);
            notify(ChangeKind::updated, prior);
            return {prior, false};
        }
    }
    Alert a;
    a.alert_id = ids_();
    a.raised_at = at;
    a.last_seen = at;
    a.rule_id = match.rule_id;
    a.level = rule.level;
    a.threat_type = rule.threat_type;
    a.threat_group = rule.threat_group;
    a.event = match.event;
    a.count = match.count;
    a.signature = match.key;
    auto [pos, inserted] = alerts_.emplace(a.alert_id, a);
    if (!inserted) throw Error("duplicate alert id " + a.alert_id);
    latest_[key] = a.alert_id;
    notify(ChangeKind::created, a);
    return {a, true};
}

Alert AlertStore::set_status(const std::string& alert_id, Status next) {
    std::lock_guard lock(mutex_);
    auto it = alerts_.find(alert_id);
    if (it == alerts_.end()) throw NotFound("alert " + alert_id);
    auto& a = it->second;
    if (!can_transition(a.status, next)) {
        throw IllegalTransition(alert_id, std::string(to_string(a.status)), std::string(to_string(next)));
    }
    a.status = next;
    notify(ChangeKind::updated, a);
    return a;
}

Alert AlertStore::assign(const std::string& alert_id, std::optional<std::string> assignee) {
    std::lock_guard lock(mutex_);
    auto it = alerts_.find(alert_id);
    if (it == alerts_.end()) throw NotFound("alert " + alert_id);
    if (it->second.assignee == assignee) return it->second;
    it->second.assignee = std::move(assignee);
    notify(ChangeKind::updated, it->second);
    return it->second;
}

std::optional<Alert> AlertStore::get(const std::string& alert_id) const {
    std::lock_guard lock(mutex_);
    auto it = alerts_.find(alert_id);
    if (it == alerts_.end()) return std::nullopt;
    return it->second;
}

std::vector<Alert> AlertStore::list(std::optional<Status> status) const {
    std::vector<Alert> out;
    {
        std::lock_guard lock(mutex_);
        for (const auto& [_, a] : alerts_)
            if (!status || a.status == *status) out.push_back(a);
    }
    std::sort(out.begin(), out.end(), [](const Alert& x, const Alert& y) {
        return std::tie(x.raised_at, x.alert_id) < std::tie(y.raised_at, y.alert_id);
    });
    return out;
}

std::size_t AlertStore::size() const {
    std::lock_guard lock(mutex_);
    return alerts_.size();
}

void AlertStore::subscribe(AlertListener listener) {
    std::lock_guard lock(mutex_);
    listeners_.push_back(std::move(listener));
}

void AlertStore::restore(std::vector<Alert> alerts) {
    std::lock_guard lock(mutex_);
    std::sort(alerts.begin(), alerts.end(), [](const Alert& x, const Alert& y) {
        return std::tie(x.raised_at, x.alert_id) < std::tie(y.raised_at, y.alert_id);
    });
    for (auto& a : alerts) {
        latest_[{a.rule_id, a.signature}] = a.alert_id;
        alerts_[a.alert_id] = std::move(a);
    }
}

void AlertStore::notify(ChangeKind kind, const Alert& alert) {
    for (const auto& l : listeners_) l(AlertChange{kind, alert});
}

}  // namespace ctimp::alerts
