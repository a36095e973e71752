#include "ctimp/selfheal.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

namespace ctimp::selfheal {

std::string_view to_string(Mode m) {
    switch (m) {
        case Mode::recommend: return "recommend";
        case Mode::approve: return "approve";
        case Mode::automatic: return "auto";
    }
    return "recommend";
}

std::optional<Mode> mode_from_string(std::string_view s) {
    if (s == "recommend") return Mode::recommend;
    if (s == "approve") return Mode::approve;
    if (s == "auto") return Mode::automatic;
    return std::nullopt;
}

std::string_view to_string(TargetKind t) {
    switch (t) {
        case TargetKind::node_of_event: return "node_of_event";
        case TargetKind::named_node: return "named_node";
        case TargetKind::all_of_group: return "all_of_group";
    }
    return "node_of_event";
}

std::string_view to_string(SelectorKind s) {
    return s == SelectorKind::threat_type ? "threat_type" : "threat_group";
}

std::string_view to_string(MatchedBy m) {
    switch (m) {
        case MatchedBy::type: return "type";
        case MatchedBy::group: return "group";
        case MatchedBy::none: return "none";
    }
    return "none";
}

std::vector<std::string> template_placeholders(std::string_view tmpl) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '}') throw Error("unbalanced '}' in template at offset " + std::to_string(i));
        if (tmpl[i] != '{') continue;
        auto close = tmpl.find('}', i);
        if (close == std::string_view::npos) throw Error("unterminated placeholder at offset " + std::to_string(i));
        std::string name(tmpl.substr(i + 1, close - i - 1));
        if (std::find(kPlaceholders.begin(), kPlaceholders.end(), name) == kPlaceholders.end()) {
            throw Error("unknown placeholder {" + name + "}");
        }
        if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
        i = close;
    }
    return out;
}

nlohmann::json to_json(const HealingPolicy& p) {
    nlohmann::json j;
    j["policy_id"] = p.policy_id;
    j[std::string(to_string(p.selector))] = p.selector_value;
    j["command_cli"] = p.command_cli;
    j["command_human"] = p.command_human;
    j["target"] = std::string(to_string(p.target));
    if (p.target != TargetKind::node_of_event) j["target_ref"] = p.target_ref;
    j["mode"] = std::string(to_string(p.mode));
    return j;
}

HealingPolicy policy_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"policy_id", "threat_type", "threat_group", "command_cli",
                                                "command_human", "target", "target_ref", "mode"};
    if (!j.is_object()) throw Error("policy must be an object");
    for (const auto& [k, _] : j.items())
        if (!known.contains(k)) throw Error("policy: unknown key '" + k + "'");
    HealingPolicy p;
    p.policy_id = j.at("policy_id").get<std::string>();
    bool has_type = j.contains("threat_type");
    bool has_group = j.contains("threat_group");
    if (has_type == has_group) throw Error("policy " + p.policy_id + ": exactly one of threat_type, threat_group");
    p.selector = has_type ? SelectorKind::threat_type : SelectorKind::threat_group;
    p.selector_value = j.at(has_type ? "threat_type" : "threat_group").get<std::string>();
    p.command_cli = j.at("command_cli").get<std::string>();
    p.command_human = j.value("command_human", "");
    auto target = j.value("target", "node_of_event");
    if (target == "node_of_event") p.target = TargetKind::node_of_event;
    else if (target == "named_node") p.target = TargetKind::named_node;
    else if (target == "all_of_group") p.target = TargetKind::all_of_group;
    else throw Error("policy " + p.policy_id + ": unknown target '" + target + "'");
    p.target_ref = j.value("target_ref", "");
    auto mode = mode_from_string(j.at("mode").get<std::string>());
    if (!mode) throw Error("policy " + p.policy_id + ": unknown mode");
    p.mode = *mode;
    return p;
}

PolicyStore::PolicyStore(std::vector<HealingPolicy> policies, std::vector<ThreatEntry> threats)
    : policies_(std::move(policies)), threats_(std::move(threats)) {
    std::set<std::string> ids;
    for (std::size_t i = 0; i < policies_.size(); ++i) {
        const auto& p = policies_[i];
        if (p.policy_id.empty()) throw Error("policy with empty id");
        if (!ids.insert(p.policy_id).second) throw Error("duplicate policy id " + p.policy_id);
        if (p.selector_value.empty()) throw Error("policy " + p.policy_id + ": empty selector");
        try {
            template_placeholders(p.command_cli);
        } catch (const Error& e) {
            throw Error("policy " + p.policy_id + ": " + e.what());
        }
        if (std::any_of(p.command_cli.begin(), p.command_cli.end(), [](unsigned char c) { return c < 0x20; })) {
            throw Error("policy " + p.policy_id + ": command_cli contains control characters");
        }
        if (p.target != TargetKind::node_of_event && p.target_ref.empty()) {
            throw Error("policy " + p.policy_id + ": target " + std::string(to_string(p.target)) + " needs target_ref");
        }
        auto& index = p.selector == SelectorKind::threat_type ? by_type_ : by_group_;
        if (!index.emplace(p.selector_value, i).second) {
            throw Error("policy " + p.policy_id + ": another policy already selects " +
                        std::string(to_string(p.selector)) + " '" + p.selector_value + "'");
        }
    }
    std::set<std::string> threat_ids, threat_types;
    for (const auto& t : threats_) {
        if (!threat_ids.insert(t.threat_id).second) throw Error("duplicate threat id " + t.threat_id);
        if (!threat_types.insert(t.threat_type).second) throw Error("duplicate threat type " + t.threat_type);
    }
}

const HealingPolicy* PolicyStore::by_type(const std::string& threat_type) const {
    auto it = by_type_.find(threat_type);
    return it == by_type_.end() ? nullptr : &policies_[it->second];
}

const HealingPolicy* PolicyStore::by_group(const std::string& threat_group) const {
    auto it = by_group_.find(threat_group);
    return it == by_group_.end() ? nullptr : &policies_[it->second];
}

bool PolicyStore::knows_threat_type(const std::string& threat_type) const {
    return std::any_of(threats_.begin(), threats_.end(), [&](const ThreatEntry& t) { return t.threat_type == threat_type; });
}

PolicyStore load_policy_store(std::string_view document) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(document);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("policy document is not JSON: ") + e.what());
    }
    std::vector<ThreatEntry> threats;
    std::vector<HealingPolicy> policies;
    try {
        for (const auto& t : j.value("threats", nlohmann::json::array())) {
            threats.push_back({t.at("threat_id").get<std::string>(), t.at("threat_type").get<std::string>(),
                               t.at("threat_group").get<std::string>()});
        }
        for (const auto& p : j.value("policies", nlohmann::json::array())) policies.push_back(policy_from_json(p));
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("policy document: ") + e.what());
    }
    return PolicyStore(std::move(policies), std::move(threats));
}

// ============================================================================
// Decision and rendering
// ============================================================================

DecisionOutcome decide(const std::string& threat_type, const std::string& threat_group, const PolicyStore& store) {
    if (const auto* p = store.by_type(threat_type)) return {*p, MatchedBy::type};
    if (const auto* p = store.by_group(threat_group)) return {*p, MatchedBy::group};
    return {};
}

DecisionOutcome decide(const alerts::Alert& alert, const PolicyStore& store) {
    return decide(alert.threat_type, alert.threat_group, store);
}

bool is_safe_value(std::string_view v) {
    if (v.empty()) return false;
    return std::all_of(v.begin(), v.end(), [](unsigned char c) {
        return std::isalnum(c) || c == '.' || c == '_' || c == ':' || c == '@' || c == '/' || c == '+' || c == '-';
    });
}

namespace {

std::string substitute(const std::string& tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] != '{') {
            out.push_back(tmpl[i]);
            continue;
        }
        auto close = tmpl.find('}', i);
        auto name = tmpl.substr(i + 1, close - i - 1);
        auto it = values.find(name);
        if (it == values.end()) throw RenderError("placeholder {" + name + "} has no value for this alert");
        if (!is_safe_value(it->second)) throw RenderError("placeholder {" + name + "} value is not a safe token");
        out += it->second;
        i = close;
    }
    return out;
}

}  // namespace

std::vector<RenderedCommand> render_command(const HealingPolicy& policy, const alerts::Alert& alert,
                                            const assets::AssetMap& map) {
    std::vector<std::string> targets;
    switch (policy.target) {
        case TargetKind::node_of_event: {
            auto idx = assets::build_feature_index(map);
            for (const char* f : {"dstip", "srcip"}) {
                auto it = alert.event.fields.find(f);
                if (it == alert.event.fields.end()) continue;
                if (auto n = idx.node_by_ip.find(it->second); n != idx.node_by_ip.end()) {
                    targets.push_back(n->second);
                    break;
                }
            }
            if (targets.empty()) throw RenderError("no asset owns the event's dstip or srcip");
            break;
        }
        case TargetKind::named_node:
            if (!map.find(policy.target_ref)) throw RenderError("target node " + policy.target_ref + " is not in the asset map");
            targets.push_back(policy.target_ref);
            break;
        case TargetKind::all_of_group:
            for (const auto& n : map.nodes)
                if (n.group && *n.group == policy.target_ref) targets.push_back(n.node_id);
            std::sort(targets.begin(), targets.end());
            if (targets.empty()) throw RenderError("group " + policy.target_ref + " has no nodes");
            break;
    }
    std::vector<RenderedCommand> out;
    for (const auto& node : targets) {
        std::map<std::string, std::string> values;
        for (const char* f : {"srcip", "dstip", "user"}) {
            if (auto it = alert.event.fields.find(f); it != alert.event.fields.end()) values[f] = it->second;
        }
        values["node"] = node;
        out.push_back({substitute(policy.command_cli, values), node});
    }
    return out;
}

// ============================================================================
// Command records
// ============================================================================

std::string_view to_string(CommandState s) {
    switch (s) {
        case CommandState::recommended: return "recommended";
        case CommandState::pending_approval: return "pending_approval";
        case CommandState::approved: return "approved";
        case CommandState::rejected_as_recommendation: return "rejected_as_recommendation";
        case CommandState::executed: return "executed";
        case CommandState::failed: return "failed";
    }
    return "recommended";
}

std::optional<CommandState> command_state_from_string(std::string_view s) {
    for (auto st : {CommandState::recommended, CommandState::pending_approval, CommandState::approved,
                    CommandState::rejected_as_recommendation, CommandState::executed, CommandState::failed}) {
        if (to_string(st) == s) return st;
    }
    return std::nullopt;
}

bool is_terminal(CommandState s) {
    return s == CommandState::recommended || s == CommandState::rejected_as_recommendation ||
           s == CommandState::executed || s == CommandState::failed;
}

bool legal_transition(Mode mode, std::optional<CommandState> from, CommandState to) {
    using S = CommandState;
    switch (mode) {
        case Mode::recommend:
            return !from && to == S::recommended;
        case Mode::approve:
            if (!from) return to == S::pending_approval;
            if (*from == S::pending_approval) return to == S::approved || to == S::rejected_as_recommendation;
            if (*from == S::approved) return to == S::executed || to == S::failed;
            return false;
        case Mode::automatic:
            return !from && (to == S::executed || to == S::failed);
    }
    return false;
}

namespace {

nlohmann::json opt_ts(const std::optional<Timestamp>& t) {
    return t ? nlohmann::json(format_rfc3339(*t)) : nlohmann::json();
}

std::optional<Timestamp> read_opt_ts(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    auto t = parse_rfc3339(j.at(key).get<std::string>());
    if (!t) throw Error(std::string("bad timestamp in ") + key);
    return t;
}

template <typename T>
std::optional<T> read_opt(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}

}  // namespace

nlohmann::json to_json(const CommandRecord& r) {
    nlohmann::json j;
    j["command_id"] = r.command_id;
    j["alert_id"] = r.alert_id;
    j["policy_id"] = r.policy_id;
    j["command_human"] = r.command_human;
    j["rendered_cli"] = r.rendered_cli;
    j["target_node"] = r.target_node;
    j["mode"] = std::string(to_string(r.mode));
    j["state"] = std::string(to_string(r.state));
    j["created_at"] = format_rfc3339(r.created_at);
    j["decided_at"] = opt_ts(r.decided_at);
    j["executed_at"] = opt_ts(r.executed_at);
    j["actor"] = r.actor ? nlohmann::json(*r.actor) : nlohmann::json();
    j["exit_status"] = r.exit_status ? nlohmann::json(*r.exit_status) : nlohmann::json();
    j["transcript"] = r.transcript ? nlohmann::json(*r.transcript) : nlohmann::json();
    return j;
}

CommandRecord command_from_json(const nlohmann::json& j) {
    CommandRecord r;
    r.command_id = j.at("command_id").get<std::string>();
    r.alert_id = j.at("alert_id").get<std::string>();
    r.policy_id = j.at("policy_id").get<std::string>();
    r.command_human = j.value("command_human", "");
    r.rendered_cli = j.at("rendered_cli").get<std::string>();
    r.target_node = j.at("target_node").get<std::string>();
    auto mode = mode_from_string(j.at("mode").get<std::string>());
    auto state = command_state_from_string(j.at("state").get<std::string>());
    if (!mode || !state) throw Error("command " + r.command_id + ": bad mode or state");
    r.mode = *mode;
    r.state = *state;
    auto created = parse_rfc3339(j.at("created_at").get<std::string>());
    if (!created) throw Error("command " + r.command_id + ": bad created_at");
    r.created_at = *created;
    r.decided_at = read_opt_ts(j, "decided_at");
    r.executed_at = read_opt_ts(j, "executed_at");
    r.actor = read_opt<std::string>(j, "actor");
    r.exit_status = read_opt<int>(j, "exit_status");
    r.transcript = read_opt<std::string>(j, "transcript");
    return r;
}

// ============================================================================
// Executors
// ============================================================================

FakeExecutor::FakeExecutor() : FakeExecutor(Script{}) {}

ExecResult FakeExecutor::run(const std::string& address, const std::string& command, std::chrono::milliseconds timeout) {
    Script s;
    {
        std::lock_guard lock(mutex_);
        calls_.push_back({address, command, timeout});
        if (!queued_.empty()) {
            s = queued_.front();
            queued_.erase(queued_.begin());
        } else {
            s = default_;
        }
    }
    if (s.delay.count() > 0) std::this_thread::sleep_for(std::min(s.delay, timeout));
    if (s.timeout) throw TransportError("timeout after " + std::to_string(timeout.count()) + " ms");
    if (s.transport_error) throw TransportError("connection to " + address + " refused");
    return {s.exit_status, s.output};
}

void FakeExecutor::push(Script s) {
    std::lock_guard lock(mutex_);
    queued_.push_back(std::move(s));
}

std::vector<FakeExecutor::Call> FakeExecutor::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

std::size_t FakeExecutor::call_count() const {
    std::lock_guard lock(mutex_);
    return calls_.size();
}

SshExecutor::SshExecutor() : SshExecutor(Options{}) {}

std::vector<std::string> SshExecutor::argv(const std::string& address, const std::string& command) const {
    std::vector<std::string> args = {options_.ssh_binary, "-o", "BatchMode=yes", "-o", "StrictHostKeyChecking=yes"};
    if (options_.identity_file) {
        args.push_back("-i");
        args.push_back(*options_.identity_file);
    }
    if (options_.port) {
        args.push_back("-p");
        args.push_back(std::to_string(*options_.port));
    }
    for (const auto& a : options_.extra_args) args.push_back(a);
    args.push_back(options_.user ? *options_.user + "@" + address : address);
    args.push_back("--");
    args.push_back(command);
    return args;
}

ExecResult SshExecutor::run(const std::string& address, const std::string& command, std::chrono::milliseconds timeout) {
    auto result = run_process(argv(address, command), timeout);
    // ssh reserves 255 for its own failures.
    if (result.exit_status == 255) throw TransportError("ssh transport failure: " + result.output);
    return result;
}

ExecResult run_process(const std::vector<std::string>& args, std::chrono::milliseconds timeout) {
    if (args.empty()) throw TransportError("empty argv");
    std::vector<char*> cargv;
    for (const auto& a : args) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);

    int fds[2];
    if (pipe2(fds, O_CLOEXEC) != 0) throw TransportError(std::string("pipe: ") + std::strerror(errno));
    pid_t pid = fork();
    if (pid < 0) {
        close(fds[0]);
        close(fds[1]);
        throw TransportError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
        dup2(fds[1], STDOUT_FILENO);
        dup2(fds[1], STDERR_FILENO);
        int devnull = open("/dev/null", O_RDONLY);
        if (devnull >= 0) dup2(devnull, STDIN_FILENO);
        execvp(cargv[0], cargv.data());
        _exit(127);
    }
    close(fds[1]);

    std::string output;
    auto deadline = std::chrono::steady_clock::now() + timeout;
    bool timed_out = false;
    char buf[4096];
    for (;;) {
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            timed_out = true;
            break;
        }
        pollfd p{fds[0], POLLIN, 0};
        int rc = poll(&p, 1, static_cast<int>(left.count()));
        if (rc < 0 && errno == EINTR) continue;
        if (rc == 0) {
            timed_out = true;
            break;
        }
        ssize_t n = read(fds[0], buf, sizeof buf);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        output.append(buf, static_cast<std::size_t>(n));
    }
    close(fds[0]);
    if (timed_out) kill(pid, SIGKILL);
    int status = 0;
    while (waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (timed_out) throw TransportError("timeout after " + std::to_string(timeout.count()) + " ms: " + args.front());
    if (WIFEXITED(status)) {
        if (WEXITSTATUS(status) == 127 && output.empty()) throw TransportError("cannot execute " + args.front());
        return {WEXITSTATUS(status), output};
    }
    return {128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0), output};
}

// ============================================================================
// Audit log
// ============================================================================

namespace {

std::string escape_field(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == '|' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    return out;
}

}  // namespace

std::string format_audit_line(const AuditEntry& e) {
    std::string line = format_rfc3339(e.ts);
    for (std::string_view f : {std::string_view(e.command_id), std::string_view(e.alert_id),
                               std::string_view(e.policy_id), to_string(e.mode), to_string(e.state),
                               std::string_view(e.target_node), std::string_view(e.rendered_cli)}) {
        line += '|';
        line += escape_field(f);
    }
    return line;
}

std::optional<AuditEntry> parse_audit_line(std::string_view line) {
    if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
    std::vector<std::string> fields(1);
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (c == '\n' || c == '\r') return std::nullopt;
        if (c == '\\') {
            if (i + 1 >= line.size() || (line[i + 1] != '|' && line[i + 1] != '\\')) return std::nullopt;
            fields.back().push_back(line[++i]);
        } else if (c == '|') {
            fields.emplace_back();
        } else {
            fields.back().push_back(c);
        }
    }
    if (fields.size() != 8) return std::nullopt;
    AuditEntry e;
    auto ts = parse_rfc3339(fields[0]);
    auto mode = mode_from_string(fields[4]);
    auto state = command_state_from_string(fields[5]);
    if (!ts || !mode || !state || !is_terminal(*state)) return std::nullopt;
    if (fields[1].empty() || fields[2].empty() || fields[3].empty()) return std::nullopt;
    e.ts = *ts;
    e.command_id = fields[1];
    e.alert_id = fields[2];
    e.policy_id = fields[3];
    e.mode = *mode;
    e.state = *state;
    e.target_node = fields[6];
    e.rendered_cli = fields[7];
    return e;
}

AuditLog::AuditLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void AuditLog::append(const AuditEntry& entry) {
    auto line = format_audit_line(entry) + "\n";
    std::lock_guard lock(mutex_);
    int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0640);
    if (fd < 0) throw Error("cannot open audit log " + path_.string() + ": " + std::strerror(errno));
    std::size_t off = 0;
    while (off < line.size()) {
        ssize_t n = ::write(fd, line.data() + off, line.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            ::close(fd);
            throw Error("audit write failed: " + std::string(std::strerror(errno)));
        }
        off += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
}

// ============================================================================
// Engine
// ============================================================================

std::optional<Verdict> verdict_from_string(std::string_view s) {
    if (s == "approved" || s == "approve") return Verdict::approved;
    if (s == "rejected" || s == "reject") return Verdict::rejected;
    return std::nullopt;
}

SelfHealEngine::SelfHealEngine(PolicyStore policies, std::shared_ptr<Executor> executor, AddressResolver addresses,
                               std::shared_ptr<AuditLog> audit, std::chrono::milliseconds timeout, Clock clock)
    : policies_(std::move(policies)),
      executor_(std::move(executor)),
      addresses_(std::move(addresses)),
      audit_(std::move(audit)),
      timeout_(timeout),
      clock_(clock ? std::move(clock) : Clock(now_utc)) {}

SelfHealEngine::HandleResult SelfHealEngine::handle_alert(const alerts::Alert& alert, const assets::AssetMap& map) {
    HandleResult result;
    result.outcome = decide(alert, policies());
    if (!result.outcome.policy) return result;
    std::vector<RenderedCommand> rendered;
    try {
        rendered = render_command(*result.outcome.policy, alert, map);
    } catch (const RenderError& e) {
        result.render_error = e.what();
        return result;
    }
    for (const auto& r : rendered) result.records.push_back(submit(*result.outcome.policy, r, alert.alert_id));
    return result;
}

CommandRecord SelfHealEngine::submit(const HealingPolicy& policy, const RenderedCommand& rendered,
                                     const std::string& alert_id) {
    CommandRecord r;
    r.command_id = uuid_v4().str();
    r.alert_id = alert_id;
    r.policy_id = policy.policy_id;
    r.command_human = policy.command_human;
    r.rendered_cli = rendered.rendered_cli;
    r.target_node = rendered.target_node;
    r.mode = policy.mode;
    r.created_at = clock_();
    switch (policy.mode) {
        case Mode::recommend:
            r.state = CommandState::recommended;
            commit(r, true);
            return r;
        case Mode::approve:
            r.state = CommandState::pending_approval;
            commit(r, true);
            return r;
        case Mode::automatic: {
            auto done = run(std::move(r));
            commit(done, true);
            return done;
        }
    }
    return r;
}

CommandRecord SelfHealEngine::apply_verdict(const std::string& command_id, Verdict verdict, const std::string& actor) {
    CommandRecord r;
    {
        std::lock_guard lock(mutex_);
        auto it = records_.find(command_id);
        if (it == records_.end()) throw NotFound("command " + command_id);
        auto next = verdict == Verdict::approved ? CommandState::approved : CommandState::rejected_as_recommendation;
        if (!legal_transition(it->second.mode, it->second.state, next)) {
            throw IllegalTransition(command_id, std::string(to_string(it->second.state)), std::string(to_string(next)));
        }
        // The approved state is committed under the same lock that checked
        // pending_approval, so concurrent verdicts cannot both succeed.
        r = it->second;
        r.state = next;
        r.decided_at = clock_();
        r.actor = actor;
        it->second = r;
        for (const auto& l : listeners_) l(r, false);
        if (next == CommandState::rejected_as_recommendation && audit_) {
            audit_->append({clock_(), r.command_id, r.alert_id, r.policy_id, r.mode, r.state, r.target_node, r.rendered_cli});
        }
    }
    if (verdict == Verdict::rejected) return r;
    auto done = run(std::move(r));
    commit(done, false);
    return done;
}

CommandRecord SelfHealEngine::run(CommandRecord r) {
    std::shared_ptr<std::mutex> node_lock;
    {
        std::lock_guard lock(node_locks_mutex_);
        auto& slot = node_locks_[r.target_node];
        if (!slot) slot = std::make_shared<std::mutex>();
        node_lock = slot;
    }
    std::lock_guard serial(*node_lock);
    auto address = addresses_ ? addresses_(r.target_node) : std::nullopt;
    try {
        if (!address) throw TransportError("no address known for node " + r.target_node);
        auto res = executor_->run(*address, r.rendered_cli, timeout_);
        r.exit_status = res.exit_status;
        r.transcript = res.output;
        r.state = res.exit_status == 0 ? CommandState::executed : CommandState::failed;
    } catch (const TransportError& e) {
        r.transcript = e.what();
        r.state = CommandState::failed;
    }
    r.executed_at = clock_();
    return r;
}

void SelfHealEngine::commit(const CommandRecord& r, bool created) {
    std::lock_guard lock(mutex_);
    std::optional<CommandState> from;
    if (auto it = records_.find(r.command_id); it != records_.end()) from = it->second.state;
    if (!legal_transition(r.mode, from, r.state)) {
        throw IllegalTransition(r.command_id, from ? std::string(to_string(*from)) : "none", std::string(to_string(r.state)));
    }
    records_[r.command_id] = r;
    for (const auto& l : listeners_) l(r, created);
    if (is_terminal(r.state) && audit_) {
        audit_->append({clock_(), r.command_id, r.alert_id, r.policy_id, r.mode, r.state, r.target_node, r.rendered_cli});
    }
}

std::optional<CommandRecord> SelfHealEngine::get(const std::string& command_id) const {
    std::lock_guard lock(mutex_);
    auto it = records_.find(command_id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

std::vector<CommandRecord> SelfHealEngine::list(std::optional<CommandState> state) const {
    std::vector<CommandRecord> out;
    {
        std::lock_guard lock(mutex_);
        for (const auto& [_, r] : records_)
            if (!state || r.state == *state) out.push_back(r);
    }
    std::sort(out.begin(), out.end(), [](const CommandRecord& a, const CommandRecord& b) {
        return std::tie(a.created_at, a.command_id) < std::tie(b.created_at, b.command_id);
    });
    return out;
}

void SelfHealEngine::subscribe(CommandListener listener) {
    std::lock_guard lock(mutex_);
    listeners_.push_back(std::move(listener));
}

void SelfHealEngine::restore(std::vector<CommandRecord> records) {
    std::lock_guard lock(mutex_);
    for (auto& r : records) {
        // A record persisted mid-execution never got its outcome; it is
        // reported as failed rather than silently re-run.
        if (r.state == CommandState::approved) {
            r.state = CommandState::failed;
            r.transcript = "interrupted before completion";
            r.executed_at = clock_();
            if (audit_) {
                audit_->append({clock_(), r.command_id, r.alert_id, r.policy_id, r.mode, r.state, r.target_node,
                                r.rendered_cli});
            }
        }
        records_[r.command_id] = std::move(r);
    }
}

void SelfHealEngine::replace_policies(PolicyStore policies) {
    std::lock_guard lock(mutex_);
    policies_ = std::move(policies);
}

PolicyStore SelfHealEngine::policies() const {
    std::lock_guard lock(mutex_);
    return policies_;
}

}  // namespace ctimp::selfheal
