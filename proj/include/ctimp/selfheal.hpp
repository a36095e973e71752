// ctimp/selfheal.hpp - response policies, command records and remote execution
//
// Command state machine per mode (no other transition is ever committed):
//
//   recommend  (none) -> recommended
//   approve    (none) -> pending_approval -> approved -> executed | failed
//                                         -> rejected_as_recommendation
//   auto       (none) -> executed | failed
//
// Every terminal state produces exactly one audit line.

#pragma once

#include "ctimp/alerts.hpp"
#include "ctimp/asset_inventory.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ctimp::selfheal {

// ============================================================================
// Threats and policies
// ============================================================================

struct ThreatEntry {
    std::string threat_id;
    std::string threat_type;
    std::string threat_group;

    friend bool operator==(const ThreatEntry&, const ThreatEntry&) = default;
};

enum class Mode { recommend, approve, automatic };
enum class TargetKind { node_of_event, named_node, all_of_group };
enum class SelectorKind { threat_type, threat_group };

std::string_view to_string(Mode m);
std::string_view to_string(TargetKind t);
std::string_view to_string(SelectorKind s);
std::optional<Mode> mode_from_string(std::string_view s);

inline constexpr std::array<std::string_view, 4> kPlaceholders = {"srcip", "dstip", "node", "user"};

struct HealingPolicy {
    std::string policy_id;
    SelectorKind selector = SelectorKind::threat_type;
    std::string selector_value;
    std::string command_cli;
    std::string command_human;
    TargetKind target = TargetKind::node_of_event;
    /// node_id for named_node, group name for all_of_group, unused otherwise.
    std::string target_ref;
    Mode mode = Mode::recommend;

    friend bool operator==(const HealingPolicy&, const HealingPolicy&) = default;
};

/// Placeholder names used by a template, in order of first use. Throws
/// Error on unterminated braces or names outside the vocabulary.
std::vector<std::string> template_placeholders(std::string_view tmpl);

nlohmann::json to_json(const HealingPolicy& p);
HealingPolicy policy_from_json(const nlohmann::json& j);

/// Validated policy and threat tables: at most one policy per selector value,
/// unique threat ids and threat types.
class PolicyStore {
public:
    PolicyStore() = default;
    PolicyStore(std::vector<HealingPolicy> policies, std::vector<ThreatEntry> threats);

    const std::vector<HealingPolicy>& policies() const { return policies_; }
    const std::vector<ThreatEntry>& threats() const { return threats_; }
    const HealingPolicy* by_type(const std::string& threat_type) const;
    const HealingPolicy* by_group(const std::string& threat_group) const;
    /// Advisory only: whether the threat table lists this type.
    bool knows_threat_type(const std::string& threat_type) const;

private:
    std::vector<HealingPolicy> policies_;
    std::vector<ThreatEntry> threats_;
    std::map<std::string, std::size_t> by_type_;
    std::map<std::string, std::size_t> by_group_;
};

/// {"threats": [...], "policies": [...]}
PolicyStore load_policy_store(std::string_view document);

// ============================================================================
// Decision and rendering
// ============================================================================

enum class MatchedBy { type, group, none };

std::string_view to_string(MatchedBy m);

struct DecisionOutcome {
    std::optional<HealingPolicy> policy;
    MatchedBy matched_by = MatchedBy::none;
};

DecisionOutcome decide(const std::string& threat_type, const std::string& threat_group, const PolicyStore& store);
DecisionOutcome decide(const alerts::Alert& alert, const PolicyStore& store);

class RenderError : public Error {
public:
    using Error::Error;
};

struct RenderedCommand {
    std::string rendered_cli;
    std::string target_node;

    friend bool operator==(const RenderedCommand&, const RenderedCommand&) = default;
};

/// Values substituted into templates come from log lines, so each must match
/// [A-Za-z0-9._:@/+-]+ or rendering fails.
bool is_safe_value(std::string_view v);

/// One command per target node (several only for all_of_group, in node_id
/// order). node_of_event resolves the event's dstip, then srcip, through
/// node_by_ip. Throws RenderError.
std::vector<RenderedCommand> render_command(const HealingPolicy& policy, const alerts::Alert& alert,
                                            const assets::AssetMap& map);

// ============================================================================
// Command records
// ============================================================================

enum class CommandState { recommended, pending_approval, approved, rejected_as_recommendation, executed, failed };

std::string_view to_string(CommandState s);
std::optional<CommandState> command_state_from_string(std::string_view s);
bool is_terminal(CommandState s);

/// `from` empty means the record is being created.
bool legal_transition(Mode mode, std::optional<CommandState> from, CommandState to);

struct CommandRecord {
    std::string command_id;
    std::string alert_id;
    std::string policy_id;
    std::string command_human;
    std::string rendered_cli;
    std::string target_node;
    Mode mode = Mode::recommend;
    CommandState state = CommandState::recommended;
    Timestamp created_at{};
    std::optional<Timestamp> decided_at;
    std::optional<Timestamp> executed_at;
    std::optional<std::string> actor;
    std::optional<int> exit_status;
    std::optional<std::string> transcript;

    friend bool operator==(const CommandRecord&, const CommandRecord&) = default;
};

nlohmann::json to_json(const CommandRecord& r);
CommandRecord command_from_json(const nlohmann::json& j);

// ============================================================================
// Executors
// ============================================================================

struct ExecResult {
    int exit_status = 0;
    std::string output;
};

/// Channel failure (connection, authentication, timeout), as opposed to the
/// remote command exiting nonzero.
class TransportError : public Error {
public:
    using Error::Error;
};

class Executor {
public:
    virtual ~Executor() = default;
    virtual ExecResult run(const std::string& address, const std::string& command, std::chrono::milliseconds timeout) = 0;
};

/// Records every invocation verbatim; results are scripted.
class FakeExecutor : public Executor {
public:
    struct Call {
        std::string address;
        std::string command;
        std::chrono::milliseconds timeout;
    };
    struct Script {
        int exit_status = 0;
        std::string output = "ok";
        bool timeout = false;
        bool transport_error = false;
        std::chrono::milliseconds delay{0};
    };

    FakeExecutor();
    explicit FakeExecutor(Script default_script) : default_(std::move(default_script)) {}

    ExecResult run(const std::string& address, const std::string& command, std::chrono::milliseconds timeout) override;

    /// Scripts are consumed one per call before falling back to the default.
    void push(Script s);
    std::vector<Call> calls() const;
    std::size_t call_count() const;

private:
    mutable std::mutex mutex_;
    Script default_;
    std::vector<Script> queued_;
    std::vector<Call> calls_;
};

/// Runs the command through the system ssh client in batch mode (key-based
/// authentication only).
class SshExecutor : public Executor {
public:
    struct Options {
        std::string ssh_binary = "ssh";
        std::optional<std::string> user;
        std::optional<std::string> identity_file;
        std::optional<int> port;
        std::vector<std::string> extra_args;
    };

    SshExecutor();
    explicit SshExecutor(Options options) : options_(std::move(options)) {}
    ExecResult run(const std::string& address, const std::string& command, std::chrono::milliseconds timeout) override;

    /// argv for a given target, exposed for tests.
    std::vector<std::string> argv(const std::string& address, const std::string& command) const;

private:
    Options options_;
};

/// Runs argv with stdout and stderr captured; kills it and throws
/// TransportError("timeout ...") when the deadline passes.
ExecResult run_process(const std::vector<std::string>& argv, std::chrono::milliseconds timeout);

// ============================================================================
// Audit log
// ============================================================================

struct AuditEntry {
    Timestamp ts{};
    std::string command_id;
    std::string alert_id;
    std::string policy_id;
    Mode mode = Mode::recommend;
    CommandState state = CommandState::recommended;
    std::string target_node;
    std::string rendered_cli;

    friend bool operator==(const AuditEntry&, const AuditEntry&) = default;
};

/// ts|command_id|alert_id|policy_id|mode|state|target_node|rendered_cli with
/// '|' and '\' escaped by a backslash in every field.
std::string format_audit_line(const AuditEntry& entry);
/// Nullopt unless the line has exactly eight fields, a valid timestamp, a
/// known mode and a terminal state.
std::optional<AuditEntry> parse_audit_line(std::string_view line);

/// Append-only file writer; each line is flushed and fsynced.
class AuditLog {
public:
    explicit AuditLog(std::filesystem::path path);
    void append(const AuditEntry& entry);
    const std::filesystem::path& path() const { return path_; }

private:
    std::mutex mutex_;
    std::filesystem::path path_;
};

// ============================================================================
// Engine
// ============================================================================

enum class Verdict { approved, rejected };

std::optional<Verdict> verdict_from_string(std::string_view s);

/// node_id -> address used to reach it.
using AddressResolver = std::function<std::optional<std::string>(const std::string& node_id)>;
using CommandListener = std::function<void(const CommandRecord&, bool created)>;
using Clock = std::function<Timestamp()>;

inline constexpr std::chrono::milliseconds kDefaultTimeout{30000};

class SelfHealEngine {
public:
    SelfHealEngine(PolicyStore policies, std::shared_ptr<Executor> executor, AddressResolver addresses,
                   std::shared_ptr<AuditLog> audit, std::chrono::milliseconds timeout = kDefaultTimeout,
                   Clock clock = {});

    struct HandleResult {
        DecisionOutcome outcome;
        std::vector<CommandRecord> records;
        std::optional<std::string> render_error;
    };

    /// decide -> render -> submit for every target node. A render failure
    /// creates no record.
    HandleResult handle_alert(const alerts::Alert& alert, const assets::AssetMap& map);

    CommandRecord submit(const HealingPolicy& policy, const RenderedCommand& rendered, const std::string& alert_id);

    /// Throws NotFound or IllegalTransition when the record is not pending.
    CommandRecord apply_verdict(const std::string& command_id, Verdict verdict, const std::string& actor);

    std::optional<CommandRecord> get(const std::string& command_id) const;
    /// Sorted by (created_at, command_id).
    std::vector<CommandRecord> list(std::optional<CommandState> state = std::nullopt) const;

    void subscribe(CommandListener listener);
    void restore(std::vector<CommandRecord> records);
    void replace_policies(PolicyStore policies);
    PolicyStore policies() const;

private:
    /// Runs the command for `record` (serialized per target node) and returns
    /// it in executed or failed state.
    CommandRecord run(CommandRecord record);
    void commit(const CommandRecord& record, bool created);

    mutable std::mutex mutex_;
    PolicyStore policies_;
    std::shared_ptr<Executor> executor_;
    AddressResolver addresses_;
    std::shared_ptr<AuditLog> audit_;
    std::chrono::milliseconds timeout_;
    Clock clock_;
    std::map<std::string, CommandRecord> records_;
    std::vector<CommandListener> listeners_;

    std::mutex node_locks_mutex_;
    std::map<std::string, std::shared_ptr<std::mutex>> node_locks_;
};

}  // namespace ctimp::selfheal
