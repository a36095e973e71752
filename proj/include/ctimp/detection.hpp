// ctimp/detection.hpp - log decoding and rule evaluation
//
// Decoders turn raw lines into a small fixed set of named fields; rules are
// boolean conditions over those fields, optionally gated on a decoder, a
// parent rule, or a per-key event frequency. Rules come from the native
// rule pack format (docs/detection-config.md) or from SIGMA YAML.

#pragma once

#include "ctimp/common.hpp"
#include "ctimp/sigma_compiler.hpp"

#include <array>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ctimp::detect {

inline constexpr std::array<std::string_view, 8> kFieldVocabulary = {"srcip", "dstip", "user", "url",
                                                                     "hash",  "status", "port", "query"};

bool in_vocabulary(std::string_view field);

using Fields = std::map<std::string, std::string>;

// ============================================================================
// Log events and decoders
// ============================================================================

struct LogEvent {
    Timestamp received_at{};
    std::string source_host;
    std::optional<std::string> program;
    std::string message;

    friend bool operator==(const LogEvent&, const LogEvent&) = default;
};

/// Parses "<RFC3339> <host> <program>[<pid>]: <message>" (program optional)
/// or a BSD syslog line "Mmm dd hh:mm:ss <host> <program>[<pid>]: <message>"
/// with the given year. Returns nullopt for blank or unparseable lines.
std::optional<LogEvent> parse_log_line(std::string_view line, int bsd_year = 1970);

struct Decoder {
    std::string name;
    std::optional<std::string> parent;
    std::optional<std::string> program_pattern;  ///< matched against the whole program name
    std::optional<std::string> prematch;         ///< searched in the input; children see what follows
    std::optional<std::string> extract;          ///< named captures from the vocabulary
    int order_hint = 0;
};

class DecoderSet {
public:
    /// Validates names, parent references, acyclicity, and capture names.
    explicit DecoderSet(std::vector<Decoder> decoders = {});
    ~DecoderSet();
    DecoderSet(DecoderSet&&) noexcept;
    DecoderSet& operator=(DecoderSet&&) noexcept;
    DecoderSet(const DecoderSet&) = delete;
    DecoderSet& operator=(const DecoderSet&) = delete;

    const std::vector<Decoder>& decoders() const;

    struct Compiled;
    const Compiled& compiled() const { return *compiled_; }

private:
    std::unique_ptr<Compiled> compiled_;
};

inline constexpr std::string_view kUnmatched = "unmatched";

struct DecodedEvent {
    LogEvent base;
    std::string decoder = std::string(kUnmatched);
    Fields fields;

    friend bool operator==(const DecodedEvent&, const DecodedEvent&) = default;
};

/// Roots are tried in (order_hint, name) order; the first whose program
/// pattern and prematch both match wins and its children are tried on the
/// remainder, recursively. Captures accumulate down the chain with child
/// values overriding parent values. A chain that captured nothing decodes
/// as "unmatched".
DecodedEvent decode(const LogEvent& event, const DecoderSet& decoders);

// ============================================================================
// Conditions
// ============================================================================

enum class CompareOp { equals, contains, in_set };

std::string_view to_string(CompareOp op);

struct Comparison {
    std::string field;
    CompareOp op = CompareOp::equals;
    std::vector<std::string> values;

    friend bool operator==(const Comparison&, const Comparison&) = default;
};

/// Boolean expression over field comparisons. A missing field makes its
/// comparison false.
struct Condition {
    enum class Kind { always, compare, all_of, any_of, negate };

    Kind kind = Kind::always;
    Comparison comparison;
    std::vector<Condition> children;

    static Condition always() { return {}; }
    static Condition compare(Comparison c);
    static Condition all_of(std::vector<Condition> c);
    static Condition any_of(std::vector<Condition> c);
    static Condition negate(Condition c);

    bool evaluate(const Fields& fields) const;
    /// Fields referenced anywhere in the expression.
    std::vector<std::string> referenced_fields() const;
    std::string str() const;

    friend bool operator==(const Condition&, const Condition&) = default;
};

/// Native condition syntax: comparisons `field == "v"`, `field contains "v"`,
/// `field in ["a", "b"]` combined with and / or / not and parentheses.
Condition parse_condition(std::string_view text);

// ============================================================================
// Rules
// ============================================================================

enum class RuleOrigin { native, sigma };

struct Frequency {
    int count = 2;
    int window_seconds = 60;
    std::string key_field;

    friend bool operator==(const Frequency&, const Frequency&) = default;
};

struct DetectionRule {
    std::string rule_id;
    RuleOrigin origin = RuleOrigin::native;
    int level = 0;  ///< 0..15
    std::string threat_type;
    std::string threat_group;
    std::string description;
    Condition conditions;
    std::optional<std::string> required_decoder;
    /// At least one of these fields must be present (SIGMA logsource gate).
    std::vector<std::string> required_any_field;
    std::optional<Frequency> frequency;
    std::optional<std::string> parent_rule;

    friend bool operator==(const DetectionRule&, const DetectionRule&) = default;
};

/// Throws Error on duplicate ids, dangling or cyclic parents, bad levels or
/// frequency settings.
void validate_rules(const std::vector<DetectionRule>& rules);

/// Parents before children, ties by rule_id.
std::vector<DetectionRule> order_rules(std::vector<DetectionRule> rules);

struct DetectionPack {
    std::vector<Decoder> decoders;
    std::vector<DetectionRule> rules;
};

/// Parses the sectioned native format ([decoder name] / [rule id] blocks of
/// key = value lines).
DetectionPack parse_detection_pack(std::string_view text);

// ============================================================================
// SIGMA loading
// ============================================================================

class SigmaLoadError : public Error {
public:
    SigmaLoadError(std::string rule, const std::string& message) : Error(rule + ": " + message), rule_(std::move(rule)) {}
    const std::string& rule() const { return rule_; }

private:
    std::string rule_;
};

/// Parses one SIGMA YAML document back into the compiler's rule model.
sigma::SigmaRule parse_sigma_yaml(std::string_view document);

/// Maps SIGMA fields onto the capture vocabulary (destination_ip -> dstip,
/// source_ip -> srcip, md5/sha256 -> hash, query, url).
std::optional<std::string> map_sigma_field(std::string_view sigma_field);

int level_from_sigma(sigma::Level level);

DetectionRule to_detection_rule(const sigma::SigmaRule& rule);

std::vector<DetectionRule> load_sigma_rules(const std::vector<std::string>& documents);

// ============================================================================
// Evaluation
// ============================================================================

struct RuleMatch {
    std::string rule_id;
    DecodedEvent event;
    int count = 1;
    Fields key;  ///< signature fields used for alert suppression

    friend bool operator==(const RuleMatch&, const RuleMatch&) = default;
};

/// Per-key frequency windows.
struct DetectionState {
    std::map<std::pair<std::string, std::string>, std::deque<Timestamp>> windows;
};

/// True when a rule's own gates pass for the event (decoder, field presence,
/// conditions), ignoring parent and frequency.
bool base_conditions_hold(const DetectionRule& rule, const DecodedEvent& event);

/// Suppression signature for a match of `rule` on `event`.
Fields signature_fields(const DetectionRule& rule, const DecodedEvent& event);

/// `rules` must already be in order_rules() order.
std::vector<RuleMatch> evaluate(const DecodedEvent& event, const std::vector<DetectionRule>& rules,
                                DetectionState& state);

/// Thread-safe engine with an atomically swappable rule set.
class DetectionEngine {
public:
    DetectionEngine(DecoderSet decoders, std::vector<DetectionRule> rules);

    /// Installs a new rule set; frequency state of rules that survive is kept.
    void reload(std::vector<DetectionRule> rules, std::uint64_t version);
    std::uint64_t version() const;
    std::shared_ptr<const std::vector<DetectionRule>> rules() const;
    const DecoderSet& decoders() const { return decoders_; }

    DecodedEvent decode(const LogEvent& event) const;
    std::vector<RuleMatch> process(const LogEvent& event);

private:
    DecoderSet decoders_;
    mutable std::mutex mutex_;
    std::shared_ptr<const std::vector<DetectionRule>> rules_;
    std::uint64_t version_ = 0;
    std::mutex state_mutex_;
    DetectionState state_;
};

}  // namespace ctimp::detect
