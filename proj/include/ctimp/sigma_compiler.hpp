// ctimp/sigma_compiler.hpp - STIX indicators to SIGMA detection rules
//
// Mapping from observable kinds to SIGMA log sources:
//
//   ipv4    network_connection   destination_ip / source_ip (either side)
//   domain  dns                  query
//   url     proxy                url
//   md5     file_event           md5
//   sha256  file_event           sha256
//
// An indicator's pattern is rewritten to disjunctive normal form and the
// conjuncts are grouped by log source category, one rule per category.
// SIGMA cannot AND across log sources, so a conjunct spanning categories is
// split and reported as a diagnostic: each resulting rule over-approximates.

#pragma once

#include "ctimp/cti_ingest.hpp"
#include "ctimp/relevance.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ctimp::sigma {

enum class Level { low, medium, high, critical };

std::string_view to_string(Level level);
std::optional<Level> level_from_string(std::string_view s);

/// Tier 5 -> critical, 4 -> high, 3 -> medium, anything else -> low.
Level level_from_trust(int trust_tier);

struct LogSource {
    std::string category;
    std::optional<std::string> product;
    std::optional<std::string> service;

    friend bool operator==(const LogSource&, const LogSource&) = default;
};

struct FieldValues {
    std::string field;
    std::vector<std::string> values;

    friend bool operator==(const FieldValues&, const FieldValues&) = default;
};

/// A named selection: every listed field must take one of its values.
struct Selection {
    std::string name;
    std::vector<FieldValues> fields;

    friend bool operator==(const Selection&, const Selection&) = default;
};

struct SigmaRule {
    std::string rule_id;
    std::string title;
    std::string status = "experimental";
    std::string description;
    std::vector<std::string> references;
    std::string date;  ///< YYYY-MM-DD
    LogSource logsource;
    std::vector<Selection> selections;
    std::string condition;
    Level level = Level::low;
    std::vector<std::string> tags;

    friend bool operator==(const SigmaRule&, const SigmaRule&) = default;
};

/// Throws Error if the condition names an undefined selection, there is no
/// selection, or a value is empty.
void validate(const SigmaRule& rule);

struct CompileDiagnostic {
    std::string stix_id;
    std::string message;

    friend bool operator==(const CompileDiagnostic&, const CompileDiagnostic&) = default;
};

struct IndicatorRules {
    std::vector<SigmaRule> rules;
    std::vector<CompileDiagnostic> diagnostics;
};

/// Logsource category for a kind ("network_connection", "dns", ...).
std::string_view category_of(ingest::ObservableKind kind);

/// Disjunctive normal form: a list of conjuncts, each a list of leaves.
std::vector<std::vector<ingest::Observable>> to_dnf(const ingest::ObservableExpr& expr);

IndicatorRules compile_indicator(const ingest::IndicatorRecord& ind);

/// Canonical YAML: fixed key order, 2-space indentation, values quoted only
/// when they contain YAML-significant characters.
std::string render_yaml(const SigmaRule& rule);

/// Whether render_yaml emits the scalar in quotes.
bool needs_quoting(std::string_view value);

struct RuleSet {
    std::vector<SigmaRule> rules;  ///< sorted by rule_id
    std::vector<CompileDiagnostic> diagnostics;
    std::map<std::string, std::string> manifest;  ///< rule_id -> stix_id

    friend bool operator==(const RuleSet&, const RuleSet&) = default;
};

RuleSet compile_ruleset(const relevance::TailoredBundle& bundle);
RuleSet compile_ruleset(const std::vector<ingest::IndicatorRecord>& retained);

/// rules/manifest.json contents.
std::string render_manifest(const RuleSet& set);

}  // namespace ctimp::sigma
