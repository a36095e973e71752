#include "ctimp/sigma_compiler.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <regex>
#include <set>
#include <sstream>

namespace ctimp::sigma {

using ingest::Observable;
using ingest::ObservableExpr;
using ingest::ObservableKind;

std::string_view to_string(Level level) {
    switch (level) {
        case Level::low: return "low";
        case Level::medium: return "medium";
        case Level::high: return "high";
        case Level::critical: return "critical";
    }
    return "low";
}

std::optional<Level> level_from_string(std::string_view s) {
    for (auto l : {Level::low, Level::medium, Level::high, Level::critical})
        if (to_string(l) == s) return l;
    return std::nullopt;
}

Level level_from_trust(int trust_tier) {
    switch (trust_tier) {
        case 5: return Level::critical;
        case 4: return Level::high;
        case 3: return Level::medium;
        default: return Level::low;
    }
}

std::string_view category_of(ObservableKind kind) {
    switch (kind) {
        case ObservableKind::ipv4: return "network_connection";
        case ObservableKind::domain: return "dns";
        case ObservableKind::url: return "proxy";
        case ObservableKind::md5:
        case ObservableKind::sha256: return "file_event";
        case ObservableKind::other: break;
    }
    return "";
}

namespace {

// Fixed category order; the index is the ordinal seeded into rule ids.
constexpr std::array<std::string_view, 4> kCategories = {"network_connection", "dns", "proxy", "file_event"};

std::size_t category_ordinal(std::string_view category) {
    for (std::size_t i = 0; i < kCategories.size(); ++i)
        if (kCategories[i] == category) return i;
    throw Error("no logsource category for observable");
}

std::string_view field_of(ObservableKind kind) {
    switch (kind) {
        case ObservableKind::domain: return "query";
        case ObservableKind::url: return "url";
        case ObservableKind::md5: return "md5";
        case ObservableKind::sha256: return "sha256";
        default: return "";
    }
}

constexpr std::size_t kMaxConjuncts = 4096;

const Uuid& rule_namespace() {
    static const Uuid ns = uuid_v5(Uuid{}, "ctimp-sigma");
    return ns;
}

// Condition tokens are selection names, and/or/not and parentheses.
std::set<std::string> condition_identifiers(const std::string& condition) {
    static const std::regex ident(R"([A-Za-z_][A-Za-z0-9_]*)");
    std::set<std::string> out;
    for (auto it = std::sregex_iterator(condition.begin(), condition.end(), ident); it != std::sregex_iterator(); ++it) {
        auto w = it->str();
        if (w != "and" && w != "or" && w != "not") out.insert(w);
    }
    return out;
}

}  // namespace

void validate(const SigmaRule& rule) {
    if (rule.selections.empty()) throw Error("rule " + rule.rule_id + ": no selections");
    std::set<std::string> names;
    for (const auto& s : rule.selections) {
        if (!names.insert(s.name).second) throw Error("rule " + rule.rule_id + ": duplicate selection " + s.name);
        if (s.fields.empty()) throw Error("rule " + rule.rule_id + ": selection " + s.name + " is empty");
        for (const auto& f : s.fields) {
            if (f.values.empty()) throw Error("rule " + rule.rule_id + ": field " + f.field + " has no values");
            for (const auto& v : f.values)
                if (v.empty()) throw Error("rule " + rule.rule_id + ": empty value for " + f.field);
        }
    }
    if (rule.condition.empty()) throw Error("rule " + rule.rule_id + ": empty condition");
    for (const auto& id : condition_identifiers(rule.condition)) {
        if (!names.contains(id)) throw Error("rule " + rule.rule_id + ": condition references undefined selection " + id);
    }
}

// ============================================================================
// DNF
// ============================================================================

std::vector<std::vector<Observable>> to_dnf(const ObservableExpr& expr) {
    using Dnf = std::vector<std::vector<Observable>>;
    switch (expr.op()) {
        case ObservableExpr::Op::leaf:
            return Dnf{{expr.observable()}};
        case ObservableExpr::Op::any_of: {
            Dnf out;
            for (const auto& c : expr.children()) {
                auto part = to_dnf(c);
                out.insert(out.end(), part.begin(), part.end());
                if (out.size() > kMaxConjuncts) throw Error("pattern too large for normal form");
            }
            return out;
        }
        case ObservableExpr::Op::all_of: {
            Dnf out{{}};
            for (const auto& c : expr.children()) {
                auto part = to_dnf(c);
                if (out.size() * part.size() > kMaxConjuncts) throw Error("pattern too large for normal form");
                Dnf next;
                for (const auto& lhs : out) {
                    for (const auto& rhs : part) {
                        auto merged = lhs;
                        merged.insert(merged.end(), rhs.begin(), rhs.end());
                        next.push_back(std::move(merged));
                    }
                }
                out = std::move(next);
            }
            return out;
        }
    }
    return {};
}

// ============================================================================
// Compilation
// ============================================================================

namespace {

using Conjunct = std::vector<Observable>;

void add_values(std::vector<FieldValues>& fields, std::string_view field, const std::string& value) {
    auto it = std::find_if(fields.begin(), fields.end(), [&](const FieldValues& f) { return f.field == field; });
    if (it == fields.end()) {
        fields.push_back({std::string(field), {value}});
    } else if (std::find(it->values.begin(), it->values.end(), value) == it->values.end()) {
        it->values.push_back(value);
    }
}

// Every conjunct is a single leaf: merge values per field into one selection each.
void build_simple(std::string_view category, const std::vector<Conjunct>& conjuncts, SigmaRule& rule) {
    std::vector<std::string> terms;
    if (category == "network_connection") {
        Selection dst{"sel_dst", {}}, src{"sel_src", {}};
        for (const auto& c : conjuncts) {
            add_values(dst.fields, "destination_ip", c.front().value);
            add_values(src.fields, "source_ip", c.front().value);
        }
        rule.selections = {std::move(dst), std::move(src)};
        rule.condition = "sel_dst or sel_src";
        return;
    }
    for (auto kind : {ObservableKind::domain, ObservableKind::url, ObservableKind::md5, ObservableKind::sha256}) {
        Selection sel{"sel_" + std::string(field_of(kind)), {}};
        for (const auto& c : conjuncts)
            if (c.front().kind == kind) add_values(sel.fields, field_of(kind), c.front().value);
        if (!sel.fields.empty()) {
            terms.push_back(sel.name);
            rule.selections.push_back(std::move(sel));
        }
    }
    std::string cond;
    for (const auto& t : terms) cond += (cond.empty() ? "" : " or ") + t;
    rule.condition = cond;
}

// Arbitrary conjunctions: one selection per leaf, condition spells out the DNF.
void build_general(const std::vector<Conjunct>& conjuncts, SigmaRule& rule) {
    std::vector<std::string> disjuncts;
    for (std::size_t i = 0; i < conjuncts.size(); ++i) {
        std::vector<std::string> terms;
        for (std::size_t j = 0; j < conjuncts[i].size(); ++j) {
            const auto& leaf = conjuncts[i][j];
            std::string base = "sel_c" + std::to_string(i + 1) + "_l" + std::to_string(j + 1);
            if (leaf.kind == ObservableKind::ipv4) {
                rule.selections.push_back({base + "_dst", {{"destination_ip", {leaf.value}}}});
                rule.selections.push_back({base + "_src", {{"source_ip", {leaf.value}}}});
                terms.push_back("(" + base + "_dst or " + base + "_src)");
            } else {
                rule.selections.push_back({base, {{std::string(field_of(leaf.kind)), {leaf.value}}}});
                terms.push_back(base);
            }
        }
        std::string conj;
        for (const auto& t : terms) conj += (conj.empty() ? "" : " and ") + t;
        if (terms.size() > 1 && conjuncts.size() > 1) conj = "(" + conj + ")";
        disjuncts.push_back(conj);
    }
    std::string cond;
    for (const auto& d : disjuncts) cond += (cond.empty() ? "" : " or ") + d;
    rule.condition = cond;
}

std::string tag_for_label(const std::string& label) {
    std::string t = "cti.";
    for (unsigned char c : label) t.push_back(std::isalnum(c) || c == '-' || c == '.' ? static_cast<char>(std::tolower(c)) : '_');
    return t;
}

}  // namespace

IndicatorRules compile_indicator(const ingest::IndicatorRecord& ind) {
    IndicatorRules out;
    auto leaves = ind.expr.leaves();
    if (leaves.empty() || leaves.front().kind == ObservableKind::other) {
        throw Error("indicator " + ind.stix_id + " has an empty expression");
    }

    std::vector<Conjunct> dnf;
    try {
        dnf = to_dnf(ind.expr);
    } catch (const Error& e) {
        out.diagnostics.push_back({ind.stix_id, e.what()});
        return out;
    }

    std::map<std::size_t, std::vector<Conjunct>> buckets;  // category ordinal -> conjuncts
    for (std::size_t k = 0; k < dnf.size(); ++k) {
        std::map<std::size_t, Conjunct> parts;
        for (const auto& leaf : dnf[k]) {
            auto& part = parts[category_ordinal(category_of(leaf.kind))];
            if (std::find(part.begin(), part.end(), leaf) == part.end()) part.push_back(leaf);
        }
        if (parts.size() > 1) {
            std::string cats;
            for (const auto& [ord, _] : parts) cats += (cats.empty() ? "" : ", ") + std::string(kCategories[ord]);
            out.diagnostics.push_back({ind.stix_id, "conjunct " + std::to_string(k + 1) + " ANDs across logsource categories (" +
                                                        cats + "); split into one rule per category"});
        }
        for (auto& [ord, part] : parts) {
            auto& bucket = buckets[ord];
            if (std::find(bucket.begin(), bucket.end(), part) == bucket.end()) bucket.push_back(std::move(part));
        }
    }

    std::vector<std::string> tags;
    for (const auto& l : ind.labels) tags.push_back(tag_for_label(l));
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());

    for (const auto& [ord, conjuncts] : buckets) {
        std::string_view category = kCategories[ord];
        SigmaRule rule;
        rule.rule_id = uuid_v5(rule_namespace(), ind.stix_id + "#" + std::to_string(ord)).str();
        rule.title = "CTI " + std::string(category) + " match for " + ind.stix_id;
        rule.description = "Generated from STIX indicator " + ind.stix_id + " with pattern " + ind.pattern_text;
        rule.references = {ind.stix_id};
        rule.date = format_date(ind.modified);
        rule.logsource.category = std::string(category);
        bool simple = std::all_of(conjuncts.begin(), conjuncts.end(), [](const Conjunct& c) { return c.size() == 1; });
        if (simple) {
            build_simple(category, conjuncts, rule);
        } else {
            build_general(conjuncts, rule);
        }
        rule.level = level_from_trust(ind.trust_tier);
        rule.tags = tags;
        validate(rule);
        out.rules.push_back(std::move(rule));
    }
    return out;
}

// ============================================================================
// YAML rendering
// ============================================================================

bool needs_quoting(std::string_view v) {
    if (v.empty()) return true;
    if (v.front() == ' ' || v.back() == ' ' || v.front() == '-' || v.front() == '.') return true;
    for (unsigned char c : v) {
        if (c < 0x20 || c == 0x7f) return true;
        if (std::string_view(":#{}[],&*?|<>=!%@`'\"\\").find(static_cast<char>(c)) != std::string_view::npos) return true;
    }
    static const std::set<std::string, std::less<>> reserved = {"true", "false", "yes", "no", "on", "off",
                                                                 "null", "~",    "y",   "n"};
    if (reserved.contains(to_lower(v))) return true;
    static const std::regex numeric(R"(^[+-]?(\d[\d_]*)?(\.\d*)?([eE][+-]?\d+)?$|^0x[0-9a-fA-F]+$|^0o?[0-7]+$)");
    return std::regex_match(v.begin(), v.end(), numeric);
}

namespace {

std::string scalar(std::string_view v) {
    if (!needs_quoting(v)) return std::string(v);
    bool control = std::any_of(v.begin(), v.end(), [](unsigned char c) { return c < 0x20 || c == 0x7f; });
    if (!control) {
        std::string out = "'";
        for (char c : v) {
            if (c == '\'') out.push_back('\'');
            out.push_back(c);
        }
        return out + "'";
    }
    std::string out = "\"";
    for (unsigned char c : v) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default:
                if (c < 0x20 || c == 0x7f) {
                    char buf[8];
                    std::snprintf(buf, sizeof buf, "\\x%02x", c);
                    out += buf;
                } else {
                    out.push_back(static_cast<char>(c));
                }
        }
    }
    return out + "\"";
}

void list(std::ostringstream& os, const std::string& key, const std::vector<std::string>& values, int indent) {
    std::string pad(static_cast<std::size_t>(indent), ' ');
    if (values.empty()) {
        os << pad << key << ": []\n";
        return;
    }
    os << pad << key << ":\n";
    for (const auto& v : values) os << pad << "  - " << scalar(v) << "\n";
}

}  // namespace

std::string render_yaml(const SigmaRule& rule) {
    std::ostringstream os;
    os << "title: " << scalar(rule.title) << "\n";
    os << "id: " << scalar(rule.rule_id) << "\n";
    os << "status: " << scalar(rule.status) << "\n";
    os << "description: " << scalar(rule.description) << "\n";
    list(os, "references", rule.references, 0);
    os << "date: " << scalar(rule.date) << "\n";
    os << "logsource:\n";
    os << "  category: " << scalar(rule.logsource.category) << "\n";
    if (rule.logsource.product) os << "  product: " << scalar(*rule.logsource.product) << "\n";
    if (rule.logsource.service) os << "  service: " << scalar(*rule.logsource.service) << "\n";
    os << "detection:\n";
    for (const auto& sel : rule.selections) {
        os << "  " << sel.name << ":\n";
        for (const auto& f : sel.fields) list(os, f.field, f.values, 4);
    }
    os << "  condition: " << scalar(rule.condition) << "\n";
    os << "level: " << scalar(to_string(rule.level)) << "\n";
    list(os, "tags", rule.tags, 0);
    return os.str();
}

// ============================================================================
// Rule sets
// ============================================================================

RuleSet compile_ruleset(const std::vector<ingest::IndicatorRecord>& retained) {
    RuleSet set;
    for (const auto& ind : retained) {
        auto compiled = compile_indicator(ind);
        if (compiled.rules.empty() && compiled.diagnostics.empty()) {
            compiled.diagnostics.push_back({ind.stix_id, "no rule produced"});
        }
        for (auto& r : compiled.rules) {
            set.manifest[r.rule_id] = ind.stix_id;
            set.rules.push_back(std::move(r));
        }
        set.diagnostics.insert(set.diagnostics.end(), compiled.diagnostics.begin(), compiled.diagnostics.end());
    }
    std::sort(set.rules.begin(), set.rules.end(), [](const auto& a, const auto& b) { return a.rule_id < b.rule_id; });
    return set;
}

RuleSet compile_ruleset(const relevance::TailoredBundle& bundle) {
    return compile_ruleset(bundle.retained);
}

std::string render_manifest(const RuleSet& set) {
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& [rule_id, stix_id] : set.manifest) {
        rules.push_back({{"rule_id", rule_id}, {"stix_id", stix_id}, {"file", rule_id + ".yml"}});
    }
    return nlohmann::json{{"rules", std::move(rules)}}.dump(2) + "\n";
}

}  // namespace ctimp::sigma
