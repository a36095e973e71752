#include "ctimp/detection.hpp"

#include <boost/regex.hpp>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cctype>
#include <functional>
#include <regex>
#include <set>

namespace ctimp::detect {

bool in_vocabulary(std::string_view field) {
    return std::find(kFieldVocabulary.begin(), kFieldVocabulary.end(), field) != kFieldVocabulary.end();
}

// ============================================================================
// Log line parsing
// ============================================================================

namespace {

struct Tail {
    std::optional<std::string> program;
    std::string message;
};

Tail split_program(std::string_view rest) {
    static const std::regex prog_re(R"(^([A-Za-z0-9_./-]+)(?:\[\d+\])?: (.*)$)");
    std::string s(rest);
    std::smatch m;
    if (std::regex_match(s, m, prog_re)) return {m[1].str(), m[2].str()};
    return {std::nullopt, s};
}

std::optional<unsigned> month_index(std::string_view m) {
    static constexpr std::array<std::string_view, 12> names = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                                               "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
    for (unsigned i = 0; i < names.size(); ++i)
        if (names[i] == m) return i + 1;
    return std::nullopt;
}

}  // namespace

std::optional<LogEvent> parse_log_line(std::string_view line, int bsd_year) {
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
    if (trim(line).empty()) return std::nullopt;

    LogEvent ev;
    std::string_view rest;
    auto sp = line.find(' ');
    if (sp == std::string_view::npos) return std::nullopt;
    if (auto ts = parse_rfc3339(line.substr(0, sp))) {
        ev.received_at = *ts;
        rest = line.substr(sp + 1);
    } else {
        static const std::regex bsd(R"(^([A-Z][a-z]{2}) +(\d{1,2}) (\d{2}):(\d{2}):(\d{2}) (.*)$)");
        std::string s(line);
        std::smatch m;
        if (!std::regex_match(s, m, bsd)) return std::nullopt;
        auto mon = month_index(m[1].str());
        if (!mon) return std::nullopt;
        using namespace std::chrono;
        year_month_day ymd{year{bsd_year}, month{*mon}, day{static_cast<unsigned>(std::stoi(m[2].str()))}};
        if (!ymd.ok()) return std::nullopt;
        ev.received_at = Timestamp{sys_days{ymd} + hours{std::stoi(m[3].str())} + minutes{std::stoi(m[4].str())} +
                                   seconds{std::stoi(m[5].str())}};
        auto offset = static_cast<std::size_t>(m.position(6));
        rest = line.substr(offset);
    }
    auto host_end = rest.find(' ');
    if (host_end == std::string_view::npos) return std::nullopt;
    ev.source_host = std::string(rest.substr(0, host_end));
    auto tail = split_program(rest.substr(host_end + 1));
    ev.program = tail.program;
    ev.message = tail.message;
    if (ev.message.empty()) return std::nullopt;
    return ev;
}

// ============================================================================
// Decoders
// ============================================================================

struct DecoderSet::Compiled {
    struct Entry {
        Decoder decoder;
        std::optional<boost::regex> program;
        std::optional<boost::regex> prematch;
        std::optional<boost::regex> extract;
        std::vector<std::string> capture_names;
        std::vector<std::size_t> children;  ///< sorted by (order_hint, name)
    };
    std::vector<Decoder> source;
    std::vector<Entry> entries;
    std::vector<std::size_t> roots;
};

namespace {

std::vector<std::string> named_captures(const std::string& pattern) {
    static const std::regex named(R"(\(\?P?<([A-Za-z_][A-Za-z0-9_]*)>)");
    std::vector<std::string> out;
    for (auto it = std::sregex_iterator(pattern.begin(), pattern.end(), named); it != std::sregex_iterator(); ++it) {
        out.push_back((*it)[1].str());
    }
    return out;
}

boost::regex compile_pattern(const std::string& decoder, const char* what, const std::string& pattern) {
    try {
        return boost::regex(pattern, boost::regex::perl);
    } catch (const boost::regex_error& e) {
        throw Error("decoder " + decoder + ": invalid " + what + " pattern: " + e.what());
    }
}

}  // namespace

DecoderSet::DecoderSet(std::vector<Decoder> decoders) : compiled_(std::make_unique<Compiled>()) {
    auto& c = *compiled_;
    std::sort(decoders.begin(), decoders.end(), [](const Decoder& a, const Decoder& b) {
        return std::tie(a.order_hint, a.name) < std::tie(b.order_hint, b.name);
    });
    std::map<std::string, std::size_t> by_name;
    for (const auto& d : decoders) {
        if (d.name.empty() || d.name == kUnmatched) throw Error("decoder name '" + d.name + "' is reserved or empty");
        if (!by_name.emplace(d.name, c.entries.size()).second) throw Error("duplicate decoder " + d.name);
        Compiled::Entry e;
        e.decoder = d;
        if (d.program_pattern) e.program = compile_pattern(d.name, "program", *d.program_pattern);
        if (d.prematch) e.prematch = compile_pattern(d.name, "prematch", *d.prematch);
        if (d.extract) {
            e.extract = compile_pattern(d.name, "extract", *d.extract);
            e.capture_names = named_captures(*d.extract);
            if (e.capture_names.empty()) throw Error("decoder " + d.name + ": extract has no named captures");
            for (const auto& n : e.capture_names)
                if (!in_vocabulary(n)) throw Error("decoder " + d.name + ": capture '" + n + "' is not in the field vocabulary");
        }
        c.entries.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < c.entries.size(); ++i) {
        const auto& parent = c.entries[i].decoder.parent;
        if (!parent) {
            c.roots.push_back(i);
            continue;
        }
        auto it = by_name.find(*parent);
        if (it == by_name.end()) throw Error("decoder " + c.entries[i].decoder.name + ": unknown parent " + *parent);
        c.entries[it->second].children.push_back(i);
    }
    // Every decoder must be reachable from a root, otherwise the parent chain loops.
    std::vector<bool> seen(c.entries.size(), false);
    std::vector<std::size_t> stack(c.roots.begin(), c.roots.end());
    while (!stack.empty()) {
        auto i = stack.back();
        stack.pop_back();
        seen[i] = true;
        for (auto ch : c.entries[i].children) stack.push_back(ch);
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i]) throw Error("decoder " + c.entries[i].decoder.name + ": parent chain is cyclic");
    c.source = std::move(decoders);
}

DecoderSet::~DecoderSet() = default;
DecoderSet::DecoderSet(DecoderSet&&) noexcept = default;
DecoderSet& DecoderSet::operator=(DecoderSet&&) noexcept = default;

const std::vector<Decoder>& DecoderSet::decoders() const {
    return compiled_->source;
}

namespace {

struct ChainResult {
    std::string decoder;
    Fields fields;
};

std::optional<ChainResult> try_decoders(const DecoderSet::Compiled& c, const std::vector<std::size_t>& candidates,
                                        const LogEvent& event, const std::string& input, const Fields& inherited) {
    for (auto idx : candidates) {
        const auto& e = c.entries[idx];
        if (e.program) {
            if (!event.program || !boost::regex_match(*event.program, *e.program)) continue;
        }
        std::string remainder = input;
        if (e.prematch) {
            boost::smatch pm;
            if (!boost::regex_search(input, pm, *e.prematch)) continue;
            remainder = pm.suffix().str();
        }
        Fields fields = inherited;
        if (e.extract) {
            boost::smatch m;
            if (boost::regex_search(remainder, m, *e.extract)) {
                for (const auto& name : e.capture_names) {
                    const auto& sub = m[name];
                    if (sub.matched) fields[name] = sub.str();
                }
            }
        }
        if (auto deeper = try_decoders(c, e.children, event, remainder, fields)) return deeper;
        return ChainResult{e.decoder.name, std::move(fields)};
    }
    return std::nullopt;
}

}  // namespace

DecodedEvent decode(const LogEvent& event, const DecoderSet& decoders) {
    DecodedEvent out;
    out.base = event;
    const auto& c = decoders.compiled();
    auto result = try_decoders(c, c.roots, event, event.message, {});
    if (result && !result->fields.empty()) {
        out.decoder = std::move(result->decoder);
        out.fields = std::move(result->fields);
    }
    return out;
}

// ============================================================================
// Conditions
// ============================================================================

std::string_view to_string(CompareOp op) {
    switch (op) {
        case CompareOp::equals: return "==";
        case CompareOp::contains: return "contains";
        case CompareOp::in_set: return "in";
    }
    return "==";
}

Condition Condition::compare(Comparison c) {
    Condition out;
    out.kind = Kind::compare;
    out.comparison = std::move(c);
    return out;
}

Condition Condition::all_of(std::vector<Condition> c) {
    if (c.size() == 1) return std::move(c.front());
    Condition out;
    out.kind = Kind::all_of;
    out.children = std::move(c);
    return out;
}

Condition Condition::any_of(std::vector<Condition> c) {
    if (c.size() == 1) return std::move(c.front());
    Condition out;
    out.kind = Kind::any_of;
    out.children = std::move(c);
    return out;
}

Condition Condition::negate(Condition c) {
    Condition out;
    out.kind = Kind::negate;
    out.children.push_back(std::move(c));
    return out;
}

bool Condition::evaluate(const Fields& fields) const {
    switch (kind) {
        case Kind::always:
            return true;
        case Kind::compare: {
            auto it = fields.find(comparison.field);
            if (it == fields.end()) return false;
            const auto& v = it->second;
            switch (comparison.op) {
                case CompareOp::equals:
                    return !comparison.values.empty() && v == comparison.values.front();
                case CompareOp::contains:
                    return std::any_of(comparison.values.begin(), comparison.values.end(),
                                       [&](const std::string& needle) { return v.find(needle) != std::string::npos; });
                case CompareOp::in_set:
                    return std::find(comparison.values.begin(), comparison.values.end(), v) != comparison.values.end();
            }
            return false;
        }
        case Kind::all_of:
            return std::all_of(children.begin(), children.end(), [&](const Condition& c) { return c.evaluate(fields); });
        case Kind::any_of:
            return std::any_of(children.begin(), children.end(), [&](const Condition& c) { return c.evaluate(fields); });
        case Kind::negate:
            return !children.front().evaluate(fields);
    }
    return false;
}

std::vector<std::string> Condition::referenced_fields() const {
    std::set<std::string> out;
    std::function<void(const Condition&)> walk = [&](const Condition& c) {
        if (c.kind == Kind::compare) out.insert(c.comparison.field);
        for (const auto& ch : c.children) walk(ch);
    };
    walk(*this);
    return {out.begin(), out.end()};
}

namespace {

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    return out + "\"";
}

}  // namespace

std::string Condition::str() const {
    switch (kind) {
        case Kind::always:
            return "true";
        case Kind::compare: {
            std::string out = comparison.field + " " + std::string(to_string(comparison.op)) + " ";
            if (comparison.op == CompareOp::in_set) {
                out += "[";
                for (std::size_t i = 0; i < comparison.values.size(); ++i)
                    out += (i ? ", " : "") + quote(comparison.values[i]);
                return out + "]";
            }
            return out + quote(comparison.values.empty() ? std::string() : comparison.values.front());
        }
        case Kind::all_of:
        case Kind::any_of: {
            std::string out = "(";
            for (std::size_t i = 0; i < children.size(); ++i)
                out += (i ? (kind == Kind::all_of ? " and " : " or ") : "") + children[i].str();
            return out + ")";
        }
        case Kind::negate:
            return "not " + children.front().str();
    }
    return "";
}

// ----------------------------------------------------------------------------
// Expression tokenizer shared by native conditions and SIGMA conditions
// ----------------------------------------------------------------------------

namespace {

enum class TokType { word, string, lparen, rparen, lbracket, rbracket, comma, op_eq, end };

struct ExprToken {
    TokType type;
    std::string text;
    std::size_t offset;
};

std::vector<ExprToken> tokenize(std::string_view s) {
    std::vector<ExprToken> out;
    std::size_t i = 0;
    while (i < s.size()) {
        char c = s[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        std::size_t start = i;
        switch (c) {
            case '(': out.push_back({TokType::lparen, "(", i++}); continue;
            case ')': out.push_back({TokType::rparen, ")", i++}); continue;
            case '[': out.push_back({TokType::lbracket, "[", i++}); continue;
            case ']': out.push_back({TokType::rbracket, "]", i++}); continue;
            case ',': out.push_back({TokType::comma, ",", i++}); continue;
            default: break;
        }
        if (c == '=' && i + 1 < s.size() && s[i + 1] == '=') {
            out.push_back({TokType::op_eq, "==", i});
            i += 2;
            continue;
        }
        if (c == '"') {
            std::string v;
            ++i;
            bool closed = false;
            while (i < s.size()) {
                char ch = s[i++];
                if (ch == '\\' && i < s.size()) {
                    v.push_back(s[i++]);
                } else if (ch == '"') {
                    closed = true;
                    break;
                } else {
                    v.push_back(ch);
                }
            }
            if (!closed) throw Error("unterminated string at offset " + std::to_string(start));
            out.push_back({TokType::string, v, start});
            continue;
        }
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
            while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_' || s[i] == '*')) ++i;
            out.push_back({TokType::word, std::string(s.substr(start, i - start)), start});
            continue;
        }
        throw Error("unexpected character '" + std::string(1, c) + "' at offset " + std::to_string(i));
    }
    out.push_back({TokType::end, "", s.size()});
    return out;
}

/// Precedence: not > and > or. `atom` parses one operand at the cursor.
class BoolParser {
public:
    using Atom = std::function<Condition(BoolParser&)>;

    BoolParser(std::vector<ExprToken> tokens, Atom atom) : toks_(std::move(tokens)), atom_(std::move(atom)) {}

    Condition parse() {
        auto c = disjunction();
        if (peek().type != TokType::end) fail("unexpected '" + peek().text + "'");
        return c;
    }

    const ExprToken& peek() const { return toks_[pos_]; }
    ExprToken take() { return toks_[pos_++]; }
    bool at_word(std::string_view w) const { return peek().type == TokType::word && peek().text == w; }
    [[noreturn]] void fail(const std::string& msg) const {
        throw Error("condition syntax error at offset " + std::to_string(peek().offset) + ": " + msg);
    }
    void expect(TokType t, const char* what) {
        if (peek().type != t) fail(std::string("expected ") + what);
        ++pos_;
    }

private:
    Condition disjunction() {
        std::vector<Condition> parts{conjunction()};
        while (at_word("or")) {
            ++pos_;
            parts.push_back(conjunction());
        }
        return Condition::any_of(std::move(parts));
    }

    Condition conjunction() {
        std::vector<Condition> parts{unary()};
        while (at_word("and")) {
            ++pos_;
            parts.push_back(unary());
        }
        return Condition::all_of(std::move(parts));
    }

    Condition unary() {
        if (at_word("not")) {
            ++pos_;
            return Condition::negate(unary());
        }
        if (peek().type == TokType::lparen) {
            ++pos_;
            auto c = disjunction();
            expect(TokType::rparen, "')'");
            return c;
        }
        return atom_(*this);
    }

    std::vector<ExprToken> toks_;
    std::size_t pos_ = 0;
    Atom atom_;
};

}  // namespace

Condition parse_condition(std::string_view text) {
    if (trim(text).empty()) return Condition::always();
    BoolParser parser(tokenize(text), [](BoolParser& p) {
        if (p.peek().type != TokType::word) p.fail("expected field name");
        auto field = p.take().text;
        if (!in_vocabulary(field)) p.fail("field '" + field + "' is not in the vocabulary");
        Comparison cmp;
        cmp.field = field;
        if (p.peek().type == TokType::op_eq) {
            p.take();
            cmp.op = CompareOp::equals;
            if (p.peek().type != TokType::string) p.fail("expected string value");
            cmp.values.push_back(p.take().text);
        } else if (p.at_word("contains")) {
            p.take();
            cmp.op = CompareOp::contains;
            if (p.peek().type != TokType::string) p.fail("expected string value");
            cmp.values.push_back(p.take().text);
        } else if (p.at_word("in")) {
            p.take();
            cmp.op = CompareOp::in_set;
            p.expect(TokType::lbracket, "'['");
            if (p.peek().type != TokType::string) p.fail("expected string value");
            cmp.values.push_back(p.take().text);
            while (p.peek().type == TokType::comma) {
                p.take();
                if (p.peek().type != TokType::string) p.fail("expected string value");
                cmp.values.push_back(p.take().text);
            }
            p.expect(TokType::rbracket, "']'");
        } else {
            p.fail("expected ==, contains or in");
        }
        return Condition::compare(std::move(cmp));
    });
    return parser.parse();
}

// ============================================================================
// Rules
// ============================================================================

void validate_rules(const std::vector<DetectionRule>& rules) {
    std::map<std::string, const DetectionRule*> by_id;
    for (const auto& r : rules) {
        if (r.rule_id.empty()) throw Error("rule with empty id");
        if (!by_id.emplace(r.rule_id, &r).second) throw Error("duplicate rule id " + r.rule_id);
        if (r.level < 0 || r.level > 15) throw Error("rule " + r.rule_id + ": level must be in 0..15");
        if (r.frequency) {
            if (r.frequency->count < 2) throw Error("rule " + r.rule_id + ": frequency count must be >= 2");
            if (r.frequency->window_seconds <= 0) throw Error("rule " + r.rule_id + ": frequency window must be > 0");
            if (!in_vocabulary(r.frequency->key_field)) {
                throw Error("rule " + r.rule_id + ": frequency key '" + r.frequency->key_field + "' is not in the vocabulary");
            }
        }
        for (const auto& f : r.conditions.referenced_fields())
            if (!in_vocabulary(f)) throw Error("rule " + r.rule_id + ": field '" + f + "' is not in the vocabulary");
        if (r.origin == RuleOrigin::sigma && (r.threat_type.rfind("sigma:", 0) != 0 || r.threat_group != "cti-match")) {
            throw Error("rule " + r.rule_id + ": sigma rules carry threat_type sigma:<category> and group cti-match");
        }
    }
    for (const auto& r : rules) {
        std::set<std::string> chain{r.rule_id};
        const DetectionRule* cur = &r;
        while (cur->parent_rule) {
            auto it = by_id.find(*cur->parent_rule);
            if (it == by_id.end()) throw Error("rule " + cur->rule_id + ": unknown parent " + *cur->parent_rule);
            if (!chain.insert(it->first).second) throw Error("rule " + r.rule_id + ": parent chain is cyclic");
            cur = it->second;
        }
    }
}

std::vector<DetectionRule> order_rules(std::vector<DetectionRule> rules) {
    validate_rules(rules);
    std::map<std::string, std::size_t> depth_cache;
    std::map<std::string, const DetectionRule*> by_id;
    for (const auto& r : rules) by_id[r.rule_id] = &r;
    std::function<std::size_t(const DetectionRule&)> depth = [&](const DetectionRule& r) -> std::size_t {
        if (!r.parent_rule) return 0;
        if (auto it = depth_cache.find(r.rule_id); it != depth_cache.end()) return it->second;
        auto d = depth(*by_id.at(*r.parent_rule)) + 1;
        depth_cache[r.rule_id] = d;
        return d;
    };
    std::vector<std::pair<std::size_t, std::size_t>> keyed;
    for (std::size_t i = 0; i < rules.size(); ++i) keyed.emplace_back(depth(rules[i]), i);
    std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return rules[a.second].rule_id < rules[b.second].rule_id;
    });
    std::vector<DetectionRule> out;
    out.reserve(rules.size());
    for (const auto& [_, i] : keyed) out.push_back(std::move(rules[i]));
    return out;
}

namespace {

int to_int(const std::string& section, const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw Error("[" + section + "] " + key + ": expected an integer, got '" + value + "'");
    }
}

}  // namespace

DetectionPack parse_detection_pack(std::string_view text) {
    DetectionPack pack;
    enum class Section { none, decoder, rule } section = Section::none;
    std::string section_name;
    std::optional<int> freq_count, freq_window;
    std::optional<std::string> freq_key;

    auto finish_rule = [&]() {
        if (section != Section::rule) return;
        auto& r = pack.rules.back();
        if (freq_count || freq_window || freq_key) {
            if (!freq_count || !freq_window || !freq_key) {
                throw Error("[rule " + r.rule_id + "] frequency, timeframe and key must be given together");
            }
            r.frequency = Frequency{*freq_count, *freq_window, *freq_key};
        }
        freq_count.reset();
        freq_window.reset();
        freq_key.reset();
    };

    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
        ++line_no;
        auto line = trim(raw);
        if (line.empty() || line.front() == '#' || line.front() == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw Error("line " + std::to_string(line_no) + ": malformed section header");
            finish_rule();
            auto inner = trim(line.substr(1, line.size() - 2));
            auto sp = inner.find(' ');
            if (sp == std::string::npos) throw Error("line " + std::to_string(line_no) + ": section needs a name");
            auto kind = inner.substr(0, sp);
            section_name = trim(inner.substr(sp + 1));
            if (kind == "decoder") {
                section = Section::decoder;
                pack.decoders.push_back(Decoder{section_name, {}, {}, {}, {}, 0});
            } else if (kind == "rule") {
                section = Section::rule;
                DetectionRule r;
                r.rule_id = section_name;
                pack.rules.push_back(std::move(r));
            } else {
                throw Error("line " + std::to_string(line_no) + ": unknown section kind '" + kind + "'");
            }
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("line " + std::to_string(line_no) + ": expected key = value");
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (section == Section::decoder) {
            auto& d = pack.decoders.back();
            if (key == "parent") d.parent = value;
            else if (key == "program") d.program_pattern = value;
            else if (key == "prematch") d.prematch = value;
            else if (key == "extract") d.extract = value;
            else if (key == "order") d.order_hint = to_int(section_name, key, value);
            else throw Error("[decoder " + section_name + "] unknown key '" + key + "'");
        } else if (section == Section::rule) {
            auto& r = pack.rules.back();
            if (key == "level") r.level = to_int(section_name, key, value);
            else if (key == "threat_type") r.threat_type = value;
            else if (key == "threat_group") r.threat_group = value;
            else if (key == "description") r.description = value;
            else if (key == "decoder") r.required_decoder = value;
            else if (key == "parent") r.parent_rule = value;
            else if (key == "condition") {
                try {
                    r.conditions = parse_condition(value);
                } catch (const Error& e) {
                    throw Error("[rule " + section_name + "] " + e.what());
                }
            }
            else if (key == "frequency") freq_count = to_int(section_name, key, value);
            else if (key == "timeframe") freq_window = to_int(section_name, key, value);
            else if (key == "key") freq_key = value;
            else throw Error("[rule " + section_name + "] unknown key '" + key + "'");
        } else {
            throw Error("line " + std::to_string(line_no) + ": key outside of a section");
        }
    }
    finish_rule();
    DecoderSet check(pack.decoders);
    validate_rules(pack.rules);
    return pack;
}

// ============================================================================
// SIGMA loading
// ============================================================================

namespace {

std::string scalar_at(const YAML::Node& node, const char* key, const std::string& rule) {
    auto v = node[key];
    if (!v || !v.IsScalar()) throw SigmaLoadError(rule, std::string("missing scalar '") + key + "'");
    return v.as<std::string>();
}

std::vector<std::string> string_list(const YAML::Node& node, const std::string& what, const std::string& rule) {
    std::vector<std::string> out;
    if (!node || node.IsNull()) return out;
    if (node.IsScalar()) return {node.as<std::string>()};
    if (!node.IsSequence()) throw SigmaLoadError(rule, what + " must be a list");
    for (const auto& v : node) {
        if (!v.IsScalar()) throw SigmaLoadError(rule, what + " must contain scalars");
        out.push_back(v.as<std::string>());
    }
    return out;
}

}  // namespace

sigma::SigmaRule parse_sigma_yaml(std::string_view document) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(document));
    } catch (const YAML::Exception& e) {
        throw SigmaLoadError("<document>", std::string("invalid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw SigmaLoadError("<document>", "top level is not a mapping");

    sigma::SigmaRule r;
    r.rule_id = scalar_at(root, "id", "<document>");
    r.title = scalar_at(root, "title", r.rule_id);
    if (root["status"]) r.status = scalar_at(root, "status", r.rule_id);
    if (root["description"]) r.description = scalar_at(root, "description", r.rule_id);
    r.references = string_list(root["references"], "references", r.rule_id);
    if (root["date"]) r.date = scalar_at(root, "date", r.rule_id);
    auto ls = root["logsource"];
    if (!ls || !ls.IsMap()) throw SigmaLoadError(r.rule_id, "missing logsource");
    if (ls["category"]) r.logsource.category = scalar_at(ls, "category", r.rule_id);
    if (ls["product"]) r.logsource.product = scalar_at(ls, "product", r.rule_id);
    if (ls["service"]) r.logsource.service = scalar_at(ls, "service", r.rule_id);

    auto det = root["detection"];
    if (!det || !det.IsMap()) throw SigmaLoadError(r.rule_id, "missing detection");
    for (const auto& kv : det) {
        auto name = kv.first.as<std::string>();
        if (name == "condition") {
            if (!kv.second.IsScalar()) throw SigmaLoadError(r.rule_id, "condition must be a string");
            r.condition = kv.second.as<std::string>();
            continue;
        }
        if (!kv.second.IsMap()) throw SigmaLoadError(r.rule_id, "selection " + name + " must be a mapping");
        sigma::Selection sel{name, {}};
        for (const auto& fv : kv.second) {
            auto field = fv.first.as<std::string>();
            if (field.find('|') != std::string::npos) {
                throw SigmaLoadError(r.rule_id, "field modifiers are not supported (" + field + ")");
            }
            sel.fields.push_back({field, string_list(fv.second, "selection " + name, r.rule_id)});
        }
        r.selections.push_back(std::move(sel));
    }
    if (r.condition.empty()) throw SigmaLoadError(r.rule_id, "missing condition");
    if (root["level"]) {
        auto lv = sigma::level_from_string(scalar_at(root, "level", r.rule_id));
        if (!lv) throw SigmaLoadError(r.rule_id, "unknown level");
        r.level = *lv;
    }
    r.tags = string_list(root["tags"], "tags", r.rule_id);
    return r;
}

std::optional<std::string> map_sigma_field(std::string_view f) {
    if (f == "destination_ip" || f == "DestinationIp" || f == "dst_ip") return "dstip";
    if (f == "source_ip" || f == "SourceIp" || f == "src_ip") return "srcip";
    if (f == "query" || f == "QueryName") return "query";
    if (f == "url" || f == "c-uri") return "url";
    if (f == "md5" || f == "sha256" || f == "Hashes") return "hash";
    if (f == "user" || f == "User") return "user";
    return std::nullopt;
}

int level_from_sigma(sigma::Level level) {
    switch (level) {
        case sigma::Level::low: return 4;
        case sigma::Level::medium: return 7;
        case sigma::Level::high: return 10;
        case sigma::Level::critical: return 13;
    }
    return 4;
}

namespace {

std::vector<std::string> category_fields(std::string_view category) {
    if (category == "network_connection") return {"dstip", "srcip"};
    if (category == "dns") return {"query"};
    if (category == "proxy") return {"url"};
    if (category == "file_event") return {"hash"};
    return {};
}

}  // namespace

DetectionRule to_detection_rule(const sigma::SigmaRule& rule) {
    std::map<std::string, Condition> selections;
    for (const auto& sel : rule.selections) {
        std::vector<Condition> parts;
        for (const auto& f : sel.fields) {
            auto mapped = map_sigma_field(f.field);
            if (!mapped) throw SigmaLoadError(rule.rule_id, "field '" + f.field + "' has no mapping");
            if (f.values.empty()) throw SigmaLoadError(rule.rule_id, "field '" + f.field + "' has no values");
            Comparison cmp{*mapped, f.values.size() == 1 ? CompareOp::equals : CompareOp::in_set, f.values};
            parts.push_back(Condition::compare(std::move(cmp)));
        }
        if (parts.empty()) throw SigmaLoadError(rule.rule_id, "selection " + sel.name + " is empty");
        selections[sel.name] = Condition::all_of(std::move(parts));
    }

    Condition cond;
    try {
        BoolParser parser(tokenize(rule.condition), [&](BoolParser& p) {
            if (p.peek().type != TokType::word) p.fail("expected selection name");
            auto name = p.take().text;
            auto it = selections.find(name);
            if (it == selections.end()) throw SigmaLoadError(rule.rule_id, "condition references undefined selection " + name);
            return it->second;
        });
        cond = parser.parse();
    } catch (const SigmaLoadError&) {
        throw;
    } catch (const Error& e) {
        throw SigmaLoadError(rule.rule_id, e.what());
    }

    DetectionRule out;
    out.rule_id = rule.rule_id;
    out.origin = RuleOrigin::sigma;
    out.level = level_from_sigma(rule.level);
    out.threat_type = "sigma:" + rule.logsource.category;
    out.threat_group = "cti-match";
    out.description = rule.title;
    out.conditions = std::move(cond);
    out.required_any_field = category_fields(rule.logsource.category);
    return out;
}

std::vector<DetectionRule> load_sigma_rules(const std::vector<std::string>& documents) {
    std::vector<DetectionRule> out;
    out.reserve(documents.size());
    for (const auto& doc : documents) out.push_back(to_detection_rule(parse_sigma_yaml(doc)));
    return out;
}

// ============================================================================
// Evaluation
// ============================================================================

bool base_conditions_hold(const DetectionRule& rule, const DecodedEvent& event) {
    if (rule.required_decoder && *rule.required_decoder != event.decoder) return false;
    if (!rule.required_any_field.empty() &&
        std::none_of(rule.required_any_field.begin(), rule.required_any_field.end(),
                     [&](const std::string& f) { return event.fields.contains(f); })) {
        return false;
    }
    return rule.conditions.evaluate(event.fields);
}

Fields signature_fields(const DetectionRule& rule, const DecodedEvent& event) {
    Fields key;
    auto take = [&](const std::string& f) {
        if (auto it = event.fields.find(f); it != event.fields.end()) key[f] = it->second;
    };
    for (const auto& f : rule.conditions.referenced_fields()) take(f);
    if (rule.frequency) take(rule.frequency->key_field);
    return key;
}

std::vector<RuleMatch> evaluate(const DecodedEvent& event, const std::vector<DetectionRule>& rules,
                                DetectionState& state) {
    std::vector<RuleMatch> out;
    std::set<std::string> matched;
    for (const auto& rule : rules) {
        if (rule.parent_rule && !matched.contains(*rule.parent_rule)) continue;
        if (!base_conditions_hold(rule, event)) continue;
        matched.insert(rule.rule_id);

        if (!rule.frequency) {
            out.push_back({rule.rule_id, event, 1, signature_fields(rule, event)});
            continue;
        }
        auto kit = event.fields.find(rule.frequency->key_field);
        if (kit == event.fields.end()) continue;
        auto& window = state.windows[{rule.rule_id, kit->second}];
        auto t = event.base.received_at;
        auto horizon = t - std::chrono::seconds{rule.frequency->window_seconds};
        while (!window.empty() && window.front() < horizon) window.pop_front();
        window.push_back(t);
        if (static_cast<int>(window.size()) >= rule.frequency->count) {
            out.push_back({rule.rule_id, event, static_cast<int>(window.size()), signature_fields(rule, event)});
            window.clear();
        }
    }
    return out;
}

DetectionEngine::DetectionEngine(DecoderSet decoders, std::vector<DetectionRule> rules)
    : decoders_(std::move(decoders)),
      rules_(std::make_shared<const std::vector<DetectionRule>>(order_rules(std::move(rules)))) {}

void DetectionEngine::reload(std::vector<DetectionRule> rules, std::uint64_t version) {
    auto next = std::make_shared<const std::vector<DetectionRule>>(order_rules(std::move(rules)));
    std::set<std::string> ids;
    for (const auto& r : *next) ids.insert(r.rule_id);
    {
        std::lock_guard lock(mutex_);
        rules_ = next;
        version_ = version;
    }
    std::lock_guard state_lock(state_mutex_);
    std::erase_if(state_.windows, [&](const auto& kv) { return !ids.contains(kv.first.first); });
}

std::uint64_t DetectionEngine::version() const {
    std::lock_guard lock(mutex_);
    return version_;
}

std::shared_ptr<const std::vector<DetectionRule>> DetectionEngine::rules() const {
    std::lock_guard lock(mutex_);
    return rules_;
}

DecodedEvent DetectionEngine::decode(const LogEvent& event) const {
    return detect::decode(event, decoders_);
}

std::vector<RuleMatch> DetectionEngine::process(const LogEvent& event) {
    auto decoded = decode(event);
    auto rules = this->rules();
    std::lock_guard lock(state_mutex_);
    return evaluate(decoded, *rules, state_);
}

}  // namespace ctimp::detect
