#include "ctimp/stix_pattern.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace ctimp::ingest {

std::string_view to_string(ObservableKind kind) {
    switch (kind) {
        case ObservableKind::ipv4: return "ipv4";
        case ObservableKind::domain: return "domain";
        case ObservableKind::url: return "url";
        case ObservableKind::md5: return "md5";
        case ObservableKind::sha256: return "sha256";
        case ObservableKind::other: return "other";
    }
    return "other";
}

std::string_view object_path(ObservableKind kind) {
    switch (kind) {
        case ObservableKind::ipv4: return "ipv4-addr:value";
        case ObservableKind::domain: return "domain-name:value";
        case ObservableKind::url: return "url:value";
        case ObservableKind::md5: return "file:hashes.MD5";
        case ObservableKind::sha256: return "file:hashes.'SHA-256'";
        case ObservableKind::other: return "";
    }
    return "";
}

// ============================================================================
// ObservableExpr
// ============================================================================

ObservableExpr ObservableExpr::leaf(Observable obs) {
    ObservableExpr e;
    e.op_ = Op::leaf;
    e.leaf_ = std::move(obs);
    return e;
}

ObservableExpr ObservableExpr::all_of(std::vector<ObservableExpr> children) {
    if (children.size() < 2) throw Error("AND node needs at least two children");
    ObservableExpr e;
    e.op_ = Op::all_of;
    e.children_ = std::move(children);
    return e;
}

ObservableExpr ObservableExpr::any_of(std::vector<ObservableExpr> children) {
    if (children.size() < 2) throw Error("OR node needs at least two children");
    ObservableExpr e;
    e.op_ = Op::any_of;
    e.children_ = std::move(children);
    return e;
}

std::vector<Observable> ObservableExpr::leaves() const {
    std::vector<Observable> out;
    auto walk = [&out](const ObservableExpr& e, auto&& self) -> void {
        if (e.is_leaf()) {
            out.push_back(e.leaf_);
            return;
        }
        for (const auto& c : e.children_) self(c, self);
    };
    walk(*this, walk);
    return out;
}

std::size_t ObservableExpr::depth() const {
    std::size_t d = 0;
    for (const auto& c : children_) d = std::max(d, c.depth());
    return d + 1;
}

PatternError::PatternError(Kind kind, std::size_t offset, std::string construct, const std::string& message)
    : Error(message), kind_(kind), offset_(offset), construct_(std::move(construct)) {}

// ============================================================================
// Canonicalization
// ============================================================================

std::string canonical_value(ObservableKind kind, std::string_view raw) {
    switch (kind) {
        case ObservableKind::ipv4:
            if (!is_ipv4(raw)) {
                throw PatternError(PatternError::Kind::invalid_value, 0, std::string(raw),
                                   "not a dotted-quad IPv4 address: '" + std::string(raw) + "'");
            }
            return std::string(raw);
        case ObservableKind::domain: {
            auto d = canonical_domain(raw);
            if (d.empty()) {
                throw PatternError(PatternError::Kind::invalid_value, 0, std::string(raw), "empty domain name");
            }
            return d;
        }
        case ObservableKind::url:
            if (raw.empty()) {
                throw PatternError(PatternError::Kind::invalid_value, 0, "", "empty url");
            }
            return std::string(raw);
        case ObservableKind::md5:
        case ObservableKind::sha256: {
            std::size_t want = kind == ObservableKind::md5 ? 32 : 64;
            if (raw.size() != want || !is_hex(raw)) {
                throw PatternError(PatternError::Kind::invalid_value, 0, std::string(raw),
                                   std::string(to_string(kind)) + " must be " + std::to_string(want) +
                                       " hex characters: '" + std::string(raw) + "'");
            }
            return to_lower(raw);
        }
        case ObservableKind::other:
            return std::string(raw);
    }
    return std::string(raw);
}

Observable make_observable(ObservableKind kind, std::string_view raw) {
    return Observable{kind, canonical_value(kind, raw), std::string(object_path(kind))};
}

namespace {

ObservableExpr flatten_into(ObservableExpr::Op op, std::vector<ObservableExpr> parts) {
    std::vector<ObservableExpr> flat;
    for (auto& p : parts) {
        if (p.op() == op) {
            for (const auto& c : p.children()) flat.push_back(c);
        } else {
            flat.push_back(std::move(p));
        }
    }
    if (flat.size() == 1) return std::move(flat.front());
    return op == ObservableExpr::Op::all_of ? ObservableExpr::all_of(std::move(flat))
                                            : ObservableExpr::any_of(std::move(flat));
}

}  // namespace

ObservableExpr canonical(const ObservableExpr& expr) {
    if (expr.is_leaf()) {
        const auto& o = expr.observable();
        return ObservableExpr::leaf(make_observable(o.kind, o.value));
    }
    std::vector<ObservableExpr> parts;
    parts.reserve(expr.children().size());
    for (const auto& c : expr.children()) parts.push_back(canonical(c));
    return flatten_into(expr.op(), std::move(parts));
}

// ============================================================================
// Parser
// ============================================================================

namespace {

enum class Tok { lbracket, rbracket, lparen, rparen, comma, equals, comparator, string, word, end };

struct Token {
    Tok type;
    std::string text;
    std::size_t offset;
};

const std::set<std::string, std::less<>> kUnsupportedKeywords = {
    "NOT",   "MATCHES", "LIKE",       "ISSUBSET", "ISSUPERSET", "EXISTS", "FOLLOWEDBY",
    "WITHIN", "REPEATS", "START",     "STOP",     "TIMES",      "SECONDS"};

class Lexer {
public:
    explicit Lexer(std::string_view text) : text_(text) {}

    Token next() {
        skip_ws();
        std::size_t start = pos_;
        if (pos_ >= text_.size()) return {Tok::end, "", start};
        char c = text_[pos_];
        switch (c) {
            case '[': ++pos_; return {Tok::lbracket, "[", start};
            case ']': ++pos_; return {Tok::rbracket, "]", start};
            case '(': ++pos_; return {Tok::lparen, "(", start};
            case ')': ++pos_; return {Tok::rparen, ")", start};
            case ',': ++pos_; return {Tok::comma, ",", start};
            case '=': ++pos_; return {Tok::equals, "=", start};
            case '!':
            case '<':
            case '>': {
                ++pos_;
                if (pos_ < text_.size() && text_[pos_] == '=') ++pos_;
                return {Tok::comparator, std::string(text_.substr(start, pos_ - start)), start};
            }
            case '\'': return read_string();
            default: break;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return read_word();
        throw PatternError(PatternError::Kind::syntax, start, std::string(1, c),
                           "unexpected character '" + std::string(1, c) + "' at offset " + std::to_string(start));
    }

private:
    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    Token read_string() {
        std::size_t start = pos_++;
        std::string value;
        while (pos_ < text_.size()) {
            char c = text_[pos_++];
            if (c == '\\') {
                if (pos_ >= text_.size()) break;
                char e = text_[pos_++];
                if (e != '\'' && e != '\\') {
                    throw PatternError(PatternError::Kind::syntax, pos_ - 2, "\\" + std::string(1, e),
                                       "invalid escape at offset " + std::to_string(pos_ - 2));
                }
                value.push_back(e);
            } else if (c == '\'') {
                return {Tok::string, value, start};
            } else {
                value.push_back(c);
            }
        }
        throw PatternError(PatternError::Kind::syntax, start, "", "unterminated string starting at offset " +
                                                                      std::to_string(start));
    }

    // Object paths may contain quoted segments after a dot: file:hashes.'SHA-256'
    Token read_word() {
        std::size_t start = pos_;
        while (pos_ < text_.size()) {
            char c = text_[pos_];
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == ':' || c == '.') {
                ++pos_;
            } else if (c == '\'' && pos_ > start && text_[pos_ - 1] == '.') {
                auto close = text_.find('\'', pos_ + 1);
                if (close == std::string_view::npos) {
                    throw PatternError(PatternError::Kind::syntax, pos_, "", "unterminated quoted path segment");
                }
                pos_ = close + 1;
            } else {
                break;
            }
        }
        return {Tok::word, std::string(text_.substr(start, pos_ - start)), start};
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

class Parser {
public:
    explicit Parser(std::string_view text) : lexer_(text) { advance(); }

    ObservableExpr parse() {
        expect(Tok::lbracket, "'['");
        auto expr = disjunct();
        expect(Tok::rbracket, "']'");
        if (cur_.type != Tok::end) {
            if (cur_.type == Tok::word) reject_keyword(cur_);
            fail_syntax("end of pattern");
        }
        return expr;
    }

private:
    void advance() { cur_ = lexer_.next(); }

    [[noreturn]] void fail_syntax(const std::string& expected) {
        std::string got = cur_.type == Tok::end ? "end of input" : "'" + cur_.text + "'";
        throw PatternError(PatternError::Kind::syntax, cur_.offset, cur_.text,
                           "syntax error at offset " + std::to_string(cur_.offset) + ": expected " + expected +
                               ", got " + got);
    }

    [[noreturn]] void fail_unsupported(const Token& t, const std::string& what) {
        throw PatternError(PatternError::Kind::unsupported, t.offset, t.text,
                           "unsupported construct " + what + " '" + t.text + "' at offset " +
                               std::to_string(t.offset));
    }

    void reject_keyword(const Token& t) {
        auto upper = t.text;
        std::transform(upper.begin(), upper.end(), upper.begin(),
                       [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
        if (kUnsupportedKeywords.contains(upper) || upper == "AND" || upper == "OR") {
            fail_unsupported(t, "keyword");
        }
    }

    void expect(Tok type, const std::string& what) {
        if (cur_.type != type) fail_syntax(what);
        advance();
    }

    bool at_keyword(std::string_view kw) const { return cur_.type == Tok::word && cur_.text == kw; }

    ObservableExpr disjunct() {
        std::vector<ObservableExpr> parts;
        parts.push_back(conjunct());
        while (at_keyword("OR")) {
            advance();
            parts.push_back(conjunct());
        }
        return flatten_into(ObservableExpr::Op::any_of, std::move(parts));
    }

    ObservableExpr conjunct() {
        std::vector<ObservableExpr> parts;
        parts.push_back(primary());
        while (at_keyword("AND")) {
            advance();
            parts.push_back(primary());
        }
        return flatten_into(ObservableExpr::Op::all_of, std::move(parts));
    }

    ObservableExpr primary() {
        if (cur_.type == Tok::lparen) {
            advance();
            auto e = disjunct();
            expect(Tok::rparen, "')'");
            return e;
        }
        if (cur_.type != Tok::word) fail_syntax("object path or '('");
        reject_keyword(cur_);
        Token path_tok = cur_;
        auto kind = path_kind(path_tok);
        advance();

        if (cur_.type == Tok::equals) {
            advance();
            return ObservableExpr::leaf(literal(kind));
        }
        if (at_keyword("IN")) {
            advance();
            expect(Tok::lparen, "'(' after IN");
            std::vector<ObservableExpr> values;
            values.push_back(ObservableExpr::leaf(literal(kind)));
            while (cur_.type == Tok::comma) {
                advance();
                values.push_back(ObservableExpr::leaf(literal(kind)));
            }
            expect(Tok::rparen, "')' closing IN list");
            if (values.size() == 1) return std::move(values.front());
            return ObservableExpr::any_of(std::move(values));
        }
        if (cur_.type == Tok::comparator) fail_unsupported(cur_, "comparator");
        if (cur_.type == Tok::word) {
            reject_keyword(cur_);
            fail_unsupported(cur_, "comparator");
        }
        fail_syntax("comparator");
    }

    Observable literal(ObservableKind kind) {
        if (cur_.type != Tok::string) fail_syntax("string literal");
        Token t = cur_;
        advance();
        try {
            return make_observable(kind, t.text);
        } catch (const PatternError& e) {
            throw PatternError(PatternError::Kind::invalid_value, t.offset, t.text,
                               std::string(e.what()) + " at offset " + std::to_string(t.offset));
        }
    }

    ObservableKind path_kind(const Token& t) {
        static const std::pair<std::string_view, ObservableKind> paths[] = {
            {"ipv4-addr:value", ObservableKind::ipv4},
            {"domain-name:value", ObservableKind::domain},
            {"url:value", ObservableKind::url},
            {"file:hashes.MD5", ObservableKind::md5},
            {"file:hashes.'MD5'", ObservableKind::md5},
            {"file:hashes.'SHA-256'", ObservableKind::sha256},
            {"file:hashes.SHA256", ObservableKind::sha256},
        };
        for (const auto& [p, k] : paths)
            if (t.text == p) return k;
        if (t.text.find(':') == std::string::npos) fail_syntax("object path");
        fail_unsupported(t, "object path");
    }

    Lexer lexer_;
    Token cur_{Tok::end, "", 0};
};

}  // namespace

ObservableExpr parse_pattern(std::string_view pattern_text) {
    return Parser(pattern_text).parse();
}

// ============================================================================
// Rendering
// ============================================================================

std::string quote_stix_string(std::string_view value) {
    std::string out = "'";
    for (char c : value) {
        if (c == '\'' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    out.push_back('\'');
    return out;
}

namespace {

void render_into(const ObservableExpr& e, std::string& out) {
    if (e.is_leaf()) {
        const auto& o = e.observable();
        out += object_path(o.kind);
        out += " = ";
        out += quote_stix_string(o.value);
        return;
    }
    std::string_view sep = e.op() == ObservableExpr::Op::all_of ? " AND " : " OR ";
    bool first = true;
    for (const auto& c : e.children()) {
        if (!first) out += sep;
        first = false;
        if (c.is_leaf()) {
            render_into(c, out);
        } else {
            out.push_back('(');
            render_into(c, out);
            out.push_back(')');
        }
    }
}

}  // namespace

std::string render_pattern(const ObservableExpr& expr) {
    std::string out = "[";
    render_into(expr, out);
    out.push_back(']');
    return out;
}

}  // namespace ctimp::ingest
