#include <doctest.h>

#include "../support/gen.hpp"
#include "ctimp/stix_pattern.hpp"

#include <functional>

using namespace ctimp;
using namespace ctimp::ingest;
using testgen::RawExpr;
using testgen::Rng;

namespace {

/// Test-side canonicalization of one raw leaf value.
std::string canon_leaf(ObservableKind k, std::string v) {
    if (k == ObservableKind::domain || k == ObservableKind::md5 || k == ObservableKind::sha256) v = to_lower(v);
    if (k == ObservableKind::domain && !v.empty() && v.back() == '.') v.pop_back();
    return v;
}

/// Evaluates a raw tree under a predicate on (kind, canonical value).
bool eval_raw(const RawExpr& e, const std::function<bool(ObservableKind, const std::string&)>& pred) {
    if (e.op == RawExpr::Op::leaf) return pred(e.kind, canon_leaf(e.kind, e.value));
    bool all = e.op == RawExpr::Op::all_of;
    for (const auto& c : e.children) {
        bool v = eval_raw(c, pred);
        if (all && !v) return false;
        if (!all && v) return true;
    }
    return all;
}

bool flattened(const ObservableExpr& e) {
    for (const auto& c : e.children()) {
        if (!c.is_leaf() && c.op() == e.op()) return false;
        if (!c.is_leaf() && c.children().size() < 2) return false;
        if (!flattened(c)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("domain value is lowercased and loses its trailing dot") {
    auto e = parse_pattern("[domain-name:value = 'EVIL.example.']");
    REQUIRE(e.is_leaf());
    CHECK(e.observable().kind == ObservableKind::domain);
    CHECK(e.observable().value == "evil.example");
    CHECK(e.observable().object_path == "domain-name:value");
}

TEST_CASE("two ipv4 comparisons joined by OR") {
    auto e = parse_pattern("[ipv4-addr:value = '1.2.3.4' OR ipv4-addr:value = '5.6.7.8']");
    REQUIRE(e.op() == ObservableExpr::Op::any_of);
    REQUIRE(e.children().size() == 2);
    CHECK(e.children()[0] == ObservableExpr::leaf(make_observable(ObservableKind::ipv4, "1.2.3.4")));
    CHECK(e.children()[1] == ObservableExpr::leaf(make_observable(ObservableKind::ipv4, "5.6.7.8")));
}

TEST_CASE("md5 of the empty string") {
    auto e = parse_pattern("[file:hashes.MD5 = 'd41d8cd98f00b204e9800998ecf8427e']");
    REQUIRE(e.is_leaf());
    CHECK(e.observable().kind == ObservableKind::md5);
    CHECK(e.observable().value == "d41d8cd98f00b204e9800998ecf8427e");
}

TEST_CASE("IN desugars to OR of leaves") {
    auto in = parse_pattern("[ipv4-addr:value IN ('1.2.3.4', '5.6.7.8')]");
    auto orr = parse_pattern("[ipv4-addr:value = '1.2.3.4' OR ipv4-addr:value = '5.6.7.8']");
    CHECK(in == orr);
}

TEST_CASE("AND binds tighter than OR") {
    auto e = parse_pattern("[ipv4-addr:value = '1.1.1.1' OR ipv4-addr:value = '2.2.2.2' AND domain-name:value = 'a.b']");
    REQUIRE(e.op() == ObservableExpr::Op::any_of);
    REQUIRE(e.children().size() == 2);
    CHECK(e.children()[0].is_leaf());
    CHECK(e.children()[1].op() == ObservableExpr::Op::all_of);
}

TEST_CASE("nested same-operator groups flatten") {
    auto e = parse_pattern(
        "[(ipv4-addr:value = '1.1.1.1' AND ipv4-addr:value = '2.2.2.2') AND ipv4-addr:value = '3.3.3.3']");
    REQUIRE(e.op() == ObservableExpr::Op::all_of);
    CHECK(e.children().size() == 3);
}

TEST_CASE("sha-256 path and hash validation") {
    std::string h(64, 'A');
    auto e = parse_pattern("[file:hashes.'SHA-256' = '" + h + "']");
    CHECK(e.observable().kind == ObservableKind::sha256);
    CHECK(e.observable().value == std::string(64, 'a'));
    CHECK_THROWS_AS(parse_pattern("[file:hashes.MD5 = 'abc']"), PatternError);
    CHECK_THROWS_AS(parse_pattern("[file:hashes.MD5 = '" + std::string(32, 'g') + "']"), PatternError);
    CHECK_THROWS_AS(parse_pattern("[ipv4-addr:value = '1.2.3.256']"), PatternError);
}

TEST_CASE("unsupported constructs are named") {
    auto check_unsupported = [](const std::string& p, const std::string& construct) {
        try {
            parse_pattern(p);
            FAIL("accepted: " << p);
        } catch (const PatternError& e) {
            CHECK(e.kind() == PatternError::Kind::unsupported);
            CHECK_MESSAGE(e.construct() == construct, p);
        }
    };
    check_unsupported("[domain-name:value MATCHES '^evil']", "MATCHES");
    check_unsupported("[ipv4-addr:value != '1.2.3.4']", "!=");
    check_unsupported("[email-addr:value = 'a@b.c']", "email-addr:value");
    check_unsupported("[ipv4-addr:value = '1.2.3.4'] AND [ipv4-addr:value = '5.6.7.8']", "AND");
    check_unsupported("[ipv4-addr:value = '1.2.3.4'] WITHIN 5 SECONDS", "WITHIN");
}

TEST_CASE("syntax errors carry a byte offset") {
    try {
        parse_pattern("[ipv4-addr:value = '1.2.3.4'");
        FAIL("accepted");
    } catch (const PatternError& e) {
        CHECK(e.kind() == PatternError::Kind::syntax);
        CHECK(e.offset() == 28);
    }
    CHECK_THROWS_AS(parse_pattern(""), PatternError);
    CHECK_THROWS_AS(parse_pattern("[]"), PatternError);
    CHECK_THROWS_AS(parse_pattern("[ipv4-addr:value = 'unterminated]"), PatternError);
}

TEST_CASE("quoted values keep escapes") {
    auto e = parse_pattern(R"([url:value = 'http://x.example/it\'s'])");
    CHECK(e.observable().value == "http://x.example/it's");
    CHECK(parse_pattern(render_pattern(e)) == e);
    CHECK(quote_stix_string(R"(a'b\c)") == R"('a\'b\\c')");
}

TEST_CASE("property: parse is faithful to the generated tree") {
    Rng r(101);
    for (int i = 0; i < 400; ++i) {
        auto raw = testgen::gen_raw_expr(r, 4);
        auto text = testgen::render_raw_pattern(raw, &r);
        auto e = parse_pattern(text);
        CHECK(flattened(e));
        CHECK(e.depth() <= raw.depth());
        // Agreement under random leaf valuations.
        for (int k = 0; k < 8; ++k) {
            std::uint64_t salt = r.next();
            auto pred = [salt](ObservableKind kind, const std::string& v) {
                return ((std::hash<std::string>{}(v) ^ salt ^ static_cast<std::uint64_t>(kind)) & 1) != 0;
            };
            bool want = eval_raw(raw, pred);
            bool got = e.evaluate([&](const Observable& o) { return pred(o.kind, o.value); });
            REQUIRE_MESSAGE(want == got, text);
        }
    }
}

TEST_CASE("property: render then parse is the identity on canonical forms") {
    Rng r(202);
    for (int i = 0; i < 400; ++i) {
        auto e = parse_pattern(testgen::render_raw_pattern(testgen::gen_raw_expr(r, 4), &r));
        CHECK(canonical(e) == e);
        auto text = render_pattern(e);
        REQUIRE(parse_pattern(text) == e);
        CHECK(render_pattern(parse_pattern(text)) == text);
    }
}

TEST_CASE("property: canonical values contain no uppercase") {
    Rng r(303);
    for (int i = 0; i < 400; ++i) {
        auto e = parse_pattern(testgen::render_raw_pattern(testgen::gen_raw_expr(r, 3), &r));
        for (const auto& leaf : e.leaves()) {
            if (leaf.kind == ObservableKind::url) continue;  // URLs are kept verbatim
            CHECK_MESSAGE(leaf.value == to_lower(leaf.value), leaf.value);
            if (leaf.kind == ObservableKind::domain) CHECK(leaf.value.back() != '.');
        }
    }
}

TEST_CASE("property: parse is total over arbitrary input") {
    // Every input either parses or raises PatternError; nothing else escapes.
    static const std::vector<std::string> tokens = {"[",  "]",  "(",  ")",  "'",  "\\", " ",  "=",  "IN", "AND",
                                                    "OR", ",",  "ipv4-addr:value",    "domain-name:value", "'1.2.3.4'",
                                                    "url:value", "file:hashes.MD5", "file:hashes.'SHA-256'", "'x'", "MATCHES",
                                                    "\x01", "\xff", "LIKE", "NOT", "99"};
    Rng r(404);
    int parsed = 0;
    for (int i = 0; i < 5000; ++i) {
        std::string s;
        int n = r.uniform(0, 12);
        for (int k = 0; k < n; ++k) s += r.pick(tokens) + (r.chance(0.5) ? " " : "");
        try {
            auto e = parse_pattern(s);
            ++parsed;
            CHECK(parse_pattern(render_pattern(e)) == e);
        } catch (const PatternError&) {
        } catch (const std::exception& ex) {
            FAIL("unexpected exception type for '" << s << "': " << ex.what());
        }
    }
    MESSAGE("random inputs that parsed: " << parsed);
}
