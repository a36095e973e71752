#include <doctest.h>

#include "../support/oracles.hpp"
#include "../support/workspace.hpp"
#include "ctimp/detection.hpp"
#include "ctimp/platform.hpp"

using namespace ctimp;
using namespace ctimp::detect;
using ctimp::testenv::fixture;
using ctimp::testenv::slurp;

namespace {

DetectionPack fixture_pack() {
    return parse_detection_pack(slurp(fixture("detect/default.rules")));
}

LogEvent event_at(std::int64_t s, std::string msg = "m", std::optional<std::string> program = "sshd") {
    return LogEvent{from_unix_seconds(s), "host", std::move(program), std::move(msg)};
}

DecodedEvent decoded(std::int64_t s, Fields f, std::string decoder = "x") {
    DecodedEvent e;
    e.base = event_at(s);
    e.decoder = std::move(decoder);
    e.fields = std::move(f);
    return e;
}

std::vector<oracle::MatchRow> rows(const std::vector<std::vector<RuleMatch>>& per_event) {
    std::vector<oracle::MatchRow> out;
    for (std::size_t i = 0; i < per_event.size(); ++i)
        for (const auto& m : per_event[i]) out.push_back({i, m.rule_id, m.count, m.key});
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Log lines and decoders
// ---------------------------------------------------------------------------

TEST_CASE("log line formats") {
    auto a = parse_log_line("2024-03-05T10:00:00Z web1 sshd[5943]: Failed password for x");
    REQUIRE(a);
    CHECK(a->source_host == "web1");
    CHECK(a->program == "sshd");
    CHECK(a->message == "Failed password for x");
    CHECK(a->received_at == parse_rfc3339("2024-03-05T10:00:00Z").value());

    auto b = parse_log_line("Mar  5 10:00:00 fw1 kernel: [UFW BLOCK] IN=eth0", 2024);
    REQUIRE(b);
    CHECK(b->program == "kernel");
    CHECK(b->received_at == parse_rfc3339("2024-03-05T10:00:00Z").value());

    auto c = parse_log_line("2024-03-05T10:00:00Z web1 free text without program");
    REQUIRE(c);
    CHECK_FALSE(c->program);

    CHECK_FALSE(parse_log_line(""));
    CHECK_FALSE(parse_log_line("   "));
    CHECK_FALSE(parse_log_line("garbage"));
}

TEST_CASE("failed password line decodes to user, srcip and port") {
    DecoderSet set(fixture_pack().decoders);
    auto ev = parse_log_line("2024-03-05T10:00:00Z web1 sshd[1]: Failed password for root from 203.0.113.9 port 4242 ssh2");
    REQUIRE(ev);
    auto d = decode(*ev, set);
    CHECK(d.decoder == "sshd-failed-password");
    CHECK(d.fields == Fields{{"user", "root"}, {"srcip", "203.0.113.9"}, {"port", "4242"}});
}

TEST_CASE("message matching no decoder is unmatched with no fields") {
    DecoderSet set(fixture_pack().decoders);
    auto d = decode(event_at(0, "session opened for user root", "CRON"), set);
    CHECK(d.decoder == "unmatched");
    CHECK(d.fields.empty());
    // A parent that matched but captured nothing also decodes as unmatched.
    auto s = decode(event_at(0, "Connection closed by 1.2.3.4", "sshd"), set);
    CHECK(s.decoder == "unmatched");
}

TEST_CASE("fixture decoders on other log families") {
    DecoderSet set(fixture_pack().decoders);
    auto web = decode(*parse_log_line("2024-03-05T10:00:00Z web1 nginx: 192.0.2.99 - - [05/Mar/2024:10:00:00 +0000] "
                                      "\"GET /admin.php HTTP/1.1\" 404 153 \"-\" \"curl\""),
                      set);
    CHECK(web.decoder == "web-access");
    CHECK(web.fields == Fields{{"srcip", "192.0.2.99"}, {"user", "-"}, {"url", "/admin.php"}, {"status", "404"}});
    auto fw = decode(*parse_log_line("2024-03-05T10:00:00Z fw1 kernel: [UFW BLOCK] IN=eth0 SRC=192.0.2.1 "
                                     "DST=203.0.113.1 LEN=60 PROTO=TCP SPT=1 DPT=22"),
                     set);
    CHECK(fw.decoder == "netfilter");
    CHECK(fw.fields == Fields{{"srcip", "192.0.2.1"}, {"dstip", "203.0.113.1"}, {"port", "22"}});
    auto dns = decode(*parse_log_line("2024-03-05T10:00:00Z web1 dnsmasq[9]: query[A] example.net from 10.0.0.5"), set);
    CHECK(dns.decoder == "dnsmasq");
    CHECK(dns.fields == Fields{{"query", "example.net"}, {"srcip", "10.0.0.5"}});
}

TEST_CASE("root decoders tie-break on order then name") {
    std::vector<Decoder> ds = {
        {"zeta", {}, {}, {}, R"((?<user>\w+))", 1},
        {"alpha", {}, {}, {}, R"((?<srcip>\w+))", 1},
        {"late", {}, {}, {}, R"((?<query>\w+))", 0},
    };
    CHECK(decode(event_at(0, "word"), DecoderSet(ds)).decoder == "late");
    ds.pop_back();
    CHECK(decode(event_at(0, "word"), DecoderSet(ds)).decoder == "alpha");
}

TEST_CASE("child captures override parent captures") {
    std::vector<Decoder> ds = {
        {"p", {}, {}, R"(^start)", R"(^ (?<user>\w+))", 0},
        {"c", std::string("p"), {}, R"(^ \w+ then)", R"(^ (?<user>\w+) (?<srcip>\S+))", 0},
    };
    auto d = decode(event_at(0, "start alice then bob 1.2.3.4"), DecoderSet(ds));
    CHECK(d.decoder == "c");
    CHECK(d.fields == Fields{{"user", "bob"}, {"srcip", "1.2.3.4"}});
    auto parent_only = decode(event_at(0, "start carol"), DecoderSet(ds));
    CHECK(parent_only.decoder == "p");
    CHECK(parent_only.fields == Fields{{"user", "carol"}});
}

TEST_CASE("decoder set validation") {
    CHECK_THROWS_AS(DecoderSet({{"a", {}, {}, {}, R"((?<password>\w+))", 0}}), Error);
    CHECK_THROWS_AS(DecoderSet({{"a", std::string("b"), {}, {}, {}, 0}}), Error);
    CHECK_THROWS_AS(DecoderSet({{"a", std::string("b"), {}, {}, {}, 0}, {"b", std::string("a"), {}, {}, {}, 0}}), Error);
    CHECK_THROWS_AS(DecoderSet({{"a", {}, {}, {}, {}, 0}, {"a", {}, {}, {}, {}, 0}}), Error);
    CHECK_THROWS_AS(DecoderSet({{"a", {}, std::string("("), {}, {}, 0}}), Error);
}

// ---------------------------------------------------------------------------
// Conditions
// ---------------------------------------------------------------------------

TEST_CASE("condition syntax") {
    auto c = parse_condition(R"(user == "root" and (url contains "/admin" or not status in ["500", "502"]))");
    CHECK(c.evaluate({{"user", "root"}, {"url", "/x"}, {"status", "200"}}));
    CHECK_FALSE(c.evaluate({{"user", "root"}, {"url", "/x"}, {"status", "500"}}));
    CHECK(c.evaluate({{"user", "root"}, {"url", "/admin/x"}, {"status", "500"}}));
    CHECK_FALSE(c.evaluate({{"url", "/admin/x"}}));
    CHECK(parse_condition(c.str()) == c);
    CHECK(parse_condition("").kind == Condition::Kind::always);
    CHECK_THROWS_AS(parse_condition("user =="), Error);
    CHECK_THROWS_AS(parse_condition("user == \"x"), Error);
    CHECK_THROWS_AS(parse_condition("user ~ \"x\""), Error);
    CHECK_THROWS_AS(parse_condition("(user == \"x\""), Error);
}

TEST_CASE("missing field makes the comparison false, even under negation of a conjunction") {
    auto c = parse_condition(R"(not user == "root")");
    CHECK(c.evaluate({}));
    CHECK_FALSE(parse_condition(R"(user == "root")").evaluate({}));
    CHECK_FALSE(parse_condition(R"(user contains "")").evaluate({}));
    CHECK(parse_condition(R"(user contains "")").evaluate({{"user", ""}}));
}

TEST_CASE("property: condition evaluation equals the oracle; str() round-trips") {
    testgen::Rng r(606);
    for (int i = 0; i < 500; ++i) {
        auto c = testgen::gen_condition(r, 4);
        auto reparsed = parse_condition(c.str());
        for (int k = 0; k < 20; ++k) {
            auto f = testgen::gen_fields(r);
            bool want = oracle::eval_condition(c, f);
            CHECK(c.evaluate(f) == want);
            CHECK(reparsed.evaluate(f) == want);
        }
    }
}

// ---------------------------------------------------------------------------
// Rules
// ---------------------------------------------------------------------------

TEST_CASE("native pack parses and orders parents first") {
    auto pack = fixture_pack();
    CHECK(pack.decoders.size() == 7);
    CHECK(pack.rules.size() == 6);
    auto ordered = order_rules(pack.rules);
    auto pos = [&](const std::string& id) {
        return std::find_if(ordered.begin(), ordered.end(), [&](const DetectionRule& r) { return r.rule_id == id; }) -
               ordered.begin();
    };
    CHECK(pos("sshd-auth-failure") < pos("sshd-bruteforce"));
    const auto& brute = ordered[static_cast<std::size_t>(pos("sshd-bruteforce"))];
    REQUIRE(brute.frequency);
    CHECK(*brute.frequency == Frequency{5, 60, "srcip"});
}

TEST_CASE("pack and rule validation errors") {
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nlevel = 16\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nparent = b\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nfrequency = 1\ntimeframe = 60\nkey = srcip\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nfrequency = 3\nkey = srcip\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nfrequency = 3\ntimeframe = 60\nkey = mood\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\ncondition = mood == \"x\"\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\n[rule a]\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nparent = b\n[rule b]\nparent = a\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("level = 3\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[thing a]\n"), Error);
    CHECK_THROWS_AS(parse_detection_pack("[rule a]\nlevel = high\n"), Error);
}

TEST_CASE("golden sigma rule matches dstip or srcip 198.51.100.7") {
    auto rules = load_sigma_rules({slurp(fixture("../tests/golden/ipv4_rule.yml"))});
    REQUIRE(rules.size() == 1);
    const auto& rule = rules[0];
    CHECK(rule.origin == RuleOrigin::sigma);
    CHECK(rule.threat_type == "sigma:network_connection");
    CHECK(rule.threat_group == "cti-match");
    CHECK(rule.level == 10);
    CHECK(base_conditions_hold(rule, decoded(0, {{"dstip", "198.51.100.7"}})));
    CHECK(base_conditions_hold(rule, decoded(0, {{"srcip", "198.51.100.7"}, {"dstip", "10.0.0.1"}})));
    CHECK_FALSE(base_conditions_hold(rule, decoded(0, {{"srcip", "198.51.100.8"}})));
    CHECK_FALSE(base_conditions_hold(rule, decoded(0, {{"query", "198.51.100.7"}})));
}

TEST_CASE("undefined selection is a load error naming rule and selection") {
    std::string doc = R"(title: t
id: r-1
logsource:
  category: dns
detection:
  sel_a:
    query:
      - a.example
  condition: sel_a and sel_b
)";
    try {
        load_sigma_rules({doc});
        FAIL("accepted");
    } catch (const SigmaLoadError& e) {
        CHECK(e.rule() == "r-1");
        CHECK(std::string(e.what()).find("sel_b") != std::string::npos);
    }
    CHECK(load_sigma_rules({}).empty());
    CHECK_THROWS_AS(load_sigma_rules({"id: x\n"}), SigmaLoadError);
    CHECK_THROWS_AS(load_sigma_rules({"::: not yaml :::\n  - ["}), SigmaLoadError);
}

TEST_CASE("sigma condition keywords") {
    auto make = [](const std::string& cond) {
        sigma::SigmaRule r;
        r.rule_id = "r";
        r.title = "t";
        r.logsource.category = "dns";
        r.selections = {{"a", {{"query", {"a.example"}}}}, {"b", {{"query", {"b.example"}}}}};
        r.condition = cond;
        return to_detection_rule(r);
    };
    auto q = [](const std::string& v) { return decoded(0, {{"query", v}}); };
    CHECK(base_conditions_hold(make("a"), q("a.example")));
    CHECK(base_conditions_hold(make("a or b"), q("b.example")));
    CHECK_FALSE(base_conditions_hold(make("a and b"), q("a.example")));
    CHECK(base_conditions_hold(make("not a"), q("c.example")));
    CHECK_FALSE(base_conditions_hold(make("not a"), decoded(0, {{"srcip", "1.2.3.4"}})));
}

TEST_CASE("evaluation examples") {
    DetectionState st;
    auto src_rule = load_sigma_rules({R"(title: t
id: r-src
logsource:
  category: network_connection
detection:
  sel_src:
    source_ip:
      - 203.0.113.9
  condition: sel_src
)"});
    auto ms = evaluate(decoded(0, {{"srcip", "203.0.113.9"}}), order_rules(src_rule), st);
    REQUIRE(ms.size() == 1);
    CHECK(ms[0].rule_id == "r-src");
    CHECK(ms[0].key == Fields{{"srcip", "203.0.113.9"}});

    DetectionRule gated;
    gated.rule_id = "gated";
    gated.required_decoder = "sshd";
    CHECK(evaluate(decoded(0, {{"srcip", "1.2.3.4"}}, "unmatched"), {gated}, st).empty());
    CHECK(evaluate(decoded(0, {{"srcip", "1.2.3.4"}}, "sshd"), {gated}, st).size() == 1);
}

TEST_CASE("frequency boundary: four hits nothing, fifth fires with count five") {
    DetectionRule f;
    f.rule_id = "f";
    f.frequency = Frequency{5, 60, "srcip"};
    std::vector<DetectionRule> rules{f};
    DetectionState st;
    for (int i = 0; i < 4; ++i) CHECK(evaluate(decoded(i * 10, {{"srcip", "a"}}), rules, st).empty());
    auto fifth = evaluate(decoded(59, {{"srcip", "a"}}), rules, st);
    REQUIRE(fifth.size() == 1);
    CHECK(fifth[0].count == 5);
    // The window reset after firing.
    CHECK(evaluate(decoded(60, {{"srcip", "a"}}), rules, st).empty());
}

TEST_CASE("frequency window is inclusive at exactly the window length") {
    DetectionRule f;
    f.rule_id = "f";
    f.frequency = Frequency{2, 60, "srcip"};
    DetectionState st;
    CHECK(evaluate(decoded(0, {{"srcip", "a"}}), {f}, st).empty());
    CHECK(evaluate(decoded(60, {{"srcip", "a"}}), {f}, st).size() == 1);
    CHECK(evaluate(decoded(200, {{"srcip", "a"}}), {f}, st).empty());
    CHECK(evaluate(decoded(261, {{"srcip", "a"}}), {f}, st).empty());
    // Different keys never share a window.
    CHECK(evaluate(decoded(262, {{"srcip", "b"}}), {f}, st).empty());
}

TEST_CASE("engine reload keeps windows only for surviving rules") {
    auto pack = fixture_pack();
    DetectionEngine engine(DecoderSet(pack.decoders), pack.rules);
    auto line = [](int s) {
        return *parse_log_line("2024-03-05T10:00:" + std::string(s < 10 ? "0" : "") + std::to_string(s) +
                               "Z web1 sshd[1]: Failed password for root from 192.0.2.1 port 1 ssh2");
    };
    for (int i = 0; i < 4; ++i) engine.process(line(i));
    engine.reload(pack.rules, 7);
    CHECK(engine.version() == 7);
    auto fifth = engine.process(line(5));
    CHECK(std::count_if(fifth.begin(), fifth.end(), [](const RuleMatch& m) { return m.rule_id == "sshd-bruteforce"; }) == 1);

    for (int i = 10; i < 14; ++i) engine.process(line(i));
    auto without = pack.rules;
    std::erase_if(without, [](const DetectionRule& r) { return r.rule_id == "sshd-bruteforce"; });
    engine.reload(without, 8);
    engine.reload(pack.rules, 9);
    auto after = engine.process(line(15));
    CHECK(std::none_of(after.begin(), after.end(), [](const RuleMatch& m) { return m.rule_id == "sshd-bruteforce"; }));
}

// ---------------------------------------------------------------------------
// Reference evaluator equivalence
// ---------------------------------------------------------------------------

TEST_CASE("property: evaluate equals the naive reference evaluator without frequency") {
    testgen::Rng r(707);
    static const std::vector<std::string> decoders = {"a", "b", "unmatched"};
    for (int round = 0; round < 100; ++round) {
        std::vector<DetectionRule> rules;
        for (int i = r.uniform(0, 20); i > 0; --i) {
            DetectionRule d;
            d.rule_id = "r" + std::to_string(rules.size());
            d.level = r.uniform(0, 15);
            d.conditions = r.chance(0.2) ? Condition::always() : testgen::gen_condition(r, 3);
            if (r.chance(0.4)) d.required_decoder = r.pick(decoders);
            if (r.chance(0.15)) d.required_any_field = {"srcip", "dstip"};
            if (!rules.empty() && r.chance(0.3)) d.parent_rule = rules[static_cast<std::size_t>(r.uniform(0, static_cast<int>(rules.size()) - 1))].rule_id;
            rules.push_back(std::move(d));
        }
        std::shuffle(rules.begin(), rules.end(), r.engine());
        auto ordered = order_rules(rules);
        std::vector<DecodedEvent> events;
        for (int i = r.uniform(0, 200); i > 0; --i) events.push_back(decoded(i, testgen::gen_fields(r), r.pick(decoders)));
        DetectionState st;
        std::vector<std::vector<RuleMatch>> got;
        for (const auto& e : events) got.push_back(evaluate(e, ordered, st));
        CHECK(rows(got) == oracle::reference_matches(events, rules));
    }
}

TEST_CASE("property: frequency counting equals a brute-force sliding window") {
    testgen::Rng r(808);
    for (int round = 0; round < 200; ++round) {
        std::vector<DetectionRule> rules;
        DetectionRule base;
        base.rule_id = "base";
        base.conditions = r.chance(0.5) ? Condition::always() : parse_condition(R"(port in ["22", "80"])");
        rules.push_back(base);
        for (int i = r.uniform(1, 3); i > 0; --i) {
            DetectionRule f;
            f.rule_id = "freq" + std::to_string(i);
            f.frequency = Frequency{r.uniform(2, 6), r.uniform(1, 60), r.chance(0.5) ? "srcip" : "user"};
            if (r.chance(0.5)) f.parent_rule = "base";
            rules.push_back(f);
        }
        std::vector<DecodedEvent> events;
        std::int64_t t = 0;
        for (int i = r.uniform(0, 200); i > 0; --i) {
            t += r.uniform(0, 20);
            Fields fl;
            if (r.chance(0.9)) fl["srcip"] = r.pick(std::vector<std::string>{"s1", "s2", "s3"});
            if (r.chance(0.7)) fl["user"] = r.pick(std::vector<std::string>{"u1", "u2"});
            if (r.chance(0.8)) fl["port"] = r.pick(std::vector<std::string>{"22", "80", "443"});
            events.push_back(decoded(t, fl));
        }
        auto ordered = order_rules(rules);
        DetectionState st;
        std::vector<std::vector<RuleMatch>> got;
        for (const auto& e : events) got.push_back(evaluate(e, ordered, st));
        auto want = oracle::reference_matches(events, rules);
        REQUIRE(rows(got) == want);
        for (const auto& row : want) {
            for (const auto& rule : rules)
                if (rule.rule_id == row.rule_id && rule.frequency) CHECK(row.count >= rule.frequency->count);
        }
    }
}
