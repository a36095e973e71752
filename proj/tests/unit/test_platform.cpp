#include <doctest.h>

#include "../support/oracles.hpp"
#include "../support/workspace.hpp"
#include "ctimp/platform.hpp"

#include <fstream>

using namespace ctimp;
using namespace ctimp::platform;
using ctimp::testenv::fixture;
using ctimp::testenv::slurp;
using ctimp::testenv::Workspace;

namespace {

const Timestamp kNow = from_unix_seconds(testgen::kNowSeconds);

Platform::Options fake_exec(std::shared_ptr<selfheal::FakeExecutor> exec = std::make_shared<selfheal::FakeExecutor>()) {
    Platform::Options o;
    o.executor = std::move(exec);
    return o;
}

}  // namespace

TEST_CASE("configuration loading and validation") {
    Workspace ws("cfg");
    auto c = ws.load();
    CHECK(c.feeds.size() == 2);
    CHECK(c.data_dir == ws.root() / "data");
    CHECK(c.asset_map_path == ws.root() / "map.json");
    CHECK(c.selfheal.nodes.at("fw1").address == "203.0.113.1");
    CHECK(c.api.tokens.size() == 2);
    CHECK(c.detect.suppression == std::chrono::seconds{300});

    ws.config()["surprise"] = 1;
    ws.write_config();
    CHECK_THROWS_AS(ws.load(), Error);
    ws.config().erase("surprise");
    ws.config()["feeds"][0]["trust_tier"] = 9;
    ws.write_config();
    CHECK_THROWS_AS(ws.load(), Error);
    ws.config()["feeds"][0]["trust_tier"] = 4;
    ws.config()["fault_injection"] = {{"swap_delay_ms", 5}};
    ws.write_config();
    CHECK(ws.load().fault_swap_delay == std::chrono::milliseconds{5});

    CHECK(resolve_config_path(std::string("/x.json")) == std::filesystem::path("/x.json"));
}

TEST_CASE("one pipeline cycle over the fixture deployment") {
    Workspace ws("cycle");
    Platform p(ws.load(), fake_exec());
    auto rep = p.run_pipeline_cycle(kNow);
    CHECK(rep.feeds_fetched == 2);
    CHECK(rep.feed_failures.empty());
    CHECK(rep.tailored == 5);
    CHECK(rep.rules_written == 6);
    CHECK(rep.compile_diagnostics == 1);
    CHECK(rep.parse_diagnostics == 3);
    CHECK(rep.rules_swapped);
    CHECK(rep.rules_generation == 1);
    CHECK(rep.map_revision == 1);
    CHECK(std::filesystem::exists(ws.root() / "data" / "tailored" / "tailored-1-20240601T000000Z.json"));
    CHECK(p.rules_generation() == 1);
    CHECK(p.rule_manifest().size() == 6);
    // Native rules plus the compiled ones.
    CHECK(p.detection().rules()->size() == 12);

    auto again = p.run_pipeline_cycle(kNow);
    CHECK_FALSE(again.rules_swapped);
    CHECK(again.merge.added == 0);
    CHECK(again.rules_generation == 1);

    auto feeds = p.feeds();
    REQUIRE(feeds.size() == 2);
    CHECK(feeds[0].second.last_sync == kNow);
    CHECK_FALSE(feeds[0].second.last_error);
}

TEST_CASE("a failing feed degrades the cycle without aborting it") {
    Workspace ws("degraded");
    ws.config()["feeds"][1]["location"] = "feeds/b/missing.json";
    ws.write_config();
    Platform p(ws.load(), fake_exec());
    auto rep = p.run_pipeline_cycle(kNow);
    REQUIRE(rep.feed_failures.size() == 1);
    CHECK(rep.feed_failures[0].first == "b");
    CHECK(rep.feeds_fetched == 1);
    CHECK(rep.rules_swapped);
    CHECK(p.feeds()[1].second.last_error);
}

TEST_CASE("no feeds yields an empty bundle and an empty rule set") {
    Workspace ws("nofeeds");
    ws.config()["feeds"] = nlohmann::json::array();
    ws.write_config();
    Platform p(ws.load(), fake_exec());
    auto rep = p.run_pipeline_cycle(kNow);
    CHECK(rep.tailored == 0);
    CHECK(rep.rules_written == 0);
    CHECK(p.rule_manifest().empty());
    CHECK(p.detection().rules()->size() == 6);
}

TEST_CASE("state survives a restart") {
    Workspace ws("restart");
    std::string alert_id;
    {
        Platform p(ws.load(), fake_exec());
        p.run_pipeline_cycle(kNow);
        alert_id = p.simulate_alert("ssh-auth-failure", "authentication", {{"srcip", "192.0.2.1"}}, kNow).records.at(0).alert_id;
    }
    Platform p(ws.load(), fake_exec());
    CHECK(p.rules_generation() == 1);
    CHECK(p.indicators().size() > 0);
    CHECK(p.alert_store().get(alert_id));
    CHECK(p.selfheal().list().size() == 1);
}

TEST_CASE("replay of the fixture log equals the reference pipeline") {
    Workspace ws("replay");
    auto exec = std::make_shared<selfheal::FakeExecutor>();
    Platform p(ws.load(), fake_exec(exec));
    std::ifstream in(fixture("auth.log"));
    auto rep = p.replay(in);
    CHECK(rep.lines == 200);
    CHECK(rep.parsed == 200);

    // Reference: library decoding (infrastructure), oracle evaluation and grouping.
    auto pack = load_packs({fixture("detect/default.rules")});
    detect::DecoderSet decoders(pack.decoders);
    std::vector<detect::DecodedEvent> events;
    std::ifstream again(fixture("auth.log"));
    for (std::string line; std::getline(again, line);) events.push_back(detect::decode(*detect::parse_log_line(line), decoders));
    auto matches = oracle::reference_matches(events, pack.rules);
    std::vector<std::pair<Timestamp, oracle::MatchRow>> stream;
    for (const auto& m : matches) stream.push_back({events[m.event_index].base.received_at, m});
    std::stable_sort(stream.begin(), stream.end(), [](const auto& a, const auto& b) { return a.second.event_index < b.second.event_index; });
    auto alerts = oracle::reference_alerts(stream, std::chrono::seconds{300});

    CHECK(rep.matches == matches.size());
    CHECK(rep.alerts_created == alerts.size());
    CHECK(rep.alerts_created + rep.alerts_suppressed == rep.matches);
    CHECK(p.alert_store().size() == alerts.size());
    // One command per alert whose type or group has a policy (single-target policies).
    auto store = selfheal::load_policy_store(slurp(fixture("policies.json")));
    std::size_t with_policy = 0;
    for (const auto& a : p.alert_store().list())
        with_policy += oracle::decide(store.policies(), a.threat_type, a.threat_group).first.has_value();
    CHECK(rep.commands == with_policy);
    CHECK(rep.matches > 0);

    // By hand: 203.0.113.45 fails ten times 8 s apart, so the 5/60 window fills
    // twice; 198.18.0.5 is 40 s apart and 192.0.2.10 has only four attempts.
    std::size_t brute = 0;
    for (const auto& m : matches) brute += m.rule_id == "sshd-bruteforce";
    CHECK(brute == 2);
}

TEST_CASE("simulated alerts go through decision and execution") {
    Workspace ws("simulate");
    auto exec = std::make_shared<selfheal::FakeExecutor>();
    Platform p(ws.load(), fake_exec(exec));
    auto res = p.simulate_alert("ssh-bruteforce", "authentication", {{"srcip", "192.0.2.66"}}, kNow);
    REQUIRE(res.records.size() == 1);
    CHECK(res.outcome.matched_by == selfheal::MatchedBy::type);
    CHECK(res.records[0].state == selfheal::CommandState::executed);
    CHECK(res.records[0].rendered_cli == "iptables -I INPUT -s 192.0.2.66 -j DROP");
    REQUIRE(exec->call_count() == 1);
    CHECK(exec->calls()[0].address == "203.0.113.1");

    // Two identical simulations are separate alerts.
    p.simulate_alert("ssh-bruteforce", "authentication", {{"srcip", "192.0.2.66"}}, kNow);
    CHECK(p.alert_store().size() == 2);
    CHECK(testenv::count_lines(ws.audit_path()) == 2);

    auto none = p.simulate_alert("web-server-error", "availability", {{"srcip", "192.0.2.66"}}, kNow);
    CHECK_FALSE(none.outcome.policy);
    CHECK(none.records.empty());
}

TEST_CASE("asset map replacement requires a newer revision and persists") {
    Workspace ws("putmap");
    Platform p(ws.load(), fake_exec());
    auto map = *p.assets().snapshot();
    CHECK_THROWS_AS(p.put_asset_map(map), IllegalTransition);
    map.revision = 2;
    map.nodes.erase(std::remove_if(map.nodes.begin(), map.nodes.end(), [](const auto& n) { return n.node_id == "fw1"; }),
                    map.nodes.end());
    map.edges.erase(std::remove_if(map.edges.begin(), map.edges.end(),
                                   [](const auto& e) { return e.source == "fw1" || e.target == "fw1"; }),
                    map.edges.end());
    CHECK(p.put_asset_map(map)->revision == 2);
    CHECK(assets::load_map(slurp(ws.root() / "map.json")).revision == 2);
    auto rep = p.run_pipeline_cycle(kNow);
    CHECK(rep.map_revision == 2);
    // Without fw1 the ipv4 AND sha256 indicator no longer has a feature match,
    // but it is still kept for its hash.
    CHECK(rep.tailored == 5);
}

TEST_CASE("compile from an already tailored bundle") {
    Workspace ws("tailored");
    Platform p(ws.load(), fake_exec());
    p.run_pipeline_cycle(kNow);
    auto tailored = slurp(ws.root() / "data" / "tailored" / "tailored-1-20240601T000000Z.json");

    Workspace other("tailored2");
    Platform q(other.load(), fake_exec());
    auto rep = q.compile_tailored(tailored);
    CHECK(rep.rules_written == 6);
    CHECK(q.rule_manifest() == p.rule_manifest());
}
