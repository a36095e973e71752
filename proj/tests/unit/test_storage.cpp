#include <doctest.h>

#include "../support/gen.hpp"
#include "../support/workspace.hpp"
#include "ctimp/storage.hpp"

#include <thread>

using namespace ctimp;
using namespace ctimp::platform;
using ctimp::testenv::Workspace;

namespace {

ingest::IndicatorRecord record(const std::string& id, const std::string& pattern) {
    ingest::IndicatorRecord r;
    r.stix_id = id;
    r.created = r.modified = r.valid_from = from_unix_seconds(testgen::kNowSeconds);
    r.pattern_text = pattern;
    r.expr = ingest::parse_pattern(pattern);
    r.trust_tier = 4;
    r.source_id = "a";
    return r;
}

sigma::RuleSet ruleset(const std::vector<std::string>& ips) {
    std::vector<ingest::IndicatorRecord> recs;
    for (std::size_t i = 0; i < ips.size(); ++i)
        recs.push_back(record("indicator--00000000-0000-4000-8000-00000000000" + std::to_string(i),
                              "[ipv4-addr:value = '" + ips[i] + "']"));
    return sigma::compile_ruleset(recs);
}

}  // namespace

TEST_CASE("database round trips alerts, commands, indicators and meta") {
    Workspace ws("db");
    auto file = ws.root() / "t.db";
    alerts::Alert a;
    a.alert_id = "al-1";
    a.rule_id = "r";
    a.raised_at = a.last_seen = from_unix_seconds(100);
    a.event.fields = {{"srcip", "1.2.3.4"}};
    a.signature = a.event.fields;
    selfheal::CommandRecord c;
    c.command_id = "c-1";
    c.alert_id = "al-1";
    c.policy_id = "p";
    c.mode = selfheal::Mode::approve;
    c.state = selfheal::CommandState::pending_approval;
    c.created_at = from_unix_seconds(101);
    ingest::IndicatorMap inds{{"indicator--00000000-0000-4000-8000-0000000000aa", record("indicator--00000000-0000-4000-8000-0000000000aa", "[ipv4-addr:value = '1.2.3.4']")}};
    {
        Database db(file);
        db.put_alert(a);
        a.status = alerts::Status::ongoing;
        db.put_alert(a);  // upsert
        db.put_command(c);
        db.put_indicators(inds);
        db.set_meta("k", "v");
    }
    Database db(file);
    REQUIRE(db.alerts().size() == 1);
    CHECK(db.alerts()[0] == a);
    REQUIRE(db.commands().size() == 1);
    CHECK(db.commands()[0] == c);
    CHECK(db.indicators() == inds);
    CHECK(db.meta("k") == "v");
    CHECK_FALSE(db.meta("missing"));
    db.put_indicators({});
    CHECK(db.indicators().empty());
}

TEST_CASE("rules directory: empty, install, reinstall, recover") {
    Workspace ws("rules");
    RulesDirectory dir(ws.root() / "rules");
    CHECK(dir.generation() == 0);
    CHECK(dir.load().documents.empty());

    auto one = ruleset({"1.2.3.4"});
    CHECK(dir.install(one) == 1);
    auto snap = dir.load();
    CHECK(snap.generation == 1);
    REQUIRE(snap.documents.size() == 1);
    CHECK(snap.documents[0] == sigma::render_yaml(one.rules[0]));
    CHECK(snap.manifest.at(one.rules[0].rule_id) == one.rules[0].references[0]);
    CHECK(dir.matches(one));
    CHECK(std::filesystem::exists(ws.root() / "rules" / "manifest.json"));

    auto two = ruleset({"1.2.3.4", "5.6.7.8"});
    CHECK_FALSE(dir.matches(two));
    CHECK(dir.install(two) == 2);
    CHECK(dir.load().documents.size() == 2);
    // The previous generation is gone once the new one is published.
    CHECK_FALSE(std::filesystem::exists(ws.root() / "rules" / ".gen-1"));

    std::filesystem::create_directories(ws.root() / "rules" / ".staging-9");
    std::filesystem::create_directories(ws.root() / "rules" / ".gen-7");
    dir.recover();
    CHECK_FALSE(std::filesystem::exists(ws.root() / "rules" / ".staging-9"));
    CHECK_FALSE(std::filesystem::exists(ws.root() / "rules" / ".gen-7"));
    CHECK(dir.load().generation == 2);

    CHECK(dir.install(ruleset({})) == 3);
    CHECK(dir.load().documents.empty());
}

TEST_CASE("a generation that disagrees with its manifest is rejected") {
    Workspace ws("rules-bad");
    RulesDirectory dir(ws.root() / "rules");
    dir.install(ruleset({"1.2.3.4"}));
    testenv::spit(ws.root() / "rules" / "generated" / "extra.yml", "title: x\n");
    CHECK_THROWS_AS(dir.load(), Error);
}

TEST_CASE("readers never observe a partial generation") {
    Workspace ws("rules-race");
    RulesDirectory dir(ws.root() / "rules", std::chrono::milliseconds{2});
    std::vector<std::string> ips;
    for (int i = 1; i <= 6; ++i) ips.push_back("10.1.0." + std::to_string(i));
    std::atomic<bool> done{false};
    std::atomic<int> torn{0}, reads{0};
    std::thread reader([&] {
        RulesDirectory view(ws.root() / "rules");
        while (!done) {
            try {
                auto s = view.load();
                if (s.documents.size() != s.manifest.size()) ++torn;
                ++reads;
            } catch (const std::exception&) {
                // A generation removed between readlink and read is retried.
            }
        }
    });
    for (int i = 1; i <= 6; ++i) dir.install(ruleset(std::vector<std::string>(ips.begin(), ips.begin() + i)));
    done = true;
    reader.join();
    CHECK(torn == 0);
    CHECK(reads > 0);
}

TEST_CASE("atomic file writes") {
    Workspace ws("atomic");
    auto p = ws.root() / "x" / "y.txt";
    write_file_atomic(p, "one");
    write_file_atomic(p, "two");
    CHECK(read_file(p) == "two");
    CHECK_THROWS(read_file(ws.root() / "missing"));
}

TEST_CASE("event bus delivers in order to every live subscriber") {
    EventBus bus;
    auto a = bus.subscribe();
    bus.publish("alert.created", {{"n", 1}});
    auto b = bus.subscribe();
    bus.publish("alert.updated", {{"n", 2}});
    CHECK(bus.published() == 2);
    auto e1 = a->next(std::chrono::milliseconds{10});
    auto e2 = a->next(std::chrono::milliseconds{10});
    REQUIRE(e1);
    REQUIRE(e2);
    CHECK(e1->seq == 1);
    CHECK(e2->type == "alert.updated");
    CHECK_FALSE(a->next(std::chrono::milliseconds{10}));
    auto only = b->next(std::chrono::milliseconds{10});
    REQUIRE(only);
    CHECK(only->seq == 2);

    std::thread late([&] {
        std::this_thread::sleep_for(std::chrono::milliseconds{20});
        bus.publish("command.created", {});
    });
    CHECK(a->next(std::chrono::seconds{2}));
    late.join();

    bus.close_all();
    CHECK(a->closed());
    bus.publish("x", {});
    CHECK_FALSE(a->next(std::chrono::milliseconds{10}));
}
