#include <doctest.h>

#include "../support/gen.hpp"
#include "../support/workspace.hpp"
#include "ctimp/asset_inventory.hpp"

#include <algorithm>

using namespace ctimp;
using namespace ctimp::assets;
using ctimp::testenv::fixture;
using ctimp::testenv::slurp;

namespace {

AssetMap fixture_map() {
    return load_map(slurp(fixture("map.json")));
}

}  // namespace

TEST_CASE("empty map is valid and round-trips") {
    auto m = load_map(R"({"map_id":"m1","revision":1,"nodes":[],"edges":[]})");
    CHECK(m.nodes.empty());
    CHECK(m.edges.empty());
    CHECK(load_map(save_map(m)) == m);
    auto idx = build_feature_index(m);
    CHECK(idx.ip_set.empty());
    CHECK(idx.hostname_set.empty());
    CHECK(idx.service_set.empty());
    CHECK(idx.tag_set.empty());
    CHECK(idx.node_by_ip.empty());
}

TEST_CASE("edge to a missing node names it") {
    try {
        load_map(R"({"map_id":"m1","revision":1,
                     "nodes":[{"node_id":"n1","risk_level":"low"}],
                     "edges":[{"source":"n1","target":"n9","relation":"link"}]})");
        FAIL("accepted");
    } catch (const IntegrityError& e) {
        CHECK(e.offending_ids() == std::vector<std::string>{"n9"});
    }
}

TEST_CASE("schema errors name the JSON path") {
    auto expect_path = [](const std::string& doc, const std::string& path) {
        try {
            load_map(doc);
            FAIL("accepted: " << doc);
        } catch (const SchemaError& e) {
            CHECK(e.path() == path);
        }
    };
    expect_path(R"({"revision":1,"nodes":[],"edges":[]})", "$.map_id");
    expect_path(R"({"map_id":"m","revision":"1","nodes":[],"edges":[]})", "$.revision");
    expect_path(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"extreme"}],"edges":[]})",
                "$.nodes[0].risk_level");
    expect_path(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"low","addresses":["1.2.3"]}],"edges":[]})",
                "$.nodes[0].addresses[0]");
    expect_path(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"low","color":"red"}],"edges":[]})",
                "$.nodes[0].color");
    expect_path(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"low","services":[{"name":"x","ports":[70000]}]}],"edges":[]})",
                "$.nodes[0].services[0].ports[0]");
    expect_path(R"({"schema":"other/2","map_id":"m","revision":1,"nodes":[],"edges":[]})", "$.schema");
    expect_path("{", "$");
}

TEST_CASE("integrity rules") {
    CHECK_THROWS_AS(load_map(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"low"},{"node_id":"a","risk_level":"low"}],"edges":[]})"),
                    IntegrityError);
    CHECK_THROWS_AS(load_map(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"low"}],"edges":[{"source":"a","target":"a","relation":"link"}]})"),
                    IntegrityError);
    CHECK_THROWS_AS(load_map(R"({"map_id":"m","revision":1,"nodes":[{"node_id":"a","risk_level":"low","dependencies":[{"target":"zz","kind":"data"}]}],"edges":[]})"),
                    IntegrityError);
}

TEST_CASE("three-node fixture loads field for field") {
    auto m = fixture_map();
    CHECK(m.map_id == "acme-dmz");
    CHECK(m.revision == 1);
    REQUIRE(m.nodes.size() == 3);
    CHECK(m.edges.size() == 2);
    const auto* web = m.find("web1");
    REQUIRE(web);
    CHECK(web->group == "dmz");
    CHECK(web->addresses == std::vector<std::string>{"198.51.100.7"});
    CHECK(web->hostnames == std::vector<std::string>{"shop.example.net", "www.example.net"});
    CHECK(web->risk_level == RiskLevel::high);
    REQUIRE(web->geolocation);
    CHECK(web->geolocation->country_code == "GR");
    REQUIRE(web->dependencies.size() == 1);
    CHECK(web->dependencies[0] == Dependency{"db1", DependencyKind::data});
    REQUIRE(web->services.size() == 2);
    CHECK(web->services[0].name == "nginx");
    CHECK(web->services[0].ports == std::vector<int>{80, 443});
    const auto* fw = m.find("fw1");
    REQUIRE(fw);
    CHECK(fw->addresses == std::vector<std::string>{"203.0.113.1", "10.0.0.1"});
    CHECK(m.find("db1")->risk_level == RiskLevel::critical);
}

TEST_CASE("fixture feature index") {
    auto idx = build_feature_index(fixture_map());
    CHECK(idx.revision == 1);
    CHECK(idx.ip_set == std::set<std::string>{"198.51.100.7", "10.0.0.20", "203.0.113.1", "10.0.0.1"});
    CHECK(idx.node_by_ip.at("198.51.100.7") == "web1");
    CHECK(idx.node_by_ip.at("203.0.113.1") == "fw1");
    CHECK(idx.hostname_set.count("db1.corp.example.net"));
    // OpenSSH at two versions plus an unversioned install, all lowercased.
    CHECK(idx.service_set.count({"openssh", "8.9"}));
    CHECK(idx.service_set.count({"openssh", "9.3"}));
    CHECK(idx.service_set.count({"openssh", std::nullopt}));
    CHECK(idx.tag_set == std::set<std::string>{"internet-facing", "network", "pci"});
}

TEST_CASE("save is canonical") {
    auto m = fixture_map();
    auto a = save_map(m);
    CHECK(save_map(m) == a);
    std::reverse(m.nodes.begin(), m.nodes.end());
    std::reverse(m.edges.begin(), m.edges.end());
    CHECK(save_map(m) == a);
}

TEST_CASE("apply_edit examples") {
    auto empty = load_map(R"({"map_id":"m1","revision":1,"nodes":[],"edges":[]})");
    AssetNode n;
    n.node_id = "n1";
    auto one = apply_edit(empty, UpsertNode{n});
    CHECK(one.revision == 2);
    CHECK(one.nodes.size() == 1);

    auto m = fixture_map();
    try {
        apply_edit(m, RemoveNode{"db1"});
        FAIL("accepted");
    } catch (const IntegrityError& e) {
        CHECK(e.offending_ids() == std::vector<std::string>{"db1"});
    }
    CHECK(m.revision == 1);
    CHECK(m.nodes.size() == 3);

    auto web = *m.find("web1");
    web.risk_level = RiskLevel::critical;
    auto edited = apply_edit(m, UpsertNode{web});
    CHECK(edited.find("web1")->risk_level == RiskLevel::critical);
    CHECK(*edited.find("db1") == *m.find("db1"));
    CHECK(*edited.find("fw1") == *m.find("fw1"));

    CHECK_THROWS_AS(apply_edit(m, UpsertEdge{{"web1", "nowhere", EdgeRelation::link}}), IntegrityError);
    CHECK_THROWS_AS(apply_edit(m, RemoveEdge{{"db1", "web1", EdgeRelation::link}}), IntegrityError);
    auto no_edge = apply_edit(m, RemoveEdge{{"fw1", "web1", EdgeRelation::link}});
    CHECK(no_edge.edges.size() == 1);
}

TEST_CASE("repository publishes whole revisions") {
    AssetRepository repo(fixture_map());
    auto before = repo.snapshot();
    AssetNode n;
    n.node_id = "new";
    repo.apply(UpsertNode{n});
    CHECK(before->revision == 1);
    CHECK(repo.snapshot()->revision == 2);
    auto same = *repo.snapshot();
    CHECK_THROWS_AS(repo.replace(same), Error);
    same.revision = 7;
    CHECK(repo.replace(same)->revision == 7);
}

TEST_CASE("property: save/load round trip and permutation invariance") {
    testgen::Rng r(77);
    for (int i = 0; i < 200; ++i) {
        auto m = testgen::gen_map(r, 50);
        REQUIRE_NOTHROW(validate(m));
        auto doc = save_map(m);
        auto back = load_map(doc);
        CHECK(back == m);
        CHECK(save_map(back) == doc);
        auto shuffled = m;
        std::shuffle(shuffled.nodes.begin(), shuffled.nodes.end(), r.engine());
        std::shuffle(shuffled.edges.begin(), shuffled.edges.end(), r.engine());
        CHECK(save_map(shuffled) == doc);
    }
}

TEST_CASE("property: feature index is complete by brute force") {
    testgen::Rng r(78);
    for (int i = 0; i < 200; ++i) {
        auto m = testgen::gen_map(r, 30);
        auto idx = build_feature_index(m);
        std::set<std::string> ips, hosts, tags, ids;
        std::set<ServiceFeature> services;
        for (const auto& n : m.nodes) {
            ids.insert(n.node_id);
            for (const auto& a : n.addresses) ips.insert(a);
            for (const auto& h : n.hostnames) {
                std::string c;
                for (char ch : h) c.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
                if (!c.empty() && c.back() == '.') c.pop_back();
                hosts.insert(c);
            }
            for (const auto& t : n.tags) tags.insert(t);
            for (const auto& s : n.services) {
                std::string name;
                for (char ch : s.name) name.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
                services.insert({name, s.version});
            }
        }
        CHECK(idx.ip_set == ips);
        CHECK(idx.hostname_set == hosts);
        CHECK(idx.tag_set == tags);
        CHECK(idx.node_ids == ids);
        CHECK(idx.service_set == services);
        for (const auto& ip : ips) {
            std::string lowest;
            for (const auto& n : m.nodes)
                if (std::find(n.addresses.begin(), n.addresses.end(), ip) != n.addresses.end() &&
                    (lowest.empty() || n.node_id < lowest))
                    lowest = n.node_id;
            CHECK(idx.node_by_ip.at(ip) == lowest);
        }
    }
}

TEST_CASE("property: successful edits bump the revision by one; failed edits change nothing") {
    testgen::Rng r(79);
    for (int i = 0; i < 100; ++i) {
        auto m = testgen::gen_map(r, 10);
        for (int step = 0; step < 20; ++step) {
            MapEdit edit;
            std::string id = "n" + std::to_string(r.uniform(0, 12));
            switch (r.uniform(0, 3)) {
                case 0: edit = UpsertNode{testgen::gen_node(r, id)}; break;
                case 1: edit = RemoveNode{id}; break;
                case 2:
                    edit = UpsertEdge{{id, "n" + std::to_string(r.uniform(0, 12)),
                                       r.chance(0.5) ? EdgeRelation::link : EdgeRelation::depends_on}};
                    break;
                default:
                    edit = m.edges.empty() ? MapEdit{RemoveNode{id}} : MapEdit{RemoveEdge{r.pick(m.edges)}};
                    break;
            }
            auto copy = m;
            try {
                auto next = apply_edit(m, edit);
                CHECK(next.revision == m.revision + 1);
                CHECK_NOTHROW(validate(next));
                m = next;
            } catch (const Error&) {
                CHECK(m == copy);
            }
        }
    }
}
