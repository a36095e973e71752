#include <doctest.h>

#include "../support/oracles.hpp"
#include "../support/workspace.hpp"
#include "ctimp/relevance.hpp"

using namespace ctimp;
using namespace ctimp::relevance;
using ctimp::testenv::fixture;
using ctimp::testenv::slurp;
using ingest::IndicatorRecord;
using ingest::ObservableKind;

namespace {

const Timestamp kNow = from_unix_seconds(testgen::kNowSeconds);

IndicatorRecord record(const std::string& id, const std::string& pattern, int tier = 3) {
    IndicatorRecord r;
    r.stix_id = id;
    r.created = r.modified = r.valid_from = kNow - std::chrono::hours{24};
    r.pattern_text = pattern;
    r.expr = ingest::parse_pattern(pattern);
    r.trust_tier = tier;
    r.source_id = "t";
    return r;
}

std::vector<IndicatorRecord> fixture_records() {
    std::vector<IndicatorRecord> out;
    for (const auto& [file, id, tier] : std::vector<std::tuple<std::string, std::string, int>>{
             {"feeds/a/001-network.json", "a", 4}, {"feeds/a/002-files.json", "a", 4}, {"feeds/b/bundle.json", "b", 3}}) {
        ingest::FeedSource s{id, "-", ingest::FeedKind::stix_bundle, tier, 300, true};
        auto parsed = ingest::parse_stix_bundle(slurp(fixture(file)), s);
        out.insert(out.end(), parsed.records.begin(), parsed.records.end());
    }
    return out;
}

const IndicatorRecord& by_id(const std::vector<IndicatorRecord>& v, const std::string& id) {
    for (const auto& r : v)
        if (r.stix_id == id) return r;
    throw std::runtime_error("missing " + id);
}

}  // namespace

TEST_CASE("ipv4 leaf against an index holding that address") {
    auto map = assets::load_map(slurp(fixture("map.json")));
    auto idx = assets::build_feature_index(map);
    auto v = match_indicator(record("indicator--x", "[ipv4-addr:value = '198.51.100.7']"), idx, {}, kNow);
    CHECK(v.retained);
    CHECK(v.reason == Reason::feature_match);
    REQUIRE(v.matched_features.size() == 1);
    CHECK(v.matched_features[0].node_id == "web1");
    CHECK(v.matched_features[0].feature_kind == FeatureKind::ip);
    CHECK(oracle::verdict(record("indicator--x", "[ipv4-addr:value = '198.51.100.7']"), map, {}, kNow) == v.reason);
}

TEST_CASE("empty index keeps nothing without host-agnostic retention") {
    assets::FeatureIndex empty;
    RelevancePolicy pol{2, false};
    for (const char* p : {"[ipv4-addr:value = '1.2.3.4']", "[file:hashes.MD5 = 'd41d8cd98f00b204e9800998ecf8427e']",
                          "[domain-name:value = 'example.net' OR url:value = 'http://x.example/']"}) {
        CHECK_FALSE(match_indicator(record("indicator--x", p), empty, pol, kNow).retained);
    }
}

TEST_CASE("md5 against an empty index is kept as host agnostic") {
    auto v = match_indicator(record("indicator--x", "[file:hashes.MD5 = 'd41d8cd98f00b204e9800998ecf8427e']"), {},
                             {2, true}, kNow);
    CHECK(v.retained);
    CHECK(v.reason == Reason::host_agnostic_keep);
}

TEST_CASE("evaluation order: revoked, expired, below trust") {
    auto idx = assets::build_feature_index(assets::load_map(slurp(fixture("map.json"))));
    auto r = record("indicator--x", "[ipv4-addr:value = '198.51.100.7']", 1);
    r.revoked = true;
    r.valid_until = kNow - std::chrono::seconds{1};
    CHECK(match_indicator(r, idx, {}, kNow).reason == Reason::revoked);
    r.revoked = false;
    CHECK(match_indicator(r, idx, {}, kNow).reason == Reason::expired);
    r.valid_until = kNow;  // not strictly before now
    CHECK(match_indicator(r, idx, {}, kNow).reason == Reason::below_trust);
    r.trust_tier = 2;
    CHECK(match_indicator(r, idx, {}, kNow).reason == Reason::feature_match);
}

TEST_CASE("domains match their subdomains, urls match on host") {
    auto idx = assets::build_feature_index(assets::load_map(slurp(fixture("map.json"))));
    auto hit = [&](const std::string& p) { return match_indicator(record("indicator--x", p), idx, {}, kNow).retained; };
    CHECK(hit("[domain-name:value = 'example.net']"));
    CHECK(hit("[domain-name:value = 'corp.example.net']"));
    CHECK(hit("[domain-name:value = 'SHOP.example.net.']"));
    CHECK_FALSE(hit("[domain-name:value = 'hop.example.net']"));
    CHECK_FALSE(hit("[domain-name:value = 'www.shop.example.net']"));
    CHECK(hit("[url:value = 'https://WWW.example.net:8443/login']"));
    CHECK(hit("[url:value = 'http://203.0.113.1/x']"));
    CHECK_FALSE(hit("[url:value = 'http://203.0.113.2/x']"));
}

TEST_CASE("fixture: two of five retained") {
    auto map = assets::load_map(slurp(fixture("map.json")));
    auto idx = assets::build_feature_index(map);
    auto all = fixture_records();
    std::vector<IndicatorRecord> five = {
        by_id(all, "indicator--8e2e2d2b-17d4-4cbf-938f-98ee46b3cd3f"),  // ipv4 on web1
        by_id(all, "indicator--3a1f6b0c-2d9e-4f5a-8b7c-6d5e4f3a2b1c"),  // unrelated ipv4
        by_id(all, "indicator--7f1c2b3a-4d5e-4f60-8172-93a4b5c6d7e8"),  // md5
        by_id(all, "indicator--9b8a7c6d-5e4f-4a3b-8c2d-1e0f9a8b7c6d"),  // example.net
        by_id(all, "indicator--2e3f4051-6273-4849-9ab1-c2d3e4f50617"),  // ipv4 AND sha256
    };
    RelevancePolicy pol{2, false};
    auto out = tailor_bundle(five, idx, pol, kNow);
    CHECK(out.verdicts.size() == 5);
    REQUIRE(out.retained.size() == 2);
    auto doc = nlohmann::json::parse(out.document);
    CHECK(doc["type"] == "bundle");
    CHECK(doc["objects"].size() == 2);
    CHECK(doc["objects"][0]["id"] == "indicator--8e2e2d2b-17d4-4cbf-938f-98ee46b3cd3f");
    CHECK(doc["objects"][1]["id"] == "indicator--9b8a7c6d-5e4f-4a3b-8c2d-1e0f9a8b7c6d");
    for (std::size_t i = 0; i < five.size(); ++i) CHECK(out.verdicts[i].reason == oracle::verdict(five[i], map, pol, kNow));
    CHECK(tailor_bundle(five, idx, pol, kNow).document == out.document);
}

TEST_CASE("fixture: full feed set with default policy") {
    auto map = assets::load_map(slurp(fixture("map.json")));
    auto out = tailor_bundle(fixture_records(), assets::build_feature_index(map), {}, kNow);
    // A1, A4, B1 by feature; A2 and B2 by their hash leaves.
    CHECK(out.retained.size() == 5);
    CHECK(out.verdicts.size() == 6);
}

TEST_CASE("empty input gives an empty bundle") {
    auto out = tailor_bundle({}, {}, {}, kNow);
    CHECK(nlohmann::json::parse(out.document)["objects"].empty());
    CHECK(out.verdicts.empty());
}

TEST_CASE("tailored filename") {
    CHECK(tailored_filename(3, kNow) == "tailored-3-20240601T000000Z.json");
}

TEST_CASE("property: verdicts equal the brute-force oracle; retained is a subset") {
    testgen::Rng r(9001);
    for (int round = 0; round < 60; ++round) {
        auto map = testgen::gen_map(r, 50);
        auto idx = assets::build_feature_index(map);
        RelevancePolicy pol{r.uniform(1, 4), r.chance(0.5)};
        std::vector<IndicatorRecord> inds;
        for (int i = r.uniform(0, 200); i > 0; --i) inds.push_back(testgen::gen_indicator(r));
        auto out = tailor_bundle(inds, idx, pol, kNow);
        REQUIRE(out.verdicts.size() == inds.size());
        std::set<std::string> input_ids;
        for (std::size_t i = 0; i < inds.size(); ++i) {
            input_ids.insert(inds[i].stix_id);
            auto want = oracle::verdict(inds[i], map, pol, kNow);
            CHECK_MESSAGE(out.verdicts[i].reason == want, inds[i].pattern_text);
            CHECK(out.verdicts[i].retained == oracle::is_retained(want));
            // Every reported feature match names a real owner.
            for (const auto& fm : out.verdicts[i].matched_features) CHECK(oracle::owners(fm.observable, map).count(fm.node_id));
        }
        for (const auto& kept : out.retained) CHECK(input_ids.count(kept.stix_id));
    }
}

TEST_CASE("property: adding assets never drops a feature match") {
    testgen::Rng r(9002);
    for (int round = 0; round < 60; ++round) {
        auto small = testgen::gen_map(r, 10);
        auto big = small;
        for (int i = r.uniform(1, 5); i > 0; --i) big.nodes.push_back(testgen::gen_node(r, "extra" + std::to_string(i)));
        auto a = assets::build_feature_index(small);
        auto b = assets::build_feature_index(big);
        for (int i = 0; i < 50; ++i) {
            auto ind = testgen::gen_indicator(r);
            auto va = match_indicator(ind, a, {1, true}, kNow);
            auto vb = match_indicator(ind, b, {1, true}, kNow);
            if (va.retained) CHECK(vb.retained);
            if (va.reason == Reason::feature_match) CHECK(vb.reason == Reason::feature_match);
        }
    }
}
