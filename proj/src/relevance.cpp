#include "ctimp/relevance.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>

using json = nlohmann::json;

namespace ctimp::relevance {

using ingest::ObservableKind;

std::string_view to_string(Reason r) {
    switch (r) {
        case Reason::feature_match: return "feature_match";
        case Reason::host_agnostic_keep: return "host_agnostic_keep";
        case Reason::below_trust: return "below_trust";
        case Reason::expired: return "expired";
        case Reason::no_match: return "no_match";
        case Reason::revoked: return "revoked";
    }
    return "no_match";
}

std::string_view to_string(FeatureKind k) {
    return k == FeatureKind::ip ? "ip" : "hostname";
}

namespace {

void match_ip(const ingest::Observable& obs, std::string_view ip, const assets::FeatureIndex& idx,
              std::vector<FeatureMatch>& out) {
    auto it = idx.ip_owners.find(std::string(ip));
    if (it == idx.ip_owners.end()) return;
    for (const auto& node : it->second) out.push_back({obs, FeatureKind::ip, it->first, node});
}

void match_domain(const ingest::Observable& obs, const std::string& domain, const assets::FeatureIndex& idx,
                  std::vector<FeatureMatch>& out) {
    if (domain.empty()) return;
    // Subdomains do not sort next to their parent; scan.
    std::string suffix = "." + domain;
    for (const auto& [host, owners] : idx.hostname_owners) {
        if (host == domain || (host.size() > suffix.size() && host.ends_with(suffix))) {
            for (const auto& node : owners) out.push_back({obs, FeatureKind::hostname, host, node});
        }
    }
}

}  // namespace

std::vector<FeatureMatch> leaf_matches(const ingest::Observable& obs, const assets::FeatureIndex& idx) {
    std::vector<FeatureMatch> out;
    switch (obs.kind) {
        case ObservableKind::ipv4:
            match_ip(obs, obs.value, idx, out);
            break;
        case ObservableKind::domain:
            match_domain(obs, obs.value, idx, out);
            break;
        case ObservableKind::url: {
            auto host = url_host(obs.value);
            if (is_ipv4(host)) {
                match_ip(obs, host, idx, out);
            } else {
                match_domain(obs, host, idx, out);
            }
            break;
        }
        default:
            break;
    }
    return out;
}

RelevanceVerdict match_indicator(const ingest::IndicatorRecord& ind, const assets::FeatureIndex& idx,
                                 const RelevancePolicy& pol, Timestamp now) {
    RelevanceVerdict v;
    v.stix_id = ind.stix_id;
    if (ind.revoked) {
        v.reason = Reason::revoked;
        return v;
    }
    if (ind.valid_until && *ind.valid_until < now) {
        v.reason = Reason::expired;
        return v;
    }
    if (ind.trust_tier < pol.min_trust_tier) {
        v.reason = Reason::below_trust;
        return v;
    }

    std::vector<FeatureMatch> matches;
    std::set<ingest::Observable> matched_leaves;
    bool any_host_agnostic = false;
    for (const auto& leaf : ind.expr.leaves()) {
        any_host_agnostic |= ingest::is_host_agnostic(leaf.kind);
        auto m = leaf_matches(leaf, idx);
        if (!m.empty()) matched_leaves.insert(leaf);
        matches.insert(matches.end(), m.begin(), m.end());
    }
    if (ind.expr.evaluate([&](const ingest::Observable& obs) { return matched_leaves.contains(obs); })) {
        v.retained = true;
        v.reason = Reason::feature_match;
        v.matched_features = std::move(matches);
        return v;
    }
    if (pol.keep_host_agnostic && any_host_agnostic) {
        v.retained = true;
        v.reason = Reason::host_agnostic_keep;
        return v;
    }
    v.reason = Reason::no_match;
    return v;
}

TailoredBundle tailor_bundle(const std::vector<ingest::IndicatorRecord>& inds, const assets::FeatureIndex& idx,
                             const RelevancePolicy& pol, Timestamp now) {
    TailoredBundle out;
    out.map_revision = idx.revision;
    out.verdicts.reserve(inds.size());
    for (const auto& ind : inds) {
        auto v = match_indicator(ind, idx, pol, now);
        if (v.retained) out.retained.push_back(ind);
        out.verdicts.push_back(std::move(v));
    }
    std::sort(out.retained.begin(), out.retained.end(),
              [](const auto& a, const auto& b) { return a.stix_id < b.stix_id; });
    out.retained.erase(std::unique(out.retained.begin(), out.retained.end(),
                                   [](const auto& a, const auto& b) { return a.stix_id == b.stix_id; }),
                       out.retained.end());

    std::string id_seed = "rev:" + std::to_string(idx.revision);
    json objects = json::array();
    for (const auto& r : out.retained) {
        objects.push_back(ingest::to_stix_object(r));
        id_seed += "|" + r.stix_id + "@" + format_rfc3339(r.modified);
    }
    static const Uuid ns = uuid_v5(Uuid{}, "ctimp-tailored-bundle");
    json bundle{{"type", "bundle"}, {"id", "bundle--" + uuid_v5(ns, id_seed).str()}, {"objects", std::move(objects)}};
    out.document = bundle.dump(2) + "\n";
    return out;
}

std::string tailored_filename(std::int64_t map_revision, Timestamp now) {
    auto ts = format_rfc3339(now);  // YYYY-MM-DDTHH:MM:SS.mmmZ
    std::string compact;
    for (char c : ts.substr(0, 19))
        if (c != '-' && c != ':') compact.push_back(c);
    return "tailored-" + std::to_string(map_revision) + "-" + compact + "Z.json";
}

}  // namespace ctimp::relevance
