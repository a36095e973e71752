// ctimp/relevance.hpp - tailoring indicators to the asset feature index

#pragma once

#include "ctimp/asset_inventory.hpp"
#include "ctimp/cti_ingest.hpp"

#include <string>
#include <vector>

namespace ctimp::relevance {

struct RelevancePolicy {
    int min_trust_tier = 2;
    /// Retain hash observables even when no asset feature matches.
    bool keep_host_agnostic = true;
};

enum class Reason { feature_match, host_agnostic_keep, below_trust, expired, no_match, revoked };

std::string_view to_string(Reason r);

enum class FeatureKind { ip, hostname };

std::string_view to_string(FeatureKind k);

struct FeatureMatch {
    ingest::Observable observable;
    FeatureKind feature_kind = FeatureKind::ip;
    std::string feature;  ///< the asset address or hostname that matched
    std::string node_id;

    friend bool operator==(const FeatureMatch&, const FeatureMatch&) = default;
};

struct RelevanceVerdict {
    std::string stix_id;
    bool retained = false;
    std::vector<FeatureMatch> matched_features;
    Reason reason = Reason::no_match;
};

/// Asset features an observable hits. Domain leaves match their own name and
/// any subdomain held by an asset; URL leaves match on their host component.
std::vector<FeatureMatch> leaf_matches(const ingest::Observable& obs, const assets::FeatureIndex& idx);

RelevanceVerdict match_indicator(const ingest::IndicatorRecord& ind, const assets::FeatureIndex& idx,
                                 const RelevancePolicy& pol, Timestamp now);

struct TailoredBundle {
    std::string document;  ///< STIX 2.1 bundle, objects sorted by id
    std::vector<RelevanceVerdict> verdicts;
    std::vector<ingest::IndicatorRecord> retained;  ///< sorted by stix_id
    std::int64_t map_revision = 0;
};

TailoredBundle tailor_bundle(const std::vector<ingest::IndicatorRecord>& inds, const assets::FeatureIndex& idx,
                             const RelevancePolicy& pol, Timestamp now);

/// "tailored-<revision>-<yyyymmddThhmmssZ>.json"
std::string tailored_filename(std::int64_t map_revision, Timestamp now);

}  // namespace ctimp::relevance
