// ctimp/cti_ingest.hpp - feed acquisition, STIX bundle parsing and the indicator store

#pragma once

#include "ctimp/common.hpp"
#include "ctimp/stix_pattern.hpp"

#include <json.hpp>

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace ctimp::ingest {

enum class FeedKind { stix_bundle, ioc_directory };

inline constexpr int kDefaultTrustTier = 3;

struct FeedSource {
    std::string source_id;
    std::string location;  ///< file path, directory path, or http(s) URL
    FeedKind kind = FeedKind::stix_bundle;
    int trust_tier = kDefaultTrustTier;
    int poll_interval = 300;  ///< seconds, >= 30
    bool enabled = true;
};

/// Throws Error when a field is out of range.
void validate(const FeedSource& source);
FeedSource feed_source_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeedSource& source);

struct RawDocument {
    std::string bytes;
    std::string origin;        ///< path or URL the bytes came from
    std::string content_type;  ///< "application/json" for files, the server's header for HTTP
};

/// Transport failure for one source. Always retryable; the source id tells
/// the scheduler which source to retry.
class FetchError : public Error {
public:
    FetchError(std::string source_id, const std::string& message)
        : Error(message), source_id_(std::move(source_id)) {}
    const std::string& source_id() const { return source_id_; }
    bool retryable() const { return true; }

private:
    std::string source_id_;
};

/// Reads every document of an enabled source. Directory feeds are returned
/// in lexicographic filename order and include only `.json` files.
std::vector<RawDocument> fetch_feed(const FeedSource& source);

struct IndicatorRecord {
    std::string stix_id;
    Timestamp created{};
    Timestamp modified{};
    Timestamp valid_from{};
    std::optional<Timestamp> valid_until;
    std::string pattern_text;
    ObservableExpr expr;
    std::vector<std::string> labels;
    std::string source_id;
    int trust_tier = kDefaultTrustTier;
    bool revoked = false;
    nlohmann::json object;  ///< the STIX object as received

    friend bool operator==(const IndicatorRecord& a, const IndicatorRecord& b) {
        return a.stix_id == b.stix_id && a.created == b.created && a.modified == b.modified &&
               a.valid_from == b.valid_from && a.valid_until == b.valid_until &&
               a.pattern_text == b.pattern_text && a.expr == b.expr && a.labels == b.labels &&
               a.source_id == b.source_id && a.trust_tier == b.trust_tier && a.revoked == b.revoked;
    }
};

/// The STIX object for a record: the received object with the custom
/// properties x_ctimp_source_id and x_ctimp_trust_tier added.
nlohmann::json to_stix_object(const IndicatorRecord& record);

struct Diagnostic {
    std::string object_id;  ///< STIX id, or "objects[<n>]" when the object has none
    std::string message;
};

struct RevocationNotice {
    std::string stix_id;
    Timestamp modified{};
};

struct BundleParseResult {
    std::vector<IndicatorRecord> records;
    std::vector<Diagnostic> diagnostics;
    std::vector<RevocationNotice> revocations;
};

class BundleError : public Error {
public:
    using Error::Error;
};

/// Object-level problems never throw; they become diagnostics. Throws
/// BundleError only when the document is not JSON or not a bundle envelope.
BundleParseResult parse_stix_bundle(std::string_view document, const FeedSource& source);

/// Parses a bundle previously produced by tailoring; trust tier and source id
/// come from the x_ctimp_* properties rather than a feed definition.
BundleParseResult parse_tailored_bundle(std::string_view document);

// ============================================================================
// Indicator store
// ============================================================================

struct MergeDelta {
    std::size_t added = 0;
    std::size_t updated = 0;
    std::size_t unchanged = 0;

    friend bool operator==(const MergeDelta&, const MergeDelta&) = default;
};

using IndicatorMap = std::map<std::string, IndicatorRecord>;

/// Multi-reader, single-writer indicator store. Readers hold immutable
/// snapshots; a merge publishes a new snapshot in one step.
class IndicatorStore {
public:
    IndicatorStore();

    std::shared_ptr<const IndicatorMap> snapshot() const;

    /// Incoming records replace stored ones only when strictly newer.
    MergeDelta merge(const std::vector<IndicatorRecord>& incoming,
                     const std::vector<RevocationNotice>& revocations = {});

    void replace_all(IndicatorMap records);
    std::size_t size() const;

private:
    mutable std::shared_mutex mutex_;
    std::mutex writer_;
    std::shared_ptr<const IndicatorMap> current_;
};

MergeDelta dedupe_and_merge(const std::vector<IndicatorRecord>& incoming, IndicatorStore& store);

}  // namespace ctimp::ingest
