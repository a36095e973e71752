// ctimp/asset_inventory.hpp - deployment model of the supervised organization
//
// The JSON form is documented in docs/asset-map-schema.md. Maps are validated
// on load and on every edit; invalid input is rejected, never repaired.

#pragma once

#include "ctimp/common.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace ctimp::assets {

inline constexpr std::string_view kSchemaId = "ctimp-assetmap/1";

enum class RiskLevel { low, medium, high, critical };
enum class DependencyKind { structural, procedural, data };
enum class EdgeRelation { link, depends_on };

std::string_view to_string(RiskLevel v);
std::string_view to_string(DependencyKind v);
std::string_view to_string(EdgeRelation v);

struct Service {
    std::string name;
    std::optional<std::string> version;
    std::vector<int> ports;

    friend bool operator==(const Service&, const Service&) = default;
};

struct Geolocation {
    std::string country_code;
    std::string site_label;

    friend bool operator==(const Geolocation&, const Geolocation&) = default;
};

struct Dependency {
    std::string target;
    DependencyKind kind = DependencyKind::structural;

    friend bool operator==(const Dependency&, const Dependency&) = default;
};

struct AssetNode {
    std::string node_id;
    std::string label;
    std::optional<std::string> group;
    std::vector<std::string> tags;
    std::string function;
    std::vector<Service> services;
    std::vector<std::string> addresses;
    std::vector<std::string> hostnames;
    std::optional<Geolocation> geolocation;
    std::vector<Dependency> dependencies;
    RiskLevel risk_level = RiskLevel::low;

    friend bool operator==(const AssetNode&, const AssetNode&) = default;
};

struct AssetEdge {
    std::string source;
    std::string target;
    EdgeRelation relation = EdgeRelation::link;

    friend bool operator==(const AssetEdge&, const AssetEdge&) = default;
    friend auto operator<=>(const AssetEdge&, const AssetEdge&) = default;
};

struct AssetMap {
    std::string map_id;
    std::int64_t revision = 1;
    std::vector<AssetNode> nodes;
    std::vector<AssetEdge> edges;

    const AssetNode* find(std::string_view node_id) const;

    /// Structural equality: node and edge list order does not matter.
    friend bool operator==(const AssetMap& a, const AssetMap& b);
};

class SchemaError : public Error {
public:
    SchemaError(std::string path, const std::string& message)
        : Error(path + ": " + message), path_(std::move(path)) {}
    /// JSON path of the offending value, e.g. "$.nodes[2].addresses[0]".
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

class IntegrityError : public Error {
public:
    IntegrityError(std::vector<std::string> ids, const std::string& message)
        : Error(message), ids_(std::move(ids)) {}
    const std::vector<std::string>& offending_ids() const { return ids_; }

private:
    std::vector<std::string> ids_;
};

/// Throws SchemaError or IntegrityError.
void validate(const AssetMap& map);

AssetMap load_map(std::string_view document);

/// Canonical JSON: sorted keys, nodes by node_id, edges by (source, target, relation).
std::string save_map(const AssetMap& map);

// ============================================================================
// Feature index
// ============================================================================

struct ServiceFeature {
    std::string name;  ///< lowercased
    std::optional<std::string> version;

    friend auto operator<=>(const ServiceFeature&, const ServiceFeature&) = default;
};

struct FeatureIndex {
    std::int64_t revision = 0;
    std::set<std::string> ip_set;
    std::set<std::string> hostname_set;  ///< canonical domains
    std::set<ServiceFeature> service_set;
    std::set<std::string> tag_set;
    std::set<std::string> node_ids;
    /// Lowest node_id owning the address.
    std::map<std::string, std::string> node_by_ip;
    std::map<std::string, std::set<std::string>> ip_owners;
    std::map<std::string, std::set<std::string>> hostname_owners;

    friend bool operator==(const FeatureIndex&, const FeatureIndex&) = default;
};

FeatureIndex build_feature_index(const AssetMap& map);

// ============================================================================
// Editing
// ============================================================================

struct UpsertNode {
    AssetNode node;
};
struct RemoveNode {
    std::string node_id;
};
struct UpsertEdge {
    AssetEdge edge;
};
struct RemoveEdge {
    AssetEdge edge;
};

using MapEdit = std::variant<UpsertNode, RemoveNode, UpsertEdge, RemoveEdge>;

/// Returns the edited map at revision + 1. Throws (leaving `map` untouched)
/// when the result would violate an invariant.
AssetMap apply_edit(const AssetMap& map, const MapEdit& edit);

/// Single-writer, multi-reader holder of the current map revision.
class AssetRepository {
public:
    explicit AssetRepository(AssetMap initial);

    std::shared_ptr<const AssetMap> snapshot() const;
    std::shared_ptr<const AssetMap> apply(const MapEdit& edit);
    /// Replaces the whole map; the new revision must exceed the current one.
    std::shared_ptr<const AssetMap> replace(AssetMap next);

private:
    mutable std::shared_mutex mutex_;
    std::mutex writer_;
    std::shared_ptr<const AssetMap> current_;
};

}  // namespace ctimp::assets
