#include "ctimp/asset_inventory.hpp"

#include <json.hpp>

#include <algorithm>

using json = nlohmann::json;

namespace ctimp::assets {

std::string_view to_string(RiskLevel v) {
    switch (v) {
        case RiskLevel::low: return "low";
        case RiskLevel::medium: return "medium";
        case RiskLevel::high: return "high";
        case RiskLevel::critical: return "critical";
    }
    return "low";
}

std::string_view to_string(DependencyKind v) {
    switch (v) {
        case DependencyKind::structural: return "structural";
        case DependencyKind::procedural: return "procedural";
        case DependencyKind::data: return "data";
    }
    return "structural";
}

std::string_view to_string(EdgeRelation v) {
    return v == EdgeRelation::link ? "link" : "depends_on";
}

const AssetNode* AssetMap::find(std::string_view node_id) const {
    for (const auto& n : nodes)
        if (n.node_id == node_id) return &n;
    return nullptr;
}

namespace {

std::vector<AssetNode> sorted_nodes(std::vector<AssetNode> nodes) {
    std::sort(nodes.begin(), nodes.end(),
              [](const AssetNode& a, const AssetNode& b) { return a.node_id < b.node_id; });
    return nodes;
}

std::vector<AssetEdge> sorted_edges(std::vector<AssetEdge> edges) {
    std::sort(edges.begin(), edges.end());
    return edges;
}

}  // namespace

bool operator==(const AssetMap& a, const AssetMap& b) {
    return a.map_id == b.map_id && a.revision == b.revision && sorted_nodes(a.nodes) == sorted_nodes(b.nodes) &&
           sorted_edges(a.edges) == sorted_edges(b.edges);
}

// ============================================================================
// Validation
// ============================================================================

void validate(const AssetMap& map) {
    if (map.map_id.empty()) throw SchemaError("$.map_id", "must be a non-empty string");
    if (map.revision < 1) throw SchemaError("$.revision", "must be >= 1");

    std::set<std::string> ids;
    std::vector<std::string> duplicates;
    for (std::size_t i = 0; i < map.nodes.size(); ++i) {
        const auto& n = map.nodes[i];
        std::string base = "$.nodes[" + std::to_string(i) + "]";
        if (n.node_id.empty()) throw SchemaError(base + ".node_id", "must be a non-empty string");
        if (!ids.insert(n.node_id).second) duplicates.push_back(n.node_id);
        for (std::size_t a = 0; a < n.addresses.size(); ++a) {
            if (!is_ipv4(n.addresses[a])) {
                throw SchemaError(base + ".addresses[" + std::to_string(a) + "]",
                                  "'" + n.addresses[a] + "' is not a dotted-quad IPv4 address");
            }
        }
        for (std::size_t h = 0; h < n.hostnames.size(); ++h) {
            if (canonical_domain(n.hostnames[h]).empty()) {
                throw SchemaError(base + ".hostnames[" + std::to_string(h) + "]", "must be a non-empty domain");
            }
        }
        for (std::size_t s = 0; s < n.services.size(); ++s) {
            const auto& svc = n.services[s];
            std::string sbase = base + ".services[" + std::to_string(s) + "]";
            if (svc.name.empty()) throw SchemaError(sbase + ".name", "must be a non-empty string");
            for (std::size_t p = 0; p < svc.ports.size(); ++p) {
                if (svc.ports[p] < 1 || svc.ports[p] > 65535) {
                    throw SchemaError(sbase + ".ports[" + std::to_string(p) + "]", "port must be in 1..65535");
                }
            }
        }
    }
    if (!duplicates.empty()) throw IntegrityError(duplicates, "duplicate node_id: " + duplicates.front());

    std::set<std::string> dangling;
    for (const auto& n : map.nodes)
        for (const auto& d : n.dependencies)
            if (!ids.contains(d.target)) dangling.insert(d.target);

    std::set<AssetEdge> seen_edges;
    std::vector<std::string> bad_edges;
    for (const auto& e : map.edges) {
        if (!ids.contains(e.source)) dangling.insert(e.source);
        if (!ids.contains(e.target)) dangling.insert(e.target);
        if (e.relation == EdgeRelation::link && e.source == e.target) bad_edges.push_back(e.source);
        if (!seen_edges.insert(e).second) bad_edges.push_back(e.source + "->" + e.target);
    }
    if (!dangling.empty()) {
        std::vector<std::string> list(dangling.begin(), dangling.end());
        std::string msg = "references to unknown nodes:";
        for (const auto& id : list) msg += " " + id;
        throw IntegrityError(std::move(list), msg);
    }
    if (!bad_edges.empty()) {
        throw IntegrityError(bad_edges, "invalid edge (self-loop link or duplicate): " + bad_edges.front());
    }
}

// ============================================================================
// JSON
// ============================================================================

namespace {

[[noreturn]] void schema_fail(const std::string& path, const std::string& msg) {
    throw SchemaError(path, msg);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
    for (const auto& [k, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            schema_fail(path + "." + k, "unknown field");
        }
    }
}

const json& require(const json& obj, const std::string& path, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) schema_fail(path + "." + key, "required field missing");
    return *it;
}

std::string get_string(const json& v, const std::string& path) {
    if (!v.is_string()) schema_fail(path, "expected a string");
    return v.get<std::string>();
}

std::vector<std::string> get_string_list(const json& obj, const std::string& path, const char* key) {
    std::vector<std::string> out;
    auto it = obj.find(key);
    if (it == obj.end()) return out;
    std::string p = path + "." + key;
    if (!it->is_array()) schema_fail(p, "expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) out.push_back(get_string((*it)[i], p + "[" + std::to_string(i) + "]"));
    return out;
}

template <typename E, std::size_t N>
E get_enum(const json& v, const std::string& path, const std::array<E, N>& values) {
    auto s = get_string(v, path);
    for (auto e : values)
        if (to_string(e) == s) return e;
    schema_fail(path, "unknown value '" + s + "'");
}

constexpr std::array kRisk{RiskLevel::low, RiskLevel::medium, RiskLevel::high, RiskLevel::critical};
constexpr std::array kDepKinds{DependencyKind::structural, DependencyKind::procedural, DependencyKind::data};
constexpr std::array kRelations{EdgeRelation::link, EdgeRelation::depends_on};

AssetNode node_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) schema_fail(path, "expected an object");
    check_keys(j, path,
               {"node_id", "label", "group", "tags", "function", "services", "addresses", "hostnames", "geolocation",
                "dependencies", "risk_level"});
    AssetNode n;
    n.node_id = get_string(require(j, path, "node_id"), path + ".node_id");
    if (auto it = j.find("label"); it != j.end()) n.label = get_string(*it, path + ".label");
    if (auto it = j.find("group"); it != j.end() && !it->is_null()) n.group = get_string(*it, path + ".group");
    n.tags = get_string_list(j, path, "tags");
    if (auto it = j.find("function"); it != j.end()) n.function = get_string(*it, path + ".function");
    n.addresses = get_string_list(j, path, "addresses");
    n.hostnames = get_string_list(j, path, "hostnames");
    n.risk_level = get_enum(require(j, path, "risk_level"), path + ".risk_level", kRisk);

    if (auto it = j.find("services"); it != j.end()) {
        std::string sp = path + ".services";
        if (!it->is_array()) schema_fail(sp, "expected an array");
        for (std::size_t i = 0; i < it->size(); ++i) {
            const auto& s = (*it)[i];
            std::string p = sp + "[" + std::to_string(i) + "]";
            if (!s.is_object()) schema_fail(p, "expected an object");
            check_keys(s, p, {"name", "version", "ports"});
            Service svc;
            svc.name = get_string(require(s, p, "name"), p + ".name");
            if (auto v = s.find("version"); v != s.end() && !v->is_null()) svc.version = get_string(*v, p + ".version");
            if (auto ports = s.find("ports"); ports != s.end()) {
                if (!ports->is_array()) schema_fail(p + ".ports", "expected an array");
                for (std::size_t k = 0; k < ports->size(); ++k) {
                    const auto& port = (*ports)[k];
                    if (!port.is_number_integer()) schema_fail(p + ".ports[" + std::to_string(k) + "]", "expected an integer");
                    svc.ports.push_back(port.get<int>());
                }
            }
            n.services.push_back(std::move(svc));
        }
    }
    if (auto it = j.find("geolocation"); it != j.end() && !it->is_null()) {
        std::string gp = path + ".geolocation";
        if (!it->is_object()) schema_fail(gp, "expected an object");
        check_keys(*it, gp, {"country_code", "site_label"});
        Geolocation g;
        if (auto c = it->find("country_code"); c != it->end()) g.country_code = get_string(*c, gp + ".country_code");
        if (auto s = it->find("site_label"); s != it->end()) g.site_label = get_string(*s, gp + ".site_label");
        n.geolocation = g;
    }
    if (auto it = j.find("dependencies"); it != j.end()) {
        std::string dp = path + ".dependencies";
        if (!it->is_array()) schema_fail(dp, "expected an array");
        for (std::size_t i = 0; i < it->size(); ++i) {
            const auto& d = (*it)[i];
            std::string p = dp + "[" + std::to_string(i) + "]";
            if (!d.is_object()) schema_fail(p, "expected an object");
            check_keys(d, p, {"target", "kind"});
            n.dependencies.push_back(Dependency{get_string(require(d, p, "target"), p + ".target"),
                                                get_enum(require(d, p, "kind"), p + ".kind", kDepKinds)});
        }
    }
    return n;
}

json node_to_json(const AssetNode& n) {
    json j;
    j["node_id"] = n.node_id;
    j["label"] = n.label;
    if (n.group) j["group"] = *n.group;
    j["tags"] = n.tags;
    j["function"] = n.function;
    j["services"] = json::array();
    for (const auto& s : n.services) {
        json sj{{"name", s.name}, {"ports", s.ports}};
        if (s.version) sj["version"] = *s.version;
        j["services"].push_back(std::move(sj));
    }
    j["addresses"] = n.addresses;
    j["hostnames"] = n.hostnames;
    if (n.geolocation) j["geolocation"] = {{"country_code", n.geolocation->country_code}, {"site_label", n.geolocation->site_label}};
    j["dependencies"] = json::array();
    for (const auto& d : n.dependencies) j["dependencies"].push_back({{"target", d.target}, {"kind", to_string(d.kind)}});
    j["risk_level"] = to_string(n.risk_level);
    return j;
}

}  // namespace

AssetMap load_map(std::string_view document) {
    json doc = json::parse(document.begin(), document.end(), nullptr, false);
    if (doc.is_discarded()) schema_fail("$", "document is not valid JSON");
    if (!doc.is_object()) schema_fail("$", "expected an object");
    check_keys(doc, "$", {"schema", "map_id", "revision", "nodes", "edges"});
    if (auto it = doc.find("schema"); it != doc.end() && get_string(*it, "$.schema") != kSchemaId) {
        schema_fail("$.schema", "unsupported schema '" + it->get<std::string>() + "'");
    }
    AssetMap map;
    map.map_id = get_string(require(doc, "$", "map_id"), "$.map_id");
    const auto& rev = require(doc, "$", "revision");
    if (!rev.is_number_integer()) schema_fail("$.revision", "expected an integer");
    map.revision = rev.get<std::int64_t>();

    const auto& nodes = require(doc, "$", "nodes");
    if (!nodes.is_array()) schema_fail("$.nodes", "expected an array");
    for (std::size_t i = 0; i < nodes.size(); ++i) map.nodes.push_back(node_from_json(nodes[i], "$.nodes[" + std::to_string(i) + "]"));

    const auto& edges = require(doc, "$", "edges");
    if (!edges.is_array()) schema_fail("$.edges", "expected an array");
    for (std::size_t i = 0; i < edges.size(); ++i) {
        const auto& e = edges[i];
        std::string p = "$.edges[" + std::to_string(i) + "]";
        if (!e.is_object()) schema_fail(p, "expected an object");
        check_keys(e, p, {"source", "target", "relation"});
        map.edges.push_back(AssetEdge{get_string(require(e, p, "source"), p + ".source"),
                                      get_string(require(e, p, "target"), p + ".target"),
                                      get_enum(require(e, p, "relation"), p + ".relation", kRelations)});
    }
    validate(map);
    return map;
}

std::string save_map(const AssetMap& map) {
    json doc;
    doc["schema"] = kSchemaId;
    doc["map_id"] = map.map_id;
    doc["revision"] = map.revision;
    doc["nodes"] = json::array();
    for (const auto& n : sorted_nodes(map.nodes)) doc["nodes"].push_back(node_to_json(n));
    doc["edges"] = json::array();
    for (const auto& e : sorted_edges(map.edges)) {
        doc["edges"].push_back({{"source", e.source}, {"target", e.target}, {"relation", to_string(e.relation)}});
    }
    return doc.dump(2) + "\n";
}

// ============================================================================
// Feature index
// ============================================================================

FeatureIndex build_feature_index(const AssetMap& map) {
    FeatureIndex idx;
    idx.revision = map.revision;
    for (const auto& n : map.nodes) {
        idx.node_ids.insert(n.node_id);
        for (const auto& a : n.addresses) {
            idx.ip_set.insert(a);
            idx.ip_owners[a].insert(n.node_id);
        }
        for (const auto& h : n.hostnames) {
            auto d = canonical_domain(h);
            idx.hostname_set.insert(d);
            idx.hostname_owners[d].insert(n.node_id);
        }
        for (const auto& s : n.services) idx.service_set.insert(ServiceFeature{to_lower(s.name), s.version});
        for (const auto& t : n.tags) idx.tag_set.insert(t);
    }
    for (const auto& [ip, owners] : idx.ip_owners) idx.node_by_ip[ip] = *owners.begin();
    return idx;
}

// ============================================================================
// Editing
// ============================================================================

AssetMap apply_edit(const AssetMap& map, const MapEdit& edit) {
    AssetMap next = map;
    std::visit(
        [&next](const auto& e) {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, UpsertNode>) {
                auto it = std::find_if(next.nodes.begin(), next.nodes.end(),
                                       [&](const AssetNode& n) { return n.node_id == e.node.node_id; });
                if (it != next.nodes.end()) {
                    *it = e.node;
                } else {
                    next.nodes.push_back(e.node);
                }
            } else if constexpr (std::is_same_v<T, RemoveNode>) {
                auto it = std::find_if(next.nodes.begin(), next.nodes.end(),
                                       [&](const AssetNode& n) { return n.node_id == e.node_id; });
                if (it == next.nodes.end()) throw IntegrityError({e.node_id}, "no such node: " + e.node_id);
                std::vector<std::string> referrers;
                for (const auto& edge : next.edges)
                    if (edge.source == e.node_id || edge.target == e.node_id)
                        referrers.push_back(edge.source + "->" + edge.target);
                for (const auto& n : next.nodes)
                    for (const auto& d : n.dependencies)
                        if (d.target == e.node_id && n.node_id != e.node_id) referrers.push_back(n.node_id);
                if (!referrers.empty()) {
                    throw IntegrityError({e.node_id}, "node " + e.node_id + " is still referenced by " + referrers.front());
                }
                next.nodes.erase(it);
            } else if constexpr (std::is_same_v<T, UpsertEdge>) {
                if (std::find(next.edges.begin(), next.edges.end(), e.edge) == next.edges.end()) {
                    next.edges.push_back(e.edge);
                }
            } else {
                auto it = std::find(next.edges.begin(), next.edges.end(), e.edge);
                if (it == next.edges.end()) {
                    throw IntegrityError({e.edge.source, e.edge.target},
                                         "no such edge: " + e.edge.source + "->" + e.edge.target);
                }
                next.edges.erase(it);
            }
        },
        edit);
    next.revision = map.revision + 1;
    validate(next);
    return next;
}

AssetRepository::AssetRepository(AssetMap initial) {
    validate(initial);
    current_ = std::make_shared<const AssetMap>(std::move(initial));
}

std::shared_ptr<const AssetMap> AssetRepository::snapshot() const {
    std::shared_lock lock(mutex_);
    return current_;
}

std::shared_ptr<const AssetMap> AssetRepository::apply(const MapEdit& edit) {
    std::lock_guard writer(writer_);
    auto next = std::make_shared<const AssetMap>(apply_edit(*snapshot(), edit));
    std::unique_lock lock(mutex_);
    current_ = next;
    return next;
}

std::shared_ptr<const AssetMap> AssetRepository::replace(AssetMap next) {
    std::lock_guard writer(writer_);
    validate(next);
    if (next.revision <= snapshot()->revision) {
        throw Error("asset map revision must increase (current " + std::to_string(snapshot()->revision) + ")");
    }
    auto ptr = std::make_shared<const AssetMap>(std::move(next));
    std::unique_lock lock(mutex_);
    current_ = ptr;
    return ptr;
}

}  // namespace ctimp::assets
