#include "ctimp/cti_ingest.hpp"

#include <httplib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ctimp::ingest {

// ============================================================================
// FeedSource
// ============================================================================

void validate(const FeedSource& source) {
    if (source.source_id.empty()) throw Error("feed source_id must not be empty");
    if (source.location.empty()) throw Error("feed '" + source.source_id + "': location must not be empty");
    if (source.trust_tier < 1 || source.trust_tier > 5) {
        throw Error("feed '" + source.source_id + "': trust_tier must be in 1..5");
    }
    if (source.poll_interval < 30) {
        throw Error("feed '" + source.source_id + "': poll_interval must be >= 30 seconds");
    }
}

FeedSource feed_source_from_json(const json& j) {
    FeedSource s;
    s.source_id = j.at("source_id").get<std::string>();
    s.location = j.at("location").get<std::string>();
    auto kind = j.value("kind", std::string("stix_bundle"));
    if (kind == "stix_bundle") {
        s.kind = FeedKind::stix_bundle;
    } else if (kind == "ioc_directory") {
        s.kind = FeedKind::ioc_directory;
    } else {
        throw Error("feed '" + s.source_id + "': unknown kind '" + kind + "'");
    }
    s.trust_tier = j.value("trust_tier", kDefaultTrustTier);
    s.poll_interval = j.value("poll_interval", 300);
    s.enabled = j.value("enabled", true);
    validate(s);
    return s;
}

json to_json(const FeedSource& s) {
    return json{{"source_id", s.source_id},
                {"location", s.location},
                {"kind", s.kind == FeedKind::stix_bundle ? "stix_bundle" : "ioc_directory"},
                {"trust_tier", s.trust_tier},
                {"poll_interval", s.poll_interval},
                {"enabled", s.enabled}};
}

// ============================================================================
// Fetching
// ============================================================================

namespace {

bool is_http(std::string_view location) {
    return location.starts_with("http://") || location.starts_with("https://");
}

RawDocument read_file(const FeedSource& source, const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FetchError(source.source_id, "feed '" + source.source_id + "': cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw FetchError(source.source_id, "feed '" + source.source_id + "': read error on " + path.string());
    return RawDocument{ss.str(), path.string(), "application/json"};
}

RawDocument fetch_http(const FeedSource& source) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(source.location, m, url_re)) {
        throw FetchError(source.source_id, "feed '" + source.source_id + "': malformed URL " + source.location);
    }
    httplib::Client client(m[1].str());
    client.set_connection_timeout(10);
    client.set_read_timeout(30);
    client.set_follow_location(true);
    std::string path = m[2].matched ? m[2].str() : "/";
    auto res = client.Get(path);
    if (!res) {
        throw FetchError(source.source_id, "feed '" + source.source_id + "': " + source.location +
                                               " unreachable (" + httplib::to_string(res.error()) + ")");
    }
    if (res->status < 200 || res->status >= 300) {
        throw FetchError(source.source_id, "feed '" + source.source_id + "': " + source.location +
                                               " returned HTTP " + std::to_string(res->status));
    }
    return RawDocument{res->body, source.location, res->get_header_value("Content-Type")};
}

}  // namespace

std::vector<RawDocument> fetch_feed(const FeedSource& source) {
    if (!source.enabled) throw Error("feed '" + source.source_id + "' is disabled");
    if (source.kind == FeedKind::stix_bundle) {
        if (is_http(source.location)) return {fetch_http(source)};
        return {read_file(source, source.location)};
    }

    std::error_code ec;
    if (!fs::is_directory(source.location, ec)) {
        throw FetchError(source.source_id,
                         "feed '" + source.source_id + "': " + source.location + " is not a readable directory");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(source.location, ec)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    if (ec) throw FetchError(source.source_id, "feed '" + source.source_id + "': " + ec.message());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    std::vector<RawDocument> docs;
    docs.reserve(files.size());
    for (const auto& f : files) docs.push_back(read_file(source, f));
    return docs;
}

// ============================================================================
// Bundle parsing
// ============================================================================

json to_stix_object(const IndicatorRecord& record) {
    json obj = record.object.is_object() ? record.object : json::object();
    if (!record.object.is_object()) {
        obj["type"] = "indicator";
        obj["spec_version"] = "2.1";
        obj["id"] = record.stix_id;
        obj["created"] = format_rfc3339(record.created);
        obj["modified"] = format_rfc3339(record.modified);
        obj["pattern"] = record.pattern_text;
        obj["pattern_type"] = "stix";
        obj["valid_from"] = format_rfc3339(record.valid_from);
        if (record.valid_until) obj["valid_until"] = format_rfc3339(*record.valid_until);
        if (!record.labels.empty()) obj["labels"] = record.labels;
    }
    obj["x_ctimp_source_id"] = record.source_id;
    obj["x_ctimp_trust_tier"] = record.trust_tier;
    return obj;
}

namespace {

const std::regex& indicator_id_re() {
    static const std::regex re(
        R"(^indicator--[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}$)");
    return re;
}

std::optional<Timestamp> timestamp_field(const json& obj, const char* key, std::string& problem) {
    auto it = obj.find(key);
    if (it == obj.end()) return std::nullopt;
    if (!it->is_string()) {
        problem = std::string(key) + " is not a string";
        return std::nullopt;
    }
    auto ts = parse_rfc3339(it->get<std::string>());
    if (!ts) problem = std::string(key) + " is not an RFC 3339 timestamp";
    return ts;
}

struct ObjectOutcome {
    std::optional<IndicatorRecord> record;
    std::optional<RevocationNotice> revocation;
    std::optional<std::string> problem;
};

ObjectOutcome parse_indicator(const json& obj, const FeedSource& source) {
    ObjectOutcome out;
    auto fail = [&out](std::string msg) {
        out.problem = std::move(msg);
        return out;
    };

    IndicatorRecord r;
    r.stix_id = obj.at("id").get<std::string>();
    if (!std::regex_match(r.stix_id, indicator_id_re())) return fail("malformed indicator id");

    std::string problem;
    auto created = timestamp_field(obj, "created", problem);
    auto modified = timestamp_field(obj, "modified", problem);
    auto valid_from = timestamp_field(obj, "valid_from", problem);
    auto valid_until = timestamp_field(obj, "valid_until", problem);
    if (!problem.empty()) return fail(problem);
    if (!created || !modified) return fail("created and modified are required");
    if (*modified < *created) return fail("modified precedes created");

    if (obj.value("revoked", false)) {
        out.revocation = RevocationNotice{r.stix_id, *modified};
        return fail("indicator is revoked");
    }
    if (!valid_from) return fail("valid_from is required");
    if (valid_until && *valid_until <= *valid_from) return fail("valid_until must be after valid_from");

    auto pattern_type = obj.value("pattern_type", std::string("stix"));
    if (pattern_type != "stix") return fail("unsupported pattern_type '" + pattern_type + "'");
    auto pit = obj.find("pattern");
    if (pit == obj.end() || !pit->is_string()) return fail("pattern is missing");

    r.created = *created;
    r.modified = *modified;
    r.valid_from = *valid_from;
    r.valid_until = valid_until;
    r.pattern_text = pit->get<std::string>();
    try {
        r.expr = parse_pattern(r.pattern_text);
    } catch (const PatternError& e) {
        return fail(std::string("pattern rejected: ") + e.what());
    }
    if (auto lit = obj.find("labels"); lit != obj.end() && lit->is_array()) {
        for (const auto& l : *lit)
            if (l.is_string()) r.labels.push_back(l.get<std::string>());
    }
    r.source_id = source.source_id;
    r.trust_tier = source.trust_tier;
    r.object = obj;
    r.object.erase("x_ctimp_source_id");
    r.object.erase("x_ctimp_trust_tier");
    out.record = std::move(r);
    return out;
}

}  // namespace

BundleParseResult parse_stix_bundle(std::string_view document, const FeedSource& source) {
    json doc = json::parse(document.begin(), document.end(), nullptr, false);
    if (doc.is_discarded()) throw BundleError("feed '" + source.source_id + "': document is not valid JSON");
    if (!doc.is_object() || doc.value("type", json()) != "bundle") {
        throw BundleError("feed '" + source.source_id + "': top-level object is not a STIX bundle");
    }
    BundleParseResult result;
    auto oit = doc.find("objects");
    if (oit == doc.end() || oit->is_null()) return result;
    if (!oit->is_array()) throw BundleError("feed '" + source.source_id + "': bundle objects is not an array");

    std::size_t index = 0;
    for (const auto& obj : *oit) {
        std::string locator = "objects[" + std::to_string(index++) + "]";
        if (!obj.is_object()) {
            result.diagnostics.push_back({locator, "object is not a JSON object"});
            continue;
        }
        auto id_it = obj.find("id");
        std::string id = id_it != obj.end() && id_it->is_string() ? id_it->get<std::string>() : locator;
        auto type_it = obj.find("type");
        if (type_it == obj.end() || !type_it->is_string()) {
            result.diagnostics.push_back({id, "object has no type"});
            continue;
        }
        if (*type_it != "indicator") {
            result.diagnostics.push_back({id, "skipped object of type '" + type_it->get<std::string>() + "'"});
            continue;
        }
        if (id == locator) {
            result.diagnostics.push_back({id, "indicator has no id"});
            continue;
        }
        ObjectOutcome outcome;
        try {
            outcome = parse_indicator(obj, source);
        } catch (const json::exception& e) {
            outcome.problem = std::string("malformed indicator: ") + e.what();
        }
        if (outcome.revocation) result.revocations.push_back(*outcome.revocation);
        if (outcome.record) {
            result.records.push_back(std::move(*outcome.record));
        } else {
            result.diagnostics.push_back({id, outcome.problem.value_or("rejected")});
        }
    }
    return result;
}

BundleParseResult parse_tailored_bundle(std::string_view document) {
    FeedSource synthetic{"tailored", "-", FeedKind::stix_bundle, kDefaultTrustTier, 300, true};
    auto result = parse_stix_bundle(document, synthetic);
    json doc = json::parse(document.begin(), document.end());
    std::map<std::string, const json*> by_id;
    const json objects = doc.value("objects", json::array());
    for (const auto& obj : objects)
        if (obj.is_object() && obj.contains("id")) by_id[obj["id"].get<std::string>()] = &obj;
    for (auto& r : result.records) {
        const json& obj = *by_id.at(r.stix_id);
        r.source_id = obj.value("x_ctimp_source_id", r.source_id);
        r.trust_tier = obj.value("x_ctimp_trust_tier", r.trust_tier);
    }
    return result;
}

// ============================================================================
// Store
// ============================================================================

namespace {

MergeDelta merge_into(IndicatorMap& map, const std::vector<IndicatorRecord>& incoming,
                      const std::vector<RevocationNotice>& revocations) {
    MergeDelta delta;
    for (const auto& rec : incoming) {
        auto it = map.find(rec.stix_id);
        if (it == map.end()) {
            map.emplace(rec.stix_id, rec);
            ++delta.added;
        } else if (rec.modified > it->second.modified) {
            it->second = rec;
            ++delta.updated;
        } else {
            ++delta.unchanged;
        }
    }
    for (const auto& rev : revocations) {
        auto it = map.find(rev.stix_id);
        if (it == map.end()) continue;
        if (rev.modified > it->second.modified) {
            it->second.revoked = true;
            it->second.modified = rev.modified;
            ++delta.updated;
        } else {
            ++delta.unchanged;
        }
    }
    return delta;
}

}  // namespace

IndicatorStore::IndicatorStore() : current_(std::make_shared<const IndicatorMap>()) {}

std::shared_ptr<const IndicatorMap> IndicatorStore::snapshot() const {
    std::shared_lock lock(mutex_);
    return current_;
}

MergeDelta IndicatorStore::merge(const std::vector<IndicatorRecord>& incoming,
                                 const std::vector<RevocationNotice>& revocations) {
    std::lock_guard writer(writer_);
    auto next = std::make_shared<IndicatorMap>(*snapshot());
    auto delta = merge_into(*next, incoming, revocations);
    std::unique_lock lock(mutex_);
    current_ = std::move(next);
    return delta;
}

void IndicatorStore::replace_all(IndicatorMap records) {
    std::lock_guard writer(writer_);
    auto next = std::make_shared<const IndicatorMap>(std::move(records));
    std::unique_lock lock(mutex_);
    current_ = std::move(next);
}

std::size_t IndicatorStore::size() const {
    return snapshot()->size();
}

MergeDelta dedupe_and_merge(const std::vector<IndicatorRecord>& incoming, IndicatorStore& store) {
    return store.merge(incoming);
}

}  // namespace ctimp::ingest
