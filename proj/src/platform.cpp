#include "ctimp/platform.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctimp::platform {

std::string_view to_string(Role r) {
    return r == Role::admin ? "admin" : "analyst";
}

// ============================================================================
// Configuration
// ============================================================================

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw Error(where + " must be an object");
    for (const auto& [k, _] : j.items())
        if (!known.contains(k)) throw Error(where + ": unknown key '" + k + "'");
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

bool is_url(std::string_view s) {
    return s.rfind("http://", 0) == 0 || s.rfind("https://", 0) == 0;
}

}  // namespace

PlatformConfig config_from_json(const json& j, const fs::path& base_dir) {
    reject_unknown(j,
                   {"data_dir", "asset_map", "rules_dir", "cycle_interval_seconds", "feeds", "relevance", "detect",
                    "selfheal", "api", "fault_injection"},
                   "config");
    PlatformConfig c;
    c.base_dir = base_dir;
    try {
        c.data_dir = resolve(base_dir, j.value("data_dir", "data"));
        c.asset_map_path = resolve(base_dir, j.at("asset_map").get<std::string>());
        c.rules_dir = resolve(base_dir, j.value("rules_dir", "rules"));
        c.cycle_interval_seconds = j.value("cycle_interval_seconds", 300);

        std::set<std::string> ids;
        for (const auto& f : j.value("feeds", json::array())) {
            auto src = ingest::feed_source_from_json(f);
            if (!is_url(src.location)) src.location = resolve(base_dir, src.location).string();
            if (!ids.insert(src.source_id).second) throw Error("duplicate feed source_id " + src.source_id);
            c.feeds.push_back(std::move(src));
        }

        if (j.contains("relevance")) {
            const auto& r = j.at("relevance");
            reject_unknown(r, {"min_trust_tier", "keep_host_agnostic"}, "relevance");
            c.relevance.min_trust_tier = r.value("min_trust_tier", c.relevance.min_trust_tier);
            c.relevance.keep_host_agnostic = r.value("keep_host_agnostic", c.relevance.keep_host_agnostic);
        }

        if (j.contains("detect")) {
            const auto& d = j.at("detect");
            reject_unknown(d, {"packs", "intake", "intake_path", "suppression_seconds", "bsd_year"}, "detect");
            for (const auto& p : d.value("packs", json::array())) c.detect.packs.push_back(resolve(base_dir, p.get<std::string>()));
            auto intake = d.value("intake", "none");
            if (intake == "none") c.detect.intake = IntakeMode::none;
            else if (intake == "replay") c.detect.intake = IntakeMode::replay;
            else if (intake == "tail") c.detect.intake = IntakeMode::tail;
            else throw Error("detect.intake: unknown mode '" + intake + "'");
            if (d.contains("intake_path")) c.detect.intake_path = resolve(base_dir, d.at("intake_path").get<std::string>());
            c.detect.suppression = std::chrono::seconds{d.value("suppression_seconds", 300)};
            c.detect.bsd_year = d.value("bsd_year", c.detect.bsd_year);
        }

        if (j.contains("selfheal")) {
            const auto& s = j.at("selfheal");
            reject_unknown(s, {"executor", "policies", "timeout_seconds", "fake_exit_status", "ssh_binary", "nodes"},
                           "selfheal");
            c.selfheal.executor = s.value("executor", "fake");
            if (s.contains("policies")) c.selfheal.policies_path = resolve(base_dir, s.at("policies").get<std::string>());
            c.selfheal.timeout = std::chrono::milliseconds{
                static_cast<std::int64_t>(s.value("timeout_seconds", 30.0) * 1000)};
            c.selfheal.fake_exit_status = s.value("fake_exit_status", 0);
            c.selfheal.ssh_binary = s.value("ssh_binary", "ssh");
            const json nodes = s.value("nodes", json::object());
            for (const auto& [node, t] : nodes.items()) {
                reject_unknown(t, {"address", "user", "identity_file", "port"}, "selfheal.nodes." + node);
                NodeTransport nt;
                nt.address = t.at("address").get<std::string>();
                if (t.contains("user")) nt.user = t.at("user").get<std::string>();
                if (t.contains("identity_file")) nt.identity_file = resolve(base_dir, t.at("identity_file").get<std::string>()).string();
                if (t.contains("port")) nt.port = t.at("port").get<int>();
                c.selfheal.nodes[node] = nt;
            }
        }

        if (j.contains("api")) {
            const auto& a = j.at("api");
            reject_unknown(a, {"enabled", "bind", "port", "tokens"}, "api");
            c.api.enabled = a.value("enabled", true);
            c.api.bind = a.value("bind", c.api.bind);
            c.api.port = a.value("port", c.api.port);
            for (const auto& t : a.value("tokens", json::array())) {
                reject_unknown(t, {"token", "role", "actor"}, "api.tokens[]");
                ApiToken tok;
                tok.token = t.at("token").get<std::string>();
                auto role = t.value("role", "analyst");
                if (role == "admin") tok.role = Role::admin;
                else if (role == "analyst") tok.role = Role::analyst;
                else throw Error("api.tokens[]: unknown role '" + role + "'");
                tok.actor = t.value("actor", role);
                c.api.tokens.push_back(std::move(tok));
            }
        }

        if (j.contains("fault_injection")) {
            const auto& f = j.at("fault_injection");
            reject_unknown(f, {"swap_delay_ms"}, "fault_injection");
            c.fault_swap_delay = std::chrono::milliseconds{f.value("swap_delay_ms", 0)};
        }
    } catch (const json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    validate(c);
    return c;
}

void validate(const PlatformConfig& c) {
    if (c.asset_map_path.empty()) throw Error("config: asset_map is required");
    if (c.cycle_interval_seconds < 0) throw Error("config: cycle_interval_seconds must be >= 0");
    if (c.detect.suppression.count() < 0) throw Error("config: detect.suppression_seconds must be >= 0");
    if (c.selfheal.executor != "fake" && c.selfheal.executor != "ssh") {
        throw Error("config: selfheal.executor must be fake or ssh");
    }
    if (c.selfheal.timeout.count() <= 0) throw Error("config: selfheal.timeout_seconds must be > 0");
    if (c.detect.intake != IntakeMode::none && c.detect.intake_path.empty()) {
        throw Error("config: detect.intake_path is required for intake mode");
    }
    if (c.api.enabled) {
        if (c.api.tokens.empty()) throw Error("config: api.tokens must not be empty when the api is enabled");
        std::set<std::string> seen;
        for (const auto& t : c.api.tokens) {
            if (t.token.empty()) throw Error("config: api token must not be empty");
            if (!seen.insert(t.token).second) throw Error("config: duplicate api token");
        }
    }
    for (const auto& f : c.feeds) ingest::validate(f);
}

PlatformConfig load_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
    auto base = fs::absolute(path).parent_path();
    return config_from_json(j, base);
}

std::optional<fs::path> resolve_config_path(const std::optional<std::string>& explicit_path) {
    if (explicit_path && !explicit_path->empty()) return fs::path(*explicit_path);
    if (const char* env = std::getenv("CTIMP_CONFIG"); env && *env) return fs::path(env);
    return std::nullopt;
}

// ============================================================================
// Reports
// ============================================================================

json to_json(const FeedStatus& s, const ingest::FeedSource& source) {
    json j = ingest::to_json(source);
    j["last_sync"] = s.last_sync ? json(format_rfc3339(*s.last_sync)) : json();
    j["last_error"] = s.last_error ? json(*s.last_error) : json();
    j["documents"] = s.documents;
    j["records"] = s.records;
    j["diagnostics"] = s.diagnostics;
    return j;
}

json to_json(const CycleReport& r) {
    json failures = json::array();
    for (const auto& [id, err] : r.feed_failures) failures.push_back({{"source_id", id}, {"error", err}});
    return json{{"feeds_fetched", r.feeds_fetched},
                {"feed_failures", failures},
                {"documents", r.documents},
                {"records_parsed", r.records_parsed},
                {"parse_diagnostics", r.parse_diagnostics},
                {"merge", {{"added", r.merge.added}, {"updated", r.merge.updated}, {"unchanged", r.merge.unchanged}}},
                {"tailored", r.tailored},
                {"rules_written", r.rules_written},
                {"compile_diagnostics", r.compile_diagnostics},
                {"rules_swapped", r.rules_swapped},
                {"rules_generation", r.rules_generation},
                {"tailored_path", r.tailored_path},
                {"map_revision", r.map_revision}};
}

detect::DetectionPack load_packs(const std::vector<fs::path>& packs) {
    detect::DetectionPack all;
    for (const auto& p : packs) {
        detect::DetectionPack one;
        try {
            one = detect::parse_detection_pack(read_file(p));
        } catch (const Error& e) {
            throw Error(p.string() + ": " + e.what());
        }
        all.decoders.insert(all.decoders.end(), one.decoders.begin(), one.decoders.end());
        all.rules.insert(all.rules.end(), one.rules.begin(), one.rules.end());
    }
    detect::DecoderSet check(all.decoders);
    detect::validate_rules(all.rules);
    return all;
}

// ============================================================================
// Platform
// ============================================================================

Platform::Platform(PlatformConfig config) : Platform(std::move(config), Options{}) {}

Platform::Platform(PlatformConfig config, Options options)
    : config_(std::move(config)),
      options_(std::move(options)),
      rules_(config_.rules_dir, config_.fault_swap_delay),
      alerts_(config_.detect.suppression) {
    validate(config_);
    fs::create_directories(config_.data_dir);
    if (!options_.ephemeral) {
        db_ = std::make_unique<Database>(config_.data_dir / "ctimp.db");
        indicators_.replace_all(db_->indicators());
    }

    auto map = assets::load_map(read_file(config_.asset_map_path));
    assets_ = std::make_unique<assets::AssetRepository>(std::move(map));

    rules_.recover();
    native_ = load_packs(config_.detect.packs);
    engine_ = std::make_unique<detect::DetectionEngine>(detect::DecoderSet(native_.decoders), native_.rules);
    reload_rules();

    if (db_) alerts_.restore(db_->alerts());
    alerts_.subscribe([this](const alerts::AlertChange& change) {
        if (db_) db_->put_alert(change.alert);
        bus_.publish(change.kind == alerts::ChangeKind::created ? "alert.created" : "alert.updated",
                     alerts::to_json(change.alert));
    });

    executor_ = options_.executor;
    if (!executor_) {
        if (config_.selfheal.executor == "ssh") {
            selfheal::SshExecutor::Options o;
            o.ssh_binary = config_.selfheal.ssh_binary;
            executor_ = std::make_shared<selfheal::SshExecutor>(o);
        } else {
            selfheal::FakeExecutor::Script s;
            s.exit_status = config_.selfheal.fake_exit_status;
            executor_ = std::make_shared<selfheal::FakeExecutor>(s);
        }
    }
    selfheal::PolicyStore policies;
    if (!config_.selfheal.policies_path.empty()) policies = selfheal::load_policy_store(read_file(config_.selfheal.policies_path));
    for (const auto& p : policies.policies()) {
        if (p.selector == selfheal::SelectorKind::threat_type && !policies.threats().empty() &&
            !policies.knows_threat_type(p.selector_value)) {
            spdlog::warn("policy {} selects threat type '{}' which the threat table does not list", p.policy_id,
                         p.selector_value);
        }
    }
    auto resolver = [this](const std::string& node) -> std::optional<std::string> {
        if (auto it = config_.selfheal.nodes.find(node); it != config_.selfheal.nodes.end()) return it->second.address;
        auto snap = assets_->snapshot();
        if (const auto* n = snap->find(node); n && !n->addresses.empty()) return n->addresses.front();
        return std::nullopt;
    };
    auto audit = std::make_shared<selfheal::AuditLog>(config_.data_dir / "selfheal-audit.log");
    selfheal_ = std::make_unique<selfheal::SelfHealEngine>(std::move(policies), executor_, resolver, audit,
                                                           config_.selfheal.timeout);
    if (db_) selfheal_->restore(db_->commands());
    selfheal_->subscribe([this](const selfheal::CommandRecord& r, bool created) {
        if (db_) db_->put_command(r);
        bus_.publish(created ? "command.created" : "command.updated", selfheal::to_json(r));
    });

    for (const auto& f : config_.feeds) feed_status_[f.source_id].source_id = f.source_id;
}

Platform::~Platform() {
    stop();
}

std::uint64_t Platform::reload_rules() {
    auto snap = rules_.load();
    auto sigma_rules = detect::load_sigma_rules(snap.documents);
    auto all = native_.rules;
    all.insert(all.end(), sigma_rules.begin(), sigma_rules.end());
    engine_->reload(std::move(all), snap.generation);
    {
        std::lock_guard lock(manifest_mutex_);
        manifest_ = snap.manifest;
    }
    rules_generation_ = snap.generation;
    return snap.generation;
}

std::map<std::string, std::string> Platform::rule_manifest() const {
    std::lock_guard lock(manifest_mutex_);
    return manifest_;
}

std::shared_ptr<const assets::AssetMap> Platform::refresh_asset_map() {
    auto map = assets::load_map(read_file(config_.asset_map_path));
    auto current = assets_->snapshot();
    if (map.revision > current->revision) return assets_->replace(std::move(map));
    return current;
}

CycleReport Platform::install_rules(const sigma::RuleSet& set, CycleReport report) {
    report.compile_diagnostics = set.diagnostics.size();
    for (const auto& d : set.diagnostics) spdlog::info("compile {}: {}", d.stix_id, d.message);
    if (rules_.matches(set)) {
        report.rules_generation = rules_.generation();
        return report;
    }
    rules_.install(set);
    report.rules_generation = reload_rules();
    report.rules_swapped = true;
    report.rules_written = set.rules.size();
    return report;
}

CycleReport Platform::run_pipeline_cycle(Timestamp now, const std::optional<std::string>& only_feed) {
    std::lock_guard cycle(cycle_mutex_);
    CycleReport report;
    auto map = refresh_asset_map();
    report.map_revision = map->revision;

    for (const auto& source : config_.feeds) {
        if (!source.enabled) continue;
        if (only_feed && source.source_id != *only_feed) continue;
        FeedStatus status;
        {
            std::lock_guard lock(feeds_mutex_);
            status = feed_status_[source.source_id];
        }
        status.source_id = source.source_id;
        try {
            auto docs = ingest::fetch_feed(source);
            ++report.feeds_fetched;
            std::vector<ingest::IndicatorRecord> records;
            std::vector<ingest::RevocationNotice> revocations;
            std::size_t diagnostics = 0;
            std::optional<std::string> doc_error;
            for (const auto& doc : docs) {
                try {
                    auto parsed = ingest::parse_stix_bundle(doc.bytes, source);
                    diagnostics += parsed.diagnostics.size();
                    for (const auto& d : parsed.diagnostics) spdlog::debug("{} {}: {}", source.source_id, d.object_id, d.message);
                    records.insert(records.end(), parsed.records.begin(), parsed.records.end());
                    revocations.insert(revocations.end(), parsed.revocations.begin(), parsed.revocations.end());
                } catch (const ingest::BundleError& e) {
                    doc_error = doc.origin + ": " + e.what();
                    report.feed_failures.emplace_back(source.source_id, *doc_error);
                }
            }
            auto delta = indicators_.merge(records, revocations);
            report.merge.added += delta.added;
            report.merge.updated += delta.updated;
            report.merge.unchanged += delta.unchanged;
            report.documents += docs.size();
            report.records_parsed += records.size();
            report.parse_diagnostics += diagnostics;
            status.last_sync = now;
            status.last_error = doc_error;
            status.documents = docs.size();
            status.records = records.size();
            status.diagnostics = diagnostics;
        } catch (const ingest::FetchError& e) {
            spdlog::warn("feed {} unavailable: {}", source.source_id, e.what());
            report.feed_failures.emplace_back(source.source_id, e.what());
            status.last_error = e.what();
        }
        std::lock_guard lock(feeds_mutex_);
        feed_status_[source.source_id] = status;
    }

    auto snapshot = indicators_.snapshot();
    if (db_) db_->put_indicators(*snapshot);
    std::vector<ingest::IndicatorRecord> inds;
    inds.reserve(snapshot->size());
    for (const auto& [_, r] : *snapshot) inds.push_back(r);

    auto idx = assets::build_feature_index(*map);
    auto tailored = relevance::tailor_bundle(inds, idx, config_.relevance, now);
    report.tailored = tailored.retained.size();
    auto tailored_path = config_.data_dir / "tailored" / relevance::tailored_filename(map->revision, now);
    write_file_atomic(tailored_path, tailored.document);
    report.tailored_path = tailored_path.string();

    return install_rules(sigma::compile_ruleset(tailored), report);
}

CycleReport Platform::compile_tailored(std::string_view tailored_document) {
    std::lock_guard cycle(cycle_mutex_);
    auto parsed = ingest::parse_tailored_bundle(tailored_document);
    CycleReport report;
    report.records_parsed = parsed.records.size();
    report.parse_diagnostics = parsed.diagnostics.size();
    report.tailored = parsed.records.size();
    report.map_revision = assets_->snapshot()->revision;
    return install_rules(sigma::compile_ruleset(parsed.records), report);
}

ReplayReport Platform::ingest_line(std::string_view line) {
    ReplayReport rep;
    rep.lines = 1;
    auto event = detect::parse_log_line(line, config_.detect.bsd_year);
    if (!event) return rep;
    rep.parsed = 1;
    std::lock_guard lock(intake_mutex_);
    auto matches = engine_->process(*event);
    if (matches.empty()) return rep;
    auto rules = engine_->rules();
    for (const auto& m : matches) {
        ++rep.matches;
        auto it = std::find_if(rules->begin(), rules->end(), [&](const detect::DetectionRule& r) { return r.rule_id == m.rule_id; });
        if (it == rules->end()) continue;
        auto raised = alerts_.raise(m, *it);
        if (!raised.created) {
            ++rep.alerts_suppressed;
            continue;
        }
        ++rep.alerts_created;
        if (!options_.selfheal_on_alert) continue;
        auto handled = selfheal_->handle_alert(raised.alert, *assets_->snapshot());
        if (handled.render_error) spdlog::warn("alert {}: {}", raised.alert.alert_id, *handled.render_error);
        rep.commands += handled.records.size();
    }
    return rep;
}

ReplayReport Platform::replay(std::istream& in) {
    ReplayReport total;
    std::string line;
    while (std::getline(in, line)) {
        auto r = ingest_line(line);
        total.lines += r.lines;
        total.parsed += r.parsed;
        total.matches += r.matches;
        total.alerts_created += r.alerts_created;
        total.alerts_suppressed += r.alerts_suppressed;
        total.commands += r.commands;
    }
    return total;
}

selfheal::SelfHealEngine::HandleResult Platform::simulate_alert(const std::string& threat_type,
                                                                const std::string& threat_group,
                                                                const detect::Fields& fields, Timestamp at) {
    detect::DetectionRule rule;
    rule.rule_id = "simulated:" + threat_type;
    rule.level = 10;
    rule.threat_type = threat_type;
    rule.threat_group = threat_group;
    rule.description = "simulated alert";
    detect::RuleMatch match;
    match.rule_id = rule.rule_id;
    match.event.base = detect::LogEvent{at, "simulator", std::string("ctimp"), "simulated alert"};
    match.event.decoder = "simulated";
    match.event.fields = fields;
    match.key = fields;
    match.key["nonce"] = uuid_v4().str();
    auto raised = alerts_.raise(match, rule);
    return selfheal_->handle_alert(raised.alert, *assets_->snapshot());
}

std::shared_ptr<const assets::AssetMap> Platform::put_asset_map(assets::AssetMap map) {
    assets::validate(map);
    auto current = assets_->snapshot();
    if (map.revision <= current->revision) {
        throw IllegalTransition("assetmap", "revision " + std::to_string(current->revision),
                                "revision " + std::to_string(map.revision));
    }
    write_file_atomic(config_.asset_map_path, assets::save_map(map));
    auto next = assets_->replace(std::move(map));
    trigger_cycle();
    return next;
}

std::optional<ingest::FeedSource> Platform::feed(const std::string& source_id) const {
    for (const auto& f : config_.feeds)
        if (f.source_id == source_id) return f;
    return std::nullopt;
}

std::vector<std::pair<ingest::FeedSource, FeedStatus>> Platform::feeds() const {
    std::lock_guard lock(feeds_mutex_);
    std::vector<std::pair<ingest::FeedSource, FeedStatus>> out;
    for (const auto& f : config_.feeds) {
        auto it = feed_status_.find(f.source_id);
        out.emplace_back(f, it == feed_status_.end() ? FeedStatus{f.source_id, {}, {}, 0, 0, 0} : it->second);
    }
    return out;
}

// ============================================================================
// Background work
// ============================================================================

void Platform::start_background() {
    std::lock_guard lock(bg_mutex_);
    stopping_ = false;
    if (config_.cycle_interval_seconds > 0) threads_.emplace_back([this] { scheduler_loop(); });
    if (config_.detect.intake == IntakeMode::replay) {
        threads_.emplace_back([this] {
            std::ifstream in(config_.detect.intake_path);
            if (!in) {
                spdlog::error("cannot open replay file {}", config_.detect.intake_path.string());
                return;
            }
            auto r = replay(in);
            spdlog::info("replay done: {} lines, {} alerts", r.lines, r.alerts_created);
        });
    } else if (config_.detect.intake == IntakeMode::tail) {
        threads_.emplace_back([this] { tail_loop(); });
    }
}

void Platform::trigger_cycle() {
    {
        std::lock_guard lock(bg_mutex_);
        cycle_requested_ = true;
    }
    bg_cv_.notify_all();
}

void Platform::stop() {
    {
        std::lock_guard lock(bg_mutex_);
        stopping_ = true;
    }
    bg_cv_.notify_all();
    for (auto& t : threads_)
        if (t.joinable()) t.join();
    threads_.clear();
    bus_.close_all();
}

void Platform::scheduler_loop() {
    for (;;) {
        try {
            auto report = run_pipeline_cycle(now_utc());
            spdlog::info("cycle: {}", to_json(report).dump());
        } catch (const std::exception& e) {
            spdlog::error("pipeline cycle aborted: {}", e.what());
        }
        std::unique_lock lock(bg_mutex_);
        bg_cv_.wait_for(lock, std::chrono::seconds{config_.cycle_interval_seconds},
                        [&] { return stopping_ || cycle_requested_; });
        if (stopping_) return;
        cycle_requested_ = false;
    }
}

void Platform::tail_loop() {
    std::ifstream in;
    std::uintmax_t offset = 0;
    std::error_code ec;
    if (fs::exists(config_.detect.intake_path, ec)) offset = fs::file_size(config_.detect.intake_path, ec);
    std::string partial;
    for (;;) {
        {
            std::unique_lock lock(bg_mutex_);
            if (bg_cv_.wait_for(lock, std::chrono::milliseconds{200}, [&] { return stopping_; })) return;
        }
        auto size = fs::file_size(config_.detect.intake_path, ec);
        if (ec) continue;
        if (size < offset) offset = 0;  // truncated or rotated
        if (size == offset) continue;
        std::ifstream f(config_.detect.intake_path, std::ios::binary);
        f.seekg(static_cast<std::streamoff>(offset));
        std::string chunk(static_cast<std::size_t>(size - offset), '\0');
        f.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
        chunk.resize(static_cast<std::size_t>(f.gcount()));
        offset += chunk.size();
        partial += chunk;
        std::size_t pos;
        while ((pos = partial.find('\n')) != std::string::npos) {
            ingest_line(std::string_view(partial).substr(0, pos));
            partial.erase(0, pos + 1);
        }
    }
}

}  // namespace ctimp::platform
