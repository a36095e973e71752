// ctimp/platform.hpp - configuration, the pipeline cycle, detection intake
// and the wiring between modules.
//
// Modules share no mutable state: the indicator store, asset repository and
// detection engine publish immutable snapshots, and every alert or command
// change is persisted and published on the event bus from inside the owning
// store's commit.

#pragma once

#include "ctimp/alerts.hpp"
#include "ctimp/asset_inventory.hpp"
#include "ctimp/cti_ingest.hpp"
#include "ctimp/detection.hpp"
#include "ctimp/relevance.hpp"
#include "ctimp/selfheal.hpp"
#include "ctimp/sigma_compiler.hpp"
#include "ctimp/storage.hpp"

#include <json.hpp>

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <istream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace ctimp::platform {

// ============================================================================
// Configuration
// ============================================================================

enum class Role { admin, analyst };

std::string_view to_string(Role r);

struct ApiToken {
    std::string token;
    Role role = Role::analyst;
    std::string actor;  ///< identity recorded on verdicts and matched against assignees
};

struct NodeTransport {
    std::string address;
    std::optional<std::string> user;
    std::optional<std::string> identity_file;
    std::optional<int> port;
};

enum class IntakeMode { none, replay, tail };

struct PlatformConfig {
    std::filesystem::path base_dir;  ///< relative paths below resolve against this
    std::vector<ingest::FeedSource> feeds;
    std::filesystem::path asset_map_path;
    relevance::RelevancePolicy relevance;
    std::filesystem::path rules_dir;
    std::filesystem::path data_dir;
    int cycle_interval_seconds = 300;

    struct Detect {
        std::vector<std::filesystem::path> packs;  ///< native decoder/rule packs
        IntakeMode intake = IntakeMode::none;
        std::filesystem::path intake_path;
        std::chrono::seconds suppression = alerts::kDefaultSuppression;
        int bsd_year = 1970;
    } detect;

    struct SelfHeal {
        std::string executor = "fake";  ///< "fake" or "ssh"
        std::filesystem::path policies_path;
        std::map<std::string, NodeTransport> nodes;
        std::chrono::milliseconds timeout = selfheal::kDefaultTimeout;
        int fake_exit_status = 0;
        std::string ssh_binary = "ssh";
    } selfheal;

    struct Api {
        bool enabled = true;
        std::string bind = "127.0.0.1";
        int port = 8080;
        std::vector<ApiToken> tokens;
    } api;

    /// Pause after each file written during a rules swap (crash testing).
    std::chrono::milliseconds fault_swap_delay{0};
};

/// Throws Error naming the offending key.
PlatformConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
PlatformConfig load_config(const std::filesystem::path& path);
void validate(const PlatformConfig& config);

/// Explicit path, else $CTIMP_CONFIG, else nullopt.
std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::string>& explicit_path);

// ============================================================================
// Platform
// ============================================================================

struct FeedStatus {
    std::string source_id;
    std::optional<Timestamp> last_sync;
    std::optional<std::string> last_error;
    std::size_t documents = 0;
    std::size_t records = 0;
    std::size_t diagnostics = 0;
};

nlohmann::json to_json(const FeedStatus& s, const ingest::FeedSource& source);

struct CycleReport {
    std::size_t feeds_fetched = 0;
    std::vector<std::pair<std::string, std::string>> feed_failures;  ///< source_id, error
    std::size_t documents = 0;
    std::size_t records_parsed = 0;
    std::size_t parse_diagnostics = 0;
    ingest::MergeDelta merge;
    std::size_t tailored = 0;
    std::size_t rules_written = 0;
    std::size_t compile_diagnostics = 0;
    bool rules_swapped = false;
    std::uint64_t rules_generation = 0;
    std::string tailored_path;
    std::int64_t map_revision = 0;
};

nlohmann::json to_json(const CycleReport& r);

struct ReplayReport {
    std::size_t lines = 0;
    std::size_t parsed = 0;
    std::size_t matches = 0;
    std::size_t alerts_created = 0;
    std::size_t alerts_suppressed = 0;
    std::size_t commands = 0;
};

/// Loads native packs from files; decoders of all packs form one set.
detect::DetectionPack load_packs(const std::vector<std::filesystem::path>& packs);

class Platform {
public:
    struct Options {
        /// Overrides the executor named in the config (tests).
        std::shared_ptr<selfheal::Executor> executor;
        /// Skip opening the database (read-only tooling such as replay).
        bool ephemeral = false;
        /// Whether alerts drive the self-heal engine.
        bool selfheal_on_alert = true;
    };

    explicit Platform(PlatformConfig config);
    Platform(PlatformConfig config, Options options);
    ~Platform();
    Platform(const Platform&) = delete;
    Platform& operator=(const Platform&) = delete;

    const PlatformConfig& config() const { return config_; }

    /// ingest -> merge -> tailor -> compile -> swap -> reload. Mutually
    /// exclusive with other cycles. Throws when the asset map cannot be loaded.
    CycleReport run_pipeline_cycle(Timestamp now, const std::optional<std::string>& only_feed = std::nullopt);

    /// compile -> swap -> reload from an already tailored bundle.
    CycleReport compile_tailored(std::string_view tailored_document);

    /// Installs rules from the current generation (startup and after a swap).
    std::uint64_t reload_rules();

    ReplayReport ingest_line(std::string_view line);
    ReplayReport replay(std::istream& in);

    /// Raises a synthetic alert and runs it through decision and execution.
    selfheal::SelfHealEngine::HandleResult simulate_alert(const std::string& threat_type, const std::string& threat_group,
                                                          const detect::Fields& fields, Timestamp at);

    /// Replaces the asset map (revision must increase) and persists it.
    std::shared_ptr<const assets::AssetMap> put_asset_map(assets::AssetMap map);

    std::optional<ingest::FeedSource> feed(const std::string& source_id) const;
    std::vector<std::pair<ingest::FeedSource, FeedStatus>> feeds() const;

    alerts::AlertStore& alert_store() { return alerts_; }
    selfheal::SelfHealEngine& selfheal() { return *selfheal_; }
    detect::DetectionEngine& detection() { return *engine_; }
    assets::AssetRepository& assets() { return *assets_; }
    ingest::IndicatorStore& indicators() { return indicators_; }
    RulesDirectory& rules_directory() { return rules_; }
    EventBus& bus() { return bus_; }
    std::uint64_t rules_generation() const { return rules_generation_.load(); }
    std::map<std::string, std::string> rule_manifest() const;

    /// Periodic cycles plus the configured log intake, until stop().
    void start_background();
    /// Wakes the scheduler for an immediate cycle.
    void trigger_cycle();
    void stop();

private:
    void tail_loop();
    void scheduler_loop();
    std::shared_ptr<const assets::AssetMap> refresh_asset_map();
    CycleReport install_rules(const sigma::RuleSet& set, CycleReport report);

    PlatformConfig config_;
    Options options_;
    std::unique_ptr<Database> db_;
    ingest::IndicatorStore indicators_;
    std::unique_ptr<assets::AssetRepository> assets_;
    RulesDirectory rules_;
    detect::DetectionPack native_;
    std::unique_ptr<detect::DetectionEngine> engine_;
    alerts::AlertStore alerts_;
    std::shared_ptr<selfheal::Executor> executor_;
    std::unique_ptr<selfheal::SelfHealEngine> selfheal_;
    EventBus bus_;
    std::atomic<std::uint64_t> rules_generation_{0};

    std::mutex cycle_mutex_;
    mutable std::mutex feeds_mutex_;
    std::map<std::string, FeedStatus> feed_status_;
    mutable std::mutex manifest_mutex_;
    std::map<std::string, std::string> manifest_;
    std::mutex intake_mutex_;

    std::mutex bg_mutex_;
    std::condition_variable bg_cv_;
    bool stopping_ = false;
    bool cycle_requested_ = false;
    std::vector<std::thread> threads_;
};

}  // namespace ctimp::platform
