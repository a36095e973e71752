// ctimp/storage.hpp - durable state: SQLite entity store, generated rules
// directory, and the in-process event bus feeding the stream endpoint.

#pragma once

#include "ctimp/alerts.hpp"
#include "ctimp/cti_ingest.hpp"
#include "ctimp/selfheal.hpp"
#include "ctimp/sigma_compiler.hpp"

#include <json.hpp>

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

struct sqlite3;

namespace ctimp::platform {

// ============================================================================
// Entity store
// ============================================================================

/// WAL-mode SQLite database holding alerts, command records, and the merged
/// indicator set, each as its canonical JSON form.
class Database {
public:
    explicit Database(const std::filesystem::path& file);
    ~Database();
    Database(const Database&) = delete;
    Database& operator=(const Database&) = delete;

    void put_alert(const alerts::Alert& alert);
    std::vector<alerts::Alert> alerts() const;

    void put_command(const selfheal::CommandRecord& record);
    std::vector<selfheal::CommandRecord> commands() const;

    /// Replaces the stored indicator set in one transaction.
    void put_indicators(const ingest::IndicatorMap& records);
    ingest::IndicatorMap indicators() const;

    void set_meta(const std::string& key, const std::string& value);
    std::optional<std::string> meta(const std::string& key) const;

private:
    void exec(const char* sql) const;

    mutable std::mutex mutex_;
    sqlite3* db_ = nullptr;
};

// ============================================================================
// Generated rules directory
// ============================================================================

/// Layout under `root`:
///
///   .gen-<n>/<rule_id>.yml    one generation of rules
///   .gen-<n>/manifest.json
///   generated -> .gen-<n>     symlink, replaced by rename(2)
///   manifest.json -> generated/manifest.json
///
/// A generation is written and fsynced under a staging name, renamed into
/// place, and only then published by swapping the `generated` symlink, so a
/// reader sees either the previous or the next generation in full.
class RulesDirectory {
public:
    explicit RulesDirectory(std::filesystem::path root, std::chrono::milliseconds write_delay = {});

    /// Deletes staging leftovers and generations the symlink does not name.
    void recover();

    /// 0 when no generation has been published.
    std::uint64_t generation() const;

    struct Snapshot {
        std::uint64_t generation = 0;
        std::vector<std::string> documents;           ///< YAML, ordered by file name
        std::map<std::string, std::string> manifest;  ///< rule_id -> stix_id
    };

    /// Throws Error if the published generation is inconsistent with its manifest.
    Snapshot load() const;

    /// True when `set` renders to exactly the published files.
    bool matches(const sigma::RuleSet& set) const;

    /// Publishes `set` as the next generation and returns its number.
    std::uint64_t install(const sigma::RuleSet& set);

    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_;
    std::chrono::milliseconds write_delay_;
};

/// Canonical files of a rule set: "<rule_id>.yml" -> YAML, "manifest.json" -> manifest.
std::map<std::string, std::string> render_rule_files(const sigma::RuleSet& set);

/// Writes `bytes` to `path` via a fsynced temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// ============================================================================
// Event bus
// ============================================================================

struct StreamEvent {
    std::uint64_t seq = 0;
    std::string type;  ///< alert.created, alert.updated, command.created, command.updated
    nlohmann::json data;
};

class EventBus {
public:
    class Subscription {
    public:
        /// Waits up to `timeout` for the next event.
        std::optional<StreamEvent> next(std::chrono::milliseconds timeout);
        void close();
        bool closed() const;

    private:
        friend class EventBus;
        mutable std::mutex mutex_;
        std::condition_variable cv_;
        std::deque<StreamEvent> queue_;
        bool closed_ = false;
    };

    void publish(std::string type, nlohmann::json data);
    std::shared_ptr<Subscription> subscribe();
    std::uint64_t published() const;
    /// Closes every subscription (shutdown).
    void close_all();

private:
    mutable std::mutex mutex_;
    std::uint64_t seq_ = 0;
    std::vector<std::weak_ptr<Subscription>> subs_;
};

}  // namespace ctimp::platform
