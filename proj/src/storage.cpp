#include "ctimp/storage.hpp"

#include <sqlite3.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace ctimp::platform {

// ============================================================================
// Database
// ============================================================================

namespace {

class Statement {
public:
    Statement(sqlite3* db, const char* sql) : db_(db) {
        if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) {
            throw Error(std::string("sqlite prepare: ") + sqlite3_errmsg(db));
        }
    }
    ~Statement() { sqlite3_finalize(stmt_); }
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;

    Statement& bind(int i, const std::string& v) {
        sqlite3_bind_text(stmt_, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT);
        return *this;
    }
    Statement& bind(int i, std::int64_t v) {
        sqlite3_bind_int64(stmt_, i, v);
        return *this;
    }
    /// True while rows remain.
    bool step() {
        int rc = sqlite3_step(stmt_);
        if (rc == SQLITE_ROW) return true;
        if (rc == SQLITE_DONE) return false;
        throw Error(std::string("sqlite step: ") + sqlite3_errmsg(db_));
    }
    std::string text(int col) const {
        auto p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, col));
        return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string();
    }
    std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }

private:
    sqlite3* db_;
    sqlite3_stmt* stmt_ = nullptr;
};

}  // namespace

Database::Database(const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    if (sqlite3_open(file.c_str(), &db_) != SQLITE_OK) {
        std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
        sqlite3_close(db_);
        throw Error("cannot open database " + file.string() + ": " + msg);
    }
    sqlite3_busy_timeout(db_, 5000);
    exec("PRAGMA journal_mode=WAL");
    exec("PRAGMA synchronous=FULL");
    exec("CREATE TABLE IF NOT EXISTS alerts (alert_id TEXT PRIMARY KEY, status TEXT NOT NULL, body TEXT NOT NULL)");
    exec("CREATE TABLE IF NOT EXISTS commands (command_id TEXT PRIMARY KEY, state TEXT NOT NULL, body TEXT NOT NULL)");
    exec("CREATE TABLE IF NOT EXISTS indicators (stix_id TEXT PRIMARY KEY, revoked INTEGER NOT NULL, body TEXT NOT NULL)");
    exec("CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL)");
}

Database::~Database() {
    sqlite3_close(db_);
}

void Database::exec(const char* sql) const {
    char* err = nullptr;
    if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
        std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw Error(std::string("sqlite: ") + msg);
    }
}

void Database::put_alert(const alerts::Alert& alert) {
    std::lock_guard lock(mutex_);
    Statement st(db_, "INSERT OR REPLACE INTO alerts (alert_id, status, body) VALUES (?1, ?2, ?3)");
    st.bind(1, alert.alert_id).bind(2, std::string(alerts::to_string(alert.status))).bind(3, alerts::to_json(alert).dump());
    st.step();
}

std::vector<alerts::Alert> Database::alerts() const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT body FROM alerts ORDER BY alert_id");
    std::vector<alerts::Alert> out;
    while (st.step()) out.push_back(alerts::alert_from_json(nlohmann::json::parse(st.text(0))));
    return out;
}

void Database::put_command(const selfheal::CommandRecord& record) {
    std::lock_guard lock(mutex_);
    Statement st(db_, "INSERT OR REPLACE INTO commands (command_id, state, body) VALUES (?1, ?2, ?3)");
    st.bind(1, record.command_id)
        .bind(2, std::string(selfheal::to_string(record.state)))
        .bind(3, selfheal::to_json(record).dump());
    st.step();
}

std::vector<selfheal::CommandRecord> Database::commands() const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT body FROM commands ORDER BY command_id");
    std::vector<selfheal::CommandRecord> out;
    while (st.step()) out.push_back(selfheal::command_from_json(nlohmann::json::parse(st.text(0))));
    return out;
}

void Database::put_indicators(const ingest::IndicatorMap& records) {
    std::lock_guard lock(mutex_);
    exec("BEGIN IMMEDIATE");
    try {
        exec("DELETE FROM indicators");
        for (const auto& [id, rec] : records) {
            auto obj = ingest::to_stix_object(rec);
            obj.erase("revoked");
            Statement st(db_, "INSERT INTO indicators (stix_id, revoked, body) VALUES (?1, ?2, ?3)");
            st.bind(1, id).bind(2, std::int64_t{rec.revoked ? 1 : 0}).bind(3, obj.dump());
            st.step();
        }
        exec("COMMIT");
    } catch (...) {
        exec("ROLLBACK");
        throw;
    }
}

ingest::IndicatorMap Database::indicators() const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT revoked, body FROM indicators ORDER BY stix_id");
    ingest::IndicatorMap out;
    while (st.step()) {
        bool revoked = st.integer(0) != 0;
        nlohmann::json bundle = {{"type", "bundle"}, {"id", "bundle--00000000-0000-4000-8000-000000000000"},
                                 {"objects", nlohmann::json::array({nlohmann::json::parse(st.text(1))})}};
        auto parsed = ingest::parse_tailored_bundle(bundle.dump());
        for (auto& r : parsed.records) {
            r.revoked = revoked;
            out[r.stix_id] = std::move(r);
        }
    }
    return out;
}

void Database::set_meta(const std::string& key, const std::string& value) {
    std::lock_guard lock(mutex_);
    Statement st(db_, "INSERT OR REPLACE INTO meta (key, value) VALUES (?1, ?2)");
    st.bind(1, key).bind(2, value);
    st.step();
}

std::optional<std::string> Database::meta(const std::string& key) const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT value FROM meta WHERE key = ?1");
    st.bind(1, key);
    if (!st.step()) return std::nullopt;
    return st.text(0);
}

// ============================================================================
// Files
// ============================================================================

namespace {

void fsync_path(const fs::path& p, bool directory) {
    int fd = ::open(p.c_str(), (directory ? O_RDONLY | O_DIRECTORY : O_RDONLY) | O_CLOEXEC);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
}

void write_and_sync(const fs::path& path, std::string_view bytes) {
    int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw Error("cannot write " + path.string() + ": " + std::strerror(errno));
    std::size_t off = 0;
    while (off < bytes.size()) {
        ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            ::close(fd);
            throw Error("write " + path.string() + ": " + std::strerror(errno));
        }
        off += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
}

constexpr std::string_view kGenPrefix = ".gen-";
constexpr std::string_view kStagingPrefix = ".staging-";

std::optional<std::uint64_t> generation_of(const std::string& name) {
    if (name.rfind(kGenPrefix, 0) != 0) return std::nullopt;
    auto digits = name.substr(kGenPrefix.size());
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) return std::nullopt;
    return std::stoull(digits);
}

}  // namespace

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp-" + std::to_string(::getpid());
    write_and_sync(tmp, bytes);
    fs::rename(tmp, path);
    fsync_path(path.has_parent_path() ? path.parent_path() : fs::path("."), true);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ============================================================================
// Rules directory
// ============================================================================

std::map<std::string, std::string> render_rule_files(const sigma::RuleSet& set) {
    std::map<std::string, std::string> files;
    for (const auto& r : set.rules) files[r.rule_id + ".yml"] = sigma::render_yaml(r);
    files["manifest.json"] = sigma::render_manifest(set);
    return files;
}

RulesDirectory::RulesDirectory(fs::path root, std::chrono::milliseconds write_delay)
    : root_(std::move(root)), write_delay_(write_delay) {
    fs::create_directories(root_);
}

std::uint64_t RulesDirectory::generation() const {
    std::error_code ec;
    auto target = fs::read_symlink(root_ / "generated", ec);
    if (ec) return 0;
    return generation_of(target.filename().string()).value_or(0);
}

void RulesDirectory::recover() {
    auto current = generation();
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(root_)) {
        auto name = entry.path().filename().string();
        bool stale = name.rfind(kStagingPrefix, 0) == 0 || name.rfind("generated.", 0) == 0;
        if (auto g = generation_of(name); g && *g != current) stale = true;
        if (stale) fs::remove_all(entry.path(), ec);
    }
}

RulesDirectory::Snapshot RulesDirectory::load() const {
    Snapshot snap;
    std::error_code ec;
    auto target = fs::read_symlink(root_ / "generated", ec);
    if (ec) return snap;
    // Resolve the link once so a concurrent swap cannot mix generations.
    snap.generation = generation_of(target.filename().string()).value_or(0);
    auto dir = root_ / target;
    auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    std::set<std::string> expected;
    for (const auto& entry : manifest.at("rules")) {
        snap.manifest[entry.at("rule_id").get<std::string>()] = entry.at("stix_id").get<std::string>();
        expected.insert(entry.at("file").get<std::string>());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".yml") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::set<std::string> present;
    for (const auto& f : files) {
        present.insert(f.filename().string());
        snap.documents.push_back(read_file(f));
    }
    if (present != expected) throw Error("rules generation " + std::to_string(snap.generation) + " does not match its manifest");
    return snap;
}

bool RulesDirectory::matches(const sigma::RuleSet& set) const {
    auto files = render_rule_files(set);
    std::error_code ec;
    auto target = fs::read_symlink(root_ / "generated", ec);
    if (ec) return set.rules.empty();
    auto dir = root_ / target;
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        ++count;
        auto it = files.find(entry.path().filename().string());
        if (it == files.end() || read_file(entry.path()) != it->second) return false;
    }
    return count == files.size();
}

std::uint64_t RulesDirectory::install(const sigma::RuleSet& set) {
    std::uint64_t next = generation() + 1;
    // Skip numbers held by leftovers recover() has not yet removed.
    while (fs::exists(root_ / (std::string(kGenPrefix) + std::to_string(next)))) ++next;
    auto staging = root_ / (std::string(kStagingPrefix) + std::to_string(next));
    fs::remove_all(staging);
    fs::create_directories(staging);
    for (const auto& [name, bytes] : render_rule_files(set)) {
        write_and_sync(staging / name, bytes);
        if (write_delay_.count() > 0) std::this_thread::sleep_for(write_delay_);
    }
    fsync_path(staging, true);
    auto gen_dir = root_ / (std::string(kGenPrefix) + std::to_string(next));
    fs::rename(staging, gen_dir);

    auto link_tmp = root_ / ("generated." + std::to_string(next));
    fs::remove(link_tmp);
    fs::create_directory_symlink(gen_dir.filename(), link_tmp);
    if (write_delay_.count() > 0) std::this_thread::sleep_for(write_delay_);
    fs::rename(link_tmp, root_ / "generated");
    fsync_path(root_, true);

    auto manifest_link = root_ / "manifest.json";
    if (!fs::is_symlink(manifest_link)) {
        fs::remove(manifest_link);
        fs::create_symlink(fs::path("generated") / "manifest.json", manifest_link);
    }
    recover();
    return next;
}

// ============================================================================
// Event bus
// ============================================================================

std::optional<StreamEvent> EventBus::Subscription::next(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || closed_; });
    if (queue_.empty()) return std::nullopt;
    auto ev = std::move(queue_.front());
    queue_.pop_front();
    return ev;
}

void EventBus::Subscription::close() {
    {
        std::lock_guard lock(mutex_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool EventBus::Subscription::closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
}

void EventBus::publish(std::string type, nlohmann::json data) {
    std::lock_guard lock(mutex_);
    StreamEvent ev{++seq_, std::move(type), std::move(data)};
    std::erase_if(subs_, [](const std::weak_ptr<Subscription>& w) { return w.expired(); });
    for (const auto& w : subs_) {
        auto s = w.lock();
        if (!s) continue;
        {
            std::lock_guard sl(s->mutex_);
            if (s->closed_) continue;
            s->queue_.push_back(ev);
        }
        s->cv_.notify_all();
    }
}

std::shared_ptr<EventBus::Subscription> EventBus::subscribe() {
    auto s = std::make_shared<Subscription>();
    std::lock_guard lock(mutex_);
    subs_.push_back(s);
    return s;
}

std::uint64_t EventBus::published() const {
    std::lock_guard lock(mutex_);
    return seq_;
}

void EventBus::close_all() {
    std::lock_guard lock(mutex_);
    for (const auto& w : subs_)
        if (auto s = w.lock()) s->close();
}

}  // namespace ctimp::platform
