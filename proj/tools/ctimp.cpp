// ctimp - command line front end.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

#include "ctimp/api.hpp"
#include "ctimp/platform.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctimp;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : Error {
    using Error::Error;
};

struct Common {
    std::optional<std::string> config;
    std::optional<std::string> data_dir;
    std::optional<std::string> rules_dir;
    std::string log_level = "warn";
};

platform::PlatformConfig load_effective_config(const Common& c) {
    auto path = platform::resolve_config_path(c.config);
    if (!path) throw UsageError("no configuration: pass --config or set CTIMP_CONFIG");
    platform::PlatformConfig cfg;
    try {
        cfg = platform::load_config(*path);
        if (c.data_dir) cfg.data_dir = fs::absolute(*c.data_dir);
        if (c.rules_dir) cfg.rules_dir = fs::absolute(*c.rules_dir);
        platform::validate(cfg);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

Timestamp parse_now(const std::optional<std::string>& text) {
    if (!text) return now_utc();
    auto ts = parse_rfc3339(*text);
    if (!ts) throw UsageError("--now is not an RFC 3339 timestamp: " + *text);
    return *ts;
}

json to_json(const platform::ReplayReport& r) {
    return {{"lines", r.lines},
            {"parsed", r.parsed},
            {"matches", r.matches},
            {"alerts_created", r.alerts_created},
            {"alerts_suppressed", r.alerts_suppressed},
            {"commands", r.commands}};
}

int cmd_serve(const Common& c) {
    // Block the shutdown signals before any thread starts so only sigwait sees them.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    auto cfg = load_effective_config(c);
    platform::Platform p(cfg);
    std::unique_ptr<platform::ApiServer> api;
    if (cfg.api.enabled) {
        api = std::make_unique<platform::ApiServer>(p);
        int port = api->start(cfg.api.bind, cfg.api.port);
        spdlog::info("api listening on {}:{}", cfg.api.bind, port);
        std::cout << json{{"listening", cfg.api.bind + ":" + std::to_string(port)}}.dump() << std::endl;
    }
    p.start_background();
    int sig = 0;
    sigwait(&set, &sig);
    spdlog::info("signal {}, shutting down", sig);
    if (api) api->stop();
    p.stop();
    return 0;
}

int cmd_ingest(const Common& c, const std::optional<std::string>& feed, const std::optional<std::string>& now) {
    auto cfg = load_effective_config(c);
    platform::Platform p(cfg, {.executor = nullptr, .ephemeral = false, .selfheal_on_alert = false});
    if (feed && !p.feed(*feed)) throw UsageError("unknown feed '" + *feed + "'");
    auto report = p.run_pipeline_cycle(parse_now(now), feed);
    std::cout << platform::to_json(report).dump(2) << "\n";
    return report.feeds_fetched == 0 && !report.feed_failures.empty() ? kExitRuntime : 0;
}

int cmd_compile(const Common& c, const std::string& bundle) {
    auto cfg = load_effective_config(c);
    platform::Platform p(cfg, {.executor = nullptr, .ephemeral = false, .selfheal_on_alert = false});
    auto report = p.compile_tailored(platform::read_file(bundle));
    std::cout << platform::to_json(report).dump(2) << "\n";
    return 0;
}

std::vector<std::string> read_sigma_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && (e.path().extension() == ".yml" || e.path().extension() == ".yaml")) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<std::string> docs;
    for (const auto& f : files) docs.push_back(platform::read_file(f));
    return docs;
}

/// Without a configuration the replay runs a bare detection engine over the
/// given packs and SIGMA rules and raises alerts with the default suppression.
int replay_standalone(std::istream& in, const std::vector<std::string>& packs, const std::optional<std::string>& sigma_dir,
                      int bsd_year) {
    std::vector<fs::path> paths(packs.begin(), packs.end());
    auto pack = platform::load_packs(paths);
    auto rules = pack.rules;
    if (sigma_dir) {
        auto sigma = detect::load_sigma_rules(read_sigma_dir(*sigma_dir));
        rules.insert(rules.end(), sigma.begin(), sigma.end());
    }
    detect::validate_rules(rules);
    detect::DetectionEngine engine(detect::DecoderSet(pack.decoders), rules);
    auto installed = engine.rules();
    alerts::AlertStore store;
    platform::ReplayReport rep;
    std::string line;
    while (std::getline(in, line)) {
        ++rep.lines;
        auto ev = detect::parse_log_line(line, bsd_year);
        if (!ev) continue;
        ++rep.parsed;
        for (const auto& m : engine.process(*ev)) {
            ++rep.matches;
            auto it = std::find_if(installed->begin(), installed->end(),
                                   [&](const detect::DetectionRule& r) { return r.rule_id == m.rule_id; });
            auto raised = store.raise(m, *it);
            ++(raised.created ? rep.alerts_created : rep.alerts_suppressed);
        }
    }
    json out{{"report", to_json(rep)}, {"alerts", json::array()}};
    for (const auto& a : store.list()) out["alerts"].push_back(alerts::to_json(a));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_replay(const Common& c, const std::string& file, const std::vector<std::string>& packs,
               const std::optional<std::string>& sigma_dir, bool ephemeral) {
    std::ifstream fin;
    std::istream* in = &std::cin;
    if (file != "-") {
        fin.open(file);
        if (!fin) throw UsageError("cannot open " + file);
        in = &fin;
    }
    if (!c.config && !std::getenv("CTIMP_CONFIG")) {
        if (packs.empty() && !sigma_dir) throw UsageError("replay needs --config or at least one --pack / --sigma");
        return replay_standalone(*in, packs, sigma_dir, 1970);
    }
    auto cfg = load_effective_config(c);
    if (!packs.empty()) cfg.detect.packs.assign(packs.begin(), packs.end());
    platform::Platform p(cfg, {.executor = nullptr, .ephemeral = ephemeral, .selfheal_on_alert = true});
    auto rep = p.replay(*in);
    json out{{"report", to_json(rep)}, {"alerts", json::array()}};
    for (const auto& a : p.alert_store().list()) out["alerts"].push_back(alerts::to_json(a));
    out["commands"] = json::array();
    for (const auto& r : p.selfheal().list()) out["commands"].push_back(selfheal::to_json(r));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_validate_map(const std::string& file) {
    try {
        auto map = assets::load_map(platform::read_file(file));
        auto idx = assets::build_feature_index(map);
        std::cout << json{{"valid", true},
                          {"map_id", map.map_id},
                          {"revision", map.revision},
                          {"nodes", map.nodes.size()},
                          {"edges", map.edges.size()}}
                         .dump()
                  << "\n";
        return 0;
    } catch (const assets::SchemaError& e) {
        std::cout << json{{"valid", false}, {"error", "schema"}, {"path", e.path()}, {"message", e.what()}}.dump() << "\n";
    } catch (const assets::IntegrityError& e) {
        std::cout << json{{"valid", false}, {"error", "integrity"}, {"ids", e.offending_ids()}, {"message", e.what()}}.dump()
                  << "\n";
    }
    return kExitRuntime;
}

int cmd_simulate(const Common& c, const std::string& type, const std::string& group, const detect::Fields& fields,
                 const std::optional<std::string>& now) {
    auto cfg = load_effective_config(c);
    platform::Platform p(cfg);
    auto result = p.simulate_alert(type, group, fields, parse_now(now));
    json out{{"matched_by", selfheal::to_string(result.outcome.matched_by)}, {"commands", json::array()}};
    if (result.outcome.policy) out["policy_id"] = result.outcome.policy->policy_id;
    if (result.render_error) out["render_error"] = *result.render_error;
    for (const auto& r : result.records) out["commands"].push_back(selfheal::to_json(r));
    std::cout << out.dump(2) << "\n";
    return result.render_error ? kExitRuntime : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CTI-driven detection and self-healing platform"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--config", common.config, "platform configuration (default: $CTIMP_CONFIG)");
    app.add_option("--data-dir", common.data_dir, "override data_dir");
    app.add_option("--rules-dir", common.rules_dir, "override rules_dir");
    app.add_option("--log-level", common.log_level, "trace, debug, info, warn, error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    auto* serve = app.add_subcommand("serve", "run the scheduler, log intake and HTTP API");

    auto* ingest = app.add_subcommand("ingest", "run one ingest -> tailor -> compile -> swap cycle");
    bool once = false;
    std::optional<std::string> feed, ingest_now;
    ingest->add_flag("--once", once, "run a single cycle and exit")->required();
    ingest->add_option("--feed", feed, "limit the cycle to one feed");
    ingest->add_option("--now", ingest_now, "evaluate validity windows at this RFC 3339 time");

    auto* compile = app.add_subcommand("compile-rules", "compile a tailored bundle and publish the rules");
    std::string bundle;
    compile->add_option("--bundle", bundle, "tailored STIX bundle")->required()->check(CLI::ExistingFile);

    auto* replay = app.add_subcommand("replay", "feed a log file through detection (and self-heal with --config)");
    std::string replay_file;
    std::vector<std::string> packs;
    std::optional<std::string> sigma_dir;
    bool ephemeral = false;
    replay->add_option("--file", replay_file, "log file, or - for stdin")->required();
    replay->add_option("--pack", packs, "native decoder/rule pack (repeatable)")->check(CLI::ExistingFile);
    replay->add_option("--sigma", sigma_dir, "directory of SIGMA rules")->check(CLI::ExistingDirectory);
    replay->add_flag("--ephemeral", ephemeral, "do not persist alerts or commands");

    auto* validate_map = app.add_subcommand("validate-map", "check an asset map document");
    std::string map_file;
    validate_map->add_option("file", map_file, "asset map JSON")->required()->check(CLI::ExistingFile);

    auto* simulate = app.add_subcommand("simulate-alert", "raise a synthetic alert and run self-heal");
    std::string sim_type, sim_group;
    std::optional<std::string> sim_srcip, sim_dstip, sim_user, sim_now;
    simulate->add_option("--type", sim_type, "threat type")->required();
    simulate->add_option("--group", sim_group, "threat group")->required();
    simulate->add_option("--srcip", sim_srcip, "source address")->required();
    simulate->add_option("--dstip", sim_dstip, "destination address");
    simulate->add_option("--user", sim_user, "user name");
    simulate->add_option("--now", sim_now, "alert time (RFC 3339)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUsage;
    }

    auto logger = spdlog::stderr_color_mt("ctimp");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(common.log_level));

    try {
        if (*serve) return cmd_serve(common);
        if (*ingest) return cmd_ingest(common, feed, ingest_now);
        if (*compile) return cmd_compile(common, bundle);
        if (*replay) return cmd_replay(common, replay_file, packs, sigma_dir, ephemeral);
        if (*validate_map) return cmd_validate_map(map_file);
        if (*simulate) {
            detect::Fields fields{{"srcip", *sim_srcip}};
            if (sim_dstip) fields["dstip"] = *sim_dstip;
            if (sim_user) fields["user"] = *sim_user;
            return cmd_simulate(common, sim_type, sim_group, fields, sim_now);
        }
    } catch (const UsageError& e) {
        std::cerr << "ctimp: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "ctimp: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
