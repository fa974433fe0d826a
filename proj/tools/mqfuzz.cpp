#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mqfuzz/experiment.hpp"
#include "mqfuzz/net.hpp"
#include "mqfuzz/oracle.hpp"
#include "mqfuzz/refbroker.hpp"
#include "mqfuzz/report.hpp"
#include "mqfuzz/runner.hpp"

namespace fs = std::filesystem;
using namespace mqfuzz;

namespace {

struct LocalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SourceOptions {
    bool corpus = false;
    std::vector<std::string> experiment_files;
    std::optional<std::uint32_t> settle_ms;
    std::uint32_t connect_timeout_ms = 3000;
    std::uint32_t io_timeout_ms = 5000;
    std::string trace_dir;
    bool quiet = false;
};

void add_source_options(CLI::App* cmd, SourceOptions& s) {
    cmd->add_flag("--corpus", s.corpus, "Run the builtin corpus")->envname("MQFUZZ_CORPUS");
    cmd->add_option("--experiment", s.experiment_files, "Experiment JSON file (repeatable)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--settle-ms", s.settle_ms, "Capture window after the last step")->envname("MQFUZZ_SETTLE_MS");
    cmd->add_option("--connect-timeout-ms", s.connect_timeout_ms)->envname("MQFUZZ_CONNECT_TIMEOUT_MS");
    cmd->add_option("--io-timeout-ms", s.io_timeout_ms, "How long to wait for an answer")
        ->envname("MQFUZZ_IO_TIMEOUT_MS");
    cmd->add_option("--trace-dir", s.trace_dir, "Write one JSONL trace per experiment here")
        ->envname("MQFUZZ_TRACE_DIR");
    cmd->add_flag("--quiet", s.quiet, "No progress lines on stderr");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LocalError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<Experiment> load_experiments(const SourceOptions& s, bool default_to_corpus) {
    std::vector<Experiment> out;
    if (s.corpus || (default_to_corpus && s.experiment_files.empty())) out = builtin_corpus();
    for (const auto& path : s.experiment_files) {
        try {
            const std::string text = read_file(path);
            out.push_back(parse_experiment(std::string_view(text)));
        } catch (const ExperimentError& ex) {
            throw LocalError(path + ": " + ex.what());
        }
    }
    if (out.empty()) throw LocalError("nothing to run: pass --corpus or --experiment <file>");
    return out;
}

Endpoint endpoint_for(const std::string& target, const SourceOptions& s) {
    Endpoint ep;
    try {
        ep = Endpoint::parse(target);
    } catch (const std::invalid_argument& ex) {
        throw LocalError(ex.what());
    }
    ep.connect_timeout_ms = s.connect_timeout_ms;
    ep.io_timeout_ms = s.io_timeout_ms;
    return ep;
}

void require_alive(const Endpoint& ep) {
    const Liveness live = probe_liveness(ep);
    if (!live.alive) throw LocalError("target " + ep.to_string() + " is not usable: " + live.detail);
}

std::vector<CorpusResult> run_all(const std::vector<Experiment>& experiments, const Endpoint& ep,
                                  const SourceOptions& s) {
    require_alive(ep);
    if (!s.trace_dir.empty()) fs::create_directories(s.trace_dir);
    RunOptions options;
    options.settle_ms = s.settle_ms;
    std::size_t done = 0;
    return run_corpus(experiments, ep, options, [&](const CorpusResult& r) {
        ++done;
        if (!s.trace_dir.empty() && r.trace) {
            std::ofstream(fs::path(s.trace_dir) / (r.experiment.name + ".jsonl")) << trace_to_jsonl(*r.trace);
        }
        if (s.quiet) return;
        std::cerr << "[" << done << "/" << experiments.size() << "] " << r.experiment.name << ": ";
        if (r.skipped()) {
            std::cerr << "skipped (" << r.skipped_reason << ")\n";
        } else {
            std::cerr << to_string(r.trace->outcome);
            if (!r.trace->outcome_detail.empty()) std::cerr << " (" << r.trace->outcome_detail << ")";
            if (!r.liveness_after.alive) std::cerr << ", broker not alive afterwards";
            std::cerr << "\n";
        }
    });
}

Severity parse_severity(const std::string& s) {
    auto sev = severity_from_string(s);
    if (!sev) throw LocalError("unknown severity '" + s + "'");
    return *sev;
}

const BehaviorProfile& documented(const std::string& label) {
    const auto& all = documented_profiles();
    for (const auto& [name, profile] : all) {
        if (CLI::detail::to_lower(name) == CLI::detail::to_lower(label)) return profile;
    }
    std::string known;
    for (const auto& [name, p] : all) known += (known.empty() ? "" : ", ") + name;
    throw LocalError("no documented profile '" + label + "' (known: " + known + ")");
}

int cmd_serve(const std::string& bind, std::uint16_t port, bool verbose) {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    broker::ServerOptions options;
    options.bind_host = bind;
    options.port = port;
    if (verbose) options.log = [](const std::string& line) { std::cerr << line << std::endl; };
    try {
        broker::BrokerServer server(options);
        server.start();
        std::cout << "listening on " << bind << ":" << server.port() << std::endl;
        int sig = 0;
        sigwait(&set, &sig);
        server.stop();
        std::cerr << "shutting down\n";
    } catch (const broker::BindError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitLocalError;
    }
    return kExitClean;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differential conformance fuzzer for MQTT 3.1.1 brokers"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "Run experiments against a broker and report anomalies");
    std::string target;
    std::string format = "json";
    std::string fail_on = "dos";
    std::string label;
    std::string broker_version;
    std::string output;
    SourceOptions run_source;
    run->add_option("--target", target, "host:port")->required()->envname("MQFUZZ_TARGET");
    add_source_options(run, run_source);
    run->add_option("--format", format)->check(CLI::IsMember({"json", "md"}))->envname("MQFUZZ_FORMAT");
    run->add_option("--fail-on", fail_on, "Lowest severity that fails the run")
        ->check(CLI::IsMember({"info", "warning", "dos", "critical"}))
        ->envname("MQFUZZ_FAIL_ON");
    run->add_option("--label", label, "Broker name in the report")->envname("MQFUZZ_LABEL");
    run->add_option("--broker-version", broker_version)->envname("MQFUZZ_BROKER_VERSION");
    run->add_option("--output", output, "Write the report here instead of stdout");

    // diff
    auto* diff = app.add_subcommand("diff", "Compare two behavior profiles");
    std::vector<std::string> diff_targets;
    std::vector<std::string> diff_documented;
    std::string diff_format = "text";
    SourceOptions diff_source;
    diff->add_option("--target", diff_targets, "Live broker host:port (repeatable)");
    diff->add_option("--documented", diff_documented, "Documented profile label (repeatable)");
    diff->add_option("--format", diff_format)->check(CLI::IsMember({"text", "json"}));
    add_source_options(diff, diff_source);

    // serve
    auto* serve = app.add_subcommand("serve", "Run the reference broker until interrupted");
    std::uint16_t port = 1883;
    std::string bind = "127.0.0.1";
    bool verbose = false;
    serve->add_option("--port", port, "0 picks a free port")->envname("MQFUZZ_PORT");
    serve->add_option("--bind", bind)->envname("MQFUZZ_BIND");
    serve->add_flag("--verbose", verbose, "Log broker events to stderr");

    // corpus
    auto* corpus = app.add_subcommand("corpus", "List the builtin experiments or write them as JSON files");
    std::string out_dir;
    corpus->add_option("--out-dir", out_dir);

    // documented
    auto* doc = app.add_subcommand("documented", "Print the documented broker profiles as JSON");
    std::string doc_label;
    doc->add_option("--label", doc_label);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitClean : kExitLocalError;
    }

    try {
        if (*serve) return cmd_serve(bind, port, verbose);

        if (*run) {
            const Severity threshold = parse_severity(fail_on);
            const auto experiments = load_experiments(run_source, false);
            const Endpoint ep = endpoint_for(target, run_source);
            auto results = run_all(experiments, ep, run_source);
            RunReport report = make_report(label.empty() ? ep.to_string() : label, broker_version, ep, std::move(results));
            const std::string text =
                format == "md" ? report_to_markdown(report) : report_to_json(report).dump(2) + "\n";
            if (output.empty()) {
                std::cout << text;
            } else {
                std::ofstream(output) << text;
            }
            return exit_code(report, threshold);
        }

        if (*diff) {
            if (diff_targets.size() + diff_documented.size() != 2) {
                throw LocalError("diff needs exactly two sources (--target and/or --documented)");
            }
            std::vector<BehaviorProfile> profiles;
            std::vector<Experiment> experiments;
            if (!diff_targets.empty()) experiments = load_experiments(diff_source, true);
            for (const auto& t : diff_targets) {
                const Endpoint ep = endpoint_for(t, diff_source);
                profiles.push_back(fingerprint(ep.to_string(), run_all(experiments, ep, diff_source)));
            }
            for (const auto& d : diff_documented) profiles.push_back(documented(d));
            const auto divergences = diff_profiles(profiles[0], profiles[1]);
            if (diff_format == "json") {
                nlohmann::json j = nlohmann::json::array();
                for (const auto& d : divergences) j.push_back({{"experiment", d.experiment}, {"divergence", d.description}});
                std::cout << j.dump(2) << "\n";
            } else {
                std::cout << divergences_to_text(profiles[0].broker_label, profiles[1].broker_label, divergences);
            }
            return kExitClean;
        }

        if (*corpus) {
            const auto all = builtin_corpus();
            if (!out_dir.empty()) {
                fs::create_directories(out_dir);
                for (const auto& e : all) std::ofstream(fs::path(out_dir) / (e.name + ".json")) << render_experiment(e) << "\n";
            }
            for (const auto& e : all) std::cout << e.name << "\t" << to_string(e.input) << "\n";
            std::cout << "corpus hash " << corpus_hash(all) << "\n";
            return kExitClean;
        }

        if (*doc) {
            nlohmann::json j = nlohmann::json::object();
            for (const auto& [name, p] : documented_profiles()) {
                if (doc_label.empty() || name == documented(doc_label).broker_label) j[name] = profile_to_json(p);
            }
            std::cout << j.dump(2) << "\n";
            return kExitClean;
        }
    } catch (const LocalError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitLocalError;
    } catch (const NoOverlap& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitLocalError;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitLocalError;
    }
    return kExitLocalError;
}
