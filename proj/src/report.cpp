#include "mqfuzz/report.hpp"

#include <map>
#include <sstream>

namespace mqfuzz {

using nlohmann::json;

std::optional<Severity> RunReport::max_severity() const {
    std::optional<Severity> worst;
    for (const auto& o : outcomes) {
        for (const auto& a : o.anomalies) {
            if (!worst || a.severity > *worst) worst = a.severity;
        }
    }
    return worst;
}

std::size_t RunReport::runner_errors() const {
    std::size_t n = 0;
    for (const auto& r : results) {
        if (r.trace && r.trace->outcome == TraceOutcome::RunnerError) ++n;
    }
    return n;
}

RunReport make_report(std::string label, std::string version, const Endpoint& target,
                      std::vector<CorpusResult> results) {
    RunReport r;
    r.broker_label = std::move(label);
    r.broker_version = std::move(version);
    r.target = target;
    std::vector<Experiment> experiments;
    for (const auto& c : results) experiments.push_back(c.experiment);
    r.corpus_hash = corpus_hash(experiments);
    r.results = std::move(results);
    r.profile = fingerprint(r.broker_label, r.results, &r.outcomes);
    r.profile.version = r.broker_version;
    return r;
}

int exit_code(const RunReport& r, Severity fail_on) {
    if (r.runner_errors() > 0) return kExitLocalError;
    const auto worst = r.max_severity();
    if (worst && *worst >= fail_on) return kExitAnomalies;
    return kExitClean;
}

json report_to_json(const RunReport& r) {
    json experiments = json::array();
    std::map<std::string, std::size_t> counts = {{"info", 0}, {"warning", 0}, {"dos", 0}, {"critical", 0}};
    for (std::size_t i = 0; i < r.results.size(); ++i) {
        const auto& res = r.results[i];
        json j = outcome_to_json(r.outcomes[i]);
        j["input"] = std::string(to_string(res.experiment.input));
        j["skipped"] = res.skipped();
        j["skipped_reason"] = res.skipped_reason;
        j["liveness_after"] = {{"alive", res.liveness_after.alive}, {"detail", res.liveness_after.detail}};
        for (const auto& a : r.outcomes[i].anomalies) ++counts[std::string(to_string(a.severity))];
        experiments.push_back(std::move(j));
    }
    const auto worst = r.max_severity();
    return {{"tool", "mqfuzz"},
            {"tool_version", std::string(kToolVersion)},
            {"corpus_hash", r.corpus_hash},
            {"target", r.target.to_string()},
            {"broker", r.broker_label},
            {"broker_version", r.broker_version},
            {"experiments", experiments},
            {"profile", profile_to_json(r.profile)},
            {"summary",
             {{"anomalies", counts},
              {"max_severity", worst ? json(std::string(to_string(*worst))) : json(nullptr)},
              {"runner_errors", r.runner_errors()}}}};
}

namespace {

std::string escape_cell(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '|') out += "\\|";
        else if (c == '\n') out += ' ';
        else out += c;
    }
    return out;
}

std::string security_problems(const RunReport& r) {
    bool dos = false;
    bool warning = false;
    for (const auto& o : r.outcomes) {
        for (const auto& a : o.anomalies) {
            dos = dos || a.severity >= Severity::DoS;
            warning = warning || a.severity == Severity::Warning;
        }
    }
    if (dos && warning) return "Possible denial of service and unwanted application scenarios.";
    if (dos) return "Possible denial of service.";
    if (warning) return "Possible unwanted application scenarios.";
    return "";
}

}  // namespace

std::string report_to_markdown(const RunReport& r) {
    std::ostringstream out;
    out << "# mqfuzz report\n\n";
    out << "- target: " << r.target.to_string() << "\n";
    out << "- tool version: " << kToolVersion << "\n";
    out << "- corpus hash: " << r.corpus_hash << "\n\n";

    std::map<AnomalyCode, std::vector<std::string>> by_code;
    for (const auto& o : r.outcomes) {
        for (auto c : o.codes()) by_code[c].push_back(o.experiment_name);
    }
    std::string found;
    for (const auto& [code, names] : by_code) {
        if (!found.empty()) found += "; ";
        found += std::string(to_string(code)) + " (";
        for (std::size_t i = 0; i < names.size(); ++i) found += (i ? ", " : "") + names[i];
        found += ")";
    }
    out << "| Broker | Anomalies found | Security problems | Version |\n";
    out << "|---|---|---|---|\n";
    out << "| " << escape_cell(r.broker_label) << " | " << escape_cell(found) << " | " << security_problems(r)
        << " | " << escape_cell(r.broker_version) << " |\n\n";

    out << "| Experiment | Input | Delivered | Anomalies | Disconnected | Trace |\n";
    out << "|---|---|---|---|---|---|\n";
    for (std::size_t i = 0; i < r.results.size(); ++i) {
        const auto& res = r.results[i];
        const auto& o = r.outcomes[i];
        const auto s = summarize(o);
        std::string codes;
        for (const auto& a : o.anomalies) {
            if (!codes.empty()) codes += ", ";
            codes += std::string(to_string(a.code)) + " (" + std::string(to_string(a.severity)) + ")";
        }
        const std::string trace = res.skipped() ? "skipped: " + res.skipped_reason
                                                : std::string(to_string(o.trace_outcome)) +
                                                      (o.trace_detail.empty() ? "" : ": " + o.trace_detail);
        out << "| " << res.experiment.name << " | " << to_string(res.experiment.input) << " | "
            << escape_cell(describe_delivered(s.delivered)) << " | " << codes << " | "
            << (o.disconnected ? "yes" : "no") << " | " << escape_cell(trace) << " |\n";
    }
    return out.str();
}

std::string divergences_to_text(const std::string& label_a, const std::string& label_b,
                                const std::vector<Divergence>& divergences) {
    std::ostringstream out;
    out << label_a << " vs " << label_b << ": ";
    if (divergences.empty()) {
        out << "no divergences\n";
        return out.str();
    }
    out << divergences.size() << " divergence" << (divergences.size() == 1 ? "" : "s") << "\n";
    for (const auto& d : divergences) out << "  " << d.experiment << ": " << d.description << "\n";
    return out.str();
}

}  // namespace mqfuzz
