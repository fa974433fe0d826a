#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mqfuzz/oracle.hpp"
#include "mqfuzz/runner.hpp"

namespace mqfuzz {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum ExitCode : int { kExitClean = 0, kExitLocalError = 1, kExitAnomalies = 2 };

struct RunReport {
    std::string broker_label;
    std::string broker_version;
    Endpoint target;
    std::string corpus_hash;
    std::vector<CorpusResult> results;
    std::vector<ScenarioOutcome> outcomes;  // parallel to results
    BehaviorProfile profile;

    std::optional<Severity> max_severity() const;
    std::size_t runner_errors() const;
};

RunReport make_report(std::string label, std::string version, const Endpoint& target,
                      std::vector<CorpusResult> results);

/// 1 when any trace ended in RunnerError, 2 when an anomaly reaches
/// `fail_on`, else 0.
int exit_code(const RunReport& r, Severity fail_on);

nlohmann::json report_to_json(const RunReport& r);
/// A summary row in the study's table layout (broker, anomalies found,
/// security problems, version), then one row per experiment.
std::string report_to_markdown(const RunReport& r);

std::string divergences_to_text(const std::string& label_a, const std::string& label_b,
                                const std::vector<Divergence>& divergences);

}  // namespace mqfuzz
