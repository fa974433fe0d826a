#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mqfuzz/experiment.hpp"
#include "mqfuzz/runner.hpp"
#include "mqfuzz/trace.hpp"

namespace mqfuzz {

enum class AnomalyCode {
    LostMessage,
    DuplicateDelivery,
    ReorderedDelivery,
    AckBeforePrerequisite,
    LateCompletion,
    TopicTruncation,
    UnexpectedDisconnect,
    BrokerCrash,
    OrphanPubrelRejected,
    IdReuseMishandled,
    ProtocolViolationTolerated,
};

enum class Severity { Info, Warning, DoS, Critical };

Severity severity_of(AnomalyCode code);
std::string_view to_string(AnomalyCode code);
std::string_view to_string(Severity s);
std::optional<AnomalyCode> anomaly_code_from_string(std::string_view text);
std::optional<Severity> severity_from_string(std::string_view text);
const std::vector<AnomalyCode>& all_anomaly_codes();

struct Anomaly {
    AnomalyCode code = AnomalyCode::LostMessage;
    Severity severity = Severity::Warning;
    std::vector<std::uint64_t> evidence;  // trace seq numbers
    std::string explanation;
};

struct Delivery {
    std::string session;
    Bytes topic;
    Bytes payload;
    std::uint8_t qos = 0;
    std::uint64_t seq = 0;
};

/// One QoS handshake packet on a publisher session: a received PUBACK,
/// PUBREC or PUBCOMP, or a PUBREL sent by a step.
struct AckObservation {
    std::string session;
    PacketType type = PacketType::Puback;
    std::uint16_t packet_id = 0;
    std::uint64_t seq = 0;
    bool sent = false;
};

struct ScenarioOutcome {
    std::string experiment_name;
    std::vector<Delivery> delivered;
    std::vector<AckObservation> ack_flow;
    std::vector<Anomaly> anomalies;
    bool disconnected = false;
    TraceOutcome trace_outcome = TraceOutcome::Completed;
    std::string trace_detail;

    bool has(AnomalyCode code) const;
    std::set<AnomalyCode> codes() const;
};

class TraceMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Applies rules R1-R7 to a trace of `e`. Pure.
ScenarioOutcome evaluate_trace(const Experiment& e, const Trace& t);

/// Canonical per-experiment summary. Delivered payloads are labels in
/// delivery order, run-length encoded.
struct DeliveryRun {
    std::string label;
    std::size_t count = 1;
    bool operator==(const DeliveryRun&) const = default;
};

struct OutcomeSummary {
    std::vector<DeliveryRun> delivered;
    std::set<AnomalyCode> anomalies;
    bool disconnected = false;
    bool skipped = false;
    bool operator==(const OutcomeSummary&) const = default;
};

struct BehaviorProfile {
    std::string broker_label;
    std::string version;
    std::map<std::string, OutcomeSummary> outcomes;
    bool operator==(const BehaviorProfile&) const = default;
};

std::string payload_label(ByteView payload);
OutcomeSummary summarize(const ScenarioOutcome& o);

/// Evaluates every result. A failed liveness probe after an experiment adds
/// BrokerCrash to it; skipped experiments are marked skipped.
BehaviorProfile fingerprint(const std::string& broker_label, const std::vector<CorpusResult>& results,
                            std::vector<ScenarioOutcome>* outcomes = nullptr);

/// Adds BrokerCrash for a dead liveness probe; folds the disconnect the
/// crash explains into it.
void apply_liveness(ScenarioOutcome& o, const Experiment& e, const Liveness& after);

struct Divergence {
    std::string experiment;
    std::string description;
    bool operator==(const Divergence&) const = default;
};

class NoOverlap : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Compares the experiments both profiles cover. Throws NoOverlap when
/// there are none.
std::vector<Divergence> diff_profiles(const BehaviorProfile& a, const BehaviorProfile& b);

/// Hand transcriptions of the five brokers the study tested, keyed by
/// label ("Mosquitto", "EMQX", "HiveMQ", "Moquette", "Aedes").
const std::map<std::string, BehaviorProfile>& documented_profiles();

/// What a conformant broker produces for every builtin experiment.
const BehaviorProfile& conformant_profile();

std::string describe_delivered(const std::vector<DeliveryRun>& runs);
nlohmann::json anomaly_to_json(const Anomaly& a);
nlohmann::json outcome_to_json(const ScenarioOutcome& o);
nlohmann::json summary_to_json(const OutcomeSummary& s);
nlohmann::json profile_to_json(const BehaviorProfile& p);

}  // namespace mqfuzz
