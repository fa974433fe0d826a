#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mqfuzz/experiment.hpp"
#include "mqfuzz/trace.hpp"

namespace mqfuzz {

struct RunOptions {
    /// Overrides every experiment's settle_ms when set.
    std::optional<std::uint32_t> settle_ms;
};

/// Executes `e` against `ep`, one TCP connection per declared session.
///
/// All sessions connect before the first step; a failure there is a
/// RunnerError outcome. A session whose first packet step is not
/// connect/send_raw gets an implicit CONNECT (origin ImplicitConnect) and
/// the runner waits for CONNACK. connect, subscribe, unsubscribe and
/// pingreq wait for their answer up to io_timeout_ms; a miss becomes a
/// Timeout event. After the last step the runner waits for outbound data
/// to drain, then keeps capturing for settle_ms.
///
/// Never throws for peer behavior; peer closes and silence are trace
/// events.
Trace run_experiment(const Experiment& e, const Endpoint& ep, const RunOptions& options = {});

struct Liveness {
    bool alive = false;
    std::string detail;
};

/// TCP connect plus CONNECT/CONNACK(0) with a fresh client id within
/// connect_timeout_ms.
Liveness probe_liveness(const Endpoint& ep);

struct CorpusResult {
    Experiment experiment;
    std::optional<Trace> trace;  // empty when skipped
    Liveness liveness_after;
    std::string skipped_reason;

    bool skipped() const { return !trace.has_value(); }
};

/// Runs sequentially, probing liveness after each experiment. Once the
/// target is dead, the rest are skipped with reason "broker_dead".
std::vector<CorpusResult> run_corpus(const std::vector<Experiment>& experiments, const Endpoint& ep,
                                     const RunOptions& options = {},
                                     const std::function<void(const CorpusResult&)>& progress = {});

}  // namespace mqfuzz
