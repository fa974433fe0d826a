#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mqfuzz/codec.hpp"

namespace mqfuzz {

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 1883;
    std::uint32_t connect_timeout_ms = 3000;
    std::uint32_t io_timeout_ms = 5000;

    /// "host:port", port optional (defaults to 1883). Throws
    /// std::invalid_argument on a bad port.
    static Endpoint parse(const std::string& target);
    std::string to_string() const;
};

enum class EventKind { Sent, Received, Connected, TcpClosedByPeer, TcpError, Timeout };

/// Why the runner put a frame on the wire.
enum class SendOrigin {
    Step,             // an experiment step
    AutoAck,          // answer to a broker-initiated QoS handshake
    ImplicitConnect,  // CONNECT issued before a session's first packet step
};

std::string_view to_string(EventKind k);
std::string_view to_string(SendOrigin o);

struct TraceEvent {
    std::uint64_t seq = 0;
    std::uint64_t t_ms = 0;
    std::string session;
    EventKind kind = EventKind::Connected;

    // Sent and Received.
    Packet packet;
    Bytes wire;
    // Sent: bytes came from send_raw or a splice, not from an encoder.
    bool raw = false;
    SendOrigin origin = SendOrigin::Step;
    // Received: what the permissive decoder flagged.
    std::vector<std::string> annotations;

    // TcpClosedByPeer / TcpError detail, or what a Timeout was awaiting.
    std::string detail;

    bool is_auto() const { return kind == EventKind::Sent && origin != SendOrigin::Step; }
    bool operator==(const TraceEvent&) const = default;
};

enum class TraceOutcome { Completed, AbortedByPeer, RunnerError };
std::string_view to_string(TraceOutcome o);

struct Trace {
    std::string experiment_name;
    Endpoint endpoint;
    std::chrono::system_clock::time_point started_at{};
    std::vector<TraceEvent> events;
    TraceOutcome outcome = TraceOutcome::Completed;
    std::string outcome_detail;
};

/// Informational JSON view of a packet; byte fields as hex.
nlohmann::json packet_to_json(const Packet& p);

/// JSON Lines: a "trace" header record, one "event" record per event, and
/// an "outcome" record. Wire bytes are the authoritative content; packets
/// are re-decoded from them on load.
std::string trace_to_jsonl(const Trace& t);
/// Throws std::runtime_error on malformed input.
Trace trace_from_jsonl(std::string_view text);

}  // namespace mqfuzz
