#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mqfuzz/bytes.hpp"
#include "mqfuzz/codec.hpp"

// The JSON experiment language: scripted packet sequences run by the
// runner against a broker.
namespace mqfuzz {

inline constexpr std::uint32_t kMaxWaitMs = 60'000;
inline constexpr std::uint32_t kMaxRepeat = 100'000;
inline constexpr std::uint32_t kDefaultSettleMs = 500;

/// What kind of input the experiment feeds the broker, which decides how
/// the oracle reads a peer disconnect.
enum class InputClass {
    Conformant,  // disconnect is an anomaly
    Malformed,   // disconnect is the expected answer; its absence is noted
    Limit,       // probes implementation limits; disconnect is tolerated
};

std::string_view to_string(InputClass c);

struct ConnectParams {
    Bytes protocol_name = to_bytes("MQTT");
    std::uint8_t protocol_level = 4;
    Bytes client_id;
    bool clean_session = true;
    std::uint16_t keep_alive = 60;
    std::optional<Bytes> username;
    std::optional<Bytes> password;
    std::optional<Will> will;
    bool operator==(const ConnectParams&) const = default;

    Connect to_packet() const;
};

struct SessionDecl {
    std::string id;
    ConnectParams connect;  // client_id defaults to id
    bool auto_ack = true;
    bool operator==(const SessionDecl&) const = default;
};

namespace step {

struct Connect {
    bool operator==(const Connect&) const = default;
};
struct Disconnect {
    bool operator==(const Disconnect&) const = default;
};
struct Subscribe {
    Bytes filter;
    std::uint8_t qos = 0;
    std::uint16_t packet_id = 1;
    bool operator==(const Subscribe&) const = default;
};
struct Unsubscribe {
    Bytes filter;
    std::uint16_t packet_id = 1;
    bool operator==(const Unsubscribe&) const = default;
};
/// packet_id is never assigned implicitly: reusing ids is what the
/// experiments are about.
struct Publish {
    Bytes topic;
    Bytes payload;
    std::uint8_t qos = 0;
    bool retain = false;
    bool dup = false;
    std::optional<std::uint16_t> packet_id;
    bool operator==(const Publish&) const = default;
};
/// puback, pubrec, pubrel or pubcomp sent by hand.
struct Ack {
    PacketType kind = PacketType::Puback;
    std::uint16_t packet_id = 0;
    bool operator==(const Ack&) const = default;
};
struct Pingreq {
    bool operator==(const Pingreq&) const = default;
};
struct SendRaw {
    Bytes bytes;
    bool operator==(const SendRaw&) const = default;
};
/// Patches the next frame a step emits on the same session.
struct SpliceNext {
    std::size_t offset = 0;
    std::size_t remove = 0;
    Bytes insert;
    bool fixup_length = false;
    bool operator==(const SpliceNext&) const = default;
};
struct Wait {
    std::uint32_t ms = 0;
    bool operator==(const Wait&) const = default;
};
struct Repeat;

}  // namespace step

struct Step;

namespace step {
struct Repeat {
    std::uint32_t count = 1;
    std::vector<Step> steps;
    bool operator==(const Repeat& other) const;
};
}  // namespace step

using Action = std::variant<step::Connect, step::Disconnect, step::Subscribe, step::Unsubscribe, step::Publish,
                            step::Ack, step::Pingreq, step::SendRaw, step::SpliceNext, step::Wait, step::Repeat>;

struct Step {
    std::string session;  // empty for wait and repeat
    Action action;
    bool operator==(const Step&) const = default;
};

/// "connect", "publish", ... as written in experiment files.
std::string action_name(const Action& a);

struct Experiment {
    std::string name;
    std::string description;
    InputClass input = InputClass::Conformant;
    std::vector<SessionDecl> sessions;
    std::vector<Step> steps;
    std::uint32_t settle_ms = kDefaultSettleMs;
    bool operator==(const Experiment&) const = default;

    const SessionDecl* find_session(std::string_view id) const;
};

class ExperimentError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SchemaError : public ExperimentError {
public:
    SchemaError(std::string path, std::string reason)
        : ExperimentError(path + ": " + reason), path_(std::move(path)), reason_(std::move(reason)) {}
    const std::string& path() const noexcept { return path_; }
    const std::string& reason() const noexcept { return reason_; }

private:
    std::string path_;
    std::string reason_;
};

class DuplicateSession : public ExperimentError {
public:
    explicit DuplicateSession(std::string id)
        : ExperimentError("duplicate session id '" + id + "'"), id_(std::move(id)) {}
    const std::string& id() const noexcept { return id_; }

private:
    std::string id_;
};

class UnknownSessionRef : public ExperimentError {
public:
    UnknownSessionRef(std::string path, std::string id)
        : ExperimentError(path + ": unknown session '" + id + "'"), path_(std::move(path)), id_(std::move(id)) {}
    const std::string& path() const noexcept { return path_; }
    const std::string& id() const noexcept { return id_; }

private:
    std::string path_;
    std::string id_;
};

/// Throws SchemaError, DuplicateSession or UnknownSessionRef. Never lets a
/// JSON library exception escape.
Experiment parse_experiment(std::string_view json_text);
Experiment parse_experiment(const nlohmann::json& doc);

/// Checks the invariants parse_experiment enforces, for experiments built
/// in code.
void validate_experiment(const Experiment& e);

/// Defaults are written out explicitly; payloads are always hex, other
/// byte strings are text when printable UTF-8 and hex otherwise.
nlohmann::json experiment_to_json(const Experiment& e);
std::string render_experiment(const Experiment& e);

/// Flattened count of steps that put a frame on the wire, repeats
/// expanded.
std::size_t packet_step_count(const std::vector<Step>& steps);

/// The scenarios shipped with the tool.
std::vector<Experiment> builtin_corpus();

/// SHA-256 over the rendered experiments, lowercase hex.
std::string corpus_hash(const std::vector<Experiment>& experiments);

}  // namespace mqfuzz
