#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mqfuzz/bytes.hpp"

// MQTT 3.1.1 control packets: bit-exact encoding, strict and permissive
// decoding, and frame surgery for malformed-input experiments.
namespace mqfuzz {

enum class PacketType : std::uint8_t {
    Connect = 1,
    Connack = 2,
    Publish = 3,
    Puback = 4,
    Pubrec = 5,
    Pubrel = 6,
    Pubcomp = 7,
    Subscribe = 8,
    Suback = 9,
    Unsubscribe = 10,
    Unsuback = 11,
    Pingreq = 12,
    Pingresp = 13,
    Disconnect = 14,
};

inline constexpr std::uint32_t kMaxRemainingLength = 268'435'455;
inline constexpr std::size_t kMaxStringLength = 65'535;

struct Will {
    Bytes topic;
    Bytes payload;
    std::uint8_t qos = 0;
    bool retain = false;
    bool operator==(const Will&) const = default;
};

struct Connect {
    Bytes protocol_name = to_bytes("MQTT");
    std::uint8_t protocol_level = 4;
    bool clean_session = true;
    std::optional<Will> will;
    std::uint16_t keep_alive = 60;
    Bytes client_id;
    std::optional<Bytes> username;
    std::optional<Bytes> password;
    bool operator==(const Connect&) const = default;
};

struct Connack {
    bool session_present = false;
    std::uint8_t return_code = 0;
    bool operator==(const Connack&) const = default;
};

struct Publish {
    bool dup = false;
    std::uint8_t qos = 0;
    bool retain = false;
    Bytes topic;
    std::optional<std::uint16_t> packet_id;  // present iff qos > 0
    Bytes payload;
    bool operator==(const Publish&) const = default;
};

struct Puback {
    std::uint16_t packet_id = 0;
    bool operator==(const Puback&) const = default;
};
struct Pubrec {
    std::uint16_t packet_id = 0;
    bool operator==(const Pubrec&) const = default;
};
struct Pubrel {
    std::uint16_t packet_id = 0;
    bool operator==(const Pubrel&) const = default;
};
struct Pubcomp {
    std::uint16_t packet_id = 0;
    bool operator==(const Pubcomp&) const = default;
};

struct SubscribeEntry {
    Bytes filter;
    std::uint8_t qos = 0;
    bool operator==(const SubscribeEntry&) const = default;
};

struct Subscribe {
    std::uint16_t packet_id = 0;
    std::vector<SubscribeEntry> entries;
    bool operator==(const Subscribe&) const = default;
};

inline constexpr std::uint8_t kSubackFailure = 0x80;

struct Suback {
    std::uint16_t packet_id = 0;
    std::vector<std::uint8_t> return_codes;
    bool operator==(const Suback&) const = default;
};

struct Unsubscribe {
    std::uint16_t packet_id = 0;
    std::vector<Bytes> filters;
    bool operator==(const Unsubscribe&) const = default;
};

struct Unsuback {
    std::uint16_t packet_id = 0;
    bool operator==(const Unsuback&) const = default;
};

struct Pingreq {
    bool operator==(const Pingreq&) const = default;
};
struct Pingresp {
    bool operator==(const Pingresp&) const = default;
};
struct Disconnect {
    bool operator==(const Disconnect&) const = default;
};

/// Emitted verbatim by encode_packet; never validated.
struct Raw {
    Bytes bytes;
    bool operator==(const Raw&) const = default;
};

using Packet = std::variant<Connect, Connack, Publish, Puback, Pubrec, Pubrel, Pubcomp, Subscribe,
                            Suback, Unsubscribe, Unsuback, Pingreq, Pingresp, Disconnect, Raw>;

/// nullopt for Raw.
std::optional<PacketType> packet_type(const Packet& p);
std::string_view packet_type_name(PacketType t);
/// "PUBLISH", ..., or "RAW".
std::string_view packet_name(const Packet& p);
/// packet_id for the variants that carry one.
std::optional<std::uint16_t> packet_id_of(const Packet& p);

class CodecError : public std::runtime_error {
public:
    enum class Kind { OutOfRange, InvariantViolation, OutOfBounds };

    CodecError(Kind kind, std::string field, const std::string& what)
        : std::runtime_error(what), kind_(kind), field_(std::move(field)) {}

    Kind kind() const noexcept { return kind_; }
    /// The offending field for InvariantViolation, empty otherwise.
    const std::string& field() const noexcept { return field_; }

private:
    Kind kind_;
    std::string field_;
};

enum class DecodeStatus { Ok, Incomplete, Malformed };

struct RemainingLength {
    DecodeStatus status = DecodeStatus::Incomplete;
    std::uint32_t value = 0;
    std::size_t consumed = 0;
};

/// Minimal 1-4 byte encoding; throws CodecError(OutOfRange) above
/// kMaxRemainingLength.
Bytes encode_remaining_length(std::uint32_t n);
void append_remaining_length(Bytes& out, std::uint32_t n);

/// Malformed when a fourth byte still has its continuation bit set,
/// Incomplete when the input ends mid-varint.
RemainingLength decode_remaining_length(ByteView bytes);

/// Throws CodecError(InvariantViolation) naming the field for non-Raw
/// packets that cannot be put on the wire as described.
Bytes encode_packet(const Packet& p);

enum class DecodeMode {
    Strict,      // any violation is Malformed
    Permissive,  // violations become annotations when the frame still parses
};

struct DecodeResult {
    DecodeStatus status = DecodeStatus::Incomplete;
    Packet packet;
    std::vector<std::string> annotations;
    /// Frame length. Also set for Malformed when the fixed header was
    /// readable, so a stream reader can skip the frame.
    std::size_t consumed = 0;
    std::string error;

    bool ok() const noexcept { return status == DecodeStatus::Ok; }
};

/// `bytes` must start at a frame boundary and may extend past the frame.
DecodeResult decode_packet(ByteView bytes, DecodeMode mode);

/// Replace `remove` bytes at `at` with `insert`. With fixup_length the
/// remaining-length field is rewritten to the new body size; without it the
/// stale length is kept. Throws CodecError(OutOfBounds).
Bytes splice(ByteView frame, std::size_t at, std::size_t remove, ByteView insert, bool fixup_length);

}  // namespace mqfuzz
