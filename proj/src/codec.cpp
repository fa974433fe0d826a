#include "mqfuzz/codec.hpp"

#include <algorithm>

#include "mqfuzz/topics.hpp"

namespace mqfuzz {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

[[noreturn]] void invariant(const std::string& field, const std::string& why) {
    throw CodecError(CodecError::Kind::InvariantViolation, field, field + ": " + why);
}

void put_u16(Bytes& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

void put_string(Bytes& out, ByteView s, const char* field) {
    if (s.size() > kMaxStringLength) invariant(field, "longer than 65535 bytes");
    put_u16(out, static_cast<std::uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

Bytes frame(std::uint8_t first, const Bytes& body) {
    if (body.size() > kMaxRemainingLength) invariant("remaining_length", "body too large");
    Bytes out;
    out.reserve(body.size() + 5);
    out.push_back(first);
    append_remaining_length(out, static_cast<std::uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

std::uint8_t header_byte(PacketType t, std::uint8_t flags = 0) {
    return static_cast<std::uint8_t>(static_cast<std::uint8_t>(t) << 4 | (flags & 0x0F));
}

Bytes id_only(PacketType t, std::uint16_t id, std::uint8_t flags = 0) {
    Bytes body;
    put_u16(body, id);
    return frame(header_byte(t, flags), body);
}

// Thrown by Reader when the body is shorter than its fields claim.
struct Underrun {};

class Reader {
public:
    explicit Reader(ByteView body) : body_(body) {}

    std::uint8_t u8() {
        need(1);
        return body_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(body_[pos_] << 8 | body_[pos_ + 1]);
        pos_ += 2;
        return v;
    }
    Bytes string() {
        const std::uint16_t len = u16();
        need(len);
        Bytes out(body_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  body_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
        pos_ += len;
        return out;
    }
    Bytes rest() {
        Bytes out(body_.begin() + static_cast<std::ptrdiff_t>(pos_), body_.end());
        pos_ = body_.size();
        return out;
    }
    std::size_t remaining() const { return body_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (body_.size() - pos_ < n) throw Underrun{};
    }

    ByteView body_;
    std::size_t pos_ = 0;
};

// Annotations for an MQTT UTF-8 string field.
void check_text(ByteView s, const char* field, std::vector<std::string>& notes) {
    if (!is_valid_utf8(s)) notes.push_back(std::string(field) + " not valid UTF-8");
    if (std::find(s.begin(), s.end(), std::uint8_t{0}) != s.end()) {
        notes.push_back(std::string(field) + " contains NUL");
    }
}

void check_packet_id(std::uint16_t id, std::vector<std::string>& notes) {
    if (id == 0) notes.push_back("packet_id is 0");
}

void check_trailing(const Reader& r, std::vector<std::string>& notes) {
    if (r.remaining() != 0) {
        notes.push_back("trailing " + std::to_string(r.remaining()) + " bytes after packet body");
    }
}

void check_flags(std::uint8_t flags, std::uint8_t expected, std::vector<std::string>& notes) {
    if (flags != expected) notes.push_back("reserved flags nonzero");
}

Packet parse_body(PacketType type, std::uint8_t flags, ByteView body, std::vector<std::string>& notes) {
    Reader r(body);
    switch (type) {
        case PacketType::Connect: {
            check_flags(flags, 0, notes);
            Connect c;
            c.protocol_name = r.string();
            check_text(c.protocol_name, "protocol_name", notes);
            c.protocol_level = r.u8();
            const std::uint8_t cf = r.u8();
            if (cf & 0x01) notes.push_back("connect reserved flag set");
            c.clean_session = (cf & 0x02) != 0;
            const bool will_flag = (cf & 0x04) != 0;
            const std::uint8_t will_qos = (cf >> 3) & 0x03;
            const bool will_retain = (cf & 0x20) != 0;
            const bool password_flag = (cf & 0x40) != 0;
            const bool username_flag = (cf & 0x80) != 0;
            if (!will_flag && (will_qos != 0 || will_retain)) {
                notes.push_back("will qos/retain set without will flag");
            }
            if (will_qos == 3) notes.push_back("will qos 3");
            if (password_flag && !username_flag) notes.push_back("password flag without username flag");
            c.keep_alive = r.u16();
            c.client_id = r.string();
            check_text(c.client_id, "client_id", notes);
            if (will_flag) {
                Will w;
                w.qos = will_qos;
                w.retain = will_retain;
                w.topic = r.string();
                for (auto v : topics::validate_topic(w.topic)) {
                    notes.push_back("will topic " + std::string(topics::describe(v)));
                }
                w.payload = r.string();
                c.will = std::move(w);
            }
            if (username_flag) {
                c.username = r.string();
                check_text(*c.username, "username", notes);
            }
            if (password_flag) c.password = r.string();
            check_trailing(r, notes);
            return c;
        }
        case PacketType::Connack: {
            check_flags(flags, 0, notes);
            Connack c;
            const std::uint8_t af = r.u8();
            if (af & 0xFE) notes.push_back("connack reserved flags set");
            c.session_present = (af & 0x01) != 0;
            c.return_code = r.u8();
            if (c.return_code > 5) notes.push_back("connack return code out of range");
            check_trailing(r, notes);
            return c;
        }
        case PacketType::Publish: {
            Publish p;
            p.dup = (flags & 0x08) != 0;
            p.qos = (flags >> 1) & 0x03;
            p.retain = (flags & 0x01) != 0;
            if (p.qos == 3) notes.push_back("publish qos 3");
            if (p.qos == 0 && p.dup) notes.push_back("dup set on qos 0 publish");
            p.topic = r.string();
            for (auto v : topics::validate_topic(p.topic)) {
                notes.push_back("topic " + std::string(topics::describe(v)));
            }
            if (p.qos > 0) {
                p.packet_id = r.u16();
                check_packet_id(*p.packet_id, notes);
            }
            p.payload = r.rest();
            return p;
        }
        case PacketType::Puback:
        case PacketType::Pubrec:
        case PacketType::Pubrel:
        case PacketType::Pubcomp:
        case PacketType::Unsuback: {
            check_flags(flags, type == PacketType::Pubrel ? 0x02 : 0x00, notes);
            const std::uint16_t id = r.u16();
            check_packet_id(id, notes);
            check_trailing(r, notes);
            switch (type) {
                case PacketType::Puback: return Puback{id};
                case PacketType::Pubrec: return Pubrec{id};
                case PacketType::Pubrel: return Pubrel{id};
                case PacketType::Pubcomp: return Pubcomp{id};
                default: return Unsuback{id};
            }
        }
        case PacketType::Subscribe: {
            check_flags(flags, 0x02, notes);
            Subscribe s;
            s.packet_id = r.u16();
            check_packet_id(s.packet_id, notes);
            while (r.remaining() > 0) {
                SubscribeEntry e;
                e.filter = r.string();
                for (auto v : topics::validate_filter(e.filter)) {
                    notes.push_back("filter " + std::string(topics::describe(v)));
                }
                const std::uint8_t opts = r.u8();
                if (opts & 0xFC) notes.push_back("subscribe options reserved bits set");
                e.qos = opts & 0x03;
                if (e.qos == 3) notes.push_back("requested qos 3");
                s.entries.push_back(std::move(e));
            }
            if (s.entries.empty()) notes.push_back("subscribe has no topic filters");
            return s;
        }
        case PacketType::Suback: {
            check_flags(flags, 0, notes);
            Suback s;
            s.packet_id = r.u16();
            check_packet_id(s.packet_id, notes);
            s.return_codes = r.rest();
            for (auto rc : s.return_codes) {
                if (rc > 2 && rc != kSubackFailure) {
                    notes.push_back("suback return code out of range");
                    break;
                }
            }
            if (s.return_codes.empty()) notes.push_back("suback has no return codes");
            return s;
        }
        case PacketType::Unsubscribe: {
            check_flags(flags, 0x02, notes);
            Unsubscribe u;
            u.packet_id = r.u16();
            check_packet_id(u.packet_id, notes);
            while (r.remaining() > 0) {
                u.filters.push_back(r.string());
                for (auto v : topics::validate_filter(u.filters.back())) {
                    notes.push_back("filter " + std::string(topics::describe(v)));
                }
            }
            if (u.filters.empty()) notes.push_back("unsubscribe has no topic filters");
            return u;
        }
        case PacketType::Pingreq:
        case PacketType::Pingresp:
        case PacketType::Disconnect: {
            check_flags(flags, 0, notes);
            check_trailing(r, notes);
            if (type == PacketType::Pingreq) return Pingreq{};
            if (type == PacketType::Pingresp) return Pingresp{};
            return Disconnect{};
        }
    }
    return Raw{};
}

}  // namespace

std::optional<PacketType> packet_type(const Packet& p) {
    return std::visit(overloaded{
                          [](const Connect&) -> std::optional<PacketType> { return PacketType::Connect; },
                          [](const Connack&) -> std::optional<PacketType> { return PacketType::Connack; },
                          [](const Publish&) -> std::optional<PacketType> { return PacketType::Publish; },
                          [](const Puback&) -> std::optional<PacketType> { return PacketType::Puback; },
                          [](const Pubrec&) -> std::optional<PacketType> { return PacketType::Pubrec; },
                          [](const Pubrel&) -> std::optional<PacketType> { return PacketType::Pubrel; },
                          [](const Pubcomp&) -> std::optional<PacketType> { return PacketType::Pubcomp; },
                          [](const Subscribe&) -> std::optional<PacketType> { return PacketType::Subscribe; },
                          [](const Suback&) -> std::optional<PacketType> { return PacketType::Suback; },
                          [](const Unsubscribe&) -> std::optional<PacketType> { return PacketType::Unsubscribe; },
                          [](const Unsuback&) -> std::optional<PacketType> { return PacketType::Unsuback; },
                          [](const Pingreq&) -> std::optional<PacketType> { return PacketType::Pingreq; },
                          [](const Pingresp&) -> std::optional<PacketType> { return PacketType::Pingresp; },
                          [](const Disconnect&) -> std::optional<PacketType> { return PacketType::Disconnect; },
                          [](const Raw&) -> std::optional<PacketType> { return std::nullopt; },
                      },
                      p);
}

std::string_view packet_type_name(PacketType t) {
    switch (t) {
        case PacketType::Connect: return "CONNECT";
        case PacketType::Connack: return "CONNACK";
        case PacketType::Publish: return "PUBLISH";
        case PacketType::Puback: return "PUBACK";
        case PacketType::Pubrec: return "PUBREC";
        case PacketType::Pubrel: return "PUBREL";
        case PacketType::Pubcomp: return "PUBCOMP";
        case PacketType::Subscribe: return "SUBSCRIBE";
        case PacketType::Suback: return "SUBACK";
        case PacketType::Unsubscribe: return "UNSUBSCRIBE";
        case PacketType::Unsuback: return "UNSUBACK";
        case PacketType::Pingreq: return "PINGREQ";
        case PacketType::Pingresp: return "PINGRESP";
        case PacketType::Disconnect: return "DISCONNECT";
    }
    return "UNKNOWN";
}

std::string_view packet_name(const Packet& p) {
    const auto t = packet_type(p);
    return t ? packet_type_name(*t) : "RAW";
}

std::optional<std::uint16_t> packet_id_of(const Packet& p) {
    return std::visit(
        [](const auto& v) -> std::optional<std::uint16_t> {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Publish>) {
                return v.packet_id;
            } else if constexpr (requires { v.packet_id; }) {
                return v.packet_id;
            } else {
                return std::nullopt;
            }
        },
        p);
}

void append_remaining_length(Bytes& out, std::uint32_t n) {
    if (n > kMaxRemainingLength) {
        throw CodecError(CodecError::Kind::OutOfRange, "remaining_length",
                         "remaining length " + std::to_string(n) + " exceeds 268435455");
    }
    do {
        std::uint8_t b = n % 128;
        n /= 128;
        if (n > 0) b |= 0x80;
        out.push_back(b);
    } while (n > 0);
}

Bytes encode_remaining_length(std::uint32_t n) {
    Bytes out;
    append_remaining_length(out, n);
    return out;
}

RemainingLength decode_remaining_length(ByteView bytes) {
    std::uint32_t value = 0;
    std::uint32_t multiplier = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i >= bytes.size()) return {DecodeStatus::Incomplete, 0, 0};
        const std::uint8_t b = bytes[i];
        value += (b & 0x7F) * multiplier;
        if ((b & 0x80) == 0) return {DecodeStatus::Ok, value, i + 1};
        multiplier *= 128;
    }
    return {DecodeStatus::Malformed, 0, 0};
}

Bytes encode_packet(const Packet& p) {
    return std::visit(
        overloaded{
            [](const Connect& c) {
                Bytes body;
                put_string(body, c.protocol_name, "protocol_name");
                body.push_back(c.protocol_level);
                std::uint8_t cf = 0;
                if (c.clean_session) cf |= 0x02;
                if (c.will) {
                    if (c.will->qos > 2) invariant("will.qos", "must be 0, 1 or 2");
                    cf |= 0x04;
                    cf |= static_cast<std::uint8_t>(c.will->qos << 3);
                    if (c.will->retain) cf |= 0x20;
                }
                if (c.password) cf |= 0x40;
                if (c.username) cf |= 0x80;
                body.push_back(cf);
                put_u16(body, c.keep_alive);
                put_string(body, c.client_id, "client_id");
                if (c.will) {
                    put_string(body, c.will->topic, "will.topic");
                    put_string(body, c.will->payload, "will.payload");
                }
                if (c.username) put_string(body, *c.username, "username");
                if (c.password) put_string(body, *c.password, "password");
                return frame(header_byte(PacketType::Connect), body);
            },
            [](const Connack& c) {
                Bytes body{static_cast<std::uint8_t>(c.session_present ? 1 : 0), c.return_code};
                return frame(header_byte(PacketType::Connack), body);
            },
            [](const Publish& pub) {
                if (pub.qos > 2) invariant("qos", "must be 0, 1 or 2");
                if (pub.qos > 0 && !pub.packet_id) invariant("packet_id", "required when qos > 0");
                if (pub.qos == 0 && pub.packet_id) invariant("packet_id", "not carried by qos 0 publishes");
                Bytes body;
                put_string(body, pub.topic, "topic");
                if (pub.packet_id) put_u16(body, *pub.packet_id);
                body.insert(body.end(), pub.payload.begin(), pub.payload.end());
                std::uint8_t flags = static_cast<std::uint8_t>(pub.qos << 1);
                if (pub.dup) flags |= 0x08;
                if (pub.retain) flags |= 0x01;
                return frame(header_byte(PacketType::Publish, flags), body);
            },
            [](const Puback& a) { return id_only(PacketType::Puback, a.packet_id); },
            [](const Pubrec& a) { return id_only(PacketType::Pubrec, a.packet_id); },
            [](const Pubrel& a) { return id_only(PacketType::Pubrel, a.packet_id, 0x02); },
            [](const Pubcomp& a) { return id_only(PacketType::Pubcomp, a.packet_id); },
            [](const Subscribe& s) {
                Bytes body;
                put_u16(body, s.packet_id);
                for (const auto& e : s.entries) {
                    if (e.qos > 2) invariant("entries.qos", "must be 0, 1 or 2");
                    put_string(body, e.filter, "entries.filter");
                    body.push_back(e.qos);
                }
                return frame(header_byte(PacketType::Subscribe, 0x02), body);
            },
            [](const Suback& s) {
                Bytes body;
                put_u16(body, s.packet_id);
                for (auto rc : s.return_codes) {
                    if (rc > 2 && rc != kSubackFailure) invariant("return_codes", "must be 0, 1, 2 or 0x80");
                    body.push_back(rc);
                }
                return frame(header_byte(PacketType::Suback), body);
            },
            [](const Unsubscribe& u) {
                Bytes body;
                put_u16(body, u.packet_id);
                for (const auto& f : u.filters) put_string(body, f, "filters");
                return frame(header_byte(PacketType::Unsubscribe, 0x02), body);
            },
            [](const Unsuback& a) { return id_only(PacketType::Unsuback, a.packet_id); },
            [](const Pingreq&) { return frame(header_byte(PacketType::Pingreq), {}); },
            [](const Pingresp&) { return frame(header_byte(PacketType::Pingresp), {}); },
            [](const Disconnect&) { return frame(header_byte(PacketType::Disconnect), {}); },
            [](const Raw& r) { return r.bytes; },
        },
        p);
}

DecodeResult decode_packet(ByteView bytes, DecodeMode mode) {
    DecodeResult result;
    if (bytes.empty()) return result;  // Incomplete

    const auto rl = decode_remaining_length(bytes.subspan(1));
    if (rl.status == DecodeStatus::Incomplete) return result;
    if (rl.status == DecodeStatus::Malformed) {
        result.status = DecodeStatus::Malformed;
        result.error = "remaining length longer than 4 bytes";
        return result;
    }
    const std::size_t header_len = 1 + rl.consumed;
    const std::size_t total = header_len + rl.value;
    if (bytes.size() < total) return result;  // Incomplete

    result.consumed = total;
    const ByteView frame_bytes = bytes.first(total);
    const ByteView body = frame_bytes.subspan(header_len);
    const std::uint8_t type_nibble = bytes[0] >> 4;
    const std::uint8_t flags = bytes[0] & 0x0F;

    if (type_nibble == 0 || type_nibble == 15) {
        const std::string note = "reserved packet type " + std::to_string(type_nibble);
        if (mode == DecodeMode::Strict) {
            result.status = DecodeStatus::Malformed;
            result.error = note;
        } else {
            result.status = DecodeStatus::Ok;
            result.packet = Raw{Bytes(frame_bytes.begin(), frame_bytes.end())};
            result.annotations.push_back(note);
        }
        return result;
    }

    std::vector<std::string> notes;
    try {
        result.packet = parse_body(static_cast<PacketType>(type_nibble), flags, body, notes);
    } catch (const Underrun&) {
        result.status = DecodeStatus::Malformed;
        result.error = std::string(packet_type_name(static_cast<PacketType>(type_nibble))) +
                       " body shorter than its fields require";
        return result;
    }

    if (mode == DecodeMode::Strict && !notes.empty()) {
        result.status = DecodeStatus::Malformed;
        result.error = notes.front();
        result.annotations = std::move(notes);
        return result;
    }
    result.status = DecodeStatus::Ok;
    result.annotations = std::move(notes);
    return result;
}

Bytes splice(ByteView frame_bytes, std::size_t at, std::size_t remove, ByteView insert, bool fixup_length) {
    if (at > frame_bytes.size() || remove > frame_bytes.size() - at) {
        throw CodecError(CodecError::Kind::OutOfBounds, "",
                         "splice range [" + std::to_string(at) + ", +" + std::to_string(remove) +
                             ") outside frame of " + std::to_string(frame_bytes.size()) + " bytes");
    }
    Bytes out;
    out.reserve(frame_bytes.size() - remove + insert.size());
    out.insert(out.end(), frame_bytes.begin(), frame_bytes.begin() + static_cast<std::ptrdiff_t>(at));
    out.insert(out.end(), insert.begin(), insert.end());
    out.insert(out.end(), frame_bytes.begin() + static_cast<std::ptrdiff_t>(at + remove), frame_bytes.end());
    if (!fixup_length) return out;

    if (out.empty()) invariant("remaining_length", "no fixed header left to fix up");
    const auto rl = decode_remaining_length(ByteView(out).subspan(1));
    if (rl.status != DecodeStatus::Ok) invariant("remaining_length", "unreadable after splice");
    const std::size_t body_size = out.size() - 1 - rl.consumed;
    if (body_size > kMaxRemainingLength) invariant("remaining_length", "body too large");
    Bytes fixed;
    fixed.reserve(out.size() + 4);
    fixed.push_back(out[0]);
    append_remaining_length(fixed, static_cast<std::uint32_t>(body_size));
    fixed.insert(fixed.end(), out.begin() + static_cast<std::ptrdiff_t>(1 + rl.consumed), out.end());
    return fixed;
}

}  // namespace mqfuzz
