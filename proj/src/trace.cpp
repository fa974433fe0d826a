#include "mqfuzz/trace.hpp"

#include <ctime>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace mqfuzz {

using nlohmann::json;

Endpoint Endpoint::parse(const std::string& target) {
    Endpoint ep;
    const auto colon = target.rfind(':');
    if (colon == std::string::npos) {
        ep.host = target;
        return ep;
    }
    ep.host = target.substr(0, colon);
    const std::string port = target.substr(colon + 1);
    std::size_t used = 0;
    unsigned long value = 0;
    try {
        value = std::stoul(port, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad port in target '" + target + "'");
    }
    if (used != port.size() || value == 0 || value > 65535) {
        throw std::invalid_argument("port must be 1-65535 in target '" + target + "'");
    }
    ep.port = static_cast<std::uint16_t>(value);
    return ep;
}

std::string Endpoint::to_string() const {
    return host + ":" + std::to_string(port);
}

std::string_view to_string(EventKind k) {
    switch (k) {
        case EventKind::Sent: return "sent";
        case EventKind::Received: return "received";
        case EventKind::Connected: return "connected";
        case EventKind::TcpClosedByPeer: return "tcp_closed_by_peer";
        case EventKind::TcpError: return "tcp_error";
        case EventKind::Timeout: return "timeout";
    }
    return "unknown";
}

std::string_view to_string(SendOrigin o) {
    switch (o) {
        case SendOrigin::Step: return "step";
        case SendOrigin::AutoAck: return "auto_ack";
        case SendOrigin::ImplicitConnect: return "implicit_connect";
    }
    return "step";
}

std::string_view to_string(TraceOutcome o) {
    switch (o) {
        case TraceOutcome::Completed: return "completed";
        case TraceOutcome::AbortedByPeer: return "aborted_by_peer";
        case TraceOutcome::RunnerError: return "runner_error";
    }
    return "completed";
}

json packet_to_json(const Packet& p) {
    json j;
    j["type"] = std::string(packet_name(p));
    std::visit(
        [&j](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Connect>) {
                j["protocol_name_hex"] = to_hex(v.protocol_name);
                j["protocol_level"] = v.protocol_level;
                j["clean_session"] = v.clean_session;
                j["keep_alive"] = v.keep_alive;
                j["client_id_hex"] = to_hex(v.client_id);
                if (v.will) {
                    j["will"] = {{"topic_hex", to_hex(v.will->topic)},
                                 {"payload_hex", to_hex(v.will->payload)},
                                 {"qos", v.will->qos},
                                 {"retain", v.will->retain}};
                }
                if (v.username) j["username_hex"] = to_hex(*v.username);
                if (v.password) j["password_hex"] = to_hex(*v.password);
            } else if constexpr (std::is_same_v<T, Connack>) {
                j["session_present"] = v.session_present;
                j["return_code"] = v.return_code;
            } else if constexpr (std::is_same_v<T, Publish>) {
                j["dup"] = v.dup;
                j["qos"] = v.qos;
                j["retain"] = v.retain;
                j["topic_hex"] = to_hex(v.topic);
                if (v.packet_id) j["packet_id"] = *v.packet_id;
                j["payload_hex"] = to_hex(v.payload);
            } else if constexpr (std::is_same_v<T, Subscribe>) {
                j["packet_id"] = v.packet_id;
                json entries = json::array();
                for (const auto& e : v.entries) entries.push_back({{"filter_hex", to_hex(e.filter)}, {"qos", e.qos}});
                j["entries"] = std::move(entries);
            } else if constexpr (std::is_same_v<T, Suback>) {
                j["packet_id"] = v.packet_id;
                j["return_codes"] = v.return_codes;
            } else if constexpr (std::is_same_v<T, Unsubscribe>) {
                j["packet_id"] = v.packet_id;
                json filters = json::array();
                for (const auto& f : v.filters) filters.push_back(to_hex(f));
                j["filters_hex"] = std::move(filters);
            } else if constexpr (std::is_same_v<T, Raw>) {
                j["bytes_hex"] = to_hex(v.bytes);
            } else if constexpr (requires { v.packet_id; }) {
                j["packet_id"] = v.packet_id;
            }
        },
        p);
    return j;
}

namespace {

std::string iso8601(std::chrono::system_clock::time_point tp) {
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(tp.time_since_epoch()).count();
    const std::time_t secs = static_cast<std::time_t>(ms / 1000);
    std::tm tm{};
    gmtime_r(&secs, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << (ms % 1000)
        << 'Z';
    return out.str();
}

std::chrono::system_clock::time_point parse_iso8601(const std::string& s) {
    std::tm tm{};
    std::istringstream in(s);
    in >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%S");
    if (in.fail()) throw std::runtime_error("bad started_at '" + s + "'");
    long millis = 0;
    if (in.peek() == '.') {
        in.get();
        in >> millis;
    }
    const std::time_t secs = timegm(&tm);
    return std::chrono::system_clock::time_point(std::chrono::seconds(secs) + std::chrono::milliseconds(millis));
}

template <class E>
E enum_from(const std::string& text, std::initializer_list<E> values) {
    for (E v : values) {
        if (to_string(v) == text) return v;
    }
    throw std::runtime_error("unknown value '" + text + "'");
}

}  // namespace

std::string trace_to_jsonl(const Trace& t) {
    std::string out;
    json header = {{"record", "trace"},
                   {"format", 1},
                   {"experiment", t.experiment_name},
                   {"endpoint", {{"host", t.endpoint.host}, {"port", t.endpoint.port}}},
                   {"started_at", iso8601(t.started_at)}};
    out += header.dump();
    out += '\n';
    for (const auto& e : t.events) {
        json j = {{"record", "event"},
                  {"seq", e.seq},
                  {"t_ms", e.t_ms},
                  {"session", e.session},
                  {"kind", std::string(to_string(e.kind))}};
        switch (e.kind) {
            case EventKind::Sent:
                j["origin"] = std::string(to_string(e.origin));
                j["raw"] = e.raw;
                j["hex"] = to_hex(e.wire);
                j["packet"] = packet_to_json(e.packet);
                break;
            case EventKind::Received:
                j["hex"] = to_hex(e.wire);
                j["packet"] = packet_to_json(e.packet);
                j["annotations"] = e.annotations;
                break;
            case EventKind::TcpClosedByPeer:
            case EventKind::TcpError:
                j["detail"] = e.detail;
                break;
            case EventKind::Timeout:
                j["awaiting"] = e.detail;
                break;
            case EventKind::Connected:
                break;
        }
        out += j.dump();
        out += '\n';
    }
    json footer = {{"record", "outcome"}, {"outcome", std::string(to_string(t.outcome))}, {"detail", t.outcome_detail}};
    out += footer.dump();
    out += '\n';
    return out;
}

Trace trace_from_jsonl(std::string_view text) {
    Trace t;
    bool have_header = false;
    bool have_outcome = false;
    std::size_t line_no = 0;
    std::size_t start = 0;
    try {
        while (start < text.size()) {
            std::size_t end = text.find('\n', start);
            if (end == std::string_view::npos) end = text.size();
            const auto line = text.substr(start, end - start);
            start = end + 1;
            ++line_no;
            if (line.empty()) continue;
            const json j = json::parse(line.begin(), line.end());
            const std::string record = j.at("record").get<std::string>();
            if (record == "trace") {
                t.experiment_name = j.at("experiment").get<std::string>();
                t.endpoint.host = j.at("endpoint").at("host").get<std::string>();
                t.endpoint.port = j.at("endpoint").at("port").get<std::uint16_t>();
                t.started_at = parse_iso8601(j.at("started_at").get<std::string>());
                have_header = true;
            } else if (record == "event") {
                TraceEvent e;
                e.seq = j.at("seq").get<std::uint64_t>();
                e.t_ms = j.at("t_ms").get<std::uint64_t>();
                e.session = j.at("session").get<std::string>();
                e.kind = enum_from(j.at("kind").get<std::string>(),
                                   {EventKind::Sent, EventKind::Received, EventKind::Connected,
                                    EventKind::TcpClosedByPeer, EventKind::TcpError, EventKind::Timeout});
                if (e.kind == EventKind::Sent || e.kind == EventKind::Received) {
                    auto wire = from_hex(j.at("hex").get<std::string>());
                    if (!wire) throw std::runtime_error("bad hex");
                    e.wire = std::move(*wire);
                    const auto decoded = decode_packet(e.wire, DecodeMode::Permissive);
                    const bool whole = decoded.ok() && decoded.consumed == e.wire.size();
                    if (e.kind == EventKind::Sent) {
                        e.origin = enum_from(j.at("origin").get<std::string>(),
                                             {SendOrigin::Step, SendOrigin::AutoAck, SendOrigin::ImplicitConnect});
                        e.raw = j.at("raw").get<bool>();
                        e.packet = (whole && !e.raw) ? decoded.packet : Packet{Raw{e.wire}};
                    } else {
                        e.packet = whole ? decoded.packet : Packet{Raw{e.wire}};
                        e.annotations = j.at("annotations").get<std::vector<std::string>>();
                    }
                } else if (e.kind == EventKind::Timeout) {
                    e.detail = j.at("awaiting").get<std::string>();
                } else if (e.kind != EventKind::Connected) {
                    e.detail = j.at("detail").get<std::string>();
                }
                t.events.push_back(std::move(e));
            } else if (record == "outcome") {
                t.outcome = enum_from(j.at("outcome").get<std::string>(),
                                      {TraceOutcome::Completed, TraceOutcome::AbortedByPeer, TraceOutcome::RunnerError});
                t.outcome_detail = j.at("detail").get<std::string>();
                have_outcome = true;
            } else {
                throw std::runtime_error("unknown record '" + record + "'");
            }
        }
    } catch (const json::exception& ex) {
        throw std::runtime_error("trace line " + std::to_string(line_no) + ": " + ex.what());
    } catch (const std::runtime_error& ex) {
        throw std::runtime_error("trace line " + std::to_string(line_no) + ": " + ex.what());
    }
    if (!have_header) throw std::runtime_error("trace has no header record");
    if (!have_outcome) throw std::runtime_error("trace has no outcome record");
    return t;
}

}  // namespace mqfuzz
