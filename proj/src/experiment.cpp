#include "mqfuzz/experiment.hpp"

#include <algorithm>
#include <set>

namespace mqfuzz {

using nlohmann::json;

std::string_view to_string(InputClass c) {
    switch (c) {
        case InputClass::Conformant: return "conformant";
        case InputClass::Malformed: return "malformed";
        case InputClass::Limit: return "limit";
    }
    return "conformant";
}

Connect ConnectParams::to_packet() const {
    Connect c;
    c.protocol_name = protocol_name;
    c.protocol_level = protocol_level;
    c.clean_session = clean_session;
    c.will = will;
    c.keep_alive = keep_alive;
    c.client_id = client_id;
    c.username = username;
    c.password = password;
    return c;
}

bool step::Repeat::operator==(const Repeat& other) const {
    return count == other.count && steps == other.steps;
}

const SessionDecl* Experiment::find_session(std::string_view id) const {
    for (const auto& s : sessions) {
        if (s.id == id) return &s;
    }
    return nullptr;
}

namespace {

const char* ack_name(PacketType t) {
    switch (t) {
        case PacketType::Puback: return "puback";
        case PacketType::Pubrec: return "pubrec";
        case PacketType::Pubrel: return "pubrel";
        default: return "pubcomp";
    }
}

}  // namespace

std::string action_name(const Action& a) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, step::Connect>) return "connect";
            if constexpr (std::is_same_v<T, step::Disconnect>) return "disconnect";
            if constexpr (std::is_same_v<T, step::Subscribe>) return "subscribe";
            if constexpr (std::is_same_v<T, step::Unsubscribe>) return "unsubscribe";
            if constexpr (std::is_same_v<T, step::Publish>) return "publish";
            if constexpr (std::is_same_v<T, step::Ack>) return ack_name(v.kind);
            if constexpr (std::is_same_v<T, step::Pingreq>) return "pingreq";
            if constexpr (std::is_same_v<T, step::SendRaw>) return "send_raw";
            if constexpr (std::is_same_v<T, step::SpliceNext>) return "splice_next";
            if constexpr (std::is_same_v<T, step::Wait>) return "wait";
            if constexpr (std::is_same_v<T, step::Repeat>) return "repeat";
        },
        a);
}

namespace {

// Walks one JSON object, remembering which keys were read so leftovers can
// be reported as unknown.
class Fields {
public:
    Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw SchemaError(path_, "expected an object");
    }

    std::string at(std::string_view key) const { return path_ + "." + std::string(key); }

    bool has(const std::string& key) const { return obj_.contains(key); }

    const json* get(const std::string& key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    const json& require(const std::string& key) {
        const json* v = get(key);
        if (!v) throw SchemaError(at(key), "missing required key");
        return *v;
    }

    std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
        const json* v = get(key);
        if (!v) {
            if (fallback) return *fallback;
            throw SchemaError(at(key), "missing required key");
        }
        if (!v->is_string()) throw SchemaError(at(key), "expected a string");
        return v->get<std::string>();
    }

    bool boolean(const std::string& key, bool fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_boolean()) throw SchemaError(at(key), "expected true or false");
        return v->get<bool>();
    }

    std::uint64_t integer(const std::string& key, std::uint64_t max, std::optional<std::uint64_t> fallback) {
        const json* v = get(key);
        if (!v) {
            if (fallback) return *fallback;
            throw SchemaError(at(key), "missing required key");
        }
        return as_integer(*v, at(key), max);
    }

    static std::uint64_t as_integer(const json& v, const std::string& path, std::uint64_t max) {
        if (v.is_number_unsigned()) {
            const auto n = v.get<std::uint64_t>();
            if (n > max) throw SchemaError(path, "must be at most " + std::to_string(max));
            return n;
        }
        if (v.is_number_integer()) throw SchemaError(path, "must not be negative");
        throw SchemaError(path, "expected an integer");
    }

    /// A byte string given either as `key` (text) or `key_hex`.
    std::optional<Bytes> bytes(const std::string& key) {
        const json* text = get(key);
        const json* hex = get(key + "_hex");
        if (text && hex) throw SchemaError(at(key), "give either '" + key + "' or '" + key + "_hex', not both");
        if (text) {
            if (!text->is_string()) throw SchemaError(at(key), "expected a string");
            return to_bytes(text->get<std::string>());
        }
        if (hex) {
            if (!hex->is_string()) throw SchemaError(at(key + "_hex"), "expected a hex string");
            auto decoded = from_hex(hex->get<std::string>());
            if (!decoded) throw SchemaError(at(key + "_hex"), "not a valid hex string");
            return decoded;
        }
        return std::nullopt;
    }

    Bytes require_bytes(const std::string& key) {
        auto b = bytes(key);
        if (!b) throw SchemaError(at(key), "missing required key ('" + key + "' or '" + key + "_hex')");
        return std::move(*b);
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) throw SchemaError(at(it.key()), "unknown key");
        }
    }

private:
    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

std::uint8_t parse_qos(Fields& f, std::optional<std::uint64_t> fallback) {
    return static_cast<std::uint8_t>(f.integer("qos", 2, fallback));
}

Will parse_will(const json& node, const std::string& path) {
    Fields f(node, path);
    Will w;
    w.topic = f.require_bytes("topic");
    w.payload = f.bytes("payload").value_or(Bytes{});
    w.qos = parse_qos(f, 0);
    w.retain = f.boolean("retain", false);
    f.finish();
    return w;
}

ConnectParams parse_connect_params(const json* node, const std::string& path, const std::string& session_id) {
    ConnectParams p;
    p.client_id = to_bytes(session_id);
    if (!node) return p;
    Fields f(*node, path);
    if (auto v = f.bytes("protocol_name")) p.protocol_name = std::move(*v);
    p.protocol_level = static_cast<std::uint8_t>(f.integer("protocol_level", 255, 4));
    if (auto v = f.bytes("client_id")) p.client_id = std::move(*v);
    p.clean_session = f.boolean("clean_session", true);
    p.keep_alive = static_cast<std::uint16_t>(f.integer("keep_alive", 65535, 60));
    p.username = f.bytes("username");
    p.password = f.bytes("password");
    if (const json* w = f.get("will")) p.will = parse_will(*w, f.at("will"));
    f.finish();
    return p;
}

SessionDecl parse_session(const json& node, const std::string& path) {
    Fields f(node, path);
    SessionDecl s;
    s.id = f.string("id");
    if (s.id.empty()) throw SchemaError(f.at("id"), "must not be empty");
    s.connect = parse_connect_params(f.get("connect"), f.at("connect"), s.id);
    s.auto_ack = f.boolean("auto_ack", true);
    f.finish();
    return s;
}

std::uint16_t parse_packet_id(Fields& f, std::optional<std::uint64_t> fallback) {
    return static_cast<std::uint16_t>(f.integer("packet_id", 65535, fallback));
}

Step parse_step(const json& node, const std::string& path);

std::vector<Step> parse_steps(const json& node, const std::string& path) {
    if (!node.is_array()) throw SchemaError(path, "expected an array of steps");
    std::vector<Step> steps;
    steps.reserve(node.size());
    for (std::size_t i = 0; i < node.size(); ++i) {
        steps.push_back(parse_step(node[i], path + "[" + std::to_string(i) + "]"));
    }
    return steps;
}

Step parse_step(const json& node, const std::string& path) {
    Fields f(node, path);
    Step s;
    const std::string action = f.string("action");
    const bool sessionless = action == "wait" || action == "repeat";
    s.session = f.string("session", sessionless ? std::optional<std::string>("") : std::nullopt);

    if (action == "connect") {
        s.action = step::Connect{};
    } else if (action == "disconnect") {
        s.action = step::Disconnect{};
    } else if (action == "subscribe") {
        step::Subscribe sub;
        sub.filter = f.require_bytes("filter");
        sub.qos = parse_qos(f, 0);
        sub.packet_id = parse_packet_id(f, 1);
        s.action = std::move(sub);
    } else if (action == "unsubscribe") {
        step::Unsubscribe u;
        u.filter = f.require_bytes("filter");
        u.packet_id = parse_packet_id(f, 1);
        s.action = std::move(u);
    } else if (action == "publish") {
        step::Publish p;
        p.topic = f.require_bytes("topic");
        p.payload = f.bytes("payload").value_or(Bytes{});
        p.qos = parse_qos(f, 0);
        p.retain = f.boolean("retain", false);
        p.dup = f.boolean("dup", false);
        if (f.has("packet_id")) p.packet_id = parse_packet_id(f, std::nullopt);
        if (p.qos > 0 && !p.packet_id) {
            throw SchemaError(f.at("packet_id"), "required for qos > 0 (ids are never assigned implicitly)");
        }
        if (p.qos == 0 && p.packet_id) {
            throw SchemaError(f.at("packet_id"), "qos 0 publishes carry no packet id; use send_raw");
        }
        s.action = std::move(p);
    } else if (action == "puback" || action == "pubrec" || action == "pubrel" || action == "pubcomp") {
        step::Ack a;
        a.kind = action == "puback"   ? PacketType::Puback
                 : action == "pubrec" ? PacketType::Pubrec
                 : action == "pubrel" ? PacketType::Pubrel
                                      : PacketType::Pubcomp;
        a.packet_id = parse_packet_id(f, std::nullopt);
        s.action = a;
    } else if (action == "pingreq") {
        s.action = step::Pingreq{};
    } else if (action == "send_raw") {
        const json& hex = f.require("hex");
        if (!hex.is_string()) throw SchemaError(f.at("hex"), "expected a hex string");
        auto bytes = from_hex(hex.get<std::string>());
        if (!bytes) throw SchemaError(f.at("hex"), "not a valid hex string");
        s.action = step::SendRaw{std::move(*bytes)};
    } else if (action == "splice_next") {
        step::SpliceNext sp;
        sp.offset = f.integer("offset", kMaxRemainingLength, std::nullopt);
        sp.remove = f.integer("remove", kMaxRemainingLength, 0);
        const json* hex = f.get("insert_hex");
        if (hex) {
            if (!hex->is_string()) throw SchemaError(f.at("insert_hex"), "expected a hex string");
            auto bytes = from_hex(hex->get<std::string>());
            if (!bytes) throw SchemaError(f.at("insert_hex"), "not a valid hex string");
            sp.insert = std::move(*bytes);
        }
        sp.fixup_length = f.boolean("fixup_length", false);
        s.action = std::move(sp);
    } else if (action == "wait") {
        s.action = step::Wait{static_cast<std::uint32_t>(f.integer("ms", kMaxWaitMs, std::nullopt))};
    } else if (action == "repeat") {
        step::Repeat r;
        r.count = static_cast<std::uint32_t>(f.integer("count", kMaxRepeat, std::nullopt));
        if (r.count == 0) throw SchemaError(f.at("count"), "must be at least 1");
        r.steps = parse_steps(f.require("steps"), f.at("steps"));
        s.action = std::move(r);
    } else {
        throw SchemaError(f.at("action"), "unknown action '" + action + "'");
    }
    f.finish();
    return s;
}

InputClass parse_input_class(const std::string& text, const std::string& path) {
    if (text == "conformant") return InputClass::Conformant;
    if (text == "malformed") return InputClass::Malformed;
    if (text == "limit") return InputClass::Limit;
    throw SchemaError(path, "expected conformant, malformed or limit");
}

void check_step_refs(const std::vector<Step>& steps, const std::set<std::string>& ids, const std::string& path) {
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const auto& s = steps[i];
        const std::string here = path + "[" + std::to_string(i) + "]";
        const bool sessionless =
            std::holds_alternative<step::Wait>(s.action) || std::holds_alternative<step::Repeat>(s.action);
        if (!(sessionless && s.session.empty()) && !ids.count(s.session)) {
            throw UnknownSessionRef(here + ".session", s.session);
        }
        if (const auto* w = std::get_if<step::Wait>(&s.action); w && w->ms > kMaxWaitMs) {
            throw SchemaError(here + ".ms", "must be at most " + std::to_string(kMaxWaitMs));
        }
        if (const auto* p = std::get_if<step::Publish>(&s.action)) {
            if (p->qos > 2) throw SchemaError(here + ".qos", "must be at most 2");
            if (p->qos > 0 && !p->packet_id) throw SchemaError(here + ".packet_id", "required for qos > 0");
            if (p->qos == 0 && p->packet_id) throw SchemaError(here + ".packet_id", "not allowed for qos 0");
        }
        if (const auto* sub = std::get_if<step::Subscribe>(&s.action); sub && sub->qos > 2) {
            throw SchemaError(here + ".qos", "must be at most 2");
        }
        if (const auto* r = std::get_if<step::Repeat>(&s.action)) {
            if (r->count == 0 || r->count > kMaxRepeat) {
                throw SchemaError(here + ".count", "must be between 1 and " + std::to_string(kMaxRepeat));
            }
            check_step_refs(r->steps, ids, here + ".steps");
        }
    }
}

}  // namespace

void validate_experiment(const Experiment& e) {
    if (e.name.empty()) throw SchemaError("$.name", "must not be empty");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < e.sessions.size(); ++i) {
        const auto& s = e.sessions[i];
        if (s.id.empty()) throw SchemaError("$.sessions[" + std::to_string(i) + "].id", "must not be empty");
        if (!ids.insert(s.id).second) throw DuplicateSession(s.id);
        if (s.connect.will && s.connect.will->qos > 2) {
            throw SchemaError("$.sessions[" + std::to_string(i) + "].connect.will.qos", "must be at most 2");
        }
    }
    check_step_refs(e.steps, ids, "$.steps");
}

Experiment parse_experiment(const json& doc) {
    Fields f(doc, "$");
    Experiment e;
    e.name = f.string("name");
    e.description = f.string("description", "");
    e.input = parse_input_class(f.string("input", "conformant"), f.at("input"));
    e.settle_ms = static_cast<std::uint32_t>(f.integer("settle_ms", kMaxWaitMs, kDefaultSettleMs));

    const json& sessions = f.require("sessions");
    if (!sessions.is_array()) throw SchemaError(f.at("sessions"), "expected an array");
    for (std::size_t i = 0; i < sessions.size(); ++i) {
        e.sessions.push_back(parse_session(sessions[i], f.at("sessions") + "[" + std::to_string(i) + "]"));
    }
    e.steps = parse_steps(f.require("steps"), f.at("steps"));
    f.finish();
    validate_experiment(e);
    return e;
}

Experiment parse_experiment(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text.begin(), json_text.end());
    } catch (const json::exception& ex) {
        throw SchemaError("$", std::string("invalid JSON: ") + ex.what());
    }
    try {
        return parse_experiment(doc);
    } catch (const ExperimentError&) {
        throw;
    } catch (const json::exception& ex) {
        throw SchemaError("$", ex.what());
    }
}

namespace {

bool renders_as_text(const Bytes& b) {
    if (!is_valid_utf8(b)) return false;
    return std::none_of(b.begin(), b.end(), [](std::uint8_t c) { return c < 0x20 || c == 0x7F; });
}

void put_bytes(json& obj, const std::string& key, const Bytes& b) {
    if (renders_as_text(b)) {
        obj[key] = to_string(b);
    } else {
        obj[key + "_hex"] = to_hex(b);
    }
}

json steps_to_json(const std::vector<Step>& steps);

json step_to_json(const Step& s) {
    json j;
    j["action"] = action_name(s.action);
    if (!s.session.empty()) j["session"] = s.session;
    std::visit(
        [&j](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, step::Subscribe>) {
                put_bytes(j, "filter", v.filter);
                j["qos"] = v.qos;
                j["packet_id"] = v.packet_id;
            } else if constexpr (std::is_same_v<T, step::Unsubscribe>) {
                put_bytes(j, "filter", v.filter);
                j["packet_id"] = v.packet_id;
            } else if constexpr (std::is_same_v<T, step::Publish>) {
                put_bytes(j, "topic", v.topic);
                j["payload_hex"] = to_hex(v.payload);
                j["qos"] = v.qos;
                j["retain"] = v.retain;
                j["dup"] = v.dup;
                if (v.packet_id) j["packet_id"] = *v.packet_id;
            } else if constexpr (std::is_same_v<T, step::Ack>) {
                j["packet_id"] = v.packet_id;
            } else if constexpr (std::is_same_v<T, step::SendRaw>) {
                j["hex"] = to_hex(v.bytes);
            } else if constexpr (std::is_same_v<T, step::SpliceNext>) {
                j["offset"] = v.offset;
                j["remove"] = v.remove;
                j["insert_hex"] = to_hex(v.insert);
                j["fixup_length"] = v.fixup_length;
            } else if constexpr (std::is_same_v<T, step::Wait>) {
                j["ms"] = v.ms;
            } else if constexpr (std::is_same_v<T, step::Repeat>) {
                j["count"] = v.count;
                j["steps"] = steps_to_json(v.steps);
            }
        },
        s.action);
    return j;
}

json steps_to_json(const std::vector<Step>& steps) {
    json arr = json::array();
    for (const auto& s : steps) arr.push_back(step_to_json(s));
    return arr;
}

}  // namespace

json experiment_to_json(const Experiment& e) {
    json j;
    j["name"] = e.name;
    j["description"] = e.description;
    j["input"] = std::string(to_string(e.input));
    j["settle_ms"] = e.settle_ms;
    json sessions = json::array();
    for (const auto& s : e.sessions) {
        json sj;
        sj["id"] = s.id;
        json c;
        put_bytes(c, "protocol_name", s.connect.protocol_name);
        c["protocol_level"] = s.connect.protocol_level;
        put_bytes(c, "client_id", s.connect.client_id);
        c["clean_session"] = s.connect.clean_session;
        c["keep_alive"] = s.connect.keep_alive;
        if (s.connect.username) put_bytes(c, "username", *s.connect.username);
        if (s.connect.password) put_bytes(c, "password", *s.connect.password);
        if (s.connect.will) {
            json w;
            put_bytes(w, "topic", s.connect.will->topic);
            w["payload_hex"] = to_hex(s.connect.will->payload);
            w["qos"] = s.connect.will->qos;
            w["retain"] = s.connect.will->retain;
            c["will"] = std::move(w);
        }
        sj["connect"] = std::move(c);
        sj["auto_ack"] = s.auto_ack;
        sessions.push_back(std::move(sj));
    }
    j["sessions"] = std::move(sessions);
    j["steps"] = steps_to_json(e.steps);
    return j;
}

std::string render_experiment(const Experiment& e) {
    return experiment_to_json(e).dump(2);
}

std::size_t packet_step_count(const std::vector<Step>& steps) {
    std::size_t n = 0;
    for (const auto& s : steps) {
        if (const auto* r = std::get_if<step::Repeat>(&s.action)) {
            n += r->count * packet_step_count(r->steps);
        } else if (!std::holds_alternative<step::Wait>(s.action) &&
                   !std::holds_alternative<step::SpliceNext>(s.action)) {
            ++n;
        }
    }
    return n;
}

}  // namespace mqfuzz
