#include "transcriptions.hpp"

#include <map>
#include <sstream>
#include <stdexcept>

namespace transcribe {

TraceBuilder::TraceBuilder(const std::string& experiment, std::string session) : session_(std::move(session)) {
    trace_.experiment_name = experiment;
}

TraceEvent& TraceBuilder::add(EventKind kind) {
    TraceEvent e;
    e.seq = trace_.events.size();
    e.t_ms = e.seq;
    e.session = session_;
    e.kind = kind;
    trace_.events.push_back(std::move(e));
    return trace_.events.back();
}

TraceBuilder& TraceBuilder::connected() {
    add(EventKind::Connected);
    return *this;
}

TraceBuilder& TraceBuilder::sent(const Packet& p, SendOrigin origin) {
    auto& e = add(EventKind::Sent);
    e.packet = p;
    e.wire = encode_packet(p);
    e.origin = origin;
    return *this;
}

TraceBuilder& TraceBuilder::sent_raw(const Bytes& wire) {
    auto& e = add(EventKind::Sent);
    e.packet = Raw{wire};
    e.wire = wire;
    e.raw = true;
    return *this;
}

TraceBuilder& TraceBuilder::received(const Packet& p) {
    auto& e = add(EventKind::Received);
    e.packet = p;
    e.wire = encode_packet(p);
    return *this;
}

TraceBuilder& TraceBuilder::closed(const std::string& detail) {
    add(EventKind::TcpClosedByPeer).detail = detail;
    return *this;
}

TraceBuilder& TraceBuilder::timeout(const std::string& awaiting) {
    add(EventKind::Timeout).detail = awaiting;
    return *this;
}

TraceBuilder& TraceBuilder::delivery(const Bytes& topic, const Bytes& payload, std::uint8_t qos,
                                     std::uint16_t broker_id) {
    Publish p;
    p.topic = topic;
    p.payload = payload;
    p.qos = qos;
    if (qos > 0) p.packet_id = broker_id;
    received(p);
    if (qos == 1) sent(Puback{broker_id}, SendOrigin::AutoAck);
    if (qos == 2) {
        sent(Pubrec{broker_id}, SendOrigin::AutoAck);
        received(Pubrel{broker_id});
        sent(Pubcomp{broker_id}, SendOrigin::AutoAck);
    }
    return *this;
}

Trace TraceBuilder::build(TraceOutcome outcome) {
    trace_.outcome = outcome;
    return trace_;
}

namespace {

Publish to_packet(const step::Publish& s) {
    Publish p;
    p.topic = s.topic;
    p.payload = s.payload;
    p.qos = s.qos;
    p.dup = s.dup;
    p.retain = s.retain;
    p.packet_id = s.packet_id;
    return p;
}

struct Steps {
    std::vector<step::Subscribe> subs;
    std::vector<step::Publish> pubs;
    std::vector<step::Ack> acks;
};

Steps collect(const Experiment& e) {
    Steps s;
    for (const auto& st : e.steps) {
        if (const auto* v = std::get_if<step::Subscribe>(&st.action)) s.subs.push_back(*v);
        if (const auto* v = std::get_if<step::Publish>(&st.action)) s.pubs.push_back(*v);
        if (const auto* v = std::get_if<step::Ack>(&st.action)) s.acks.push_back(*v);
        if (const auto* r = std::get_if<step::Repeat>(&st.action)) {
            for (std::uint32_t i = 0; i < r->count; ++i) {
                for (const auto& inner : r->steps) {
                    if (const auto* v = std::get_if<step::Publish>(&inner.action)) s.pubs.push_back(*v);
                }
            }
        }
    }
    return s;
}

void implicit_connect(TraceBuilder& b, const Experiment& e) {
    b.connected();
    b.sent(e.sessions[0].connect.to_packet(), SendOrigin::ImplicitConnect);
    b.received(Connack{false, 0});
}

void subscribed(TraceBuilder& b, const step::Subscribe& s) {
    b.sent(Subscribe{s.packet_id, {SubscribeEntry{s.filter, s.qos}}});
    b.received(Suback{s.packet_id, {s.qos}});
}

// Broker answers after the four or five client steps of the qos
// experiments, as a token script: REC, ACK, COMP, D1, D2 (delivery of the
// first or second publish).
void play(TraceBuilder& b, const Steps& s, const std::string& script) {
    std::istringstream in(script);
    std::string tok;
    std::uint16_t broker_id = 1;
    while (in >> tok) {
        if (tok == "REC") {
            b.received(Pubrec{1});
        } else if (tok == "ACK") {
            b.received(Puback{1});
        } else if (tok == "COMP") {
            b.received(Pubcomp{1});
        } else if (tok == "D1" || tok == "D2") {
            const auto& p = s.pubs[tok == "D1" ? 0 : 1];
            const std::uint8_t qos = std::min(p.qos, s.subs[0].qos);
            b.delivery(p.topic, p.payload, qos, broker_id++);
        } else if (tok == "D1x2") {
            const auto& p = s.pubs[0];
            b.delivery(p.topic, p.payload, 2, broker_id++);
            b.delivery(p.topic, p.payload, 2, broker_id++);
        } else {
            throw std::logic_error("bad script token " + tok);
        }
    }
}

const std::map<std::string, std::map<std::string, std::string>>& qos_scripts() {
    static const std::map<std::string, std::map<std::string, std::string>> scripts = {
        {"qos2_then_qos1_same_id",
         {{"reference", "REC ACK COMP D1 D2"},
          {"EMQX", "REC ACK COMP D1 D2"},
          {"Mosquitto", "REC ACK COMP D1"},
          {"HiveMQ", "ACK D1 COMP REC D2"},
          {"Moquette", "REC ACK D1 COMP D2"},
          {"Aedes", "REC ACK D1 D2 COMP"}}},
        {"qos2_then_qos0_same_id",
         {{"reference", "REC COMP D1 D2"},
          {"EMQX", "REC COMP D1 D2"},
          {"Mosquitto", "REC D2 COMP D1"},
          {"HiveMQ", "COMP REC D1 D2"},
          {"Moquette", "REC D1 D2 COMP"},
          {"Aedes", "REC D2 D1 COMP"}}},
        {"double_qos2_same_id",
         {{"reference", "REC REC COMP D1 COMP"},
          {"Mosquitto", "REC REC COMP D1 COMP"},
          {"EMQX", "REC REC COMP D1 COMP"},
          {"HiveMQ", "REC REC COMP D1 D2 COMP"},
          {"Moquette", "REC REC COMP D1 D2 COMP"},
          {"Aedes", "REC REC D1x2 COMP COMP"}}},
    };
    return scripts;
}

Bytes truncated(const Bytes& topic, std::size_t size) {
    return Bytes(topic.begin(), topic.begin() + static_cast<std::ptrdiff_t>(std::min(size, topic.size())));
}

}  // namespace

CorpusResult transcribed_result(const Experiment& e, const std::string& broker) {
    CorpusResult r;
    r.experiment = e;
    r.liveness_after = {true, ""};
    TraceBuilder b(e.name);
    TraceOutcome outcome = TraceOutcome::Completed;
    const Steps s = collect(e);

    if (auto it = qos_scripts().find(e.name); it != qos_scripts().end()) {
        implicit_connect(b, e);
        subscribed(b, s.subs[0]);
        for (const auto& p : s.pubs) b.sent(to_packet(p));
        for (const auto& a : s.acks) b.sent(Pubrel{a.packet_id});
        play(b, s, it->second.at(broker));
    } else if (e.name == "long_topic_5000" || e.name == "long_topic_65535" || e.name == "many_slashes_topic") {
        const bool slashes = e.name == "many_slashes_topic";
        implicit_connect(b, e);
        const bool refuses = slashes ? (broker != "reference" && broker != "HiveMQ")
                                     : (broker == "EMQX" || broker == "Moquette" || broker == "Aedes");
        if (refuses) {
            b.sent(Subscribe{1, {SubscribeEntry{s.subs[0].filter, s.subs[0].qos}}});
            b.closed(broker == "Moquette" ? "reset" : "eof");
            outcome = TraceOutcome::AbortedByPeer;
            if (broker == "Aedes" && !slashes) r.liveness_after = {false, "connection refused"};
        } else {
            subscribed(b, s.subs[0]);
            b.sent(to_packet(s.pubs[0]));
            b.received(Puback{1});
            const Bytes topic = broker == "HiveMQ" ? truncated(s.pubs[0].topic, slashes ? 100 : 4096) : s.pubs[0].topic;
            b.delivery(topic, s.pubs[0].payload, 1, 1);
        }
    } else if (e.name == "qos0_flood" || e.name.rfind("payload_", 0) == 0) {
        implicit_connect(b, e);
        subscribed(b, s.subs[0]);
        for (const auto& p : s.pubs) b.sent(to_packet(p));
        if (s.pubs[0].qos > 0) b.received(Puback{*s.pubs[0].packet_id});
        std::uint16_t id = 1;
        for (const auto& p : s.pubs) b.delivery(p.topic, p.payload, std::min(p.qos, s.subs[0].qos), id++);
    } else if (e.name == "orphan_pubrel") {
        implicit_connect(b, e);
        b.sent(Pubrel{77});
        if (broker == "Aedes") {
            b.closed("eof");
        } else {
            b.received(Pubcomp{77});
        }
    } else if (e.input == InputClass::Malformed) {
        // Every broker in the study drops the client on these.
        const Connect connect = e.sessions[0].connect.to_packet();
        if (e.name == "keepalive_as_string") {
            b.connected();
            b.sent_raw(splice(encode_packet(connect), 10, 2, to_bytes(std::string_view("\x00\x02" "60", 4)), true));
        } else if (!s.subs.empty()) {
            implicit_connect(b, e);
            b.sent(Subscribe{1, {SubscribeEntry{s.subs[0].filter, s.subs[0].qos}}});
        } else if (!s.pubs.empty()) {
            implicit_connect(b, e);
            b.sent(to_packet(s.pubs[0]));
        } else {
            b.connected();
            b.sent(connect);
            if (e.name == "bad_protocol_name" || e.name == "bad_protocol_level") b.received(Connack{false, 1});
        }
        b.closed("eof");
    } else {
        throw std::logic_error("no transcription for " + e.name);
    }
    r.trace = b.build(outcome);
    return r;
}

std::vector<CorpusResult> transcribed_corpus(const std::string& broker) {
    std::vector<CorpusResult> out;
    for (const auto& e : builtin_corpus()) out.push_back(transcribed_result(e, broker));
    return out;
}

}  // namespace transcribe
