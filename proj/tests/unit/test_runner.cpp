#include <gtest/gtest.h>

#include "fake_broker.hpp"
#include "mqfuzz/refbroker.hpp"
#include "mqfuzz/runner.hpp"

using namespace mqfuzz;

namespace {

Endpoint endpoint(std::uint16_t port, std::uint32_t io_timeout_ms = 2000) {
    Endpoint ep;
    ep.port = port;
    ep.io_timeout_ms = io_timeout_ms;
    ep.connect_timeout_ms = 1000;
    return ep;
}

Experiment corpus_entry(const std::string& name) {
    for (auto& e : builtin_corpus()) {
        if (e.name == name) return e;
    }
    throw std::logic_error(name);
}

Experiment from_json(std::string_view text) { return parse_experiment(text); }

RunOptions fast() {
    RunOptions o;
    o.settle_ms = 100;
    return o;
}

std::uint16_t free_port() {
    std::string error;
    auto fd = net::listen_tcp("127.0.0.1", 0, error);
    return net::local_port(fd.get());
}

std::vector<const TraceEvent*> of_kind(const Trace& t, EventKind k) {
    std::vector<const TraceEvent*> out;
    for (const auto& e : t.events) {
        if (e.kind == k) out.push_back(&e);
    }
    return out;
}

}  // namespace

TEST(Runner, ClosedPortIsRunnerError) {
    const auto e = from_json(R"({"name":"w","sessions":[{"id":"c"}],"steps":[{"action":"wait","ms":10}]})");
    const Trace t = run_experiment(e, endpoint(free_port()), fast());
    EXPECT_EQ(t.outcome, TraceOutcome::RunnerError);
    EXPECT_NE(t.outcome_detail.find("connection refused"), std::string::npos) << t.outcome_detail;
}

TEST(Runner, LivenessOfMissingListener) {
    const auto l = probe_liveness(endpoint(free_port()));
    EXPECT_FALSE(l.alive);
    EXPECT_NE(l.detail.find("connection refused"), std::string::npos);
}

TEST(Runner, ImplicitConnectAndAutoAck) {
    fake::FakeBroker broker([](const Packet& p) {
        fake::Reply r = fake::polite(p);
        if (std::holds_alternative<Subscribe>(p)) {
            Publish pub;
            pub.topic = to_bytes("t");
            pub.payload = to_bytes("hello");
            pub.qos = 2;
            pub.packet_id = 9;
            const Bytes more = encode_packet(pub);
            r.bytes.insert(r.bytes.end(), more.begin(), more.end());
        }
        if (const auto* rec = std::get_if<Pubrec>(&p)) r.bytes = encode_packet(Pubrel{rec->packet_id});
        return r;
    });
    const auto e = from_json(R"({"name":"s","sessions":[{"id":"c"}],
        "steps":[{"session":"c","action":"subscribe","filter":"t","qos":2}]})");
    const Trace t = run_experiment(e, endpoint(broker.port()), fast());
    ASSERT_EQ(t.outcome, TraceOutcome::Completed);
    ASSERT_GE(t.events.size(), 3u);
    EXPECT_EQ(t.events[0].kind, EventKind::Connected);
    EXPECT_EQ(t.events[1].kind, EventKind::Sent);
    EXPECT_EQ(t.events[1].origin, SendOrigin::ImplicitConnect);
    EXPECT_TRUE(std::holds_alternative<Connect>(t.events[1].packet));
    std::vector<Packet> autos;
    for (const auto& ev : t.events) {
        if (ev.kind == EventKind::Sent && ev.origin == SendOrigin::AutoAck) autos.push_back(ev.packet);
    }
    EXPECT_EQ(autos, (std::vector<Packet>{Pubrec{9}, Pubcomp{9}}));
    for (std::size_t i = 0; i < t.events.size(); ++i) EXPECT_EQ(t.events[i].seq, i);
}

TEST(Runner, NoAutoAckWhenDisabled) {
    fake::FakeBroker broker([](const Packet& p) {
        fake::Reply r = fake::polite(p);
        if (std::holds_alternative<Subscribe>(p)) {
            Publish pub;
            pub.topic = to_bytes("t");
            pub.qos = 1;
            pub.packet_id = 3;
            const Bytes more = encode_packet(pub);
            r.bytes.insert(r.bytes.end(), more.begin(), more.end());
        }
        return r;
    });
    const auto e = from_json(R"({"name":"s","sessions":[{"id":"c","auto_ack":false}],
        "steps":[{"session":"c","action":"subscribe","filter":"t","qos":1}]})");
    const Trace t = run_experiment(e, endpoint(broker.port()), fast());
    for (const auto& ev : t.events) EXPECT_NE(ev.origin, SendOrigin::AutoAck);
}

TEST(Runner, SilentBrokerTimesOut) {
    fake::FakeBroker broker([](const Packet&) { return fake::Reply{}; });
    const auto e = corpus_entry("orphan_pubrel");
    const Trace t = run_experiment(e, endpoint(broker.port(), 300), fast());
    const auto timeouts = of_kind(t, EventKind::Timeout);
    ASSERT_EQ(timeouts.size(), 1u);
    EXPECT_EQ(timeouts[0]->detail, "CONNACK");
    EXPECT_EQ(t.outcome, TraceOutcome::Completed);
}

TEST(Runner, SpliceMarksRaw) {
    fake::FakeBroker broker([](const Packet&) { return fake::Reply{{}, true}; });
    const auto e = corpus_entry("keepalive_as_string");
    const Trace t = run_experiment(e, endpoint(broker.port(), 500), fast());
    const auto sent = of_kind(t, EventKind::Sent);
    ASSERT_EQ(sent.size(), 1u);
    EXPECT_TRUE(sent[0]->raw);
    const Bytes plain = encode_packet(e.sessions[0].connect.to_packet());
    EXPECT_EQ(sent[0]->wire, splice(plain, 10, 2, to_bytes(std::string_view("\x00\x02" "60", 4)), true));
    EXPECT_EQ(of_kind(t, EventKind::TcpClosedByPeer).size(), 1u);
}

TEST(Runner, BadSpliceIsRunnerError) {
    fake::FakeBroker broker(fake::polite);
    const auto e = from_json(R"({"name":"s","sessions":[{"id":"c"}],"steps":[
        {"session":"c","action":"splice_next","offset":500},{"session":"c","action":"connect"}]})");
    const Trace t = run_experiment(e, endpoint(broker.port()), fast());
    EXPECT_EQ(t.outcome, TraceOutcome::RunnerError);
}

TEST(Runner, PeerCloseMidScriptAborts) {
    fake::FakeBroker broker([](const Packet& p) {
        if (const auto* s = std::get_if<Subscribe>(&p); s && s->entries[0].filter.size() > 1000) return fake::Reply{{}, true};
        return fake::polite(p);
    });
    const Trace t = run_experiment(corpus_entry("long_topic_5000"), endpoint(broker.port()), fast());
    EXPECT_EQ(t.outcome, TraceOutcome::AbortedByPeer);
    ASSERT_FALSE(t.events.empty());
    const auto closes = of_kind(t, EventKind::TcpClosedByPeer);
    ASSERT_EQ(closes.size(), 1u);
    for (const auto& ev : t.events) EXPECT_LE(ev.seq, closes[0]->seq);
}

TEST(Runner, GarbageAfterValidFrameIsRecordedRaw) {
    fake::FakeBroker broker([](const Packet& p) {
        fake::Reply r = fake::polite(p);
        if (std::holds_alternative<Connect>(p)) {
            // Packet type 0 is reserved.
            r.bytes.push_back(0x00);
            r.bytes.push_back(0x00);
        }
        return r;
    });
    const auto e = from_json(R"({"name":"g","sessions":[{"id":"c"}],"steps":[{"session":"c","action":"pingreq"}]})");
    const Trace t = run_experiment(e, endpoint(broker.port(), 300), fast());
    bool saw_raw = false;
    for (const auto& ev : t.events) {
        if (ev.kind == EventKind::Received && std::holds_alternative<Raw>(ev.packet)) {
            saw_raw = true;
            EXPECT_FALSE(ev.annotations.empty());
        }
    }
    EXPECT_TRUE(saw_raw);
    EXPECT_NE(t.outcome, TraceOutcome::RunnerError);
}

TEST(Runner, TwoSessions) {
    broker::BrokerServer server(broker::ServerOptions{"127.0.0.1", 0, {}, nullptr});
    server.start();
    const auto e = from_json(R"({"name":"two","sessions":[{"id":"sub"},{"id":"pub"}],"steps":[
        {"session":"sub","action":"subscribe","filter":"x/#","qos":1},
        {"session":"pub","action":"publish","topic":"x/y","payload":"hi","qos":1,"packet_id":4}]})");
    const Trace t = run_experiment(e, endpoint(server.port()), fast());
    EXPECT_EQ(t.outcome, TraceOutcome::Completed);
    bool delivered = false;
    for (const auto& ev : t.events) {
        if (ev.session == "sub" && ev.kind == EventKind::Received) {
            if (const auto* p = std::get_if<Publish>(&ev.packet)) delivered = p->payload == to_bytes("hi");
        }
    }
    EXPECT_TRUE(delivered);
}

TEST(Corpus, EmptyCorpus) { EXPECT_TRUE(run_corpus({}, endpoint(free_port())).empty()); }

TEST(Corpus, DeadBrokerSkipsRest) {
    broker::ServerOptions options{"127.0.0.1", 0, {}, nullptr};
    options.config.fault = [](broker::ConnId, const Packet& p) {
        const auto* c = std::get_if<Connect>(&p);
        return c && c->client_id == to_bytes("mqf-long5000") ? broker::FaultDecision::HaltServer
                                                             : broker::FaultDecision::Pass;
    };
    broker::BrokerServer server(options);
    server.start();
    const auto corpus = builtin_corpus();
    ASSERT_EQ(corpus[3].name, "long_topic_5000");
    std::vector<Experiment> first(corpus.begin(), corpus.begin() + 7);
    const auto results = run_corpus(first, endpoint(server.port(), 500), fast());
    ASSERT_EQ(results.size(), 7u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(results[i].liveness_after.alive) << i;
    EXPECT_FALSE(results[3].skipped());
    EXPECT_FALSE(results[3].liveness_after.alive);
    for (std::size_t i = 4; i < 7; ++i) {
        EXPECT_TRUE(results[i].skipped());
        EXPECT_EQ(results[i].skipped_reason, "broker_dead");
    }
}

TEST(Corpus, FloodAgainstReference) {
    broker::BrokerServer server(broker::ServerOptions{"127.0.0.1", 0, {}, nullptr});
    server.start();
    const Trace t = run_experiment(corpus_entry("qos0_flood"), endpoint(server.port()));
    EXPECT_EQ(t.outcome, TraceOutcome::Completed);
    std::size_t sent = 0;
    std::size_t received = 0;
    for (const auto& ev : t.events) {
        if (!std::holds_alternative<Publish>(ev.packet)) continue;
        if (ev.kind == EventKind::Sent) ++sent;
        if (ev.kind == EventKind::Received) ++received;
    }
    EXPECT_EQ(sent, 10'000u);
    EXPECT_EQ(received, 10'000u);
    EXPECT_TRUE(of_kind(t, EventKind::TcpClosedByPeer).empty());
}
