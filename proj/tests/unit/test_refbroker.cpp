#include <gtest/gtest.h>

#include <poll.h>
#include <unistd.h>

#include <chrono>
#include <thread>

#include "mqfuzz/net.hpp"
#include "mqfuzz/refbroker.hpp"
#include "mqfuzz/runner.hpp"

using namespace mqfuzz;
using namespace mqfuzz::broker;


namespace {

std::vector<Packet> sent_to(const std::vector<broker::Action>& actions, ConnId conn) {
    std::vector<Packet> out;
    for (const auto& a : actions) {
        if (a.kind != broker::Action::Kind::Send || a.conn != conn) continue;
        const auto d = decode_packet(a.bytes, DecodeMode::Strict);
        EXPECT_TRUE(d.ok());
        out.push_back(d.packet);
    }
    return out;
}

bool closes(const std::vector<broker::Action>& actions, ConnId conn) {
    for (const auto& a : actions) {
        if (a.kind == broker::Action::Kind::Close && a.conn == conn) return true;
    }
    return false;
}

Connect connect_packet(const std::string& id) {
    Connect c;
    c.client_id = to_bytes(id);
    return c;
}

Publish publish(const std::string& topic, const std::string& payload, std::uint8_t qos,
                std::optional<std::uint16_t> id = std::nullopt) {
    Publish p;
    p.topic = to_bytes(topic);
    p.payload = to_bytes(payload);
    p.qos = qos;
    p.packet_id = id;
    return p;
}

std::vector<std::string> payloads(const std::vector<Packet>& packets) {
    std::vector<std::string> out;
    for (const auto& p : packets) {
        if (const auto* pub = std::get_if<Publish>(&p)) out.push_back(to_string(pub->payload));
    }
    return out;
}

struct Fixture : ::testing::Test {
    BrokerCore core;
    void connect(ConnId id, const std::string& client) {
        core.open(id);
        auto a = core.on_packet(id, connect_packet(client));
        ASSERT_EQ(sent_to(a, id), (std::vector<Packet>{Connack{false, 0}}));
    }
    void subscribe(ConnId id, const std::string& filter, std::uint8_t qos) {
        auto a = core.on_packet(id, Subscribe{1, {{to_bytes(filter), qos}}});
        ASSERT_EQ(sent_to(a, id), (std::vector<Packet>{Suback{1, {qos}}}));
    }
};

}  // namespace

TEST_F(Fixture, ConnectAccepted) {
    connect(1, "a");
    EXPECT_TRUE(core.connection(1)->connected);
    EXPECT_EQ(core.find_client("a"), 1u);
}

TEST_F(Fixture, BadProtocolNameRefused) {
    core.open(1);
    Connect c = connect_packet("a");
    c.protocol_name = to_bytes("MQQT");
    auto a = core.on_packet(1, c);
    EXPECT_EQ(sent_to(a, 1), (std::vector<Packet>{Connack{false, 1}}));
    EXPECT_TRUE(closes(a, 1));
}

TEST_F(Fixture, BadProtocolLevelRefused) {
    core.open(1);
    Connect c = connect_packet("a");
    c.protocol_level = 6;
    auto a = core.on_packet(1, c);
    EXPECT_EQ(sent_to(a, 1), (std::vector<Packet>{Connack{false, 1}}));
    EXPECT_TRUE(closes(a, 1));
}

TEST_F(Fixture, KeepAliveAsStringClosesSilently) {
    core.open(1);
    const Bytes wire = encode_packet(connect_packet("mqf-ka"));
    const Bytes bad = splice(wire, 10, 2, to_bytes(std::string_view("\x00\x02" "60", 4)), true);
    auto a = core.on_bytes(1, bad);
    EXPECT_TRUE(sent_to(a, 1).empty());
    EXPECT_TRUE(closes(a, 1));
}

TEST_F(Fixture, NonUtf8ClientIdClosed) {
    core.open(1);
    Connect c;
    c.client_id = Bytes{0xFF, 0xFE};
    auto a = core.on_bytes(1, encode_packet(c));
    EXPECT_TRUE(sent_to(a, 1).empty());
    EXPECT_TRUE(closes(a, 1));
}

TEST_F(Fixture, EmptyClientId) {
    core.open(1);
    auto a = core.on_packet(1, connect_packet(""));
    EXPECT_EQ(sent_to(a, 1), (std::vector<Packet>{Connack{false, 0}}));
    core.open(2);
    Connect c = connect_packet("");
    c.clean_session = false;
    a = core.on_packet(2, c);
    EXPECT_EQ(sent_to(a, 2), (std::vector<Packet>{Connack{false, 2}}));
    EXPECT_TRUE(closes(a, 2));
}

TEST_F(Fixture, PacketBeforeConnectCloses) {
    core.open(1);
    EXPECT_TRUE(closes(core.on_packet(1, Pingreq{}), 1));
}

TEST_F(Fixture, SecondConnectCloses) {
    connect(1, "a");
    EXPECT_TRUE(closes(core.on_packet(1, connect_packet("a")), 1));
}

TEST_F(Fixture, Takeover) {
    connect(1, "a");
    core.open(2);
    auto a = core.on_packet(2, connect_packet("a"));
    EXPECT_TRUE(closes(a, 1));
    EXPECT_EQ(sent_to(a, 2), (std::vector<Packet>{Connack{false, 0}}));
    EXPECT_EQ(core.find_client("a"), 2u);
}

TEST_F(Fixture, SubscribeGrantsRequestedQos) {
    connect(1, "a");
    subscribe(1, "/home/basement/#", 1);
    subscribe(1, std::string(5000, 'x'), 2);
}

TEST_F(Fixture, InvalidFilterCloses) {
    connect(1, "a");
    EXPECT_TRUE(closes(core.on_packet(1, Subscribe{1, {{to_bytes("a/#/b"), 0}}}), 1));
}

TEST_F(Fixture, WildcardPublishCloses) {
    connect(1, "a");
    EXPECT_TRUE(closes(core.on_packet(1, publish("a/+/b", "x", 0)), 1));
}

TEST_F(Fixture, LongTopicDeliveredWhole) {
    connect(1, "a");
    const std::string topic = "mqfuzz/long/" + std::string(5000 - 12, 'a');
    subscribe(1, topic, 1);
    auto a = core.on_bytes(1, encode_packet(publish(topic, "long", 1, 1)));
    const auto got = sent_to(a, 1);
    ASSERT_EQ(got.size(), 2u);
    EXPECT_EQ(std::get<Publish>(got[0]).topic, to_bytes(topic));
    EXPECT_EQ(got[1], Packet(Puback{1}));
}

TEST_F(Fixture, UnmatchedQos0IsSilent) {
    connect(1, "a");
    subscribe(1, "x", 0);
    EXPECT_TRUE(core.on_packet(1, publish("y", "p", 0)).empty());
    EXPECT_EQ(core.routed_total(), 0u);
}

TEST_F(Fixture, DeliveryQosIsMinimum) {
    connect(1, "pub");
    connect(2, "sub");
    subscribe(2, "t", 1);
    auto a = core.on_packet(1, publish("t", "p", 2, 5));
    a = core.on_packet(1, Pubrel{5});
    const auto got = sent_to(a, 2);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(std::get<Publish>(got[0]).qos, 1);
}

TEST_F(Fixture, QosTwoThenOneSameId) {
    connect(1, "c");
    subscribe(1, "t", 2);
    auto a = core.on_packet(1, publish("t", "1", 2, 1));
    EXPECT_EQ(sent_to(a, 1), (std::vector<Packet>{Pubrec{1}}));
    a = core.on_packet(1, publish("t", "2", 1, 1));
    // Queued behind the unreleased qos 2 message; acked on arrival.
    EXPECT_EQ(sent_to(a, 1), (std::vector<Packet>{Puback{1}}));
    a = core.on_packet(1, Pubrel{1});
    const auto got = sent_to(a, 1);
    ASSERT_EQ(got.size(), 3u);
    EXPECT_EQ(got[0], Packet(Pubcomp{1}));
    EXPECT_EQ(payloads(got), (std::vector<std::string>{"1", "2"}));
}

TEST_F(Fixture, DoubleQosTwoIsRetransmission) {
    connect(1, "c");
    subscribe(1, "t", 2);
    std::vector<Packet> all;
    for (const Packet& p : std::vector<Packet>{publish("t", "1", 2, 1), publish("t", "2", 2, 1), Pubrel{1}, Pubrel{1}}) {
        auto got = sent_to(core.on_packet(1, p), 1);
        all.insert(all.end(), got.begin(), got.end());
    }
    EXPECT_EQ(payloads(all), std::vector<std::string>{"1"});
    EXPECT_EQ(std::count(all.begin(), all.end(), Packet(Pubrec{1})), 2);
    EXPECT_EQ(std::count(all.begin(), all.end(), Packet(Pubcomp{1})), 2);
}

TEST_F(Fixture, OrphanPubrel) {
    connect(1, "c");
    auto a = core.on_packet(1, Pubrel{77});
    EXPECT_EQ(sent_to(a, 1), (std::vector<Packet>{Pubcomp{77}}));
    EXPECT_FALSE(closes(a, 1));
}

TEST_F(Fixture, PerPublisherFifo) {
    connect(1, "pub");
    connect(2, "sub");
    subscribe(2, "#", 2);
    std::vector<Packet> got;
    auto feed = [&](const Packet& p) {
        auto s = sent_to(core.on_packet(1, p), 2);
        got.insert(got.end(), s.begin(), s.end());
    };
    feed(publish("a", "1", 2, 1));
    feed(publish("a", "2", 0));
    feed(publish("a", "3", 2, 2));
    feed(publish("a", "4", 1, 9));
    EXPECT_TRUE(got.empty());
    feed(Pubrel{2});
    EXPECT_TRUE(got.empty());
    feed(Pubrel{1});
    EXPECT_EQ(payloads(got), (std::vector<std::string>{"1", "2", "3", "4"}));
}

TEST_F(Fixture, CloseDropsHeldAndRoutesRest) {
    connect(1, "pub");
    connect(2, "sub");
    subscribe(2, "#", 0);
    core.on_packet(1, publish("a", "held", 2, 1));
    core.on_packet(1, publish("a", "after", 0));
    auto a = core.on_close(1);
    EXPECT_EQ(payloads(sent_to(a, 2)), std::vector<std::string>{"after"});
    EXPECT_EQ(core.connection(1), nullptr);
}

TEST_F(Fixture, OutboundIdsSkipInFlight) {
    connect(1, "pub");
    connect(2, "sub");
    subscribe(2, "t", 1);
    std::set<std::uint16_t> ids;
    for (int i = 0; i < 3; ++i) {
        auto got = sent_to(core.on_packet(1, publish("t", "x", 1, 1)), 2);
        ids.insert(*std::get<Publish>(got.at(0)).packet_id);
    }
    EXPECT_EQ(ids.size(), 3u);
    EXPECT_FALSE(ids.count(0));
}

TEST_F(Fixture, OutboundQosTwoHandshake) {
    connect(1, "pub");
    connect(2, "sub");
    subscribe(2, "t", 2);
    core.on_packet(1, publish("t", "x", 2, 1));
    auto got = sent_to(core.on_packet(1, Pubrel{1}), 2);
    const auto id = *std::get<Publish>(got.at(0)).packet_id;
    EXPECT_EQ(sent_to(core.on_packet(2, Pubrec{id}), 2), (std::vector<Packet>{Pubrel{id}}));
    core.on_packet(2, Pubcomp{id});
    EXPECT_TRUE(core.connection(2)->outbound.empty());
}

TEST_F(Fixture, KeepAliveExpiry) {
    core.open(1, 0);
    Connect c = connect_packet("k");
    c.keep_alive = 2;
    core.on_packet(1, c, 0);
    EXPECT_FALSE(closes(core.tick(3000), 1));
    EXPECT_TRUE(closes(core.tick(3001), 1));
}

TEST_F(Fixture, ConnectDeadline) {
    core.open(1, 0);
    EXPECT_FALSE(closes(core.tick(10'000), 1));
    EXPECT_TRUE(closes(core.tick(10'001), 1));
}

TEST_F(Fixture, OversizedPacketCloses) {
    BrokerCore small(BrokerConfig{64, 10'000, {}});
    small.open(1);
    small.on_packet(1, connect_packet("a"));
    auto a = small.on_bytes(1, encode_packet(publish("t", std::string(100, 'x'), 0)));
    EXPECT_TRUE(closes(a, 1));
}

TEST_F(Fixture, FragmentedBytes) {
    core.open(1);
    const Bytes wire = encode_packet(connect_packet("frag"));
    std::vector<broker::Action> all;
    for (auto b : wire) {
        auto a = core.on_bytes(1, ByteView(&b, 1));
        all.insert(all.end(), a.begin(), a.end());
    }
    EXPECT_EQ(sent_to(all, 1), (std::vector<Packet>{Connack{false, 0}}));
}

TEST_F(Fixture, FaultHook) {
    BrokerCore faulty(BrokerConfig{1u << 20, 10'000, [](ConnId, const Packet& p) {
                                       return std::holds_alternative<Pingreq>(p) ? FaultDecision::HaltServer
                                                                                 : FaultDecision::Pass;
                                   }});
    faulty.open(1);
    faulty.on_packet(1, connect_packet("a"));
    auto a = faulty.on_packet(1, Pingreq{});
    ASSERT_EQ(a.size(), 1u);
    EXPECT_EQ(a[0].kind, broker::Action::Kind::Halt);
}

TEST(Server, StartStop) {
    BrokerServer server(ServerOptions{"127.0.0.1", 0, {}, nullptr});
    ASSERT_NE(server.port(), 0);
    server.start();
    EXPECT_TRUE(server.running());
    Endpoint ep;
    ep.port = server.port();
    EXPECT_TRUE(probe_liveness(ep).alive);
    server.stop();
    EXPECT_FALSE(server.running());
    EXPECT_FALSE(probe_liveness(ep).alive);
}

TEST(Server, OccupiedPort) {
    BrokerServer first(ServerOptions{"127.0.0.1", 0, {}, nullptr});
    EXPECT_THROW(BrokerServer(ServerOptions{"127.0.0.1", first.port(), {}, nullptr}), BindError);
}

TEST(Server, HaltFault) {
    ServerOptions options{"127.0.0.1", 0, {}, nullptr};
    options.config.fault = [](ConnId, const Packet& p) {
        return std::holds_alternative<Pingreq>(p) ? FaultDecision::HaltServer : FaultDecision::Pass;
    };
    BrokerServer server(options);
    server.start();
    std::string error;
    auto fd = net::connect_tcp("127.0.0.1", server.port(), 1000, error);
    ASSERT_TRUE(fd.valid()) << error;
    Bytes out = encode_packet(connect_packet("h"));
    const Bytes ping = encode_packet(Pingreq{});
    out.insert(out.end(), ping.begin(), ping.end());
    ASSERT_EQ(::write(fd.get(), out.data(), out.size()), static_cast<ssize_t>(out.size()));
    for (int i = 0; i < 100 && server.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    EXPECT_FALSE(server.running());
    Endpoint ep;
    ep.port = server.port();
    EXPECT_FALSE(probe_liveness(ep).alive);
}

TEST(Server, SurvivesGarbage) {
    BrokerServer server(ServerOptions{"127.0.0.1", 0, {}, nullptr});
    server.start();
    for (int i = 0; i < 20; ++i) {
        std::string error;
        auto fd = net::connect_tcp("127.0.0.1", server.port(), 1000, error);
        ASSERT_TRUE(fd.valid());
        Bytes junk(200, static_cast<std::uint8_t>(i * 13));
        (void)::write(fd.get(), junk.data(), junk.size());
    }
    Endpoint ep;
    ep.port = server.port();
    EXPECT_TRUE(probe_liveness(ep).alive);
    server.stop();
}
