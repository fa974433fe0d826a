#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mqfuzz/codec.hpp"

// A small MQTT 3.1.1 broker: the local target and the conformance baseline.
namespace mqfuzz::broker {

using ConnId = std::uint64_t;

enum class FaultDecision { Pass, CloseConnection, HaltServer };

/// Consulted for every decoded inbound packet before the broker handles
/// it. Lets tests emulate brokers that drop clients or die.
using FaultHook = std::function<FaultDecision(ConnId, const Packet&)>;

struct BrokerConfig {
    std::size_t max_packet_size = 1u << 20;
    std::uint32_t connect_timeout_ms = 10'000;
    FaultHook fault;
};

struct Action {
    enum class Kind { Send, Close, Halt };
    Kind kind = Kind::Send;
    ConnId conn = 0;
    Bytes bytes;
    std::string reason;
};

/// One message waiting in a publisher's routing queue. A qos 2 message is
/// held until its PUBREL.
struct Queued {
    Publish message;
    std::optional<std::uint16_t> held_id;
    bool released = false;
};

enum class OutboundStage { AwaitPuback, AwaitPubrec, AwaitPubcomp };

struct Subscription {
    Bytes filter;
    std::uint8_t qos = 0;
};

struct Connection {
    ConnId id = 0;
    bool connected = false;
    std::string client_id;
    std::uint16_t keep_alive = 0;
    std::uint64_t opened_ms = 0;
    std::uint64_t last_rx_ms = 0;
    Bytes inbuf;
    std::vector<Subscription> subscriptions;
    std::set<std::uint16_t> inbound_qos2;
    std::deque<Queued> route_queue;
    std::map<std::uint16_t, OutboundStage> outbound;
    std::uint16_t next_outbound_id = 1;
};

/// Deterministic broker state machine. Feed it bytes or packets; it
/// answers with actions for the transport. Not thread-safe.
class BrokerCore {
public:
    explicit BrokerCore(BrokerConfig config = {});

    void open(ConnId conn, std::uint64_t now_ms = 0);
    /// Frames and strictly decodes `data`; any malformed frame closes the
    /// connection.
    std::vector<Action> on_bytes(ConnId conn, ByteView data, std::uint64_t now_ms = 0);
    std::vector<Action> on_packet(ConnId conn, const Packet& p, std::uint64_t now_ms = 0);
    /// The transport lost the connection.
    std::vector<Action> on_close(ConnId conn);
    /// Keep-alive (1.5x) and CONNECT deadlines.
    std::vector<Action> tick(std::uint64_t now_ms);

    const Connection* connection(ConnId conn) const;
    std::optional<ConnId> find_client(const std::string& client_id) const;
    std::size_t connection_count() const { return conns_.size(); }
    std::uint64_t routed_total() const { return routed_total_; }

private:
    using Out = std::vector<Action>;

    void handle(Connection& c, const Packet& p, Out& out);
    void handle_connect(Connection& c, const Connect& p, Out& out);
    void handle_subscribe(Connection& c, const Subscribe& p, Out& out);
    void handle_unsubscribe(Connection& c, const Unsubscribe& p, Out& out);
    void handle_publish(Connection& c, const Publish& p, Out& out);
    void handle_pubrel(Connection& c, const Pubrel& p, Out& out);

    void drain_queue(Connection& c, Out& out, bool closing = false);
    void route(const Publish& msg, Out& out);
    void send(Connection& c, const Packet& p, Out& out);
    void close(Connection& c, const std::string& reason, Out& out);

    BrokerConfig config_;
    std::map<ConnId, Connection> conns_;
    std::map<std::string, ConnId> clients_;
    std::uint64_t generated_ids_ = 0;
    std::uint64_t routed_total_ = 0;
};

class BindError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ServerOptions {
    std::string bind_host = "127.0.0.1";
    std::uint16_t port = 1883;  // 0 picks a free port
    BrokerConfig config;
    /// One line per event; nullptr for silence.
    std::function<void(const std::string&)> log;
};

/// TCP front end: one poll-loop thread serializes all routing through a
/// single BrokerCore.
class BrokerServer {
public:
    /// Binds immediately; throws BindError.
    explicit BrokerServer(ServerOptions options);
    ~BrokerServer();
    BrokerServer(const BrokerServer&) = delete;
    BrokerServer& operator=(const BrokerServer&) = delete;

    std::uint16_t port() const { return port_; }
    void start();
    void stop();
    /// False after stop() or a HaltServer fault.
    bool running() const { return running_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::uint16_t port_ = 0;
    std::thread thread_;
    std::atomic<bool> running_{false};
};

}  // namespace mqfuzz::broker
