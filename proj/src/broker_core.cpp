#include <algorithm>

#include "mqfuzz/refbroker.hpp"
#include "mqfuzz/topics.hpp"

namespace mqfuzz::broker {

BrokerCore::BrokerCore(BrokerConfig config) : config_(std::move(config)) {}

void BrokerCore::open(ConnId conn, std::uint64_t now_ms) {
    Connection c;
    c.id = conn;
    c.opened_ms = now_ms;
    c.last_rx_ms = now_ms;
    conns_[conn] = std::move(c);
}

const Connection* BrokerCore::connection(ConnId conn) const {
    auto it = conns_.find(conn);
    return it == conns_.end() ? nullptr : &it->second;
}

std::optional<ConnId> BrokerCore::find_client(const std::string& client_id) const {
    auto it = clients_.find(client_id);
    if (it == clients_.end()) return std::nullopt;
    return it->second;
}

std::vector<Action> BrokerCore::on_bytes(ConnId conn, ByteView data, std::uint64_t now_ms) {
    Out out;
    auto it = conns_.find(conn);
    if (it == conns_.end()) return out;
    Connection& c = it->second;
    c.inbuf.insert(c.inbuf.end(), data.begin(), data.end());
    c.last_rx_ms = now_ms;
    std::size_t off = 0;
    while (off < c.inbuf.size()) {
        const ByteView rest = ByteView(c.inbuf).subspan(off);
        if (rest.size() >= 2) {
            const auto rl = decode_remaining_length(rest.subspan(1));
            if (rl.status == DecodeStatus::Malformed) {
                close(c, "malformed remaining length", out);
                return out;
            }
            if (rl.status == DecodeStatus::Ok && 1 + rl.consumed + rl.value > config_.max_packet_size) {
                close(c, "packet exceeds " + std::to_string(config_.max_packet_size) + " bytes", out);
                return out;
            }
        }
        DecodeResult d = decode_packet(rest, DecodeMode::Strict);
        if (d.status == DecodeStatus::Incomplete) break;
        if (d.status == DecodeStatus::Malformed) {
            close(c, "malformed packet: " + d.error, out);
            return out;
        }
        off += d.consumed;
        const ConnId id = c.id;
        handle(c, d.packet, out);
        if (!conns_.count(id)) return out;
    }
    c.inbuf.erase(c.inbuf.begin(), c.inbuf.begin() + static_cast<std::ptrdiff_t>(off));
    return out;
}

std::vector<Action> BrokerCore::on_packet(ConnId conn, const Packet& p, std::uint64_t now_ms) {
    Out out;
    auto it = conns_.find(conn);
    if (it == conns_.end()) return out;
    it->second.last_rx_ms = now_ms;
    handle(it->second, p, out);
    return out;
}

std::vector<Action> BrokerCore::on_close(ConnId conn) {
    Out out;
    auto it = conns_.find(conn);
    if (it == conns_.end()) return out;
    close(it->second, "", out);
    // The transport is already gone; drop the Close aimed at it.
    std::erase_if(out, [conn](const Action& a) { return a.conn == conn; });
    return out;
}

std::vector<Action> BrokerCore::tick(std::uint64_t now_ms) {
    Out out;
    std::vector<ConnId> expired;
    for (const auto& [id, c] : conns_) {
        if (!c.connected) {
            if (now_ms - c.opened_ms > config_.connect_timeout_ms) expired.push_back(id);
        } else if (c.keep_alive > 0 && now_ms - c.last_rx_ms > c.keep_alive * 1500ull) {
            expired.push_back(id);
        }
    }
    for (ConnId id : expired) {
        auto it = conns_.find(id);
        if (it != conns_.end()) close(it->second, "keep-alive expired", out);
    }
    return out;
}

void BrokerCore::send(Connection& c, const Packet& p, Out& out) {
    out.push_back({Action::Kind::Send, c.id, encode_packet(p), {}});
}

void BrokerCore::close(Connection& c, const std::string& reason, Out& out) {
    const ConnId id = c.id;
    drain_queue(c, out, true);
    if (c.connected) {
        auto it = clients_.find(c.client_id);
        if (it != clients_.end() && it->second == id) clients_.erase(it);
    }
    conns_.erase(id);
    out.push_back({Action::Kind::Close, id, {}, reason});
}

void BrokerCore::handle(Connection& c, const Packet& p, Out& out) {
    if (config_.fault) {
        switch (config_.fault(c.id, p)) {
            case FaultDecision::Pass: break;
            case FaultDecision::CloseConnection: close(c, "fault injected", out); return;
            case FaultDecision::HaltServer: out.push_back({Action::Kind::Halt, c.id, {}, "fault injected"}); return;
        }
    }
    if (const auto* connect = std::get_if<Connect>(&p)) {
        if (c.connected) {
            close(c, "second CONNECT", out);
        } else {
            handle_connect(c, *connect, out);
        }
        return;
    }
    if (!c.connected) {
        close(c, std::string(packet_name(p)) + " before CONNECT", out);
        return;
    }
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Subscribe>) {
                handle_subscribe(c, v, out);
            } else if constexpr (std::is_same_v<T, Unsubscribe>) {
                handle_unsubscribe(c, v, out);
            } else if constexpr (std::is_same_v<T, Publish>) {
                handle_publish(c, v, out);
            } else if constexpr (std::is_same_v<T, Pubrel>) {
                handle_pubrel(c, v, out);
            } else if constexpr (std::is_same_v<T, Puback>) {
                auto it = c.outbound.find(v.packet_id);
                if (it != c.outbound.end() && it->second == OutboundStage::AwaitPuback) c.outbound.erase(it);
            } else if constexpr (std::is_same_v<T, Pubrec>) {
                auto it = c.outbound.find(v.packet_id);
                if (it != c.outbound.end() && it->second == OutboundStage::AwaitPubrec) {
                    it->second = OutboundStage::AwaitPubcomp;
                }
                if (it != c.outbound.end()) send(c, Pubrel{v.packet_id}, out);
            } else if constexpr (std::is_same_v<T, Pubcomp>) {
                auto it = c.outbound.find(v.packet_id);
                if (it != c.outbound.end() && it->second == OutboundStage::AwaitPubcomp) c.outbound.erase(it);
            } else if constexpr (std::is_same_v<T, Pingreq>) {
                send(c, Pingresp{}, out);
            } else if constexpr (std::is_same_v<T, Disconnect>) {
                close(c, "client disconnect", out);
            } else {
                close(c, std::string(packet_name(p)) + " is not a client packet", out);
            }
        },
        p);
}

void BrokerCore::handle_connect(Connection& c, const Connect& p, Out& out) {
    if (to_string(p.protocol_name) != "MQTT" || p.protocol_level != 4) {
        send(c, Connack{false, 1}, out);
        close(c, "unacceptable protocol " + byte_label(p.protocol_name) + " level " +
                     std::to_string(p.protocol_level),
             out);
        return;
    }
    std::string client_id = to_string(p.client_id);
    if (client_id.empty()) {
        if (!p.clean_session) {
            send(c, Connack{false, 2}, out);
            close(c, "empty client id without clean session", out);
            return;
        }
        client_id = "mqfuzz-ref-" + std::to_string(++generated_ids_);
    }
    if (auto it = clients_.find(client_id); it != clients_.end()) {
        auto old = conns_.find(it->second);
        if (old != conns_.end()) close(old->second, "taken over by a new connection", out);
    }
    c.connected = true;
    c.client_id = client_id;
    c.keep_alive = p.keep_alive;
    clients_[client_id] = c.id;
    send(c, Connack{false, 0}, out);
}

void BrokerCore::handle_subscribe(Connection& c, const Subscribe& p, Out& out) {
    if (p.entries.empty()) {
        close(c, "SUBSCRIBE without filters", out);
        return;
    }
    Suback ack{p.packet_id, {}};
    for (const auto& e : p.entries) {
        if (!topics::is_valid_filter(e.filter) || e.qos > 2) {
            close(c, "invalid topic filter " + byte_label(e.filter), out);
            return;
        }
    }
    for (const auto& e : p.entries) {
        auto it = std::find_if(c.subscriptions.begin(), c.subscriptions.end(),
                               [&](const Subscription& s) { return s.filter == e.filter; });
        if (it != c.subscriptions.end()) {
            it->qos = e.qos;
        } else {
            c.subscriptions.push_back({e.filter, e.qos});
        }
        ack.return_codes.push_back(e.qos);
    }
    send(c, ack, out);
}

void BrokerCore::handle_unsubscribe(Connection& c, const Unsubscribe& p, Out& out) {
    if (p.filters.empty()) {
        close(c, "UNSUBSCRIBE without filters", out);
        return;
    }
    for (const auto& f : p.filters) {
        std::erase_if(c.subscriptions, [&](const Subscription& s) { return s.filter == f; });
    }
    send(c, Unsuback{p.packet_id}, out);
}

void BrokerCore::handle_publish(Connection& c, const Publish& p, Out& out) {
    if (!topics::is_valid_topic(p.topic) || p.qos > 2 || (p.qos > 0) != p.packet_id.has_value()) {
        close(c, "invalid PUBLISH on topic " + byte_label(p.topic), out);
        return;
    }
    if (p.qos == 0) {
        c.route_queue.push_back({p, std::nullopt, false});
        drain_queue(c, out);
        return;
    }
    const std::uint16_t id = *p.packet_id;
    if (p.qos == 1) {
        c.route_queue.push_back({p, std::nullopt, false});
        drain_queue(c, out);
        send(c, Puback{id}, out);
        return;
    }
    // Same id at qos 2 while unreleased: a retransmission, routed once.
    if (!c.inbound_qos2.count(id)) {
        c.inbound_qos2.insert(id);
        c.route_queue.push_back({p, id, false});
    }
    send(c, Pubrec{id}, out);
}

void BrokerCore::handle_pubrel(Connection& c, const Pubrel& p, Out& out) {
    send(c, Pubcomp{p.packet_id}, out);
    if (c.inbound_qos2.erase(p.packet_id) == 0) return;
    for (auto& q : c.route_queue) {
        if (q.held_id == p.packet_id && !q.released) {
            q.released = true;
            break;
        }
    }
    drain_queue(c, out);
}

void BrokerCore::drain_queue(Connection& c, Out& out, bool closing) {
    while (!c.route_queue.empty()) {
        Queued& front = c.route_queue.front();
        const bool held = front.held_id && !front.released;
        if (held && !closing) break;
        if (!held) route(front.message, out);
        c.route_queue.pop_front();
    }
}

void BrokerCore::route(const Publish& msg, Out& out) {
    for (auto& [id, sub] : conns_) {
        if (!sub.connected) continue;
        std::optional<std::uint8_t> granted;
        for (const auto& s : sub.subscriptions) {
            if (topics::match_filter(s.filter, msg.topic)) granted = std::max<std::uint8_t>(granted.value_or(0), s.qos);
        }
        if (!granted) continue;
        Publish fwd;
        fwd.topic = msg.topic;
        fwd.payload = msg.payload;
        fwd.qos = std::min(msg.qos, *granted);
        // Every outbound id in use: fall back to at-most-once.
        if (fwd.qos > 0 && sub.outbound.size() >= 65535) fwd.qos = 0;
        if (fwd.qos > 0) {
            std::uint16_t pid = sub.next_outbound_id;
            while (pid == 0 || sub.outbound.count(pid)) ++pid;
            sub.next_outbound_id = static_cast<std::uint16_t>(pid + 1);
            fwd.packet_id = pid;
            sub.outbound[pid] = fwd.qos == 1 ? OutboundStage::AwaitPuback : OutboundStage::AwaitPubrec;
        }
        send(sub, fwd, out);
        ++routed_total_;
    }
}

}  // namespace mqfuzz::broker
