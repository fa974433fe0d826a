#include "mqfuzz/runner.hpp"

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <map>
#include <mutex>
#include <thread>

#include "mqfuzz/net.hpp"

namespace mqfuzz {

namespace {

using Clock = std::chrono::steady_clock;

struct SessionState {
    const SessionDecl* decl = nullptr;
    net::Fd fd;
    bool open = false;
    bool connect_sent = false;
    bool desynced = false;
    Bytes inbuf;
    Bytes outbuf;
    std::size_t out_off = 0;
    std::optional<step::SpliceNext> pending_splice;
    std::size_t packet_steps_total = 0;
    std::size_t packet_steps_sent = 0;
};

// Flattened packet-step count per session, repeats expanded.
void count_packet_steps(const std::vector<Step>& steps, std::map<std::string, std::size_t>& out,
                        std::size_t multiplier = 1) {
    for (const auto& s : steps) {
        if (const auto* r = std::get_if<step::Repeat>(&s.action)) {
            count_packet_steps(r->steps, out, multiplier * r->count);
        } else if (!std::holds_alternative<step::Wait>(s.action) &&
                   !std::holds_alternative<step::SpliceNext>(s.action)) {
            out[s.session] += multiplier;
        }
    }
}

class LocalFault : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ExperimentRun {
public:
    ExperimentRun(const Experiment& e, const Endpoint& ep, const RunOptions& options)
        : experiment_(e), endpoint_(ep), settle_ms_(options.settle_ms.value_or(e.settle_ms)) {
        std::map<std::string, std::size_t> totals;
        count_packet_steps(e.steps, totals);
        for (const auto& decl : e.sessions) {
            auto& s = sessions_[decl.id];
            s.decl = &decl;
            s.packet_steps_total = totals[decl.id];
        }
    }

    Trace run() {
        trace_.experiment_name = experiment_.name;
        trace_.endpoint = endpoint_;
        trace_.started_at = std::chrono::system_clock::now();
        start_ = Clock::now();
        try {
            for (const auto& decl : experiment_.sessions) {
                std::string error;
                if (!open_session(decl.id, error)) {
                    fail("cannot connect session '" + decl.id + "' to " + endpoint_.to_string() + ": " + error);
                    return finish();
                }
            }
            io_thread_ = std::thread([this] { io_loop(); });
            for (const auto& s : experiment_.steps) execute(s);
            drain_outbound();
            sleep_for(settle_ms_);
        } catch (const LocalFault& ex) {
            fail(ex.what());
        } catch (const std::exception& ex) {
            fail(std::string("internal error: ") + ex.what());
        }
        return finish();
    }

private:
    // ---- event recording (caller holds mu_) ----

    TraceEvent& record(const std::string& session, EventKind kind) {
        TraceEvent e;
        e.seq = trace_.events.size();
        e.t_ms = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start_).count());
        e.session = session;
        e.kind = kind;
        trace_.events.push_back(std::move(e));
        return trace_.events.back();
    }

    void fail(const std::string& detail) {
        std::lock_guard lock(mu_);
        if (!local_fault_) local_fault_ = detail;
    }

    Trace finish() {
        stop_ = true;
        waker_.notify();
        if (io_thread_.joinable()) io_thread_.join();
        std::lock_guard lock(mu_);
        for (auto& [id, s] : sessions_) s.fd.reset();
        if (local_fault_) {
            trace_.outcome = TraceOutcome::RunnerError;
            trace_.outcome_detail = *local_fault_;
        } else if (aborted_by_peer_) {
            trace_.outcome = TraceOutcome::AbortedByPeer;
        } else {
            trace_.outcome = TraceOutcome::Completed;
        }
        return std::move(trace_);
    }

    // ---- connection management ----

    bool open_session(const std::string& id, std::string& error) {
        net::Fd fd = net::connect_tcp(endpoint_.host, endpoint_.port, endpoint_.connect_timeout_ms, error);
        std::lock_guard lock(mu_);
        auto& s = sessions_.at(id);
        if (!fd) return false;
        s.fd = std::move(fd);
        s.open = true;
        s.connect_sent = false;
        s.desynced = false;
        s.inbuf.clear();
        s.outbuf.clear();
        s.out_off = 0;
        record(id, EventKind::Connected);
        waker_.notify();
        return true;
    }

    void mark_closed(const std::string& id, SessionState& s, EventKind kind, const std::string& detail) {
        if (!s.open) return;
        flush_leftover(id, s);
        s.open = false;
        s.fd.reset();
        s.outbuf.clear();
        s.out_off = 0;
        record(id, kind).detail = detail;
        if (s.packet_steps_sent < s.packet_steps_total) aborted_by_peer_ = true;
        cv_.notify_all();
    }

    // ---- outbound ----

    /// Records the Sent event and queues the bytes; the I/O thread writes.
    void enqueue(const std::string& id, SessionState& s, const Packet& packet, Bytes wire, bool raw,
                 SendOrigin origin) {
        auto& ev = record(id, EventKind::Sent);
        ev.packet = raw ? Packet{Raw{wire}} : packet;
        ev.raw = raw;
        ev.origin = origin;
        ev.wire = wire;
        s.outbuf.insert(s.outbuf.end(), wire.begin(), wire.end());
        waker_.notify();
    }

    // ---- inbound (I/O thread, mu_ held) ----

    void on_packet(const std::string& id, SessionState& s, DecodeResult& d, ByteView frame) {
        auto& ev = record(id, EventKind::Received);
        ev.wire.assign(frame.begin(), frame.end());
        ev.annotations = d.annotations;
        ev.packet = d.packet;
        if (!s.decl->auto_ack) return;
        if (const auto* pub = std::get_if<Publish>(&d.packet); pub && pub->packet_id) {
            if (pub->qos == 1) {
                Puback ack{*pub->packet_id};
                enqueue(id, s, ack, encode_packet(ack), false, SendOrigin::AutoAck);
            } else if (pub->qos == 2) {
                Pubrec ack{*pub->packet_id};
                enqueue(id, s, ack, encode_packet(ack), false, SendOrigin::AutoAck);
            }
        } else if (const auto* rel = std::get_if<Pubrel>(&d.packet)) {
            Pubcomp ack{rel->packet_id};
            enqueue(id, s, ack, encode_packet(ack), false, SendOrigin::AutoAck);
        }
    }

    void record_raw(const std::string& id, ByteView bytes, const std::string& note) {
        auto& ev = record(id, EventKind::Received);
        ev.wire.assign(bytes.begin(), bytes.end());
        ev.packet = Raw{ev.wire};
        ev.annotations.push_back(note);
    }

    void process_inbound(const std::string& id, SessionState& s) {
        std::size_t off = 0;
        while (off < s.inbuf.size()) {
            const ByteView rest = ByteView(s.inbuf).subspan(off);
            if (s.desynced) {
                record_raw(id, rest, "malformed: unframed bytes after stream desynchronization");
                off = s.inbuf.size();
                break;
            }
            DecodeResult d = decode_packet(rest, DecodeMode::Permissive);
            if (d.status == DecodeStatus::Incomplete) break;
            if (d.status == DecodeStatus::Malformed) {
                if (d.consumed == 0) {
                    record_raw(id, rest, "malformed: " + d.error + " (stream desynchronized)");
                    s.desynced = true;
                    off = s.inbuf.size();
                    break;
                }
                record_raw(id, rest.first(d.consumed), "malformed: " + d.error);
                off += d.consumed;
                continue;
            }
            on_packet(id, s, d, rest.first(d.consumed));
            off += d.consumed;
        }
        s.inbuf.erase(s.inbuf.begin(), s.inbuf.begin() + static_cast<std::ptrdiff_t>(off));
        cv_.notify_all();
    }

    void flush_leftover(const std::string& id, SessionState& s) {
        if (s.inbuf.empty()) return;
        record_raw(id, s.inbuf, "malformed: incomplete frame at stream end");
        s.inbuf.clear();
    }

    void handle_readable(const std::string& id, SessionState& s) {
        std::uint8_t buf[65536];
        while (s.open) {
            const ssize_t n = ::recv(s.fd.get(), buf, sizeof buf, 0);
            if (n > 0) {
                s.inbuf.insert(s.inbuf.end(), buf, buf + n);
                process_inbound(id, s);
                continue;
            }
            if (n == 0) {
                mark_closed(id, s, EventKind::TcpClosedByPeer, "eof");
                return;
            }
            if (errno == EAGAIN || errno == EWOULDBLOCK) return;
            if (errno == EINTR) continue;
            if (errno == ECONNRESET) {
                mark_closed(id, s, EventKind::TcpClosedByPeer, "reset");
            } else {
                mark_closed(id, s, EventKind::TcpError, std::strerror(errno));
            }
            return;
        }
    }

    void handle_writable(const std::string& id, SessionState& s) {
        while (s.open && s.out_off < s.outbuf.size()) {
            const ssize_t n =
                ::send(s.fd.get(), s.outbuf.data() + s.out_off, s.outbuf.size() - s.out_off, MSG_NOSIGNAL);
            if (n > 0) {
                s.out_off += static_cast<std::size_t>(n);
                continue;
            }
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
            if (n < 0 && errno == EINTR) continue;
            if (n < 0 && (errno == EPIPE || errno == ECONNRESET)) {
                // Pick up anything the peer sent before it went away.
                handle_readable(id, s);
                mark_closed(id, s, EventKind::TcpClosedByPeer, "reset");
            } else {
                mark_closed(id, s, EventKind::TcpError, std::strerror(errno));
            }
            return;
        }
        if (s.out_off == s.outbuf.size()) {
            s.outbuf.clear();
            s.out_off = 0;
            cv_.notify_all();
        } else if (s.out_off > (1u << 20)) {
            s.outbuf.erase(s.outbuf.begin(), s.outbuf.begin() + static_cast<std::ptrdiff_t>(s.out_off));
            s.out_off = 0;
        }
    }

    void io_loop() {
        try {
            std::vector<pollfd> fds;
            std::vector<std::string> ids;
            while (!stop_) {
                fds.clear();
                ids.clear();
                fds.push_back({waker_.fd(), POLLIN, 0});
                {
                    std::lock_guard lock(mu_);
                    for (auto& [id, s] : sessions_) {
                        if (!s.open) continue;
                        short events = POLLIN;
                        if (s.out_off < s.outbuf.size()) events |= POLLOUT;
                        fds.push_back({s.fd.get(), events, 0});
                        ids.push_back(id);
                    }
                }
                ::poll(fds.data(), fds.size(), 100);
                if (fds[0].revents) waker_.drain();
                std::lock_guard lock(mu_);
                for (std::size_t i = 1; i < fds.size(); ++i) {
                    auto& s = sessions_.at(ids[i - 1]);
                    if (!s.open || s.fd.get() != fds[i].fd) continue;
                    if (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) handle_readable(ids[i - 1], s);
                    if (s.open && (fds[i].revents & POLLOUT)) handle_writable(ids[i - 1], s);
                }
                // Sockets are non-blocking, so try writing fresh data at once.
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    auto& s = sessions_.at(ids[i]);
                    if (s.open && s.out_off < s.outbuf.size()) handle_writable(ids[i], s);
                }
            }
        } catch (const std::exception& ex) {
            std::lock_guard lock(mu_);
            if (!local_fault_) local_fault_ = std::string("internal error in reader: ") + ex.what();
            cv_.notify_all();
        }
    }

    // ---- step execution (executor thread) ----

    void sleep_for(std::uint32_t ms) {
        std::unique_lock lock(mu_);
        const auto deadline = Clock::now() + std::chrono::milliseconds(ms);
        while (Clock::now() < deadline) cv_.wait_until(lock, deadline);
    }

    void drain_outbound() {
        std::unique_lock lock(mu_);
        const auto deadline = Clock::now() + std::chrono::milliseconds(endpoint_.io_timeout_ms);
        cv_.wait_until(lock, deadline, [&] {
            for (auto& [id, s] : sessions_) {
                if (s.open && s.out_off < s.outbuf.size()) return false;
            }
            return true;
        });
    }

    template <class Pred>
    void await(const std::string& id, std::size_t from_seq, const char* what, Pred matches) {
        std::unique_lock lock(mu_);
        const auto deadline = Clock::now() + std::chrono::milliseconds(endpoint_.io_timeout_ms);
        std::size_t scanned = from_seq;
        const bool done = cv_.wait_until(lock, deadline, [&] {
            for (; scanned < trace_.events.size(); ++scanned) {
                const auto& ev = trace_.events[scanned];
                if (ev.session == id && ev.kind == EventKind::Received && matches(ev.packet)) return true;
            }
            return !sessions_.at(id).open || local_fault_.has_value();
        });
        if (!done) record(id, EventKind::Timeout).detail = what;
    }

    static bool needs_implicit_connect(const Action& a) {
        return !std::holds_alternative<step::Connect>(a) && !std::holds_alternative<step::SendRaw>(a);
    }

    /// Sends one step frame; returns the seq of its Sent event, or nullopt
    /// when the session is not open.
    std::optional<std::size_t> send_step_frame(const std::string& id, const Packet& packet, bool raw_input) {
        std::lock_guard lock(mu_);
        auto& s = sessions_.at(id);
        if (!s.open) {
            aborted_by_peer_ = aborted_by_peer_ || s.packet_steps_sent < s.packet_steps_total;
            return std::nullopt;
        }
        Bytes wire;
        try {
            wire = encode_packet(packet);
        } catch (const CodecError& ex) {
            throw LocalFault("step on session '" + id + "' cannot be encoded: " + ex.what());
        }
        bool raw = raw_input;
        if (s.pending_splice) {
            const auto sp = *s.pending_splice;
            s.pending_splice.reset();
            try {
                wire = splice(wire, sp.offset, sp.remove, sp.insert, sp.fixup_length);
            } catch (const CodecError& ex) {
                throw LocalFault("splice_next on session '" + id + "': " + ex.what());
            }
            raw = true;
        }
        const std::size_t seq = trace_.events.size();
        ++s.packet_steps_sent;
        enqueue(id, s, packet, std::move(wire), raw, SendOrigin::Step);
        return seq;
    }

    void send_connect(const std::string& id, SendOrigin origin) {
        std::optional<std::size_t> seq;
        const Packet connect = sessions_.at(id).decl->connect.to_packet();
        if (origin == SendOrigin::Step) {
            seq = send_step_frame(id, connect, false);
        } else {
            std::lock_guard lock(mu_);
            auto& s = sessions_.at(id);
            if (s.open) {
                seq = trace_.events.size();
                enqueue(id, s, connect, encode_packet(connect), false, origin);
            }
        }
        if (!seq) return;
        {
            std::lock_guard lock(mu_);
            sessions_.at(id).connect_sent = true;
        }
        await(id, *seq, "CONNACK", [](const Packet& p) { return std::holds_alternative<Connack>(p); });
    }

    void execute(const Step& st) {
        {
            std::lock_guard lock(mu_);
            if (local_fault_) throw LocalFault(*local_fault_);
        }
        if (const auto* w = std::get_if<step::Wait>(&st.action)) {
            sleep_for(w->ms);
            return;
        }
        if (const auto* r = std::get_if<step::Repeat>(&st.action)) {
            for (std::uint32_t i = 0; i < r->count; ++i) {
                for (const auto& inner : r->steps) execute(inner);
            }
            return;
        }
        const std::string& id = st.session;
        if (const auto* sp = std::get_if<step::SpliceNext>(&st.action)) {
            std::lock_guard lock(mu_);
            sessions_.at(id).pending_splice = *sp;
            return;
        }

        bool open;
        bool connect_sent;
        {
            std::lock_guard lock(mu_);
            open = sessions_.at(id).open;
            connect_sent = sessions_.at(id).connect_sent;
        }
        if (std::holds_alternative<step::Connect>(st.action)) {
            if (!open) {
                std::string error;
                if (!open_session(id, error)) {
                    std::lock_guard lock(mu_);
                    record(id, EventKind::TcpError).detail = "reconnect failed: " + error;
                    return;
                }
            }
            send_connect(id, SendOrigin::Step);
            return;
        }
        if (open && !connect_sent && needs_implicit_connect(st.action)) {
            send_connect(id, SendOrigin::ImplicitConnect);
        }

        std::visit(
            [&](const auto& a) {
                using T = std::decay_t<decltype(a)>;
                if constexpr (std::is_same_v<T, step::Disconnect>) {
                    send_step_frame(id, Disconnect{}, false);
                } else if constexpr (std::is_same_v<T, step::Subscribe>) {
                    Subscribe sub{a.packet_id, {SubscribeEntry{a.filter, a.qos}}};
                    if (auto seq = send_step_frame(id, sub, false)) {
                        await(id, *seq, "SUBACK", [pid = a.packet_id](const Packet& p) {
                            const auto* ack = std::get_if<Suback>(&p);
                            return ack && ack->packet_id == pid;
                        });
                    }
                } else if constexpr (std::is_same_v<T, step::Unsubscribe>) {
                    Unsubscribe unsub{a.packet_id, {a.filter}};
                    if (auto seq = send_step_frame(id, unsub, false)) {
                        await(id, *seq, "UNSUBACK", [pid = a.packet_id](const Packet& p) {
                            const auto* ack = std::get_if<Unsuback>(&p);
                            return ack && ack->packet_id == pid;
                        });
                    }
                } else if constexpr (std::is_same_v<T, step::Publish>) {
                    Publish pub;
                    pub.dup = a.dup;
                    pub.qos = a.qos;
                    pub.retain = a.retain;
                    pub.topic = a.topic;
                    pub.packet_id = a.packet_id;
                    pub.payload = a.payload;
                    send_step_frame(id, pub, false);
                } else if constexpr (std::is_same_v<T, step::Ack>) {
                    Packet ack;
                    switch (a.kind) {
                        case PacketType::Puback: ack = Puback{a.packet_id}; break;
                        case PacketType::Pubrec: ack = Pubrec{a.packet_id}; break;
                        case PacketType::Pubrel: ack = Pubrel{a.packet_id}; break;
                        default: ack = Pubcomp{a.packet_id}; break;
                    }
                    send_step_frame(id, ack, false);
                } else if constexpr (std::is_same_v<T, step::Pingreq>) {
                    if (auto seq = send_step_frame(id, Pingreq{}, false)) {
                        await(id, *seq, "PINGRESP",
                              [](const Packet& p) { return std::holds_alternative<Pingresp>(p); });
                    }
                } else if constexpr (std::is_same_v<T, step::SendRaw>) {
                    send_step_frame(id, Raw{a.bytes}, true);
                    if (!a.bytes.empty() && (a.bytes[0] >> 4) == 1) {
                        std::lock_guard lock(mu_);
                        sessions_.at(id).connect_sent = true;
                    }
                }
            },
            st.action);
    }

    const Experiment& experiment_;
    Endpoint endpoint_;
    std::uint32_t settle_ms_;

    std::mutex mu_;
    std::condition_variable cv_;
    net::Waker waker_;
    std::thread io_thread_;
    std::atomic<bool> stop_{false};

    Clock::time_point start_;
    Trace trace_;
    std::map<std::string, SessionState> sessions_;
    bool aborted_by_peer_ = false;
    std::optional<std::string> local_fault_;
};

}  // namespace

Trace run_experiment(const Experiment& e, const Endpoint& ep, const RunOptions& options) {
    ExperimentRun run(e, ep, options);
    return run.run();
}

Liveness probe_liveness(const Endpoint& ep) {
    static std::atomic<unsigned> counter{0};
    std::string error;
    net::Fd fd = net::connect_tcp(ep.host, ep.port, ep.connect_timeout_ms, error);
    if (!fd) return {false, error};

    Connect c;
    c.client_id = to_bytes("mqfuzz-probe-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    const Bytes out = encode_packet(c);
    std::size_t sent = 0;
    const auto deadline = Clock::now() + std::chrono::milliseconds(ep.connect_timeout_ms);
    Bytes in;
    auto remaining_ms = [&] {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
        return static_cast<int>(std::max<long long>(left, 0));
    };
    while (true) {
        if (remaining_ms() == 0) return {false, "no CONNACK within " + std::to_string(ep.connect_timeout_ms) + " ms"};
        pollfd p{fd.get(), static_cast<short>(POLLIN | (sent < out.size() ? POLLOUT : 0)), 0};
        if (::poll(&p, 1, remaining_ms()) <= 0) continue;
        if (p.revents & POLLOUT) {
            const ssize_t n = ::send(fd.get(), out.data() + sent, out.size() - sent, MSG_NOSIGNAL);
            if (n > 0) sent += static_cast<std::size_t>(n);
            else if (errno != EAGAIN && errno != EINTR) return {false, std::string("send: ") + std::strerror(errno)};
        }
        if (p.revents & (POLLIN | POLLHUP | POLLERR)) {
            std::uint8_t buf[512];
            const ssize_t n = ::recv(fd.get(), buf, sizeof buf, 0);
            if (n == 0) return {false, "closed by peer before CONNACK"};
            if (n < 0) {
                if (errno == EAGAIN || errno == EINTR) continue;
                return {false, std::string("recv: ") + std::strerror(errno)};
            }
            in.insert(in.end(), buf, buf + n);
            const auto d = decode_packet(in, DecodeMode::Permissive);
            if (d.status == DecodeStatus::Incomplete) continue;
            const auto* ack = std::get_if<Connack>(&d.packet);
            if (!d.ok() || !ack) return {false, "unexpected answer to CONNECT"};
            if (ack->return_code != 0) return {false, "CONNACK return code " + std::to_string(ack->return_code)};
            const Bytes bye = encode_packet(Disconnect{});
            [[maybe_unused]] auto w = ::send(fd.get(), bye.data(), bye.size(), MSG_NOSIGNAL);
            return {true, ""};
        }
    }
}

std::vector<CorpusResult> run_corpus(const std::vector<Experiment>& experiments, const Endpoint& ep,
                                     const RunOptions& options,
                                     const std::function<void(const CorpusResult&)>& progress) {
    std::vector<CorpusResult> results;
    results.reserve(experiments.size());
    std::optional<std::string> dead_after;
    for (const auto& e : experiments) {
        CorpusResult r;
        r.experiment = e;
        if (dead_after) {
            r.skipped_reason = "broker_dead";
            r.liveness_after = {false, "broker dead since " + *dead_after};
        } else {
            r.trace = run_experiment(e, ep, options);
            r.liveness_after = probe_liveness(ep);
            if (!r.liveness_after.alive) dead_after = e.name;
        }
        if (progress) progress(r);
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace mqfuzz
