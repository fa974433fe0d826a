#include <poll.h>
#include <sys/socket.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <map>

#include "mqfuzz/net.hpp"
#include "mqfuzz/refbroker.hpp"

namespace mqfuzz::broker {

namespace {

using Clock = std::chrono::steady_clock;

struct Peer {
    net::Fd fd;
    Bytes outbuf;
    std::size_t out_off = 0;
    bool closing = false;
    bool write_shut = false;
    Clock::time_point close_deadline{};
};

constexpr auto kLingerOnClose = std::chrono::milliseconds(1000);

}  // namespace

struct BrokerServer::Impl {
    ServerOptions options;
    net::Fd listener;
    net::Waker waker;
    BrokerCore core;
    std::map<ConnId, Peer> peers;
    ConnId next_id = 1;
    Clock::time_point start = Clock::now();
    std::atomic<bool> stop{false};

    explicit Impl(ServerOptions o) : options(std::move(o)), core(options.config) {}

    std::uint64_t now_ms() const {
        return static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count());
    }

    void log(const std::string& line) const {
        if (options.log) options.log(line);
    }

    /// Returns false when a Halt was requested.
    bool apply(std::vector<Action>&& actions) {
        for (auto& a : actions) {
            auto it = peers.find(a.conn);
            switch (a.kind) {
                case Action::Kind::Send:
                    if (it != peers.end() && !it->second.closing) {
                        auto& buf = it->second.outbuf;
                        buf.insert(buf.end(), a.bytes.begin(), a.bytes.end());
                    }
                    break;
                case Action::Kind::Close:
                    if (it != peers.end() && !it->second.closing) {
                        log("conn=" + std::to_string(a.conn) + " event=close reason=\"" + a.reason + "\"");
                        it->second.closing = true;
                        it->second.close_deadline = Clock::now() + kLingerOnClose;
                    }
                    break;
                case Action::Kind::Halt:
                    log("event=halt reason=\"" + a.reason + "\"");
                    return false;
            }
        }
        return true;
    }

    void accept_all() {
        while (true) {
            const int fd = ::accept4(listener.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
            if (fd < 0) return;
            net::set_nodelay(fd);
            const ConnId id = next_id++;
            peers[id].fd = net::Fd(fd);
            core.open(id, now_ms());
            log("conn=" + std::to_string(id) + " event=accept");
        }
    }

    /// False when the peer is gone.
    bool flush(Peer& p) {
        while (p.out_off < p.outbuf.size()) {
            const ssize_t n = ::send(p.fd.get(), p.outbuf.data() + p.out_off, p.outbuf.size() - p.out_off, MSG_NOSIGNAL);
            if (n > 0) {
                p.out_off += static_cast<std::size_t>(n);
                continue;
            }
            if (n < 0 && errno == EINTR) continue;
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
            return false;
        }
        if (p.out_off == p.outbuf.size()) {
            p.outbuf.clear();
            p.out_off = 0;
        } else if (p.out_off > (1u << 20)) {
            p.outbuf.erase(p.outbuf.begin(), p.outbuf.begin() + static_cast<std::ptrdiff_t>(p.out_off));
            p.out_off = 0;
        }
        return true;
    }

    /// False once the peer has closed its side.
    bool discard_input(Peer& p) {
        std::uint8_t buf[4096];
        while (true) {
            const ssize_t n = ::recv(p.fd.get(), buf, sizeof buf, 0);
            if (n > 0) continue;
            if (n < 0 && errno == EINTR) continue;
            return n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK);
        }
    }

    /// False when a Halt was requested.
    bool read_from(ConnId id, Peer& p, bool& gone) {
        std::uint8_t buf[65536];
        while (!p.closing) {
            const ssize_t n = ::recv(p.fd.get(), buf, sizeof buf, 0);
            if (n > 0) {
                if (!apply(core.on_bytes(id, ByteView(buf, static_cast<std::size_t>(n)), now_ms()))) return false;
                continue;
            }
            if (n < 0 && errno == EINTR) continue;
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return true;
            log("conn=" + std::to_string(id) + " event=peer_closed");
            gone = true;
            return apply(core.on_close(id));
        }
        return true;
    }

    void run() {
        std::vector<pollfd> fds;
        std::vector<ConnId> ids;
        auto last_tick = Clock::now();
        while (!stop) {
            fds.clear();
            ids.clear();
            fds.push_back({waker.fd(), POLLIN, 0});
            fds.push_back({listener.get(), POLLIN, 0});
            for (auto& [id, p] : peers) {
                short events = POLLIN;
                if (p.out_off < p.outbuf.size()) events |= POLLOUT;
                fds.push_back({p.fd.get(), events, 0});
                ids.push_back(id);
            }
            ::poll(fds.data(), fds.size(), 100);
            if (fds[0].revents) waker.drain();
            if (stop) break;
            if (fds[1].revents & POLLIN) accept_all();

            bool halted = false;
            for (std::size_t i = 0; i < ids.size() && !halted; ++i) {
                auto it = peers.find(ids[i]);
                if (it == peers.end()) continue;
                bool gone = false;
                if (fds[i + 2].revents & (POLLIN | POLLHUP | POLLERR)) {
                    if (it->second.closing) {
                        gone = !discard_input(it->second);
                    } else {
                        halted = !read_from(ids[i], it->second, gone);
                    }
                }
                if (gone) peers.erase(ids[i]);
            }
            if (Clock::now() - last_tick >= std::chrono::milliseconds(100)) {
                last_tick = Clock::now();
                halted = halted || !apply(core.tick(now_ms()));
            }
            if (halted) break;

            for (auto it = peers.begin(); it != peers.end();) {
                Peer& p = it->second;
                const bool alive = flush(p);
                const bool drained = p.out_off >= p.outbuf.size();
                if (!alive && !p.closing) {
                    log("conn=" + std::to_string(it->first) + " event=write_failed");
                    if (!apply(core.on_close(it->first))) {
                        halted = true;
                        break;
                    }
                    it = peers.erase(it);
                } else if (p.closing && (!alive || Clock::now() > p.close_deadline)) {
                    it = peers.erase(it);
                } else {
                    // Half-close first so the peer reads everything we sent
                    // before it sees the end of the stream.
                    if (p.closing && drained && !p.write_shut) {
                        ::shutdown(p.fd.get(), SHUT_WR);
                        p.write_shut = true;
                    }
                    ++it;
                }
            }
            if (halted) break;
        }
        peers.clear();
        listener.reset();
    }
};

BrokerServer::BrokerServer(ServerOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {
    std::string error;
    impl_->listener = net::listen_tcp(impl_->options.bind_host, impl_->options.port, error);
    if (!impl_->listener) throw BindError(error);
    port_ = net::local_port(impl_->listener.get());
}

BrokerServer::~BrokerServer() {
    stop();
}

void BrokerServer::start() {
    if (thread_.joinable()) return;
    running_ = true;
    thread_ = std::thread([this] {
        impl_->log("event=listening port=" + std::to_string(port_));
        impl_->run();
        running_ = false;
    });
}

void BrokerServer::stop() {
    impl_->stop = true;
    impl_->waker.notify();
    if (thread_.joinable()) thread_.join();
    running_ = false;
}

}  // namespace mqfuzz::broker
