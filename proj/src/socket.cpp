#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <stdexcept>

#include "mqfuzz/net.hpp"

namespace mqfuzz::net {

void Fd::reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

void set_nonblocking(int fd) {
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

namespace {

std::string errno_text(int err) {
    switch (err) {
        case ECONNREFUSED: return "connection refused";
        case ETIMEDOUT: return "timed out";
        case EHOSTUNREACH: return "host unreachable";
        case ENETUNREACH: return "network unreachable";
        default: return std::strerror(err);
    }
}

}  // namespace

Fd connect_tcp(const std::string& host, std::uint16_t port, std::uint32_t timeout_ms, std::string& error) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
        error = std::string("cannot resolve '") + host + "': " + ::gai_strerror(rc);
        return Fd{};
    }
    error = "no usable address";
    Fd result;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        Fd fd(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
        if (!fd) {
            error = errno_text(errno);
            continue;
        }
        set_nonblocking(fd.get());
        int rc = ::connect(fd.get(), ai->ai_addr, ai->ai_addrlen);
        if (rc != 0 && errno != EINPROGRESS) {
            error = errno_text(errno);
            continue;
        }
        if (rc != 0) {
            pollfd p{fd.get(), POLLOUT, 0};
            rc = ::poll(&p, 1, static_cast<int>(timeout_ms));
            if (rc == 0) {
                error = "timed out";
                continue;
            }
            int soerr = 0;
            socklen_t len = sizeof soerr;
            ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &soerr, &len);
            if (rc < 0 || soerr != 0) {
                error = errno_text(rc < 0 ? errno : soerr);
                continue;
            }
        }
        set_nodelay(fd.get());
        result = std::move(fd);
        error.clear();
        break;
    }
    ::freeaddrinfo(res);
    return result;
}

Fd listen_tcp(const std::string& bind_host, std::uint16_t port, std::string& error) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    const char* node = bind_host.empty() ? nullptr : bind_host.c_str();
    if (int rc = ::getaddrinfo(node, service.c_str(), &hints, &res); rc != 0) {
        error = std::string("cannot resolve '") + bind_host + "': " + ::gai_strerror(rc);
        return Fd{};
    }
    Fd result;
    error = "no usable address";
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        Fd fd(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
        if (!fd) continue;
        int one = 1;
        ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(fd.get(), ai->ai_addr, ai->ai_addrlen) != 0 || ::listen(fd.get(), 128) != 0) {
            error = std::string("cannot listen on ") + bind_host + ":" + service + ": " + std::strerror(errno);
            continue;
        }
        set_nonblocking(fd.get());
        result = std::move(fd);
        error.clear();
        break;
    }
    ::freeaddrinfo(res);
    return result;
}

std::uint16_t local_port(int fd) {
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) return 0;
    if (addr.ss_family == AF_INET) return ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    if (addr.ss_family == AF_INET6) return ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
    return 0;
}

Waker::Waker() : fd_(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC)) {
    if (!fd_) throw std::runtime_error(std::string("eventfd: ") + std::strerror(errno));
}

void Waker::notify() const noexcept {
    const std::uint64_t one = 1;
    [[maybe_unused]] auto n = ::write(fd_.get(), &one, sizeof one);
}

void Waker::drain() const noexcept {
    std::uint64_t value;
    [[maybe_unused]] auto n = ::read(fd_.get(), &value, sizeof value);
}

}  // namespace mqfuzz::net
