#pragma once

#include <cstdint>
#include <string>

// Thin POSIX socket helpers shared by the runner and the broker.
namespace mqfuzz::net {

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    ~Fd() { reset(); }
    Fd(Fd&& other) noexcept : fd_(other.release()) {}
    Fd& operator=(Fd&& other) noexcept {
        if (this != &other) {
            reset();
            fd_ = other.release();
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;

    int get() const noexcept { return fd_; }
    bool valid() const noexcept { return fd_ >= 0; }
    explicit operator bool() const noexcept { return valid(); }
    int release() noexcept {
        int fd = fd_;
        fd_ = -1;
        return fd;
    }
    void reset() noexcept;

private:
    int fd_ = -1;
};

/// Blocking connect bounded by timeout_ms. Returns an invalid Fd and fills
/// `error` ("connection refused", "timed out", resolver message) on failure.
/// The returned socket is non-blocking with TCP_NODELAY set.
Fd connect_tcp(const std::string& host, std::uint16_t port, std::uint32_t timeout_ms, std::string& error);

/// Listening socket (SO_REUSEADDR, non-blocking). Port 0 picks a free one.
Fd listen_tcp(const std::string& bind_host, std::uint16_t port, std::string& error);

std::uint16_t local_port(int fd);

void set_nonblocking(int fd);
void set_nodelay(int fd);

/// Level-triggered wakeup for poll loops.
class Waker {
public:
    Waker();
    int fd() const noexcept { return fd_.get(); }
    void notify() const noexcept;
    void drain() const noexcept;

private:
    Fd fd_;
};

}  // namespace mqfuzz::net
