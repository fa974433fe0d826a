#pragma once

// Scripted TCP peer for runner tests: answers decoded client frames, or
// raw chunks, through a callback.

#include <atomic>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "mqfuzz/codec.hpp"
#include "mqfuzz/net.hpp"

namespace fake {

using mqfuzz::Bytes;
using mqfuzz::Packet;

struct Reply {
    Bytes bytes;
    bool close = false;
};

/// Called with each strictly or permissively decoded client frame. An
/// undecodable stream closes the connection.
using FrameHandler = std::function<Reply(const Packet&)>;
/// Called with each chunk read, undecoded.
using ChunkHandler = std::function<Reply(const Bytes&)>;

class FakeBroker {
public:
    explicit FakeBroker(FrameHandler on_frame);
    explicit FakeBroker(ChunkHandler on_chunk, bool greet_with_chunk = false);
    ~FakeBroker();
    FakeBroker(const FakeBroker&) = delete;
    FakeBroker& operator=(const FakeBroker&) = delete;

    std::uint16_t port() const { return port_; }
    std::size_t connections() const { return accepted_; }
    /// Every frame handed to the frame handler, in arrival order.
    std::vector<Packet> frames() const;

private:
    void loop();

    FrameHandler on_frame_;
    ChunkHandler on_chunk_;
    bool greet_ = false;
    mqfuzz::net::Fd listener_;
    mqfuzz::net::Waker waker_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::atomic<std::size_t> accepted_{0};
    mutable std::mutex mu_;
    std::vector<Packet> frames_;
    std::thread thread_;
};

/// Answers CONNECT, SUBSCRIBE, UNSUBSCRIBE, PINGREQ and the QoS handshakes
/// the way a plain broker would, without routing anything.
Reply polite(const Packet& p);

}  // namespace fake
