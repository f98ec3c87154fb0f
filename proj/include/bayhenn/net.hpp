#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "bayhenn/protocol.hpp"

// Transport framing over TCP: every protocol message travels as one frame,
// a 4-byte big-endian length prefix followed by the encoded message.
// Oversize declarations are rejected before any payload allocation.

namespace bayhenn {

constexpr size_t kFramePrefixSize = 4;
constexpr size_t kDefaultMaxFrame = 64ull * 1024 * 1024;

class TcpStream {
  public:
    TcpStream() = default;
    explicit TcpStream(int fd) : fd_(fd) {}
    TcpStream(TcpStream&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    TcpStream& operator=(TcpStream&& o) noexcept;
    ~TcpStream();

    static TcpStream connect(const std::string& host, uint16_t port);
    bool valid() const { return fd_ >= 0; }
    void write_all(std::span<const uint8_t> bytes);
    void read_exact(std::span<uint8_t> into);  // TransportError on EOF/short read
    void close();

  private:
    int fd_ = -1;
};

class TcpListener {
  public:
    TcpListener() = default;
    ~TcpListener();
    TcpListener(TcpListener&& o) noexcept;
    TcpListener& operator=(TcpListener&& o) noexcept;

    static TcpListener bind(const std::string& host, uint16_t port);
    TcpStream accept();      // TransportError when the listener is closed
    uint16_t port() const { return port_; }
    void close();

  private:
    int fd_ = -1;
    uint16_t port_ = 0;
};

// "host:port"; host may be a dotted quad or "localhost".
std::pair<std::string, uint16_t> parse_addr(const std::string& addr);

void frame_write(TcpStream& s, std::span<const uint8_t> payload,
                 size_t max_frame = kDefaultMaxFrame);
std::vector<uint8_t> frame_read(TcpStream& s, size_t max_frame = kDefaultMaxFrame);

struct ByteCounters {
    uint64_t sent_bytes = 0, received_bytes = 0;  // frame prefix included
    uint32_t sent_frames = 0, received_frames = 0;
    std::map<MsgType, uint64_t> sent_by_type, received_by_type;
};

// Transport over a TCP stream with per-direction byte accounting.
class TcpTransport : public Transport {
  public:
    explicit TcpTransport(TcpStream stream, size_t max_frame = kDefaultMaxFrame)
        : stream_(std::move(stream)), max_frame_(max_frame) {}

    void send(const ProtocolMessage& msg) override;
    ProtocolMessage recv() override;
    const ByteCounters& counters() const { return counters_; }

  private:
    TcpStream stream_;
    size_t max_frame_;
    ByteCounters counters_;
};

struct ServerOptions {
    uint16_t ensemble_size = 4;
    uint64_t seed = 0;  // 0: entropy-seeded
    size_t max_frame = kDefaultMaxFrame;
    // when set, each session's sampled weights are written to
    // <dir>/theta-<index>.bin in accept order (debug/oracle runs)
    std::string theta_export_dir;
};

// One worker thread per connection; sessions share the posterior but never
// share weight draws.
class InferenceServer {
  public:
    InferenceServer(Posterior posterior, RingParamsPtr params, ServerOptions opts);
    ~InferenceServer();

    void start(const std::string& bind_addr);  // returns once listening
    uint16_t port() const { return listener_.port(); }
    void stop();

    uint64_t sessions_served() const { return sessions_served_.load(); }

  private:
    void accept_loop();

    std::shared_ptr<const Posterior> posterior_;
    RingParamsPtr params_;
    ServerOptions opts_;
    Rng rng_;
    std::mutex rng_mu_;
    SessionRegistry registry_;
    TcpListener listener_;
    std::thread accept_thread_;
    std::vector<std::thread> workers_;
    std::mutex workers_mu_;
    std::atomic<bool> stopping_{false};
    std::atomic<uint64_t> sessions_served_{0};
    std::atomic<uint64_t> session_counter_{0};
};

}  // namespace bayhenn
