#include "bayhenn/net.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace bayhenn {

namespace {
[[noreturn]] void throw_errno(const std::string& what) {
    throw TransportError(what + ": " + std::strerror(errno));
}
}  // namespace

TcpStream& TcpStream::operator=(TcpStream&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = o.fd_;
        o.fd_ = -1;
    }
    return *this;
}

TcpStream::~TcpStream() { close(); }

void TcpStream::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

TcpStream TcpStream::connect(const std::string& host, uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw_errno("socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    std::string h = host == "localhost" ? "127.0.0.1" : host;
    if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw TransportError("connect: bad address '" + host + "'");
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        int e = errno;
        ::close(fd);
        errno = e;
        throw_errno("connect to " + host + ":" + std::to_string(port));
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
}

void TcpStream::write_all(std::span<const uint8_t> bytes) {
    if (fd_ < 0) throw TransportError("write on closed stream");
    size_t off = 0;
    while (off < bytes.size()) {
        ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n <= 0) {
            if (n < 0 && errno == EINTR) continue;
            throw_errno("send");
        }
        off += static_cast<size_t>(n);
    }
}

void TcpStream::read_exact(std::span<uint8_t> into) {
    if (fd_ < 0) throw TransportError("read on closed stream");
    size_t off = 0;
    while (off < into.size()) {
        ssize_t n = ::recv(fd_, into.data() + off, into.size() - off, 0);
        if (n == 0) throw TransportError("connection closed mid-frame");
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("recv");
        }
        off += static_cast<size_t>(n);
    }
}

TcpListener::~TcpListener() { close(); }

TcpListener::TcpListener(TcpListener&& o) noexcept : fd_(o.fd_), port_(o.port_) {
    o.fd_ = -1;
}

TcpListener& TcpListener::operator=(TcpListener&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = o.fd_;
        port_ = o.port_;
        o.fd_ = -1;
    }
    return *this;
}

void TcpListener::close() {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_RDWR);
        ::close(fd_);
        fd_ = -1;
    }
}

TcpListener TcpListener::bind(const std::string& host, uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw_errno("socket");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    std::string h = host == "localhost" || host.empty() ? "127.0.0.1" : host;
    if (h == "0.0.0.0") {
        addr.sin_addr.s_addr = INADDR_ANY;
    } else if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw TransportError("bind: bad address '" + host + "'");
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        int e = errno;
        ::close(fd);
        errno = e;
        throw_errno("bind " + host + ":" + std::to_string(port));
    }
    if (::listen(fd, 16) != 0) {
        int e = errno;
        ::close(fd);
        errno = e;
        throw_errno("listen");
    }
    sockaddr_in actual{};
    socklen_t len = sizeof(actual);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&actual), &len);
    TcpListener l;
    l.fd_ = fd;
    l.port_ = ntohs(actual.sin_port);
    return l;
}

TcpStream TcpListener::accept() {
    if (fd_ < 0) throw TransportError("accept on closed listener");
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw_errno("accept");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
}

std::pair<std::string, uint16_t> parse_addr(const std::string& addr) {
    size_t colon = addr.rfind(':');
    if (colon == std::string::npos || colon + 1 >= addr.size())
        throw TransportError("address must be host:port, got '" + addr + "'");
    int port = std::stoi(addr.substr(colon + 1));
    // port 0 is the ephemeral-bind request
    if (port < 0 || port > 65535) throw TransportError("port out of range in '" + addr + "'");
    return {addr.substr(0, colon), static_cast<uint16_t>(port)};
}

void frame_write(TcpStream& s, std::span<const uint8_t> payload, size_t max_frame) {
    if (payload.size() > max_frame)
        throw TransportError("frame_write: payload exceeds the frame limit");
    uint8_t prefix[kFramePrefixSize];  // big-endian length
    uint32_t len = static_cast<uint32_t>(payload.size());
    prefix[0] = static_cast<uint8_t>(len >> 24);
    prefix[1] = static_cast<uint8_t>(len >> 16);
    prefix[2] = static_cast<uint8_t>(len >> 8);
    prefix[3] = static_cast<uint8_t>(len);
    s.write_all({prefix, kFramePrefixSize});
    s.write_all(payload);
}

std::vector<uint8_t> frame_read(TcpStream& s, size_t max_frame) {
    uint8_t prefix[kFramePrefixSize];
    s.read_exact({prefix, kFramePrefixSize});
    uint32_t len = (uint32_t(prefix[0]) << 24) | (uint32_t(prefix[1]) << 16) |
                   (uint32_t(prefix[2]) << 8) | uint32_t(prefix[3]);
    // reject before allocating anything
    if (len > max_frame) throw TransportError("frame_read: declared length exceeds the limit");
    std::vector<uint8_t> payload(len);
    s.read_exact(payload);
    return payload;
}

void TcpTransport::send(const ProtocolMessage& msg) {
    std::vector<uint8_t> bytes = encode_message(msg);
    frame_write(stream_, bytes, max_frame_);
    counters_.sent_bytes += bytes.size() + kFramePrefixSize;
    counters_.sent_frames += 1;
    counters_.sent_by_type[msg.type] += bytes.size() + kFramePrefixSize;
}

ProtocolMessage TcpTransport::recv() {
    std::vector<uint8_t> bytes = frame_read(stream_, max_frame_);
    ProtocolMessage msg = decode_message(bytes);
    counters_.received_bytes += bytes.size() + kFramePrefixSize;
    counters_.received_frames += 1;
    counters_.received_by_type[msg.type] += bytes.size() + kFramePrefixSize;
    return msg;
}

// ---- server ----

InferenceServer::InferenceServer(Posterior posterior, RingParamsPtr params, ServerOptions opts)
    : posterior_(std::make_shared<const Posterior>(std::move(posterior))),
      params_(std::move(params)),
      opts_(opts),
      rng_(opts.seed == 0 ? Rng::system() : Rng(opts.seed)) {
    // fail fast on bad model/parameter combinations
    build_manifest(*posterior_, opts_.ensemble_size, params_);
}

InferenceServer::~InferenceServer() { stop(); }

void InferenceServer::start(const std::string& bind_addr) {
    auto [host, port] = parse_addr(bind_addr);
    listener_ = TcpListener::bind(host, port);
    accept_thread_ = std::thread([this] { accept_loop(); });
}

void InferenceServer::stop() {
    if (stopping_.exchange(true)) return;
    listener_.close();
    if (accept_thread_.joinable()) accept_thread_.join();
    std::lock_guard<std::mutex> lk(workers_mu_);
    for (std::thread& w : workers_)
        if (w.joinable()) w.join();
    workers_.clear();
}

void InferenceServer::accept_loop() {
    while (!stopping_.load()) {
        TcpStream stream;
        try {
            stream = listener_.accept();
        } catch (const TransportError&) {
            break;  // listener closed
        }
        uint64_t index = session_counter_.fetch_add(1);
        Rng session_rng = [&] {
            std::lock_guard<std::mutex> lk(rng_mu_);
            return rng_.fork();
        }();
        std::lock_guard<std::mutex> lk(workers_mu_);
        workers_.emplace_back([this, s = std::move(stream), session_rng, index]() mutable {
            TcpTransport transport(std::move(s), opts_.max_frame);
            std::vector<SampledModel> theta;
            try {
                serve_session(transport, posterior_, opts_.ensemble_size, params_, session_rng,
                              &registry_, opts_.theta_export_dir.empty() ? nullptr : &theta);
            } catch (const std::exception&) {
                return;  // session state dropped; nothing else leaves the server
            }
            if (!opts_.theta_export_dir.empty() && !theta.empty())
                save_sampled_models(
                    opts_.theta_export_dir + "/theta-" + std::to_string(index) + ".bin", theta);
            sessions_served_.fetch_add(1);
        });
    }
}

}  // namespace bayhenn
