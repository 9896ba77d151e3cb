#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <list>
#include <memory>
#include <thread>

#include "picofw/sync.hpp"

namespace picofw {

namespace {

constexpr std::size_t kMaxLine = 16 << 20;

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

std::string errno_text(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}

struct AddrInfoDeleter {
  void operator()(addrinfo* ai) const { ::freeaddrinfo(ai); }
};

std::unique_ptr<addrinfo, AddrInfoDeleter> resolve(const HostPort& hp, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(hp.port);
  const char* host = hp.host.empty() ? nullptr : hp.host.c_str();
  if (int rc = ::getaddrinfo(host, port.c_str(), &hints, &res); rc != 0)
    throw TransportError("cannot resolve '" + hp.host + "': " + ::gai_strerror(rc));
  return std::unique_ptr<addrinfo, AddrInfoDeleter>(res);
}

void send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_text("send"));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Buffered LF-delimited reader over a socket.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  // nullopt on orderly EOF with no pending data.
  std::optional<std::string> read_line(int timeout_ms) {
    for (;;) {
      if (auto nl = buf_.find('\n'); nl != std::string::npos) {
        std::string line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return line;
      }
      if (buf_.size() > kMaxLine) throw TransportError("line too long");
      pollfd p{fd_, POLLIN, 0};
      int rc = ::poll(&p, 1, timeout_ms);
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw TransportError(errno_text("poll"));
      }
      if (rc == 0) throw TransportError("timed out waiting for reply");
      char chunk[8192];
      ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(errno_text("recv"));
      }
      if (n == 0) {
        if (buf_.empty()) return std::nullopt;
        throw TransportError("connection closed mid-line");
      }
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buf_;
};

}  // namespace

HostPort parse_host_port(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0)
    throw std::invalid_argument("expected host:port, got '" + std::string(text) + "'");
  std::string_view port = text.substr(colon + 1);
  unsigned v = 0;
  auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), v);
  if (port.empty() || ec != std::errc{} || ptr != port.data() + port.size() || v > 65535)
    throw std::invalid_argument("bad port '" + std::string(port) + "'");
  return HostPort{std::string(text.substr(0, colon)), static_cast<std::uint16_t>(v)};
}

Exchange tcp_exchange(const HostPort& server, Seconds timeout) {
  auto ai = resolve(server, false);
  Fd fd(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
  if (!fd) throw TransportError(errno_text("socket"));
  if (::connect(fd.get(), ai->ai_addr, ai->ai_addrlen) != 0)
    throw TransportError(errno_text("connect"));
  int one = 1;
  ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

  struct Conn {
    Fd fd;
    LineReader reader;
    int timeout_ms;
  };
  const int timeout_ms = static_cast<int>(std::max(1.0, timeout.count() * 1000.0));
  auto conn = std::make_shared<Conn>(Conn{std::move(fd), LineReader(-1), timeout_ms});
  conn->reader = LineReader(conn->fd.get());
  return [conn](const std::string& line) {
    send_all(conn->fd.get(), line + "\n");
    auto reply = conn->reader.read_line(conn->timeout_ms);
    if (!reply) throw TransportError("server closed the connection");
    return *reply;
  };
}

Exchange loopback_exchange(PolicyServer& server) {
  return [&server](const std::string& line) { return server.handle_line(line); };
}

struct SyncListener::Impl {
  PolicyServer& server;
  Fd listen_fd;
  std::atomic<bool> stopping{false};
  std::mutex mu;
  std::list<std::thread> clients;
  std::list<int> client_fds;
  std::thread acceptor;

  explicit Impl(PolicyServer& s) : server(s) {}

  void serve(int fd) {
    LineReader reader(fd);
    try {
      while (!stopping) {
        std::optional<std::string> line;
        try {
          line = reader.read_line(200);
        } catch (const TransportError& e) {
          if (std::string_view(e.what()).starts_with("timed out")) continue;
          if (std::string_view(e.what()) == "line too long") {
            Message err = Message::error("BAD_FRAME", "line too long");
            send_all(fd, encode_message(err) + "\n");
          }
          break;
        }
        if (!line) break;
        send_all(fd, server.handle_line(*line) + "\n");
      }
    } catch (const TransportError&) {
      // peer went away
    }
    std::lock_guard lock(mu);
    client_fds.remove(fd);
    ::close(fd);
  }

  void accept_loop() {
    while (!stopping) {
      pollfd p{listen_fd.get(), POLLIN, 0};
      int rc = ::poll(&p, 1, 100);
      if (rc <= 0) continue;
      int fd = ::accept(listen_fd.get(), nullptr, nullptr);
      if (fd < 0) continue;
      std::lock_guard lock(mu);
      client_fds.push_back(fd);
      clients.emplace_back([this, fd] { serve(fd); });
    }
  }
};

SyncListener::SyncListener(PolicyServer& server, const HostPort& listen)
    : impl_(std::make_unique<Impl>(server)) {
  auto ai = resolve(listen, true);
  Fd fd(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
  if (!fd) throw TransportError(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd.get(), ai->ai_addr, ai->ai_addrlen) != 0)
    throw TransportError(errno_text("bind"));
  if (::listen(fd.get(), 64) != 0) throw TransportError(errno_text("listen"));
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  impl_->listen_fd = std::move(fd);
  impl_->acceptor = std::thread([impl = impl_.get()] { impl->accept_loop(); });
}

SyncListener::~SyncListener() { stop(); }

void SyncListener::stop() {
  if (!impl_ || impl_->stopping.exchange(true)) return;
  if (impl_->acceptor.joinable()) impl_->acceptor.join();
  {
    std::lock_guard lock(impl_->mu);
    for (int fd : impl_->client_fds) ::shutdown(fd, SHUT_RDWR);
  }
  // No new clients can appear once the acceptor has exited.
  for (auto& t : impl_->clients) t.join();
  impl_->listen_fd.reset();
}

}  // namespace picofw
