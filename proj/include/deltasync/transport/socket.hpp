#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <string>
#include <thread>
#include <utility>

#include "deltasync/common.hpp"

namespace deltasync::transport {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }

  static Endpoint parse(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw Error(ErrorCode::invalid_argument, "endpoint needs host:port: " + s);
    Endpoint e;
    e.host = s.substr(0, colon);
    const int port = std::stoi(s.substr(colon + 1));
    if (port < 0 || port > 65535) throw Error(ErrorCode::invalid_argument, "bad port in " + s);
    e.port = static_cast<std::uint16_t>(port);
    return e;
  }
};

// Owning TCP socket. Reads and writes are blocking and complete fully.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  static Socket connect(const Endpoint& ep, Duration timeout = std::chrono::seconds(5)) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(ep.host.c_str(), std::to_string(ep.port).c_str(), &hints, &res) != 0 || !res)
      throw Error(ErrorCode::peer_unreachable, "cannot resolve " + ep.str());
    const auto deadline = Clock::now() + timeout;
    int last_errno = 0;
    while (true) {
      int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
      if (fd < 0) {
        ::freeaddrinfo(res);
        throw Error(ErrorCode::peer_unreachable, "socket(): " + std::string(std::strerror(errno)));
      }
      if (::connect(fd, res->ai_addr, res->ai_addrlen) == 0) {
        ::freeaddrinfo(res);
        Socket s(fd);
        s.tune();
        return s;
      }
      last_errno = errno;
      ::close(fd);
      if (Clock::now() >= deadline) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    ::freeaddrinfo(res);
    throw Error(ErrorCode::peer_unreachable, "connect " + ep.str() + ": " + std::strerror(last_errno));
  }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  void write_all(ByteSpan data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const auto n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorCode::transfer_aborted, "send: " + std::string(std::strerror(errno)));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  // False on orderly EOF before the first byte; throws on EOF mid-read.
  bool read_exact(std::uint8_t* out, std::size_t n) {
    std::size_t off = 0;
    while (off < n) {
      const auto r = ::recv(fd_, out + off, n - off, 0);
      if (r == 0) {
        if (off == 0) return false;
        throw Error(ErrorCode::transfer_aborted, "connection closed mid-frame");
      }
      if (r < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorCode::transfer_aborted, "recv: " + std::string(std::strerror(errno)));
      }
      off += static_cast<std::size_t>(r);
    }
    return true;
  }

  // Wakes any thread blocked in read_exact on this socket.
  void shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  void tune() {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  int fd_ = -1;
};

class Listener {
 public:
  Listener() = default;

  // Port 0 picks an ephemeral port; see endpoint().
  explicit Listener(const Endpoint& ep) {
    fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw Error(ErrorCode::storage_failure, "socket(): " + std::string(std::strerror(errno)));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) addr.sin_addr.s_addr = htonl(INADDR_ANY);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 128) != 0) {
      const std::string msg = std::strerror(errno);
      ::close(fd_);
      fd_ = -1;
      throw Error(ErrorCode::peer_unreachable, "listen on " + ep.str() + ": " + msg);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    endpoint_ = ep;
    endpoint_.port = ntohs(addr.sin_port);
    if (endpoint_.host == "0.0.0.0") endpoint_.host = "127.0.0.1";
  }
  ~Listener() { close(); }
  Listener(Listener&& o) noexcept : fd_(std::exchange(o.fd_, -1)), endpoint_(o.endpoint_) {}
  Listener& operator=(Listener&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
      endpoint_ = o.endpoint_;
    }
    return *this;
  }

  const Endpoint& endpoint() const { return endpoint_; }

  // Waits up to `timeout`; returns an invalid socket on timeout or after close().
  Socket accept(Duration timeout) {
    if (fd_ < 0) return {};
    pollfd p{fd_, POLLIN, 0};
    const int ms = static_cast<int>(std::chrono::duration_cast<std::chrono::milliseconds>(timeout).count());
    if (::poll(&p, 1, ms) <= 0 || !(p.revents & POLLIN)) return {};
    const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) return {};
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Socket(fd);
  }

  void close() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  Endpoint endpoint_;
};

}  // namespace deltasync::transport
