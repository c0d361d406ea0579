#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "exmap/common.hpp"

// Minimal POSIX TCP wrapper: blocking sockets with poll-based timeouts,
// enough for one upstream sensing connection and one consumer per session.

namespace exmap::net {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  void close();
  /// Unblocks any thread stuck in send/recv on this socket.
  void shutdown();

  /// Blocks up to timeout_ms (-1 = forever); returns bytes read, 0 on orderly
  /// shutdown, -1 on timeout.
  long read_some(void* buf, std::size_t n, int timeout_ms = -1);
  void write_all(std::span<const std::uint8_t> bytes);
  void set_nodelay();

 private:
  int fd_ = -1;
};

class Listener {
 public:
  Listener(const std::string& address, std::uint16_t port);
  ~Listener();
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  std::uint16_t port() const { return port_; }
  /// Waits up to timeout_ms for a connection; invalid socket on timeout.
  Socket accept(int timeout_ms);
  void close();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

Socket connect(const std::string& address, std::uint16_t port, int timeout_ms = 5000);

}  // namespace exmap::net
