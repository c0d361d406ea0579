#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "exmap/bda.hpp"
#include "exmap/mappers.hpp"
#include "exmap/mia.hpp"
#include "exmap/rig.hpp"
#include "exmap/tcp.hpp"
#include "exmap/wire.hpp"

// Streaming server: per connection one reader, one compute pipeline and one
// writer, joined by a latest-wins mailbox of capacity 1 (the only lossy
// hand-off). Each blendshape frame runs alignment -> mapper -> deform ->
// rig update -> encode, and the matching GAUSS_UPDATE echoes its frame id.

namespace exmap::stream {

/// Latest-wins mailbox of capacity 1: a put into an occupied slot replaces
/// the pending value and counts it as dropped.
template <typename T>
class LatestMailbox {
 public:
  void put(T value) {
    std::lock_guard lock(mu_);
    if (slot_.has_value()) ++dropped_;
    slot_ = std::move(value);
    cv_.notify_one();
  }
  std::optional<T> take() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return slot_.has_value() || closed_; });
    if (!slot_.has_value()) return std::nullopt;
    std::optional<T> out = std::move(slot_);
    slot_.reset();
    return out;
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }
  std::uint64_t dropped() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::optional<T> slot_;
  std::uint64_t dropped_ = 0;
  bool closed_ = false;
};

struct PipelineAssets {
  bda::AffineAlignment alignment;
  mappers::EpmModel epm;
  flame::FlameLiteModel model;
  rig::GaussianCloud cloud;
  std::optional<mia::AvatarOffsets> offsets;

  /// Refuses mismatched artifacts (wrong mapper dims, cloud bound to a
  /// different topology, offsets for another basis size).
  void validate() const;

  static PipelineAssets load(const std::string& alignment_path, const std::string& epm_path,
                             const std::string& model_path, const std::string& cloud_path,
                             const std::string& offsets_path /* empty = none */);
};

struct ServerConfig {
  std::string listen_address = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks an ephemeral port
};

struct StageTotals {
  std::uint64_t frames = 0;
  std::uint64_t dropped = 0;
  double bda_us = 0, epm_us = 0, deform_us = 0, rig_us = 0, encode_us = 0;  // sums
  std::string to_json() const;  // means per stage
};

class Server {
 public:
  Server(PipelineAssets assets, ServerConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  std::uint16_t port() const { return listener_.port(); }
  void start();  // accept loop on a background thread
  void stop();
  void run();    // blocking accept loop (for the CLI)

 private:
  void accept_loop();
  void session(net::Socket client);

  PipelineAssets assets_;
  ServerConfig config_;
  net::Listener listener_;
  std::thread accept_thread_;
  std::atomic<bool> stopping_{false};
};

}  // namespace exmap::stream
