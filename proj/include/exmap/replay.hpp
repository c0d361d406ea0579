#pragma once

#include <string>
#include <vector>

#include "exmap/dataset.hpp"
#include "exmap/wire.hpp"

// Headless replay client: paces a blendshape trace at a fixed rate, measures
// the round trip per frame id, and validates every received update.

namespace exmap::stream {

struct LatencyReport {
  std::vector<double> latencies_us;  // one entry per received frame
  std::uint64_t sent = 0;
  std::uint64_t received = 0;
  std::uint64_t dropped = 0;  // sent - received
  double median_us = 0.0, p95_us = 0.0, max_us = 0.0;
  std::uint64_t validation_failures = 0;
  std::uint64_t payload_digest = 0;  // FNV-1a over update payloads, in order
  std::string server_stats_json;

  std::string to_json() const;
};

struct ReplayOptions {
  double rate_hz = 60.0;
  int receive_grace_ms = 3000;  // wait after the last send
  bool request_stats = true;
};

LatencyReport replay(const std::vector<data::BlendshapeFrame>& trace,
                     const std::string& address, std::uint16_t port,
                     const ReplayOptions& options = {});

}  // namespace exmap::stream
