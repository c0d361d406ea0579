#include "exmap/replay.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <unordered_map>

#include <json.hpp>

#include "exmap/tcp.hpp"

namespace exmap::stream {

namespace {

using Clock = std::chrono::steady_clock;

double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = p * double(values.size() - 1);
  const std::size_t lo = std::size_t(pos);
  const std::size_t hi = std::min(values.size() - 1, lo + 1);
  const double frac = pos - double(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

bool valid_update(const wire::GaussUpdate& u, std::size_t expected_count) {
  if (u.gaussians.size() != expected_count) return false;
  for (const auto& g : u.gaussians) {
    double norm2 = 0.0;
    for (float v : g.rotation_wxyz) norm2 += double(v) * double(v);
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-4) return false;
    for (float v : g.scale)
      if (!(v > 0.f) || !std::isfinite(v)) return false;
    for (float v : g.position)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

LatencyReport replay(const std::vector<data::BlendshapeFrame>& trace,
                     const std::string& address, std::uint16_t port,
                     const ReplayOptions& options) {
  LatencyReport report;
  if (trace.empty()) return report;

  net::Socket sock = net::connect(address, port);
  sock.write_all(wire::encode_message(wire::Hello{}));

  wire::MessageBuffer inbox;
  std::uint8_t chunk[256 * 1024];
  auto read_into = [&](int timeout_ms) -> bool {
    const long n = sock.read_some(chunk, sizeof(chunk), timeout_ms);
    if (n <= 0) return false;
    inbox.append(chunk, std::size_t(n));
    return true;
  };

  // Handshake: server HELLO, then INIT_STATIC.
  bool got_hello = false;
  std::size_t n_gaussians = 0;
  bool got_init = false;
  const auto handshake_deadline = Clock::now() + std::chrono::seconds(15);
  while (!got_init) {
    auto r = inbox.next();
    if (r.status == wire::DecodeStatus::kOk) {
      if (auto* h = std::get_if<wire::Hello>(&r.message)) {
        if (h->protocol_version != wire::kProtocolVersion)
          throw Error("version-mismatch", "server speaks a different protocol version");
        got_hello = true;
      } else if (auto* init = std::get_if<wire::InitStatic>(&r.message)) {
        if (!got_hello) throw Error("connection", "INIT_STATIC before HELLO");
        n_gaussians = init->gaussians.size();
        got_init = true;
      } else {
        throw Error("connection", "unexpected message during handshake");
      }
      continue;
    }
    if (r.status == wire::DecodeStatus::kError)
      throw Error("connection", "handshake decode error: " + r.error);
    if (Clock::now() > handshake_deadline)
      throw Error("connection", "handshake timeout");
    read_into(200);
  }

  std::unordered_map<std::uint64_t, Clock::time_point> send_times;
  send_times.reserve(trace.size());
  std::uint64_t last_received_id = 0;
  bool any_received = false;

  auto handle_message = [&](const wire::Message& msg) {
    if (const auto* u = std::get_if<wire::GaussUpdate>(&msg)) {
      const auto now = Clock::now();
      auto it = send_times.find(u->frame_id);
      const bool known = it != send_times.end();
      const bool ordered = !any_received || u->frame_id > last_received_id;
      const bool ok = known && ordered && valid_update(*u, n_gaussians);
      if (ok) {
        report.latencies_us.push_back(
            std::chrono::duration<double, std::micro>(now - it->second).count());
        ++report.received;
        last_received_id = u->frame_id;
        any_received = true;
        // Digest over the dynamic payload so byte-level determinism can be
        // compared across runs.
        for (const auto& g : u->gaussians) {
          report.payload_digest = fnv1a64(g.position.data(), 12, report.payload_digest);
          report.payload_digest = fnv1a64(g.rotation_wxyz.data(), 16, report.payload_digest);
          report.payload_digest = fnv1a64(g.scale.data(), 12, report.payload_digest);
        }
        send_times.erase(it);
      } else {
        ++report.validation_failures;
      }
    } else if (const auto* s = std::get_if<wire::Stats>(&msg)) {
      report.server_stats_json = s->json;
    }
  };

  auto drain = [&](int timeout_ms) {
    for (;;) {
      auto r = inbox.next();
      if (r.status == wire::DecodeStatus::kOk) {
        handle_message(r.message);
        continue;
      }
      if (r.status == wire::DecodeStatus::kError)
        throw Error("connection", "decode error: " + r.error);
      if (!read_into(timeout_ms)) return;
      timeout_ms = 0;  // consume whatever is already queued, then return
    }
  };

  const auto start = Clock::now();
  const double period_us = 1e6 / options.rate_hz;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto due = start + std::chrono::microseconds(std::int64_t(period_us * double(i)));
    for (;;) {
      const auto now = Clock::now();
      if (now >= due) break;
      const int wait_ms = int(
          std::chrono::duration_cast<std::chrono::milliseconds>(due - now).count());
      drain(std::max(0, wait_ms));
      if (Clock::now() >= due) break;
    }
    wire::BsFrame bs;
    bs.frame_id = std::uint64_t(i) + 1;  // wire ids are the send sequence
    bs.timestamp_us = trace[i].timestamp_us;
    for (int c = 0; c < kBlendshapeCount; ++c) bs.coeffs[c] = float(trace[i].coeffs(c));
    send_times.emplace(bs.frame_id, Clock::now());
    sock.write_all(wire::encode_message(bs));
    ++report.sent;
    drain(0);
  }

  // Collect stragglers, then the server-side stage timings.
  const auto grace_end = Clock::now() + std::chrono::milliseconds(options.receive_grace_ms);
  while (!send_times.empty() && Clock::now() < grace_end) drain(50);
  if (options.request_stats) {
    sock.write_all(wire::encode_message(wire::StatsReq{}));
    const auto stats_end = Clock::now() + std::chrono::seconds(2);
    while (report.server_stats_json.empty() && Clock::now() < stats_end) drain(50);
  }

  report.dropped = report.sent - report.received;
  report.median_us = percentile(report.latencies_us, 0.5);
  report.p95_us = percentile(report.latencies_us, 0.95);
  report.max_us =
      report.latencies_us.empty()
          ? 0.0
          : *std::max_element(report.latencies_us.begin(), report.latencies_us.end());
  return report;
}

std::string LatencyReport::to_json() const {
  nlohmann::ordered_json j;
  j["sent"] = sent;
  j["received"] = received;
  j["dropped"] = dropped;
  j["median_us"] = median_us;
  j["p95_us"] = p95_us;
  j["max_us"] = max_us;
  j["validation_failures"] = validation_failures;
  j["payload_digest"] = payload_digest;
  if (!server_stats_json.empty()) {
    auto server = nlohmann::ordered_json::parse(server_stats_json, nullptr, false);
    if (!server.is_discarded()) j["server"] = std::move(server);
  }
  j["latencies_us"] = latencies_us;
  return j.dump(2);
}

}  // namespace exmap::stream
