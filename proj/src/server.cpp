#include "exmap/server.hpp"

#include <chrono>

#include <json.hpp>

namespace exmap::stream {

namespace {

using Clock = std::chrono::steady_clock;

double micros_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
}

wire::WireStatic to_wire(const rig::GaussianStatic& g) {
  wire::WireStatic w;
  w.face_id = g.face_id;
  for (int i = 0; i < 3; ++i) {
    w.bary[i] = float(g.bary(i));
    w.offset[i] = float(g.local_offset(i));
    w.scale[i] = float(g.local_scale(i));
  }
  w.rot_wxyz = {float(g.local_rot.w()), float(g.local_rot.x()), float(g.local_rot.y()),
                float(g.local_rot.z())};
  w.opacity = float(g.opacity);
  w.sh = g.sh;
  return w;
}

/// Bounded FIFO hand-off to the writer; lossless, blocking on both sides.
class ByteQueue {
 public:
  explicit ByteQueue(std::size_t capacity) : capacity_(capacity) {}
  /// Bounded wait: a peer that stops draining must not wedge the pipeline.
  bool push(std::vector<std::uint8_t> bytes) {
    std::unique_lock lock(mu_);
    if (!cv_space_.wait_for(lock, std::chrono::seconds(5),
                            [&] { return q_.size() < capacity_ || closed_; }))
      return false;
    if (closed_) return false;
    q_.push_back(std::move(bytes));
    cv_items_.notify_one();
    return true;
  }
  std::optional<std::vector<std::uint8_t>> pop() {
    std::unique_lock lock(mu_);
    cv_items_.wait(lock, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    auto out = std::move(q_.front());
    q_.pop_front();
    cv_space_.notify_one();
    return out;
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_items_.notify_all();
    cv_space_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_items_, cv_space_;
  std::deque<std::vector<std::uint8_t>> q_;
  std::size_t capacity_;
  bool closed_ = false;
};

}  // namespace

void PipelineAssets::validate() const {
  if (!alignment.finite()) throw Error("bad-input", "alignment is not finite");
  const auto& cfg = epm.config();
  if (cfg.input_dim != kBlendshapeCount || cfg.output_dim != kParamCount)
    throw Error("dimension-mismatch", "mapper must map 51 -> 68");
  model.validate();
  cloud.validate(model.face_count());
  if (offsets) {
    if (offsets->d_e.size() != model.expr_dim() ||
        offsets->d_p.size() != kPoseFeatureCount)
      throw Error("dimension-mismatch", "offsets do not match the model basis");
    if (!offsets->d_e.allFinite() || !offsets->d_p.allFinite())
      throw Error("bad-input", "offsets must be finite");
  }
}

PipelineAssets PipelineAssets::load(const std::string& alignment_path,
                                    const std::string& epm_path,
                                    const std::string& model_path,
                                    const std::string& cloud_path,
                                    const std::string& offsets_path) {
  PipelineAssets a{bda::load_alignment(alignment_path), mappers::load_epm(epm_path),
                   flame::load_model(model_path), rig::load_cloud(cloud_path), std::nullopt};
  if (!offsets_path.empty()) a.offsets = mia::load_offsets(offsets_path);
  a.validate();
  return a;
}

std::string StageTotals::to_json() const {
  const double n = frames > 0 ? double(frames) : 1.0;
  nlohmann::ordered_json j;
  j["frames"] = frames;
  j["dropped"] = dropped;
  j["stage_us"] = {{"bda", bda_us / n},
                   {"epm", epm_us / n},
                   {"deform", deform_us / n},
                   {"rig", rig_us / n},
                   {"encode", encode_us / n}};
  return j.dump();
}

Server::Server(PipelineAssets assets, ServerConfig config)
    : assets_(std::move(assets)),
      config_(std::move(config)),
      listener_(config_.listen_address, config_.port) {
  assets_.validate();
  assets_.epm.set_mode(nn::Mode::kEval);
}

Server::~Server() { stop(); }

void Server::start() {
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void Server::run() { accept_loop(); }

void Server::stop() {
  stopping_.store(true);
  listener_.close();
  if (accept_thread_.joinable()) accept_thread_.join();
}

void Server::accept_loop() {
  while (!stopping_.load()) {
    net::Socket client = listener_.accept(200);
    if (!client.valid()) continue;
    try {
      session(std::move(client));
    } catch (const Error&) {
      // Session-level failures close the connection; the server keeps serving.
    }
  }
}

void Server::session(net::Socket client) {
  const Eigen::VectorXd zero_de =
      assets_.offsets ? assets_.offsets->d_e : Eigen::VectorXd::Zero(assets_.model.expr_dim());
  const Eigen::VectorXd zero_dp =
      assets_.offsets ? assets_.offsets->d_p
                      : Eigen::VectorXd::Zero(kPoseFeatureCount);

  // Handshake: client HELLO first, then our HELLO and the one-time statics.
  wire::MessageBuffer inbox;
  std::uint8_t chunk[64 * 1024];
  const auto deadline = Clock::now() + std::chrono::seconds(5);
  for (;;) {
    auto r = inbox.next();
    if (r.status == wire::DecodeStatus::kOk) {
      if (!std::holds_alternative<wire::Hello>(r.message)) return;  // protocol breach
      break;
    }
    if (r.status == wire::DecodeStatus::kError) return;
    if (Clock::now() > deadline) return;
    const long n = client.read_some(chunk, sizeof(chunk), 200);
    if (n == 0) return;
    if (n > 0) inbox.append(chunk, std::size_t(n));
  }
  client.write_all(wire::encode_message(wire::Hello{}));

  wire::InitStatic init;
  init.sh_degree = std::uint32_t(assets_.cloud.sh_degree);
  init.gaussians.reserve(assets_.cloud.size());
  for (const auto& g : assets_.cloud.statics) init.gaussians.push_back(to_wire(g));
  client.write_all(wire::encode_message(std::move(init)));

  LatestMailbox<wire::BsFrame> mailbox;
  ByteQueue outbox(8);
  StageTotals totals;
  std::mutex totals_mu;

  // Rest-pose dynamics seed the degenerate-face fallback.
  std::vector<rig::GaussianDynamic> last_dynamics;
  {
    const flame::Mesh rest =
        flame::deform(assets_.model, data::ExpressionParams{}, zero_de, zero_dp);
    last_dynamics = rig::update_gaussians(assets_.cloud, rest).dynamics;
  }

  std::thread pipeline([&] {
    std::uint64_t last_id = 0;
    bool first = true;
    data::BlendshapeFrame frame;
    while (auto item = mailbox.take()) {
      const wire::BsFrame& bs = *item;
      if (!first && bs.frame_id <= last_id) continue;  // stale or replayed id
      first = false;
      last_id = bs.frame_id;

      frame.frame_id = bs.frame_id;
      frame.timestamp_us = bs.timestamp_us;
      for (int i = 0; i < kBlendshapeCount; ++i) frame.coeffs(i) = double(bs.coeffs[i]);

      auto t0 = Clock::now();
      const BlendshapeVec aligned = bda::apply_bda(assets_.alignment, frame.coeffs);
      const double t_bda = micros_since(t0);

      t0 = Clock::now();
      const data::ExpressionParams q = mappers::epm_forward(assets_.epm, aligned);
      const double t_epm = micros_since(t0);

      t0 = Clock::now();
      const flame::Mesh mesh = flame::deform(assets_.model, q, zero_de, zero_dp);
      const double t_deform = micros_since(t0);

      t0 = Clock::now();
      auto update = rig::update_gaussians(assets_.cloud, mesh, &last_dynamics);
      last_dynamics = update.dynamics;
      const double t_rig = micros_since(t0);

      t0 = Clock::now();
      wire::GaussUpdate out;
      out.frame_id = bs.frame_id;
      out.gaussians.resize(update.dynamics.size());
      for (std::size_t i = 0; i < update.dynamics.size(); ++i) {
        const auto& d = update.dynamics[i];
        auto& g = out.gaussians[i];
        for (int c = 0; c < 3; ++c) {
          g.position[c] = float(d.position(c));
          g.scale[c] = float(d.scale(c));
        }
        g.rotation_wxyz = {float(d.rotation.w()), float(d.rotation.x()),
                           float(d.rotation.y()), float(d.rotation.z())};
      }
      auto bytes = wire::encode_message(std::move(out));
      const double t_encode = micros_since(t0);

      {
        std::lock_guard lock(totals_mu);
        ++totals.frames;
        totals.bda_us += t_bda;
        totals.epm_us += t_epm;
        totals.deform_us += t_deform;
        totals.rig_us += t_rig;
        totals.encode_us += t_encode;
      }
      if (!outbox.push(std::move(bytes))) break;
    }
  });

  std::atomic<bool> writer_done{false};
  std::thread writer([&] {
    try {
      while (auto bytes = outbox.pop()) client.write_all(*bytes);
    } catch (const Error&) {
      // Peer went away; reader will notice and tear the session down.
    }
    outbox.close();  // a dead writer must not leave the pipeline blocked on push
    writer_done.store(true);
  });

  // This thread is the reader.
  bool protocol_error = false;
  for (;;) {
    auto r = inbox.next();
    if (r.status == wire::DecodeStatus::kOk) {
      if (auto* bs = std::get_if<wire::BsFrame>(&r.message)) {
        mailbox.put(*bs);
      } else if (std::holds_alternative<wire::StatsReq>(r.message)) {
        StageTotals snapshot;
        {
          std::lock_guard lock(totals_mu);
          snapshot = totals;
        }
        snapshot.dropped = mailbox.dropped();
        outbox.push(wire::encode_message(wire::Stats{snapshot.to_json()}));
      } else {
        protocol_error = true;  // unexpected message mid-session
        break;
      }
      continue;
    }
    if (r.status == wire::DecodeStatus::kError) {
      protocol_error = true;
      break;
    }
    if (stopping_.load()) break;
    const long n = client.read_some(chunk, sizeof(chunk), 100);
    if (n == 0) break;  // orderly shutdown
    if (n > 0) inbox.append(chunk, std::size_t(n));
  }

  if (protocol_error) {
    try {
      nlohmann::ordered_json err{{"error", "malformed message"}};
      outbox.push(wire::encode_message(wire::Stats{err.dump()}));
    } catch (...) {
    }
  }
  mailbox.close();
  pipeline.join();
  outbox.close();
  // Let the writer flush pending updates (and the error response) for a
  // bounded time, then force any stuck send to fail.
  for (int i = 0; i < 100 && !writer_done.load(); ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  if (!writer_done.load()) client.shutdown();
  writer.join();
}

}  // namespace exmap::stream
