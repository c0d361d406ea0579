#include "exmap/wire.hpp"

#include <cstring>

namespace exmap::wire {

namespace {

constexpr char kMagic[4] = {'O', 'F', 'R', 'A'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto n = out.size();
  out.resize(n + 4);
  std::memcpy(out.data() + n, &v, 4);
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  const auto n = out.size();
  out.resize(n + 8);
  std::memcpy(out.data() + n, &v, 8);
}
void put_f32(std::vector<std::uint8_t>& out, float v) {
  const auto n = out.size();
  out.resize(n + 4);
  std::memcpy(out.data() + n, &v, 4);
}

class Cursor {
 public:
  Cursor(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  bool ok() const { return ok_; }
  std::size_t remaining() const { return n_ - pos_; }
  std::uint8_t u8() { return read<std::uint8_t>(); }
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::uint64_t u64() { return read<std::uint64_t>(); }
  float f32() { return read<float>(); }

 private:
  template <typename T>
  T read() {
    T v{};
    if (pos_ + sizeof(T) > n_) {
      ok_ = false;
      return v;
    }
    std::memcpy(&v, p_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  bool ok_ = true;
};

std::size_t static_record_size(std::uint32_t sh_degree) {
  return 60 + std::size_t(3) * (sh_degree + 1) * (sh_degree + 1) * 4;
}

DecodeResult fail(const std::string& why) {
  DecodeResult r;
  r.status = DecodeStatus::kError;
  r.error = why;
  return r;
}

}  // namespace

std::vector<std::uint8_t> encode_message(const Message& msg) {
  std::vector<std::uint8_t> payload;
  MsgType type{};
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Hello>) {
          type = MsgType::kHello;
          payload.push_back(m.protocol_version);
        } else if constexpr (std::is_same_v<T, InitStatic>) {
          type = MsgType::kInitStatic;
          put_u32(payload, std::uint32_t(m.gaussians.size()));
          put_u32(payload, m.sh_degree);
          const std::size_t sh_n = 3u * (m.sh_degree + 1) * (m.sh_degree + 1);
          for (const auto& g : m.gaussians) {
            if (g.sh.size() != sh_n)
              throw Error("bad-input", "SH count does not match sh_degree");
            put_u32(payload, g.face_id);
            for (float v : g.bary) put_f32(payload, v);
            for (float v : g.offset) put_f32(payload, v);
            for (float v : g.rot_wxyz) put_f32(payload, v);
            for (float v : g.scale) put_f32(payload, v);
            put_f32(payload, g.opacity);
            for (float v : g.sh) put_f32(payload, v);
          }
        } else if constexpr (std::is_same_v<T, BsFrame>) {
          type = MsgType::kBsFrame;
          put_u64(payload, m.frame_id);
          put_u64(payload, m.timestamp_us);
          for (float v : m.coeffs) put_f32(payload, v);
        } else if constexpr (std::is_same_v<T, GaussUpdate>) {
          type = MsgType::kGaussUpdate;
          put_u64(payload, m.frame_id);
          put_u32(payload, std::uint32_t(m.gaussians.size()));
          for (const auto& g : m.gaussians) {
            for (float v : g.position) put_f32(payload, v);
            for (float v : g.rotation_wxyz) put_f32(payload, v);
            for (float v : g.scale) put_f32(payload, v);
          }
        } else if constexpr (std::is_same_v<T, StatsReq>) {
          type = MsgType::kStatsReq;
        } else if constexpr (std::is_same_v<T, Stats>) {
          type = MsgType::kStats;
          payload.insert(payload.end(), m.json.begin(), m.json.end());
        }
      },
      msg);

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kProtocolVersion);
  out.push_back(std::uint8_t(type));
  put_u32(out, std::uint32_t(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

DecodeResult decode_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    DecodeResult r;
    r.status = DecodeStatus::kNeedMore;
    return r;
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) return fail("bad magic");
  const std::uint8_t version = bytes[4];
  if (version != kProtocolVersion)
    return fail("unsupported protocol version " + std::to_string(version));
  const std::uint8_t type = bytes[5];
  std::uint32_t payload_len;
  std::memcpy(&payload_len, bytes.data() + 6, 4);
  if (payload_len > kMaxPayload) return fail("payload length exceeds limit");
  if (bytes.size() < kHeaderSize + payload_len) {
    DecodeResult r;
    r.status = DecodeStatus::kNeedMore;
    return r;
  }

  Cursor c(bytes.data() + kHeaderSize, payload_len);
  DecodeResult r;
  r.consumed = kHeaderSize + payload_len;
  r.status = DecodeStatus::kOk;

  switch (MsgType(type)) {
    case MsgType::kHello: {
      if (payload_len != 1) return fail("HELLO payload must be 1 byte");
      Hello m;
      m.protocol_version = c.u8();
      r.message = m;
      break;
    }
    case MsgType::kInitStatic: {
      if (payload_len < 8) return fail("INIT_STATIC payload too short");
      InitStatic m;
      const std::uint32_t n = c.u32();
      m.sh_degree = c.u32();
      if (m.sh_degree > 10) return fail("implausible sh_degree");
      const std::size_t rec = static_record_size(m.sh_degree);
      if (std::uint64_t(8) + std::uint64_t(n) * rec != payload_len)
        return fail("INIT_STATIC length mismatch");
      m.gaussians.resize(n);
      const std::size_t sh_n = 3u * (m.sh_degree + 1) * (m.sh_degree + 1);
      for (auto& g : m.gaussians) {
        g.face_id = c.u32();
        for (auto& v : g.bary) v = c.f32();
        for (auto& v : g.offset) v = c.f32();
        for (auto& v : g.rot_wxyz) v = c.f32();
        for (auto& v : g.scale) v = c.f32();
        g.opacity = c.f32();
        g.sh.resize(sh_n);
        for (auto& v : g.sh) v = c.f32();
      }
      if (!c.ok()) return fail("INIT_STATIC payload truncated");
      r.message = std::move(m);
      break;
    }
    case MsgType::kBsFrame: {
      if (payload_len != 16 + 4 * std::size_t(kBlendshapeCount))
        return fail("BS_FRAME length mismatch");
      BsFrame m;
      m.frame_id = c.u64();
      m.timestamp_us = c.u64();
      for (auto& v : m.coeffs) v = c.f32();
      r.message = m;
      break;
    }
    case MsgType::kGaussUpdate: {
      if (payload_len < 12) return fail("GAUSS_UPDATE payload too short");
      GaussUpdate m;
      m.frame_id = c.u64();
      const std::uint32_t n = c.u32();
      if (std::uint64_t(12) + std::uint64_t(n) * kGaussRecordSize != payload_len)
        return fail("GAUSS_UPDATE length mismatch");
      m.gaussians.resize(n);
      for (auto& g : m.gaussians) {
        for (auto& v : g.position) v = c.f32();
        for (auto& v : g.rotation_wxyz) v = c.f32();
        for (auto& v : g.scale) v = c.f32();
      }
      if (!c.ok()) return fail("GAUSS_UPDATE payload truncated");
      r.message = std::move(m);
      break;
    }
    case MsgType::kStatsReq: {
      if (payload_len != 0) return fail("STATS_REQ carries no payload");
      r.message = StatsReq{};
      break;
    }
    case MsgType::kStats: {
      Stats m;
      m.json.assign(reinterpret_cast<const char*>(bytes.data() + kHeaderSize), payload_len);
      r.message = std::move(m);
      break;
    }
    default:
      return fail("unknown message type " + std::to_string(type));
  }
  return r;
}

void MessageBuffer::append(const std::uint8_t* data, std::size_t n) {
  if (offset_ > 0 && offset_ == buf_.size()) {
    buf_.clear();
    offset_ = 0;
  }
  buf_.insert(buf_.end(), data, data + n);
}

DecodeResult MessageBuffer::next() {
  DecodeResult r = decode_message(
      std::span<const std::uint8_t>(buf_.data() + offset_, buf_.size() - offset_));
  if (r.status == DecodeStatus::kOk) {
    offset_ += r.consumed;
    if (offset_ > (1u << 20) && offset_ == buf_.size()) {
      buf_.clear();
      offset_ = 0;
    }
  }
  return r;
}

}  // namespace exmap::wire
