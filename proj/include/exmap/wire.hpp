#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "exmap/common.hpp"

// Binary wire protocol. Framing: magic "OFRA" | version u8 = 1 | msg_type u8
// | payload_len u32 LE | payload. Decoding never throws on arbitrary bytes;
// it reports need-more or a structured error instead.

namespace exmap::wire {

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 10;
inline constexpr std::size_t kMaxPayload = 64u << 20;
inline constexpr std::size_t kGaussRecordSize = 40;

enum class MsgType : std::uint8_t {
  kHello = 1,
  kInitStatic = 2,
  kBsFrame = 3,
  kGaussUpdate = 4,
  kStatsReq = 5,
  kStats = 6,
};

struct Hello {
  std::uint8_t protocol_version = kProtocolVersion;
  bool operator==(const Hello&) const = default;
};

struct WireStatic {
  std::uint32_t face_id = 0;
  std::array<float, 3> bary{};
  std::array<float, 3> offset{};
  std::array<float, 4> rot_wxyz{1.f, 0.f, 0.f, 0.f};
  std::array<float, 3> scale{1.f, 1.f, 1.f};
  float opacity = 1.f;
  std::vector<float> sh;
  bool operator==(const WireStatic&) const = default;
};

struct InitStatic {
  std::uint32_t sh_degree = 0;
  std::vector<WireStatic> gaussians;
  bool operator==(const InitStatic&) const = default;
};

struct BsFrame {
  std::uint64_t frame_id = 0;
  std::uint64_t timestamp_us = 0;
  std::array<float, kBlendshapeCount> coeffs{};
  bool operator==(const BsFrame&) const = default;
};

struct GaussRecord {
  std::array<float, 3> position{};
  std::array<float, 4> rotation_wxyz{1.f, 0.f, 0.f, 0.f};
  std::array<float, 3> scale{1.f, 1.f, 1.f};
  bool operator==(const GaussRecord&) const = default;
};

struct GaussUpdate {
  std::uint64_t frame_id = 0;
  std::vector<GaussRecord> gaussians;
  bool operator==(const GaussUpdate&) const = default;
};

struct StatsReq {
  bool operator==(const StatsReq&) const = default;
};

struct Stats {
  std::string json;
  bool operator==(const Stats&) const = default;
};

using Message = std::variant<Hello, InitStatic, BsFrame, GaussUpdate, StatsReq, Stats>;

std::vector<std::uint8_t> encode_message(const Message& msg);

enum class DecodeStatus { kOk, kNeedMore, kError };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::kError;
  Message message;
  std::size_t consumed = 0;  // bytes consumed when kOk
  std::string error;         // set when kError
};

DecodeResult decode_message(std::span<const std::uint8_t> bytes);

/// Reassembles messages from a byte stream; next() yields kNeedMore until a
/// whole frame is buffered.
class MessageBuffer {
 public:
  void append(const std::uint8_t* data, std::size_t n);
  DecodeResult next();

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t offset_ = 0;
};

}  // namespace exmap::wire
