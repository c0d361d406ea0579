#include <doctest.h>

#include <thread>

#include "exmap/replay.hpp"
#include "exmap/server.hpp"

using namespace exmap;

namespace {

wire::Message random_message(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 5);
  std::uniform_real_distribution<float> unit(0.f, 1.f);
  std::uniform_int_distribution<int> small(0, 20);
  switch (pick(rng)) {
    case 0: {
      wire::Hello m;
      m.protocol_version = std::uint8_t(small(rng));
      return m;
    }
    case 1: {
      wire::InitStatic m;
      m.sh_degree = std::uint32_t(small(rng) % 3);
      const std::size_t sh_n = 3u * (m.sh_degree + 1) * (m.sh_degree + 1);
      m.gaussians.resize(std::size_t(small(rng)));
      for (auto& g : m.gaussians) {
        g.face_id = std::uint32_t(small(rng));
        for (auto& v : g.bary) v = unit(rng);
        for (auto& v : g.offset) v = unit(rng);
        for (auto& v : g.rot_wxyz) v = unit(rng);
        for (auto& v : g.scale) v = unit(rng) + 0.1f;
        g.opacity = unit(rng);
        g.sh.resize(sh_n);
        for (auto& v : g.sh) v = unit(rng);
      }
      return m;
    }
    case 2: {
      wire::BsFrame m;
      m.frame_id = rng();
      m.timestamp_us = rng();
      for (auto& v : m.coeffs) v = unit(rng);
      return m;
    }
    case 3: {
      wire::GaussUpdate m;
      m.frame_id = rng();
      m.gaussians.resize(std::size_t(small(rng)));
      for (auto& g : m.gaussians) {
        for (auto& v : g.position) v = unit(rng);
        for (auto& v : g.rotation_wxyz) v = unit(rng);
        for (auto& v : g.scale) v = unit(rng) + 0.1f;
      }
      return m;
    }
    case 4:
      return wire::StatsReq{};
    default: {
      wire::Stats m;
      const int n = small(rng);
      for (int i = 0; i < n; ++i) m.json.push_back(char('a' + small(rng)));
      return m;
    }
  }
}

stream::PipelineAssets tiny_assets(std::uint64_t seed = 3, int v = 120, int gaussians = 60) {
  stream::PipelineAssets assets;
  assets.alignment = bda::AffineAlignment::identity();
  assets.epm = mappers::EpmModel(nn::EpmConfig{}, seed);
  assets.model = flame::synth_model(seed, v, kExprCount);
  const flame::Mesh rest{assets.model.template_vertices, assets.model.faces};
  assets.cloud = rig::synth_cloud(seed, rest, std::size_t(gaussians), 0);
  return assets;
}

std::vector<data::BlendshapeFrame> tiny_trace(int n, std::uint64_t seed = 5) {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(seed, 0.3, 1), 1, n);
  std::vector<data::BlendshapeFrame> trace;
  for (auto& s : samples) trace.push_back(s.frame);
  return trace;
}

}  // namespace

TEST_CASE("BS_FRAME message layout is pinned") {
  wire::BsFrame frame{};
  const auto bytes = wire::encode_message(frame);
  CHECK(bytes.size() == 230);  // 10 header + 8 + 8 + 51 * 4
  std::uint32_t payload_len;
  std::memcpy(&payload_len, bytes.data() + 6, 4);
  CHECK(payload_len == 220);
  CHECK(bytes[0] == 'O');
  CHECK(bytes[1] == 'F');
  CHECK(bytes[2] == 'R');
  CHECK(bytes[3] == 'A');
  CHECK(bytes[4] == 1);  // protocol version
}

TEST_CASE("GAUSS_UPDATE payload length follows the record count") {
  wire::GaussUpdate update;
  update.gaussians.resize(3);
  const auto bytes = wire::encode_message(update);
  std::uint32_t payload_len;
  std::memcpy(&payload_len, bytes.data() + 6, 4);
  CHECK(payload_len == 8 + 4 + 3 * 40);
}

TEST_CASE("encode/decode round trips random messages") {
  auto rng = make_rng(1001);
  for (int i = 0; i < 2000; ++i) {
    const wire::Message msg = random_message(rng);
    const auto bytes = wire::encode_message(msg);
    const auto result = wire::decode_message(bytes);
    REQUIRE(result.status == wire::DecodeStatus::kOk);
    CHECK(result.consumed == bytes.size());
    CHECK(result.message == msg);
  }
}

TEST_CASE("decode reports need-more on truncated frames") {
  const auto bytes = wire::encode_message(wire::BsFrame{});
  for (std::size_t cut : {std::size_t(0), std::size_t(5), std::size_t(12), bytes.size() - 1}) {
    const auto result =
        wire::decode_message(std::span<const std::uint8_t>(bytes.data(), cut));
    CHECK(result.status == wire::DecodeStatus::kNeedMore);
  }
}

TEST_CASE("decode rejects malformed headers and bodies") {
  auto bytes = wire::encode_message(wire::BsFrame{});

  auto corrupted = bytes;
  corrupted[0] = 'X';
  CHECK(wire::decode_message(corrupted).status == wire::DecodeStatus::kError);

  corrupted = bytes;
  corrupted[4] = 9;  // version
  CHECK(wire::decode_message(corrupted).status == wire::DecodeStatus::kError);

  corrupted = bytes;
  corrupted[5] = 99;  // type
  CHECK(wire::decode_message(corrupted).status == wire::DecodeStatus::kError);

  corrupted = bytes;
  corrupted[6] -= 1;  // BS_FRAME length must be exact
  corrupted.pop_back();
  CHECK(wire::decode_message(corrupted).status == wire::DecodeStatus::kError);
}

TEST_CASE("decode survives a fuzz barrage") {
  auto rng = make_rng(0xf022);
  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_int_distribution<int> len(0, 300);
  std::vector<std::uint8_t> buf;
  int ok = 0, need_more = 0, errors = 0;
  for (int i = 0; i < 100000; ++i) {
    if (i % 3 == 0) {
      // Mutated valid message.
      buf = wire::encode_message(random_message(rng));
      const int flips = 1 + (i % 7);
      for (int k = 0; k < flips && !buf.empty(); ++k)
        buf[std::size_t(rng() % buf.size())] = std::uint8_t(byte(rng));
    } else {
      buf.resize(std::size_t(len(rng)));
      for (auto& b : buf) b = std::uint8_t(byte(rng));
    }
    const auto result = wire::decode_message(buf);
    switch (result.status) {
      case wire::DecodeStatus::kOk: ++ok; break;
      case wire::DecodeStatus::kNeedMore: ++need_more; break;
      case wire::DecodeStatus::kError: ++errors; break;
    }
  }
  CHECK(ok + need_more + errors == 100000);
  CHECK(errors > 0);
}

TEST_CASE("message buffer reassembles byte-dribbled streams") {
  auto rng = make_rng(77);
  std::vector<wire::Message> sent;
  std::vector<std::uint8_t> stream_bytes;
  for (int i = 0; i < 20; ++i) {
    sent.push_back(random_message(rng));
    const auto bytes = wire::encode_message(sent.back());
    stream_bytes.insert(stream_bytes.end(), bytes.begin(), bytes.end());
  }
  wire::MessageBuffer buffer;
  std::vector<wire::Message> got;
  for (std::size_t i = 0; i < stream_bytes.size(); ++i) {
    buffer.append(&stream_bytes[i], 1);
    for (;;) {
      auto r = buffer.next();
      if (r.status != wire::DecodeStatus::kOk) {
        REQUIRE(r.status == wire::DecodeStatus::kNeedMore);
        break;
      }
      got.push_back(std::move(r.message));
    }
  }
  REQUIRE(got.size() == sent.size());
  for (std::size_t i = 0; i < sent.size(); ++i) CHECK(got[i] == sent[i]);
}

TEST_CASE("the mailbox keeps only the newest pending frame") {
  stream::LatestMailbox<int> mailbox;
  mailbox.put(1);  // pipeline busy with an earlier frame
  mailbox.put(2);
  CHECK(mailbox.dropped() == 1);
  auto got = mailbox.take();
  REQUIRE(got.has_value());
  CHECK(*got == 2);  // the older pending frame was the one dropped
  mailbox.close();
  CHECK(!mailbox.take().has_value());
}

TEST_CASE("assets validation refuses mismatched artifacts") {
  auto assets = tiny_assets();
  CHECK_NOTHROW(assets.validate());

  auto bad = tiny_assets();
  bad.cloud.statics[0].face_id = 1u << 20;
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = tiny_assets();
  bad.offsets = mia::AvatarOffsets::zeros(7);  // wrong basis size
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("server round trip over loopback") {
  stream::Server server(tiny_assets(), {});
  server.start();

  const auto trace = tiny_trace(120);
  stream::ReplayOptions options;
  options.rate_hz = 240.0;
  const auto report = stream::replay(trace, "127.0.0.1", server.port(), options);

  CHECK(report.sent == 120);
  CHECK(report.received >= 110);  // a few may be shed at this rate
  CHECK(report.validation_failures == 0);
  CHECK(report.received + report.dropped == report.sent);
  CHECK(report.median_us > 0.0);
  CHECK(!report.server_stats_json.empty());
  CHECK(report.server_stats_json.find("\"stage_us\"") != std::string::npos);

  server.stop();
}

TEST_CASE("drop-free replays are byte-deterministic") {
  stream::Server server(tiny_assets(7, 90, 40), {});
  server.start();

  const auto trace = tiny_trace(40, 9);
  stream::ReplayOptions options;
  options.rate_hz = 50.0;  // far below capacity
  const auto a = stream::replay(trace, "127.0.0.1", server.port(), options);
  const auto b = stream::replay(trace, "127.0.0.1", server.port(), options);
  REQUIRE(a.received == trace.size());
  REQUIRE(b.received == trace.size());
  CHECK(a.dropped == 0);
  CHECK(a.payload_digest == b.payload_digest);

  server.stop();
}

TEST_CASE("empty traces produce an empty report") {
  const auto report = stream::replay({}, "127.0.0.1", 1, {});
  CHECK(report.sent == 0);
  CHECK(report.received == 0);
  CHECK(report.latencies_us.empty());
}

TEST_CASE("replay fails cleanly when the server is unreachable") {
  const auto trace = tiny_trace(3);
  try {
    stream::replay(trace, "127.0.0.1", 1, {});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.cls() == "connection");
  }
}

TEST_CASE("an idle client receives statics and then silence") {
  stream::Server server(tiny_assets(11, 60, 16), {});
  server.start();

  net::Socket sock = net::connect("127.0.0.1", server.port());
  sock.write_all(wire::encode_message(wire::Hello{}));
  wire::MessageBuffer inbox;
  std::uint8_t chunk[16384];
  bool got_hello = false, got_init = false;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (!(got_hello && got_init) && std::chrono::steady_clock::now() < deadline) {
    auto r = inbox.next();
    if (r.status == wire::DecodeStatus::kOk) {
      got_hello = got_hello || std::holds_alternative<wire::Hello>(r.message);
      got_init = got_init || std::holds_alternative<wire::InitStatic>(r.message);
      continue;
    }
    const long n = sock.read_some(chunk, sizeof(chunk), 100);
    if (n > 0) inbox.append(chunk, std::size_t(n));
  }
  CHECK(got_hello);
  CHECK(got_init);

  // No traffic without frames: the connection stays silent.
  const long n = sock.read_some(chunk, sizeof(chunk), 300);
  CHECK(n == -1);  // timeout

  server.stop();
}

TEST_CASE("a malformed message closes the session with an error response") {
  stream::Server server(tiny_assets(13, 60, 16), {});
  server.start();

  net::Socket sock = net::connect("127.0.0.1", server.port());
  sock.write_all(wire::encode_message(wire::Hello{}));
  std::vector<std::uint8_t> garbage = {'O', 'F', 'R', 'A', 9, 9, 9, 9, 9, 9};
  sock.write_all(garbage);

  wire::MessageBuffer inbox;
  std::uint8_t chunk[16384];
  bool got_error_stats = false;
  bool closed = false;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (!closed && std::chrono::steady_clock::now() < deadline) {
    auto r = inbox.next();
    if (r.status == wire::DecodeStatus::kOk) {
      if (auto* s = std::get_if<wire::Stats>(&r.message))
        got_error_stats = s->json.find("error") != std::string::npos;
      continue;
    }
    const long n = sock.read_some(chunk, sizeof(chunk), 100);
    if (n == 0) closed = true;
    if (n > 0) inbox.append(chunk, std::size_t(n));
  }
  CHECK(closed);
  CHECK(got_error_stats);

  server.stop();
}
