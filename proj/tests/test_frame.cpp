#include <doctest.h>

#include <thread>

#include "pandora/frame.hpp"
#include "pandora/util.hpp"

using namespace pandora;
using range::Channel;
using range::Frame;

TEST_CASE("frames round-trip through the codec") {
  util::SplitMix64 rng(0xF8A3E);
  for (int i = 0; i < 500; ++i) {
    Frame f;
    f.channel = static_cast<Channel>(rng.below(4));
    f.payload.resize(rng.below(200));
    for (auto& b : f.payload) b = uint8_t(rng.below(256));
    const auto bytes = range::encode_frame(f);
    size_t consumed = 0;
    const auto decoded = range::decode_frame(bytes, consumed);
    REQUIRE(decoded.has_value());
    CHECK(consumed == bytes.size());
    CHECK(*decoded == f);
  }
}

TEST_CASE("partial frames ask for more bytes") {
  Frame f;
  f.channel = Channel::Stdout;
  f.payload = {1, 2, 3, 4, 5};
  const auto bytes = range::encode_frame(f);
  for (size_t cut = 0; cut < bytes.size(); ++cut) {
    size_t consumed = 0;
    const auto decoded =
        range::decode_frame(std::span(bytes.data(), cut), consumed);
    CHECK_FALSE(decoded.has_value());
  }
}

TEST_CASE("bad magic and oversized frames are protocol errors") {
  std::vector<uint8_t> bad = {0x51, 0, 0, 0, 0, 0};
  size_t consumed = 0;
  CHECK_THROWS_AS(range::decode_frame(bad, consumed), range::ProtocolError);

  std::vector<uint8_t> oversized = {0x50, 0};
  util::wr_u32(oversized, range::kMaxFramePayload + 1);
  CHECK_THROWS_AS(range::decode_frame(oversized, consumed), range::ProtocolError);

  std::vector<uint8_t> badchan = {0x50, 9, 0, 0, 0, 0};
  CHECK_THROWS_AS(range::decode_frame(badchan, consumed), range::ProtocolError);

  Frame f;
  f.payload.resize(range::kMaxFramePayload + 1);
  CHECK_THROWS_AS(range::encode_frame(f), range::ProtocolError);
}

TEST_CASE("pipe pairs deliver frames in order and honor close") {
  range::PipePair pair = range::make_pipe_pair();
  std::thread producer([&] {
    for (int i = 0; i < 10; ++i) {
      Frame f;
      f.channel = Channel::Stdin;
      f.payload = {uint8_t(i)};
      pair.a->write_frame(f);
    }
    pair.a->close_write();
  });
  Frame f;
  for (int i = 0; i < 10; ++i) {
    REQUIRE(pair.b->read_frame(f));
    CHECK(f.payload == std::vector<uint8_t>{uint8_t(i)});
  }
  CHECK_FALSE(pair.b->read_frame(f));
  producer.join();
}
