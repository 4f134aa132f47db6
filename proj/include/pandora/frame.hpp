#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace pandora::range {

// Single multiplexed connection between replay client and range server.
// Frame: magic 0x50, channel byte, u32 little-endian length, payload.
// Channels 0 (stdin) and 2 (negotiation) flow client->server; 1 (stdout),
// 2 (negotiation replies) and 3 (verdict) flow server->client.

inline constexpr uint8_t kFrameMagic = 0x50;
inline constexpr uint32_t kMaxFramePayload = 65536;
inline constexpr size_t kFrameHeaderSize = 6;

enum class Channel : uint8_t {
  Stdin = 0,
  Stdout = 1,
  Negotiation = 2,
  Verdict = 3,
};

struct Frame {
  Channel channel = Channel::Stdin;
  std::vector<uint8_t> payload;

  bool operator==(const Frame&) const = default;
};

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TimeoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<uint8_t> encode_frame(const Frame& f);

/// Decodes one frame from the front of `bytes`. Returns nullopt when more
/// bytes are needed; sets `consumed` on success. Throws ProtocolError for a
/// bad magic, unknown channel or oversized length.
std::optional<Frame> decode_frame(std::span<const uint8_t> bytes, size_t& consumed);

/// One endpoint of a framed duplex connection.
class FrameConn {
 public:
  virtual ~FrameConn() = default;
  /// Blocks for the next frame; returns false on orderly end of stream.
  virtual bool read_frame(Frame& out) = 0;
  virtual void write_frame(const Frame& f) = 0;
  /// Signals end of stream to the peer; reads stay possible.
  virtual void close_write() = 0;
};

/// FrameConn over a connected TCP socket. Takes ownership of the fd.
/// A zero timeout means block indefinitely; otherwise reads and writes that
/// stall longer throw TimeoutError.
class TcpFrameConn final : public FrameConn {
 public:
  explicit TcpFrameConn(int fd, std::chrono::milliseconds timeout = {});
  ~TcpFrameConn() override;
  TcpFrameConn(const TcpFrameConn&) = delete;
  TcpFrameConn& operator=(const TcpFrameConn&) = delete;

  bool read_frame(Frame& out) override;
  void write_frame(const Frame& f) override;
  void close_write() override;

 private:
  int fd_;
  std::vector<uint8_t> buf_;
};

/// In-process duplex pair used by tests and local exploit verification.
class PipeFrameConn;
struct PipePair {
  std::unique_ptr<PipeFrameConn> a;
  std::unique_ptr<PipeFrameConn> b;
};
PipePair make_pipe_pair();

class PipeFrameConn final : public FrameConn {
 public:
  bool read_frame(Frame& out) override;
  void write_frame(const Frame& f) override;
  void close_write() override;

 private:
  friend PipePair make_pipe_pair();
  struct Shared {
    std::mutex mutex;
    std::condition_variable cv;
    std::deque<Frame> to_a, to_b;
    bool a_closed = false;  // a's write side closed
    bool b_closed = false;
  };
  PipeFrameConn(std::shared_ptr<Shared> shared, bool is_a)
      : shared_(std::move(shared)), is_a_(is_a) {}

  std::shared_ptr<Shared> shared_;
  bool is_a_;
};

}  // namespace pandora::range
