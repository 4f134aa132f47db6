#include "pandora/frame.hpp"

#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "pandora/util.hpp"

namespace pandora::range {

std::vector<uint8_t> encode_frame(const Frame& f) {
  if (f.payload.size() > kMaxFramePayload)
    throw ProtocolError("frame payload exceeds 65536 bytes");
  std::vector<uint8_t> out;
  out.reserve(kFrameHeaderSize + f.payload.size());
  out.push_back(kFrameMagic);
  out.push_back(static_cast<uint8_t>(f.channel));
  util::wr_u32(out, static_cast<uint32_t>(f.payload.size()));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

std::optional<Frame> decode_frame(std::span<const uint8_t> bytes, size_t& consumed) {
  if (bytes.size() < kFrameHeaderSize) return std::nullopt;
  if (bytes[0] != kFrameMagic) throw ProtocolError("bad frame magic");
  if (bytes[1] > static_cast<uint8_t>(Channel::Verdict))
    throw ProtocolError("unknown frame channel");
  const uint32_t length = util::rd_u32(&bytes[2]);
  if (length > kMaxFramePayload) throw ProtocolError("oversized frame");
  if (bytes.size() < kFrameHeaderSize + length) return std::nullopt;
  Frame f;
  f.channel = static_cast<Channel>(bytes[1]);
  f.payload.assign(bytes.begin() + kFrameHeaderSize,
                   bytes.begin() + kFrameHeaderSize + length);
  consumed = kFrameHeaderSize + length;
  return f;
}

// --- TCP ------------------------------------------------------------------

TcpFrameConn::TcpFrameConn(int fd, std::chrono::milliseconds timeout) : fd_(fd) {
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  if (timeout.count() > 0) {
    struct timeval tv;
    tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
  }
}

TcpFrameConn::~TcpFrameConn() {
  if (fd_ >= 0) ::close(fd_);
}

bool TcpFrameConn::read_frame(Frame& out) {
  while (true) {
    size_t consumed = 0;
    if (auto f = decode_frame(buf_, consumed)) {
      buf_.erase(buf_.begin(), buf_.begin() + consumed);
      out = std::move(*f);
      return true;
    }
    uint8_t chunk[4096];
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n == 0) {
      if (!buf_.empty()) throw ProtocolError("connection closed mid-frame");
      return false;
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK)
        throw TimeoutError("timed out waiting for a frame");
      throw ProtocolError(std::string("recv: ") + std::strerror(errno));
    }
    buf_.insert(buf_.end(), chunk, chunk + n);
  }
}

void TcpFrameConn::write_frame(const Frame& f) {
  const std::vector<uint8_t> bytes = encode_frame(f);
  size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n =
        ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK)
        throw TimeoutError("timed out writing a frame");
      throw ProtocolError(std::string("send: ") + std::strerror(errno));
    }
    off += static_cast<size_t>(n);
  }
}

void TcpFrameConn::close_write() { ::shutdown(fd_, SHUT_WR); }

// --- in-process pipe --------------------------------------------------------

PipePair make_pipe_pair() {
  auto shared = std::make_shared<PipeFrameConn::Shared>();
  PipePair pair;
  pair.a.reset(new PipeFrameConn(shared, true));
  pair.b.reset(new PipeFrameConn(shared, false));
  return pair;
}

bool PipeFrameConn::read_frame(Frame& out) {
  std::unique_lock lock(shared_->mutex);
  auto& queue = is_a_ ? shared_->to_a : shared_->to_b;
  const bool& peer_closed = is_a_ ? shared_->b_closed : shared_->a_closed;
  shared_->cv.wait(lock, [&] { return !queue.empty() || peer_closed; });
  if (queue.empty()) return false;
  out = std::move(queue.front());
  queue.pop_front();
  return true;
}

void PipeFrameConn::write_frame(const Frame& f) {
  if (f.payload.size() > kMaxFramePayload)
    throw ProtocolError("frame payload exceeds 65536 bytes");
  {
    std::lock_guard lock(shared_->mutex);
    auto& queue = is_a_ ? shared_->to_b : shared_->to_a;
    queue.push_back(f);
  }
  shared_->cv.notify_all();
}

void PipeFrameConn::close_write() {
  {
    std::lock_guard lock(shared_->mutex);
    (is_a_ ? shared_->a_closed : shared_->b_closed) = true;
  }
  shared_->cv.notify_all();
}

}  // namespace pandora::range
