#include "pandora/range_server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cstring>

namespace pandora::range {

namespace {

struct SessionProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mutable per-session negotiation state shared between the io bridge and the
// judging epilogue.
struct SessionState {
  util::SplitMix64 nego_stream;
  NegoKind nego = NegoKind::None;
  pov::Type1Negotiation type1{};
  pov::Type2Negotiation type2{};
  std::optional<std::vector<uint8_t>> submission;
};

// Bridges VM fds 0/1 onto the framed connection. Frames are pulled lazily,
// one at a time, only when the VM blocks on stdin; negotiation frames are
// answered inline as they are encountered.
class SessionIo final : public svm::VmIo {
 public:
  SessionIo(FrameConn& conn, SessionState& state) : conn_(conn), state_(state) {}

  uint32_t transmit(std::span<const uint8_t> data) override {
    size_t off = 0;
    while (off < data.size()) {
      const size_t n = std::min<size_t>(data.size() - off, kMaxFramePayload);
      Frame f;
      f.channel = Channel::Stdout;
      f.payload.assign(data.begin() + off, data.begin() + off + n);
      conn_.write_frame(f);
      off += n;
    }
    return static_cast<uint32_t>(data.size());
  }

  uint32_t receive(std::span<uint8_t> out) override {
    if (out.empty()) return 0;
    while (stdin_buf_.empty() && !stdin_closed_) pump_one();
    if (stdin_buf_.empty()) return 0;
    const size_t n = std::min(out.size(), stdin_buf_.size());
    std::copy_n(stdin_buf_.begin(), n, out.begin());
    stdin_buf_.erase(stdin_buf_.begin(), stdin_buf_.begin() + n);
    return static_cast<uint32_t>(n);
  }

  void wait_stdin() override {
    while (stdin_buf_.empty() && !stdin_closed_) pump_one();
  }

  // Reads exactly one frame (or EOF) and dispatches it.
  void pump_one() {
    Frame f;
    if (!conn_.read_frame(f)) {
      stdin_closed_ = true;
      return;
    }
    dispatch(f);
  }

  void dispatch(const Frame& f) {
    switch (f.channel) {
      case Channel::Stdin:
        stdin_buf_.insert(stdin_buf_.end(), f.payload.begin(), f.payload.end());
        break;
      case Channel::Negotiation:
        handle_negotiation(f.payload);
        break;
      default:
        throw SessionProtocolError("client sent a server-only channel");
    }
  }

  void handle_negotiation(const std::vector<uint8_t>& payload) {
    if (state_.nego == NegoKind::Type2 && !state_.submission) {
      // Second channel-2 message of a type 2 session is the submission.
      if (payload.size() > svm::kSecretSize)
        throw SessionProtocolError("oversized type 2 submission");
      state_.submission = payload;
      return;
    }
    if (state_.nego != NegoKind::None)
      throw SessionProtocolError("double negotiation");

    pov::NegotiationRequest req;
    try {
      req = pov::decode_request(payload);
    } catch (const pov::PovError& e) {
      throw SessionProtocolError(e.what());
    }
    if (const auto* t1 = std::get_if<pov::Type1Request>(&req)) {
      const pov::Type1Response resp = negotiate_type1(*t1, state_.nego_stream);
      state_.nego = NegoKind::Type1;
      state_.type1 = {t1->ipmask, t1->regmask, t1->regnum, resp.ipvalue,
                      resp.regvalue};
      Frame reply;
      reply.channel = Channel::Negotiation;
      reply.payload = pov::encode_type1_response(resp);
      conn_.write_frame(reply);
    } else {
      const pov::Type2Response resp = negotiate_type2();
      state_.nego = NegoKind::Type2;
      state_.type2 = {resp.addr, resp.size, resp.length};
      Frame reply;
      reply.channel = Channel::Negotiation;
      reply.payload = pov::encode_type2_response(resp);
      conn_.write_frame(reply);
    }
  }

  bool stdin_closed() const { return stdin_closed_; }

 private:
  FrameConn& conn_;
  SessionState& state_;
  std::vector<uint8_t> stdin_buf_;
  bool stdin_closed_ = false;
};

}  // namespace

pov::Type1Response negotiate_type1(const pov::Type1Request& req,
                                   util::SplitMix64& stream) {
  if (std::popcount(req.ipmask) < int(pov::kMinMaskPopcount))
    throw NegotiationRejected("ipmask popcount below " +
                              std::to_string(pov::kMinMaskPopcount));
  if (std::popcount(req.regmask) < int(pov::kMinMaskPopcount))
    throw NegotiationRejected("regmask popcount below " +
                              std::to_string(pov::kMinMaskPopcount));
  if (req.regnum >= uint32_t(isa::kRegisterCount))
    throw NegotiationRejected("regnum out of range");
  pov::Type1Response resp;
  resp.ipvalue = stream.next_u32();
  resp.regvalue = stream.next_u32();
  return resp;
}

pov::Type2Response negotiate_type2() {
  return pov::Type2Response{svm::kSecretVaddr, svm::kSecretSize, 4};
}

bool judge_type1(const std::optional<svm::FaultRecord>& fault,
                 const pov::Type1Negotiation& n) {
  if (!fault) return false;
  if (n.regnum >= uint32_t(isa::kRegisterCount)) return false;
  const bool ip_ok = (fault->fault_ip & n.ipmask) == (n.ipvalue & n.ipmask);
  const bool reg_ok = (fault->regs[n.regnum] & n.regmask) == (n.regvalue & n.regmask);
  return ip_ok && reg_ok;
}

bool judge_type2(std::span<const uint8_t> submission,
                 std::span<const uint8_t> secret, const pov::Type2Negotiation& n) {
  if (submission.size() != n.length || submission.empty()) return false;
  const size_t window = std::min<size_t>(secret.size(), n.size);
  if (submission.size() > window) return false;
  const auto begin = secret.begin();
  const auto end = secret.begin() + window;
  return std::search(begin, end, submission.begin(), submission.end()) != end;
}

std::string format_verdict_report(const Verdict& v, std::string_view name) {
  std::string out;
  out += "# " + std::string(name) + "\n";
  switch (v.nego) {
    case NegoKind::None:
      out += "# negotiation type: none\n";
      break;
    case NegoKind::Type1:
      out += "# negotiation type: 1\n";
      out += "# type 1 masks: " + util::hex32(v.type1.ipmask) + " " +
             util::hex32(v.type1.regmask) + "\n";
      out += "# type 1 pov: " + util::hex32(v.type1.ipvalue) + " " +
             util::hex32(v.type1.regvalue) + " " + std::to_string(v.type1.regnum) +
             "\n";
      break;
    case NegoKind::Type2:
      out += "# negotiation type: 2\n";
      out += "# type 2 pov: " + util::hex32(v.type2.addr) + " " +
             util::hex32(v.type2.size) + " " + std::to_string(v.type2.length) + "\n";
      break;
  }
  return out;
}

// --- verdict codec ----------------------------------------------------------

std::vector<uint8_t> encode_verdict(const Verdict& v) {
  std::vector<uint8_t> out;
  out.push_back(v.crashed ? 1 : 0);
  out.push_back(static_cast<uint8_t>(v.success));
  out.push_back(v.fault ? 1 : 0);
  out.push_back(v.fault ? static_cast<uint8_t>(v.fault->reason) : 0);
  util::wr_u32(out, v.fault ? v.fault->fault_ip : 0);
  for (int i = 0; i < 8; ++i) util::wr_u32(out, v.fault ? v.fault->regs[i] : 0);
  out.push_back(static_cast<uint8_t>(v.nego));
  out.push_back(0);
  out.push_back(0);
  out.push_back(0);
  uint32_t a = 0, b = 0, c = 0, d = 0, e = 0;
  if (v.nego == NegoKind::Type1) {
    a = v.type1.ipmask;
    b = v.type1.regmask;
    c = v.type1.regnum;
    d = v.type1.ipvalue;
    e = v.type1.regvalue;
  } else if (v.nego == NegoKind::Type2) {
    a = v.type2.addr;
    b = v.type2.size;
    c = v.type2.length;
  }
  util::wr_u32(out, a);
  util::wr_u32(out, b);
  util::wr_u32(out, c);
  util::wr_u32(out, d);
  util::wr_u32(out, e);
  util::wr_u32(out, static_cast<uint32_t>(v.note.size()));
  out.insert(out.end(), v.note.begin(), v.note.end());
  return out;
}

Verdict decode_verdict(std::span<const uint8_t> bytes) {
  constexpr size_t kFixed = 4 + 4 + 32 + 4 + 20 + 4;
  if (bytes.size() < kFixed) throw ProtocolError("verdict payload too short");
  Verdict v;
  v.crashed = bytes[0] != 0;
  if (bytes[1] > 2) throw ProtocolError("bad verdict success kind");
  v.success = static_cast<SuccessKind>(bytes[1]);
  const bool has_fault = bytes[2] != 0;
  if (has_fault) {
    svm::FaultRecord f;
    if (bytes[3] < 1 || bytes[3] > 5) throw ProtocolError("bad fault reason");
    f.reason = static_cast<svm::FaultReason>(bytes[3]);
    f.fault_ip = util::rd_u32(&bytes[4]);
    f.site_ip = f.fault_ip;  // site address is not part of the wire verdict
    for (int i = 0; i < 8; ++i) f.regs[i] = util::rd_u32(&bytes[8 + 4 * i]);
    v.fault = f;
  }
  if (bytes[40] > 2) throw ProtocolError("bad negotiation kind");
  v.nego = static_cast<NegoKind>(bytes[40]);
  const uint32_t a = util::rd_u32(&bytes[44]);
  const uint32_t b = util::rd_u32(&bytes[48]);
  const uint32_t c = util::rd_u32(&bytes[52]);
  const uint32_t d = util::rd_u32(&bytes[56]);
  const uint32_t e = util::rd_u32(&bytes[60]);
  if (v.nego == NegoKind::Type1) v.type1 = {a, b, c, d, e};
  if (v.nego == NegoKind::Type2) v.type2 = {a, b, c};
  const uint32_t note_len = util::rd_u32(&bytes[64]);
  if (bytes.size() != kFixed + note_len)
    throw ProtocolError("verdict payload length mismatch");
  v.note.assign(bytes.begin() + kFixed, bytes.end());
  return v;
}

// --- session ----------------------------------------------------------------

Verdict run_session(const pbf::PandoraBinary& binary, FrameConn& conn,
                    uint64_t server_seed, uint64_t vm_seed,
                    const SessionOptions& options) {
  util::SplitMix64 root(server_seed);
  const uint64_t secret_seed = root.next();
  const uint64_t nego_seed = root.next();
  const std::vector<uint8_t> secret = svm::make_secret(secret_seed);

  SessionState state;
  state.nego_stream = util::SplitMix64(nego_seed);
  SessionIo io(conn, state);

  Verdict verdict;
  try {
    svm::RunOptions run_options;
    run_options.budget = options.budget;
    const svm::ExecOutcome outcome = svm::run(binary, vm_seed, secret, io, run_options);

    // A type 2 client may still need to submit after the binary is gone.
    if (state.nego == NegoKind::Type2 && !state.submission) {
      Frame f;
      while (!state.submission && conn.read_frame(f)) {
        if (f.channel == Channel::Stdin) continue;  // binary is gone; discard
        if (f.channel == Channel::Negotiation) {
          io.handle_negotiation(f.payload);
          continue;
        }
        throw SessionProtocolError("client sent a server-only channel");
      }
    }

    verdict.crashed = outcome.kind == svm::ExecOutcome::Kind::Faulted;
    verdict.fault = outcome.fault;
    verdict.nego = state.nego;
    verdict.type1 = state.type1;
    verdict.type2 = state.type2;
    if (state.nego == NegoKind::Type1) {
      verdict.success = judge_type1(verdict.fault, state.type1)
                            ? SuccessKind::Type1
                            : SuccessKind::None;
    } else if (state.nego == NegoKind::Type2) {
      static const std::vector<uint8_t> empty;
      verdict.success =
          judge_type2(state.submission ? *state.submission : empty, secret,
                      state.type2)
              ? SuccessKind::Type2
              : SuccessKind::None;
    }
  } catch (const SessionProtocolError& e) {
    verdict = Verdict{};
    verdict.nego = state.nego;
    verdict.type1 = state.type1;
    verdict.type2 = state.type2;
    verdict.note = std::string("protocol error: ") + e.what();
  } catch (const NegotiationRejected& e) {
    verdict = Verdict{};
    verdict.note = std::string("negotiation rejected: ") + e.what();
  } catch (const ProtocolError& e) {
    verdict = Verdict{};
    verdict.nego = state.nego;
    verdict.note = std::string("protocol error: ") + e.what();
  } catch (const svm::MapConflict& e) {
    verdict = Verdict{};
    verdict.note = std::string("load error: ") + e.what();
  }

  try {
    Frame vf;
    vf.channel = Channel::Verdict;
    vf.payload = encode_verdict(verdict);
    conn.write_frame(vf);
    conn.close_write();
    // Drain whatever the client still has in flight so the verdict is not
    // lost to an abortive close on the socket path.
    Frame f;
    while (conn.read_frame(f)) {
    }
  } catch (const std::exception&) {
    // Connection already gone; the verdict still stands for the caller.
  }
  return verdict;
}

// --- TCP listener -------------------------------------------------------------

std::pair<uint64_t, uint64_t> session_seeds(uint64_t server_seed, uint64_t index) {
  util::SplitMix64 stream(server_seed);
  uint64_t srv = 0, vm = 0;
  for (uint64_t i = 0; i <= index; ++i) {
    srv = stream.next();
    vm = stream.next();
  }
  return {srv, vm};
}

RangeServer::RangeServer(pbf::PandoraBinary binary, Options options)
    : binary_(std::move(binary)), options_(options) {}

RangeServer::~RangeServer() { stop(); }

uint16_t RangeServer::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(options_.port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("bind() failed on port " + std::to_string(options_.port));
  }
  if (::listen(listen_fd_, 16) < 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("listen() failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  accept_thread_ = std::thread([this] { accept_loop(); });
  return port_;
}

void RangeServer::accept_loop() {
  while (!stopping_.load()) {
    sockaddr_in peer{};
    socklen_t len = sizeof(peer);
    const int fd = ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&peer), &len);
    if (fd < 0) {
      if (stopping_.load()) break;
      if (errno == EINTR) continue;
      break;
    }
    const uint64_t index = session_counter_.fetch_add(1);
    std::lock_guard lock(workers_mutex_);
    workers_.emplace_back([this, fd, index] {
      const auto [srv_seed, vm_seed] = session_seeds(options_.server_seed, index);
      TcpFrameConn conn(fd, std::chrono::milliseconds(30000));
      SessionOptions session_options;
      session_options.budget = options_.budget;
      try {
        run_session(binary_, conn, srv_seed, vm_seed, session_options);
      } catch (const std::exception&) {
        // Session failures are per-connection; the listener keeps serving.
      }
    });
  }
}

void RangeServer::stop() {
  if (listen_fd_ < 0) return;
  stopping_.store(true);
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  listen_fd_ = -1;
  if (accept_thread_.joinable()) accept_thread_.join();
  std::lock_guard lock(workers_mutex_);
  for (auto& w : workers_)
    if (w.joinable()) w.join();
  workers_.clear();
}

}  // namespace pandora::range
