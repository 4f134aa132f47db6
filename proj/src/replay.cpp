#include "pandora/replay.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <sstream>

namespace pandora::replay {

namespace {

using range::Channel;
using range::Frame;

class ScriptRunner {
 public:
  ScriptRunner(range::FrameConn& conn, const pov::PovScript& script,
               std::string_view name)
      : conn_(conn), script_(script), name_(name) {}

  ReplayResult run() {
    for (const pov::PovAction& action : script_.actions) {
      if (done_) break;
      std::visit([&](const auto& a) { execute(a); }, action);
    }
    if (!done_) wait_close();
    ReplayResult result;
    result.got_verdict = verdict_.has_value();
    if (verdict_) result.verdict = *verdict_;
    result.transcript = log_.str();
    result.report = range::format_verdict_report(result.verdict, name_);
    return result;
  }

 private:
  void execute(const pov::WriteAction& a) {
    const std::vector<uint8_t> bytes = pov::substitute(a.data, bindings_);
    pending_write_.insert(pending_write_.end(), bytes.begin(), bytes.end());
    log_ << "write " << bytes.size() << " bytes\n";
  }

  void execute(const pov::ReadNAction& a) {
    flush_writes();
    while (stdout_buf_.size() < a.count) {
      if (!pump()) {
        throw ReplayError(ReplayError::Kind::ReadMismatch,
                          "stream ended with " + std::to_string(stdout_buf_.size()) +
                              " of " + std::to_string(a.count) + " bytes read");
      }
    }
    std::vector<uint8_t> got(stdout_buf_.begin(), stdout_buf_.begin() + a.count);
    stdout_buf_.erase(stdout_buf_.begin(), stdout_buf_.begin() + a.count);
    if (!a.capture.empty()) bindings_[a.capture] = got;
    log_ << "readn " << a.count << "\n";
  }

  void execute(const pov::ReadUntilAction& a) {
    flush_writes();
    size_t at = 0;
    while (true) {
      auto it = std::find(stdout_buf_.begin() + at, stdout_buf_.end(), a.delim);
      if (it != stdout_buf_.end()) {
        const size_t n = static_cast<size_t>(it - stdout_buf_.begin());
        std::vector<uint8_t> got(stdout_buf_.begin(), stdout_buf_.begin() + n);
        stdout_buf_.erase(stdout_buf_.begin(), stdout_buf_.begin() + n + 1);
        if (!a.capture.empty()) bindings_[a.capture] = got;
        log_ << "readuntil 0x" << std::hex << int(a.delim) << std::dec << " ("
             << n << " bytes)\n";
        return;
      }
      at = stdout_buf_.size();
      if (!pump())
        throw ReplayError(ReplayError::Kind::ReadMismatch,
                          "delimiter never arrived");
    }
  }

  void execute(const pov::NegotiateType1Action& a) {
    flush_writes();
    Frame f;
    f.channel = Channel::Negotiation;
    f.payload = pov::encode_request(pov::Type1Request{a.ipmask, a.regmask, a.regnum});
    conn_.write_frame(f);
    const std::vector<uint8_t> payload = await_negotiation_reply();
    if (done_) return;
    const pov::Type1Response resp = pov::decode_type1_response(payload);
    bindings_["ipvalue"] = resp.ipvalue;
    bindings_["regvalue"] = resp.regvalue;
    log_ << "negotiated type 1: ipvalue=" << util::hex32(resp.ipvalue)
         << " regvalue=" << util::hex32(resp.regvalue) << "\n";
  }

  void execute(const pov::NegotiateType2Action&) {
    flush_writes();
    Frame f;
    f.channel = Channel::Negotiation;
    f.payload = pov::encode_request(pov::Type2Request{});
    conn_.write_frame(f);
    const std::vector<uint8_t> payload = await_negotiation_reply();
    if (done_) return;
    const pov::Type2Response resp = pov::decode_type2_response(payload);
    bindings_["addr"] = resp.addr;
    bindings_["size"] = resp.size;
    bindings_["length"] = resp.length;
    log_ << "negotiated type 2: addr=" << util::hex32(resp.addr)
         << " size=" << util::hex32(resp.size) << " length=" << resp.length << "\n";
  }

  void execute(const pov::SliceAction& a) {
    auto it = bindings_.find(a.src);
    if (it == bindings_.end())
      throw ReplayError(ReplayError::Kind::Protocol, "unbound capture " + a.src);
    const auto* buf = std::get_if<std::vector<uint8_t>>(&it->second);
    if (!buf)
      throw ReplayError(ReplayError::Kind::Protocol, a.src + " is not a capture");
    if (uint64_t(a.offset) + a.len > buf->size())
      throw ReplayError(ReplayError::Kind::Protocol,
                        "slice out of range for capture " + a.src);
    bindings_[a.dest] = std::vector<uint8_t>(buf->begin() + a.offset,
                                             buf->begin() + a.offset + a.len);
    log_ << "slice " << a.src << "[" << a.offset << ".." << (a.offset + a.len)
         << ") as " << a.dest << "\n";
  }

  void execute(const pov::SubmitAction& a) {
    flush_writes();
    auto it = bindings_.find(a.var);
    if (it == bindings_.end())
      throw ReplayError(ReplayError::Kind::Protocol, "unbound capture " + a.var);
    const auto* buf = std::get_if<std::vector<uint8_t>>(&it->second);
    if (!buf)
      throw ReplayError(ReplayError::Kind::Protocol, a.var + " is not a capture");
    Frame f;
    f.channel = Channel::Negotiation;
    f.payload = *buf;
    conn_.write_frame(f);
    log_ << "submitted " << buf->size() << " bytes\n";
  }

  void execute(const pov::WaitCloseAction&) { wait_close(); }

  void wait_close() {
    flush_writes();
    conn_.close_write();
    while (!verdict_ && pump()) {
    }
    while (pump()) {
    }
    done_ = true;
    if (!verdict_)
      throw ReplayError(ReplayError::Kind::Protocol,
                        "connection closed without a verdict");
  }

  void flush_writes() {
    if (pending_write_.empty()) return;
    size_t off = 0;
    while (off < pending_write_.size()) {
      const size_t n =
          std::min<size_t>(pending_write_.size() - off, range::kMaxFramePayload);
      Frame f;
      f.channel = Channel::Stdin;
      f.payload.assign(pending_write_.begin() + off, pending_write_.begin() + off + n);
      conn_.write_frame(f);
      off += n;
    }
    pending_write_.clear();
  }

  /// Reads one frame and routes it. Returns false on end of stream.
  bool pump() {
    Frame f;
    try {
      if (!conn_.read_frame(f)) return false;
    } catch (const range::TimeoutError& e) {
      throw ReplayError(ReplayError::Kind::Timeout, e.what());
    } catch (const range::ProtocolError& e) {
      throw ReplayError(ReplayError::Kind::Protocol, e.what());
    }
    switch (f.channel) {
      case Channel::Stdout:
        stdout_buf_.insert(stdout_buf_.end(), f.payload.begin(), f.payload.end());
        return true;
      case Channel::Negotiation:
        nego_replies_.push_back(f.payload);
        return true;
      case Channel::Verdict:
        verdict_ = range::decode_verdict(f.payload);
        log_ << "verdict received\n";
        return true;
      default:
        throw ReplayError(ReplayError::Kind::Protocol,
                          "server sent a client-only channel");
    }
  }

  std::vector<uint8_t> await_negotiation_reply() {
    while (nego_replies_.empty()) {
      if (verdict_) {
        // Rejection path: the server skipped straight to the verdict.
        done_ = true;
        return {};
      }
      if (!pump())
        throw ReplayError(ReplayError::Kind::Protocol,
                          "stream ended during negotiation");
    }
    std::vector<uint8_t> payload = std::move(nego_replies_.front());
    nego_replies_.erase(nego_replies_.begin());
    return payload;
  }

  range::FrameConn& conn_;
  const pov::PovScript& script_;
  std::string name_;
  pov::Bindings bindings_;
  std::vector<uint8_t> pending_write_;
  std::vector<uint8_t> stdout_buf_;
  std::vector<std::vector<uint8_t>> nego_replies_;
  std::optional<range::Verdict> verdict_;
  std::ostringstream log_;
  bool done_ = false;
};

}  // namespace

ReplayResult run_script(range::FrameConn& conn, const pov::PovScript& script,
                        std::string_view name) {
  ScriptRunner runner(conn, script, name);
  return runner.run();
}

ReplayResult replay_pov(const pov::PovScript& script, const std::string& host,
                        uint16_t port, std::chrono::seconds timeout,
                        std::string_view name) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &res) != 0 || !res)
    throw ReplayError(ReplayError::Kind::Connect, "cannot resolve " + host);

  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0)
    throw ReplayError(ReplayError::Kind::Connect,
                      "cannot connect to " + host + ":" + service);

  range::TcpFrameConn conn(
      fd, std::chrono::duration_cast<std::chrono::milliseconds>(timeout));
  return run_script(conn, script, name);
}

}  // namespace pandora::replay
