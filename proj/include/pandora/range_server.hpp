#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pandora/frame.hpp"
#include "pandora/pbf.hpp"
#include "pandora/pov.hpp"
#include "pandora/svm.hpp"

namespace pandora::range {

// The vulnerable-binary manager. One session per connection: it runs the
// challenge binary in the VM, relays stdin/stdout frames, answers at most
// one negotiation, then judges and emits a single verdict frame. The binary
// itself never observes channels 2 or 3, and nothing a client sends can
// reach a host-executable path: the VM is the only executor.

enum class SuccessKind : uint8_t { None = 0, Type1 = 1, Type2 = 2 };

enum class NegoKind : uint8_t { None = 0, Type1 = 1, Type2 = 2 };

struct Verdict {
  bool crashed = false;
  std::optional<svm::FaultRecord> fault;
  SuccessKind success = SuccessKind::None;
  NegoKind nego = NegoKind::None;
  pov::Type1Negotiation type1{};  // valid when nego == Type1
  pov::Type2Negotiation type2{};  // valid when nego == Type2
  std::string note;               // protocol/rejection detail, empty otherwise

  bool operator==(const Verdict&) const = default;
};

// Fixed little-endian verdict payload; layout pinned in docs/protocol.md.
std::vector<uint8_t> encode_verdict(const Verdict& v);
Verdict decode_verdict(std::span<const uint8_t> bytes);

struct NegotiationRejected : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Validates masks and register index, then draws both target values from
/// the server stream. Throws NegotiationRejected on a popcount below the
/// floor or a register index out of range.
pov::Type1Response negotiate_type1(const pov::Type1Request& req,
                                   util::SplitMix64& stream);
pov::Type2Response negotiate_type2();

/// True iff a fault exists and both masked equalities hold:
/// (fault_ip & ipmask) == (ipvalue & ipmask) and
/// (regs[regnum] & regmask) == (regvalue & regmask).
bool judge_type1(const std::optional<svm::FaultRecord>& fault,
                 const pov::Type1Negotiation& n);

/// True iff the submission is exactly n.length bytes and occurs as a
/// contiguous run inside secret[0 .. n.size).
bool judge_type2(std::span<const uint8_t> submission,
                 std::span<const uint8_t> secret, const pov::Type2Negotiation& n);

/// Four-line report block (lowercase hex, no prefixes):
///   # <name>
///   # negotiation type: <1|2|none>
///   # type 1 masks: <ipmask> <regmask>
///   # type 1 pov: <ipvalue> <regvalue> <regnum>
std::string format_verdict_report(const Verdict& v, std::string_view name);

struct SessionOptions {
  uint64_t budget = svm::kDefaultBudget;
};

/// Runs one complete session over `conn` and returns the verdict it sent.
/// Deterministic for a fixed (binary, server_seed, vm_seed, client bytes).
Verdict run_session(const pbf::PandoraBinary& binary, FrameConn& conn,
                    uint64_t server_seed, uint64_t vm_seed,
                    const SessionOptions& options = {});

inline constexpr uint16_t kDefaultPort = 1996;

/// TCP listener: one session per accepted connection, seeds derived from
/// (server_seed, session index) in accept order.
class RangeServer {
 public:
  struct Options {
    uint16_t port = kDefaultPort;  // 0 picks an ephemeral port
    uint64_t server_seed = 1;
    uint64_t budget = svm::kDefaultBudget;
  };

  RangeServer(pbf::PandoraBinary binary, Options options);
  ~RangeServer();
  RangeServer(const RangeServer&) = delete;
  RangeServer& operator=(const RangeServer&) = delete;

  /// Binds, listens and spawns the accept loop; returns the bound port.
  uint16_t start();
  void stop();
  uint16_t port() const { return port_; }

 private:
  void accept_loop();

  pbf::PandoraBinary binary_;
  Options options_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<uint64_t> session_counter_{0};
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex workers_mutex_;
  std::vector<std::thread> workers_;
};

/// Per-session seed pair: sessions draw (server, vm) seeds in order from a
/// splitmix stream over the server seed, so session 0 of a fresh server
/// depends only on server_seed.
std::pair<uint64_t, uint64_t> session_seeds(uint64_t server_seed, uint64_t index);

}  // namespace pandora::range
