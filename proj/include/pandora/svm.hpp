#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pandora/isa.hpp"
#include "pandora/pbf.hpp"
#include "pandora/util.hpp"

namespace pandora::svm {

// The sandboxed virtual machine that executes PBF binaries. Seven syscalls,
// a seeded PRNG and an instruction budget are the only sources of behavior
// beyond the binary and its stdin bytes, so every run replays exactly.

inline constexpr uint32_t kStackBase = 0xBA000000;
inline constexpr uint32_t kStackLimit = 0xBAAAB000;  // exclusive
inline constexpr uint32_t kStackTop = 0xBAAAAFFC;    // initial r7
inline constexpr uint32_t kSecretVaddr = 0x43470000;
inline constexpr uint32_t kSecretSize = 4096;
inline constexpr uint32_t kAllocBase = 0x50000000;
inline constexpr uint32_t kAllocLimit = 0x60000000;
inline constexpr uint64_t kDefaultBudget = 10'000'000;

struct MapConflict : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class FaultReason : uint8_t {
  ExecFault = 1,
  ReadFault = 2,
  WriteFault = 3,
  InvalidOpcode = 4,
  StackFault = 5,
};

const char* fault_reason_name(FaultReason r);

struct FaultRecord {
  FaultReason reason = FaultReason::ExecFault;
  // ExecFault: the attempted transfer target (required for Type 1 judging).
  // Other reasons: the address of the faulting instruction.
  uint32_t fault_ip = 0;
  // Always the address of the instruction that faulted; for ExecFault raised
  // at fetch (fall-through into a bad page) this equals fault_ip.
  uint32_t site_ip = 0;
  std::array<uint32_t, 8> regs{};

  bool operator==(const FaultRecord&) const = default;
};

/// Sparse paged memory: regions declare what is mapped and with which perms,
/// pages materialize zero-filled on first touch. W^X holds for every region.
class MemoryMap {
 public:
  struct Region {
    uint32_t size = 0;  // multiple of the page size
    uint8_t perms = 0;
  };

  /// Maps [base, base+size) with perms; size is rounded up to whole pages.
  /// Returns false if the range intersects an existing region.
  bool map_region(uint32_t base, uint32_t size, uint8_t perms);
  /// Unmaps whole pages in [base, base+size). Returns false unless the range
  /// is fully covered by mapped regions with matching bounds.
  bool unmap_region(uint32_t base, uint32_t size);
  bool range_mapped(uint32_t base, uint32_t size) const;

  bool read(uint32_t addr, std::span<uint8_t> out) const;
  bool write(uint32_t addr, std::span<const uint8_t> data);
  bool fetch(uint32_t addr, std::span<uint8_t, isa::kInstructionSize> out) const;

  uint8_t perms_at(uint32_t addr) const;  // 0 when unmapped

  /// Content-level equality: an uninstantiated page equals an all-zero one.
  friend bool semantically_equal(const MemoryMap& a, const MemoryMap& b);

 private:
  friend struct LoaderAccess;
  const uint8_t* page_for_read(uint32_t page_base) const;
  uint8_t* page_for_write(uint32_t page_base);
  const Region* region_containing(uint32_t addr, uint32_t* region_base) const;

  std::map<uint32_t, Region> regions_;
  mutable std::unordered_map<uint32_t, std::unique_ptr<std::array<uint8_t, pbf::kPageSize>>>
      pages_;
};

struct MachineState {
  std::array<uint32_t, 8> regs{};
  uint32_t ip = 0;
  bool flag_z = false;
  bool flag_l = false;
  MemoryMap memory;
  uint64_t budget = kDefaultBudget;
  util::SplitMix64 prng;
  // random() hands out PRNG bytes 8 at a time; a partial word is discarded
  // at the end of each call so streams stay aligned across runs.
};

bool states_equal(const MachineState& a, const MachineState& b);

/// One side of the binary's world: fd 0 (stdin) and fd 1 (stdout).
class VmIo {
 public:
  virtual ~VmIo() = default;
  /// Writes stdout bytes; returns the count accepted (normally all of them).
  virtual uint32_t transmit(std::span<const uint8_t> data) = 0;
  /// Reads up to out.size() stdin bytes. Blocks until at least one byte is
  /// available or the stream is closed; returns 0 only on closed stream.
  virtual uint32_t receive(std::span<uint8_t> out) = 0;
  /// Blocks until a receive would not block (data buffered or stream closed).
  virtual void wait_stdin() = 0;
};

/// Stdin served from one flat buffer; stdout captured. The whole input is
/// considered buffered up front, as when a file is piped in.
class BufferIo final : public VmIo {
 public:
  explicit BufferIo(std::vector<uint8_t> input) : input_(std::move(input)) {}
  uint32_t transmit(std::span<const uint8_t> data) override;
  uint32_t receive(std::span<uint8_t> out) override;
  void wait_stdin() override {}

  const std::vector<uint8_t>& output() const { return output_; }

 private:
  std::vector<uint8_t> input_;
  size_t pos_ = 0;
  std::vector<uint8_t> output_;
};

/// Stdin delivered in discrete chunks that never coalesce, mirroring how
/// frames arrive over a connection. A receive drains at most one chunk.
class ChunkedIo final : public VmIo {
 public:
  explicit ChunkedIo(std::vector<std::vector<uint8_t>> chunks)
      : chunks_(std::move(chunks)) {}
  uint32_t transmit(std::span<const uint8_t> data) override;
  uint32_t receive(std::span<uint8_t> out) override;
  void wait_stdin() override {}

  const std::vector<uint8_t>& output() const { return output_; }

 private:
  std::vector<std::vector<uint8_t>> chunks_;
  size_t chunk_ = 0;
  size_t pos_ = 0;
  std::vector<uint8_t> output_;
};

struct StepResult {
  enum class Kind { Ran, Exited, Faulted } kind = Kind::Ran;
  uint32_t exit_status = 0;
  FaultRecord fault;
  // False only when the fetch itself failed: the instruction never began,
  // so it does not appear in traces and costs no budget.
  bool began = true;
};

struct ExecOutcome {
  enum class Kind { Exited, Faulted, BudgetExhausted } kind = Kind::Exited;
  uint32_t exit_status = 0;
  std::optional<FaultRecord> fault;
  std::vector<uint32_t> trace;          // executed ip values, in order
  std::unordered_set<uint64_t> edges;   // (prev_ip << 32) | ip
  uint64_t executed = 0;

  static uint64_t edge_key(uint32_t prev, uint32_t ip) {
    return (uint64_t(prev) << 32) | ip;
  }
};

/// Deterministic 4096-byte buffer for the secret page.
std::vector<uint8_t> make_secret(uint64_t secret_seed);

/// Maps the binary plus stack and secret page, seeds the PRNG and points ip
/// at the entry. Throws MapConflict if a section overlaps a reserved region.
MachineState load_image(const pbf::PandoraBinary& b, uint64_t seed,
                        std::span<const uint8_t> secret,
                        uint64_t budget = kDefaultBudget);

/// Executes exactly one instruction. Faults are reported in the result, not
/// thrown; the state is not advanced past a faulting instruction.
StepResult step(MachineState& s, VmIo& io);

struct RunOptions {
  uint64_t budget = kDefaultBudget;
  bool collect_trace = false;
  bool collect_edges = false;
};

ExecOutcome run(const pbf::PandoraBinary& b, uint64_t seed,
                std::span<const uint8_t> secret, VmIo& io,
                const RunOptions& options = {});

}  // namespace pandora::svm
