#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pandora/pbf.hpp"
#include "pandora/pov.hpp"
#include "pandora/svm.hpp"

namespace pandora::autoexploit {

// The automated attack tool: a coverage-guided mutational fuzzer plus an
// exploit synthesizer that turns a crash into a verified Type 1 POV script.
// Runs happen entirely inside the sandboxed VM with fixed local seeds, so
// the whole pipeline is replayable byte for byte.

struct NotReproducible : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooLong : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoControl : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InsufficientControl : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoCrash : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fixed seeds for all local (non-session) runs; crashes found under these
// replay under these.
inline constexpr uint64_t kLocalVmSeed = 0x70616e646f7261ULL;
inline constexpr uint64_t kLocalSecretSeed = 0x736563726574ULL;

struct CrashInput {
  std::vector<uint8_t> bytes;
  svm::FaultRecord fault;
  size_t edge_count = 0;
};

struct ControlMap {
  std::optional<size_t> ip_offset;   // into the full input, 4-byte LE window
  std::map<int, size_t> reg_offsets; // regnum -> input offset of its window
  std::vector<uint8_t> dialog_prefix;
};

struct FuzzOptions {
  uint64_t execs = 50'000;
  uint64_t rng_seed = 1;
  uint64_t exec_budget = 200'000;
  size_t max_input_len = 4096;
  int workers = 1;  // >1 trades determinism for throughput
};

/// Mutates from the seed corpus, keeps inputs that reach new coverage edges
/// and returns crashes deduplicated by (fault reason, faulting site).
/// Deterministic for a fixed rng seed and exec budget with workers == 1.
std::vector<CrashInput> fuzz(const pbf::PandoraBinary& binary,
                             const std::vector<std::vector<uint8_t>>& seed_inputs,
                             const FuzzOptions& options);

/// Greedy chunk removal at halving granularities; the result still faults
/// with the same reason. Throws NotReproducible if the input does not crash.
CrashInput minimize(const pbf::PandoraBinary& binary, const CrashInput& crash);

inline constexpr size_t kMaxPatternLen = 26 * 26 * 10 * 3;  // 20280

/// "Aa0Aa1..." triplet pattern; every 4-byte window of the prefix is unique.
std::vector<uint8_t> cyclic_pattern(size_t n);

/// Index of the window in cyclic_pattern(n); the reversed window is also
/// accepted (a register holds pattern memory read little-endian).
std::optional<size_t> pattern_offset(std::span<const uint8_t, 4> window, size_t n);
std::optional<size_t> pattern_offset_u32(uint32_t value, size_t n);

/// Replays with pattern data over suffix windows of the crash input (longest
/// first) until the fault address decodes to a pattern offset; records which
/// input bytes feed the instruction pointer and which feed registers.
ControlMap locate_controls(const pbf::PandoraBinary& binary, const CrashInput& crash);

/// Builds a Type 1 script from a control map: negotiate with full masks,
/// write the dialog prefix, then filler with var(regvalue)/var(ipvalue) at
/// their offsets, then wait for the verdict.
pov::PovScript synthesize_pov(const ControlMap& map);

/// Runs `trials` in-process sessions with distinct server seeds; true iff
/// every one judges Type 1. If full masks fail, retries once with masks
/// 7f7f7f7f (and leaves them in the script when that rescue verifies).
bool verify_exploit(pov::PovScript& script, const pbf::PandoraBinary& binary,
                    int trials, uint64_t seed);

struct PipelineResult {
  pov::PovScript script;
  CrashInput crash;
  ControlMap map;
  bool verified = false;
  std::string transcript;
};

/// fuzz -> minimize -> locate -> synthesize -> verify. Falls back to the
/// unminimized crash when minimization destroys control, and tries further
/// crash classes until one verifies. Throws NoCrash when fuzzing finds
/// nothing and NoControl when no crash yields a synthesizable map.
PipelineResult exploit_pipeline(const pbf::PandoraBinary& binary,
                                const std::vector<std::vector<uint8_t>>& seed_inputs,
                                const FuzzOptions& options, int verify_trials = 3,
                                uint64_t verify_seed = 1);

}  // namespace pandora::autoexploit
