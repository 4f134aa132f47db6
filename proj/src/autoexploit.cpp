#include "pandora/autoexploit.hpp"

#include <algorithm>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "pandora/range_server.hpp"
#include "pandora/replay.hpp"

namespace pandora::autoexploit {

namespace {

svm::ExecOutcome run_local(const pbf::PandoraBinary& binary,
                           const std::vector<uint8_t>& input, uint64_t budget,
                           bool collect_edges) {
  static const std::vector<uint8_t> secret = svm::make_secret(kLocalSecretSeed);
  svm::BufferIo io(input);
  svm::RunOptions options;
  options.budget = budget;
  options.collect_edges = collect_edges;
  return svm::run(binary, kLocalVmSeed, secret, io, options);
}

uint64_t crash_class(const svm::FaultRecord& fault) {
  return (uint64_t(static_cast<uint8_t>(fault.reason)) << 32) | fault.site_ip;
}

std::vector<uint8_t> mutate(const std::vector<uint8_t>& base,
                            const std::vector<std::vector<uint8_t>>& corpus,
                            util::SplitMix64& rng, size_t max_len) {
  std::vector<uint8_t> out = base;
  const int rounds = 1 + static_cast<int>(rng.below(4));
  for (int i = 0; i < rounds; ++i) {
    switch (rng.below(5)) {
      case 0: {  // bit flip
        if (out.empty()) break;
        const size_t pos = rng.below(out.size());
        out[pos] ^= uint8_t(1u << rng.below(8));
        break;
      }
      case 1: {  // byte randomization
        if (out.empty()) break;
        out[rng.below(out.size())] = static_cast<uint8_t>(rng.below(256));
        break;
      }
      case 2: {  // block duplication
        if (out.empty()) break;
        const size_t len = 1 + rng.below(std::min<size_t>(out.size(), 32));
        const size_t src = rng.below(out.size() - len + 1);
        const size_t dst = rng.below(out.size() + 1);
        std::vector<uint8_t> block(out.begin() + src, out.begin() + src + len);
        out.insert(out.begin() + dst, block.begin(), block.end());
        break;
      }
      case 3: {  // length extension with random bytes
        const size_t n = 1 + rng.below(64);
        for (size_t j = 0; j < n; ++j)
          out.push_back(static_cast<uint8_t>(rng.below(256)));
        break;
      }
      case 4: {  // splice with another corpus entry
        const auto& other = corpus[rng.below(corpus.size())];
        if (other.empty() || out.empty()) break;
        const size_t cut_a = rng.below(out.size() + 1);
        const size_t cut_b = rng.below(other.size());
        out.resize(cut_a);
        out.insert(out.end(), other.begin() + cut_b, other.end());
        break;
      }
    }
  }
  if (out.size() > max_len) out.resize(max_len);
  return out;
}

// Shared fuzzing state; a single mutex suffices at these exec rates.
struct FuzzShared {
  std::mutex mutex;
  std::vector<std::vector<uint8_t>> corpus;
  std::unordered_set<uint64_t> coverage;
  std::set<uint64_t> crash_classes;
  std::vector<CrashInput> crashes;
};

void fuzz_worker(const pbf::PandoraBinary& binary, FuzzShared& shared,
                 uint64_t execs, uint64_t rng_seed, const FuzzOptions& options) {
  util::SplitMix64 rng(rng_seed);
  for (uint64_t i = 0; i < execs; ++i) {
    std::vector<uint8_t> input;
    {
      std::lock_guard lock(shared.mutex);
      const auto& base = shared.corpus[rng.below(shared.corpus.size())];
      input = mutate(base, shared.corpus, rng, options.max_input_len);
    }
    const svm::ExecOutcome outcome =
        run_local(binary, input, options.exec_budget, true);
    std::lock_guard lock(shared.mutex);
    bool new_edge = false;
    for (uint64_t e : outcome.edges)
      if (shared.coverage.insert(e).second) new_edge = true;
    if (new_edge) shared.corpus.push_back(input);
    if (outcome.fault) {
      const uint64_t cls = crash_class(*outcome.fault);
      if (shared.crash_classes.insert(cls).second)
        shared.crashes.push_back(
            {std::move(input), *outcome.fault, outcome.edges.size()});
    }
  }
}

}  // namespace

std::vector<CrashInput> fuzz(const pbf::PandoraBinary& binary,
                             const std::vector<std::vector<uint8_t>>& seed_inputs,
                             const FuzzOptions& options) {
  FuzzShared shared;
  uint64_t used = 0;
  for (const auto& seed : seed_inputs) {
    if (used >= options.execs) break;
    ++used;
    const svm::ExecOutcome outcome =
        run_local(binary, seed, options.exec_budget, true);
    for (uint64_t e : outcome.edges) shared.coverage.insert(e);
    shared.corpus.push_back(seed);
    if (outcome.fault) {
      const uint64_t cls = crash_class(*outcome.fault);
      if (shared.crash_classes.insert(cls).second)
        shared.crashes.push_back({seed, *outcome.fault, outcome.edges.size()});
    }
  }
  if (shared.corpus.empty()) shared.corpus.push_back({});

  const uint64_t remaining = options.execs - used;
  const int workers = std::max(1, options.workers);
  if (workers == 1) {
    fuzz_worker(binary, shared, remaining, options.rng_seed, options);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
      const uint64_t share =
          remaining / workers + (uint64_t(w) < remaining % workers ? 1 : 0);
      threads.emplace_back([&, share, w] {
        fuzz_worker(binary, shared, share,
                    options.rng_seed + 0x9E3779B97F4A7C15ULL * (w + 1), options);
      });
    }
    for (auto& t : threads) t.join();
  }
  return std::move(shared.crashes);
}

CrashInput minimize(const pbf::PandoraBinary& binary, const CrashInput& crash) {
  const auto reproduces = [&](const std::vector<uint8_t>& input) {
    const svm::ExecOutcome o = run_local(binary, input, svm::kDefaultBudget, false);
    return o.fault && o.fault->reason == crash.fault.reason;
  };
  if (!reproduces(crash.bytes))
    throw NotReproducible("input does not reproduce the recorded fault");

  std::vector<uint8_t> bytes = crash.bytes;
  for (size_t chunk = std::max<size_t>(bytes.size() / 2, 1); chunk >= 1; chunk /= 2) {
    size_t pos = 0;
    while (pos < bytes.size()) {
      std::vector<uint8_t> candidate = bytes;
      const size_t n = std::min(chunk, candidate.size() - pos);
      candidate.erase(candidate.begin() + pos, candidate.begin() + pos + n);
      if (reproduces(candidate)) {
        bytes = std::move(candidate);
      } else {
        pos += chunk;
      }
    }
    if (chunk == 1) break;
  }

  const svm::ExecOutcome o = run_local(binary, bytes, svm::kDefaultBudget, true);
  return {std::move(bytes), *o.fault, o.edges.size()};
}

std::vector<uint8_t> cyclic_pattern(size_t n) {
  if (n > kMaxPatternLen)
    throw TooLong("pattern length " + std::to_string(n) + " exceeds " +
                  std::to_string(kMaxPatternLen));
  std::vector<uint8_t> out;
  out.reserve(n);
  for (char u = 'A'; u <= 'Z' && out.size() < n; ++u)
    for (char l = 'a'; l <= 'z' && out.size() < n; ++l)
      for (char d = '0'; d <= '9' && out.size() < n; ++d) {
        out.push_back(static_cast<uint8_t>(u));
        if (out.size() == n) break;
        out.push_back(static_cast<uint8_t>(l));
        if (out.size() == n) break;
        out.push_back(static_cast<uint8_t>(d));
      }
  return out;
}

std::optional<size_t> pattern_offset(std::span<const uint8_t, 4> window, size_t n) {
  const std::vector<uint8_t> pattern = cyclic_pattern(n);
  auto scan = [&](std::span<const uint8_t> needle) -> std::optional<size_t> {
    auto it = std::search(pattern.begin(), pattern.end(), needle.begin(), needle.end());
    if (it == pattern.end()) return std::nullopt;
    return static_cast<size_t>(it - pattern.begin());
  };
  if (auto hit = scan(window)) return hit;
  const std::array<uint8_t, 4> reversed = {window[3], window[2], window[1], window[0]};
  return scan(reversed);
}

std::optional<size_t> pattern_offset_u32(uint32_t value, size_t n) {
  const std::array<uint8_t, 4> le = {
      static_cast<uint8_t>(value), static_cast<uint8_t>(value >> 8),
      static_cast<uint8_t>(value >> 16), static_cast<uint8_t>(value >> 24)};
  return pattern_offset(std::span<const uint8_t, 4>(le), n);
}

ControlMap locate_controls(const pbf::PandoraBinary& binary,
                           const CrashInput& crash) {
  const std::vector<uint8_t>& bytes = crash.bytes;
  if (bytes.size() < 4) throw NoControl("crash input shorter than one window");
  {
    const svm::ExecOutcome o = run_local(binary, bytes, svm::kDefaultBudget, false);
    if (!o.fault || o.fault->reason != crash.fault.reason)
      throw NoControl("crash input does not reproduce");
  }

  for (size_t window = bytes.size(); window >= 4; --window) {
    const size_t start = bytes.size() - window;
    // Probe with at least 64 pattern bytes: a short crash input may only
    // just reach the control windows, and the probe must cover them whole.
    const size_t plen = std::min(std::max<size_t>(window, 64), kMaxPatternLen);
    std::vector<uint8_t> probe(bytes.begin(), bytes.begin() + start);
    const std::vector<uint8_t> pattern = cyclic_pattern(plen);
    probe.insert(probe.end(), pattern.begin(), pattern.end());

    const svm::ExecOutcome o = run_local(binary, probe, svm::kDefaultBudget, false);
    if (!o.fault) continue;
    const auto ip_at = pattern_offset_u32(o.fault->fault_ip, plen);
    if (!ip_at) continue;

    ControlMap map;
    map.ip_offset = start + *ip_at;
    map.dialog_prefix.assign(bytes.begin(), bytes.begin() + start);
    for (int r = 0; r < isa::kRegisterCount; ++r) {
      if (const auto reg_at = pattern_offset_u32(o.fault->regs[r], plen)) {
        const size_t off = start + *reg_at;
        // Keep only windows disjoint from the ip window and from each other.
        bool overlaps = off + 4 > *map.ip_offset && *map.ip_offset + 4 > off;
        for (const auto& [other, ooff] : map.reg_offsets)
          if (off + 4 > ooff && ooff + 4 > off) overlaps = true;
        if (!overlaps) map.reg_offsets[r] = off;
      }
    }
    if (map.reg_offsets.empty()) continue;
    return map;
  }
  throw NoControl("no suffix window yields a pattern-derived fault address");
}

pov::PovScript synthesize_pov(const ControlMap& map) {
  if (!map.ip_offset) throw InsufficientControl("control map lacks an ip offset");
  if (map.reg_offsets.empty())
    throw InsufficientControl("control map lacks a controlled register");

  const size_t prefix = map.dialog_prefix.size();
  const size_t ip_off = *map.ip_offset;
  const int regnum = map.reg_offsets.begin()->first;  // lowest controlled index
  const size_t reg_off = map.reg_offsets.begin()->second;

  if (ip_off < prefix || reg_off < prefix)
    throw InsufficientControl("control offsets inside the dialog prefix");
  if (ip_off + 4 > reg_off && reg_off + 4 > ip_off)
    throw InsufficientControl("overlapping ip and register windows");

  pov::PovScript script;
  script.type = 1;
  script.actions.emplace_back(pov::NegotiateType1Action{0xFFFFFFFF, 0xFFFFFFFF,
                                                        uint32_t(regnum)});
  if (!map.dialog_prefix.empty())
    script.actions.emplace_back(pov::WriteAction{{pov::BytesToken{map.dialog_prefix}}});

  // Filler with the two variable windows dropped in at their offsets.
  struct Slot {
    size_t offset;
    const char* var;
  };
  std::array<Slot, 2> slots = {Slot{reg_off, "regvalue"}, Slot{ip_off, "ipvalue"}};
  if (slots[0].offset > slots[1].offset) std::swap(slots[0], slots[1]);

  pov::Template payload;
  size_t cursor = prefix;
  for (const Slot& slot : slots) {
    if (slot.offset > cursor)
      payload.push_back(
          pov::PadToken{static_cast<uint32_t>(slot.offset - cursor), 0x61});
    payload.push_back(pov::VarToken{slot.var});
    cursor = slot.offset + 4;
  }
  script.actions.emplace_back(pov::WriteAction{std::move(payload)});
  script.actions.emplace_back(pov::WaitCloseAction{});
  return script;
}

namespace {

bool run_trials(const pov::PovScript& script, const pbf::PandoraBinary& binary,
                int trials, uint64_t seed) {
  util::SplitMix64 seeder(seed);
  for (int t = 0; t < trials; ++t) {
    const uint64_t server_seed = seeder.next();
    const uint64_t vm_seed = seeder.next();
    range::PipePair pipe = range::make_pipe_pair();
    range::Verdict verdict;
    std::thread server([&] {
      verdict = range::run_session(binary, *pipe.a, server_seed, vm_seed);
    });
    bool client_ok = true;
    try {
      replay::run_script(*pipe.b, script, "verify");
    } catch (const std::exception&) {
      client_ok = false;
    }
    server.join();
    if (!client_ok || verdict.success != range::SuccessKind::Type1) return false;
  }
  return true;
}

void set_masks(pov::PovScript& script, uint32_t mask) {
  for (auto& action : script.actions)
    if (auto* n = std::get_if<pov::NegotiateType1Action>(&action)) {
      n->ipmask = mask;
      n->regmask = mask;
    }
}

}  // namespace

bool verify_exploit(pov::PovScript& script, const pbf::PandoraBinary& binary,
                    int trials, uint64_t seed) {
  if (trials <= 0) return true;
  if (run_trials(script, binary, trials, seed)) return true;

  // 7-bit-safe rescue: if the script asked for full masks, a transport that
  // mangles high bits can still prove control of the low 7 of each byte.
  const auto* nego = [&]() -> const pov::NegotiateType1Action* {
    for (const auto& action : script.actions)
      if (const auto* n = std::get_if<pov::NegotiateType1Action>(&action)) return n;
    return nullptr;
  }();
  if (nego && nego->ipmask == 0xFFFFFFFF && nego->regmask == 0xFFFFFFFF) {
    pov::PovScript fallback = script;
    set_masks(fallback, 0x7F7F7F7F);
    if (run_trials(fallback, binary, trials, seed)) {
      script = std::move(fallback);
      return true;
    }
  }
  return false;
}

PipelineResult exploit_pipeline(const pbf::PandoraBinary& binary,
                                const std::vector<std::vector<uint8_t>>& seed_inputs,
                                const FuzzOptions& options, int verify_trials,
                                uint64_t verify_seed) {
  std::ostringstream log;
  const std::vector<CrashInput> crashes = fuzz(binary, seed_inputs, options);
  log << "fuzz: " << crashes.size() << " crash class(es)\n";
  if (crashes.empty()) throw NoCrash("fuzzing found no crash");

  for (const CrashInput& crash : crashes) {
    log << "crash: " << svm::fault_reason_name(crash.fault.reason) << " at site 0x"
        << util::hex32(crash.fault.site_ip) << ", input " << crash.bytes.size()
        << " bytes\n";
    CrashInput working = crash;
    try {
      working = minimize(binary, crash);
      log << "minimized to " << working.bytes.size() << " bytes\n";
    } catch (const NotReproducible&) {
      log << "minimization skipped: not reproducible\n";
      continue;
    }

    ControlMap map;
    CrashInput used = working;
    try {
      map = locate_controls(binary, working);
    } catch (const NoControl&) {
      // Minimization may have trimmed the very bytes that prove control.
      try {
        map = locate_controls(binary, crash);
        used = crash;
        log << "control located on the unminimized input\n";
      } catch (const NoControl& e) {
        log << "no control: " << e.what() << "\n";
        continue;
      }
    }
    log << "control map: ip at " << *map.ip_offset << ", registers {";
    for (const auto& [r, off] : map.reg_offsets) log << " r" << r << ":" << off;
    log << " }, prefix " << map.dialog_prefix.size() << " bytes\n";

    pov::PovScript script;
    try {
      script = synthesize_pov(map);
    } catch (const InsufficientControl& e) {
      log << "synthesis failed: " << e.what() << "\n";
      continue;
    }
    const bool verified = verify_exploit(script, binary, verify_trials, verify_seed);
    log << (verified ? "verified" : "verification failed") << "\n";
    if (verified) {
      PipelineResult result;
      result.script = std::move(script);
      result.crash = std::move(used);
      result.map = std::move(map);
      result.verified = true;
      result.transcript = log.str();
      return result;
    }
  }
  throw NoControl("no crash yielded a verified exploit; transcript:\n" + log.str());
}

}  // namespace pandora::autoexploit
