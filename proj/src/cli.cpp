#include "pandora/cli.hpp"

#include <poll.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "pandora/assembler.hpp"
#include "pandora/autoexploit.hpp"
#include "pandora/corpus.hpp"
#include "pandora/pbf.hpp"
#include "pandora/pov.hpp"
#include "pandora/range_server.hpp"
#include "pandora/replay.hpp"
#include "pandora/svm.hpp"
#include "pandora/util.hpp"

namespace pandora::cli {

namespace {

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop.store(true); }

uint64_t env_u64(const char* name, uint64_t fallback) {
  const char* v = std::getenv(name);
  if (!v || !*v) return fallback;
  return std::strtoull(v, nullptr, 0);
}

// Live stdio bridge for `run`: blocks on the process's own stdin, writes
// stdout through unbuffered.
class StdStreamIo final : public svm::VmIo {
 public:
  uint32_t transmit(std::span<const uint8_t> data) override {
    std::fwrite(data.data(), 1, data.size(), stdout);
    std::fflush(stdout);
    return static_cast<uint32_t>(data.size());
  }

  uint32_t receive(std::span<uint8_t> out) override {
    while (true) {
      const ssize_t n = ::read(0, out.data(), out.size());
      if (n >= 0) return static_cast<uint32_t>(n);
      if (errno != EINTR) return 0;
    }
  }

  void wait_stdin() override {
    struct pollfd pfd{0, POLLIN, 0};
    ::poll(&pfd, 1, -1);
  }
};

pbf::PandoraBinary load_pbf(const std::string& path) {
  return pbf::parse_binary(util::read_file(path));
}

int cmd_build(const std::string& src, const std::string& out) {
  try {
    const pbf::PandoraBinary binary =
        assembler::assemble(util::read_text_file(src));
    util::write_file(out, pbf::serialize_binary(binary));
    std::cerr << "wrote " << out << "\n";
    return 0;
  } catch (const assembler::AsmError& e) {
    std::cerr << src << ": " << e.what() << "\n";
    return 1;
  }
}

int cmd_verify(const std::string& path) {
  const std::vector<uint8_t> bytes = util::read_file(path);
  const pbf::VerifyReport report = pbf::verify_binary(bytes);
  if (!report.find("magic")->pass) {
    // Alien binary: answer exactly as a generic shell would.
    std::cerr << pbf::kExecFormatErrorMsg << "\n";
    return 1;
  }
  for (const auto& check : report.checks)
    std::cout << (check.pass ? "pass" : "FAIL") << "  " << check.name << ": "
              << check.detail << "\n";
  std::cout << (report.pass ? "OK" : "INVALID") << "  " << path << "\n";
  return report.pass ? 0 : 1;
}

int cmd_disasm(const std::string& path) {
  std::cout << assembler::disassemble(load_pbf(path));
  return 0;
}

int cmd_run(const std::string& path, uint64_t seed, uint64_t budget,
            uint64_t secret_seed) {
  const pbf::PandoraBinary binary = load_pbf(path);
  const std::vector<uint8_t> secret = svm::make_secret(secret_seed);
  StdStreamIo io;
  svm::RunOptions options;
  options.budget = budget;
  const svm::ExecOutcome outcome = svm::run(binary, seed, secret, io, options);
  switch (outcome.kind) {
    case svm::ExecOutcome::Kind::Exited:
      std::cerr << "exited with status " << outcome.exit_status << " after "
                << outcome.executed << " instructions\n";
      return static_cast<int>(outcome.exit_status & 0xFF);
    case svm::ExecOutcome::Kind::Faulted: {
      const svm::FaultRecord& f = *outcome.fault;
      std::cerr << "fault: " << svm::fault_reason_name(f.reason) << " at 0x"
                << util::hex32(f.fault_ip) << " (site 0x" << util::hex32(f.site_ip)
                << ")\n";
      for (int i = 0; i < 8; ++i)
        std::cerr << "  r" << i << " = " << util::hex32(f.regs[i]) << "\n";
      return 1;
    }
    case svm::ExecOutcome::Kind::BudgetExhausted:
      std::cerr << "instruction budget exhausted after " << outcome.executed
                << " instructions\n";
      return 1;
  }
  return 1;
}

int cmd_serve(const std::string& path, uint16_t port, uint64_t seed,
              uint64_t budget) {
  range::RangeServer::Options options;
  options.port = port;
  options.server_seed = seed;
  options.budget = budget;
  range::RangeServer server(load_pbf(path), options);
  const uint16_t bound = server.start();
  std::cerr << "serving " << path << " on port " << bound << " (seed " << seed
            << ")\n";
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  while (!g_stop.load())
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

int cmd_replay(const std::string& pov_path, const std::string& host, uint16_t port,
               unsigned timeout_s) {
  const pov::PovScript script = pov::parse_pov(util::read_text_file(pov_path));
  std::string name = std::filesystem::path(pov_path).filename().string();
  const replay::ReplayResult result = replay::replay_pov(
      script, host, port, std::chrono::seconds(timeout_s), name);
  std::cout << result.report;
  const auto want = script.type == 1 ? range::SuccessKind::Type1
                                     : range::SuccessKind::Type2;
  if (!result.verdict.note.empty())
    std::cerr << "note: " << result.verdict.note << "\n";
  return result.got_verdict && result.verdict.success == want ? 0 : 1;
}

int cmd_fuzz(const std::string& cb, const std::string& seed_input, uint64_t execs,
             uint64_t rng, int workers, const std::string& out_dir) {
  const pbf::PandoraBinary binary = load_pbf(cb);
  autoexploit::FuzzOptions options;
  options.execs = execs;
  options.rng_seed = rng;
  options.workers = workers;
  const std::vector<std::vector<uint8_t>> seeds = {util::read_file(seed_input)};
  const std::vector<autoexploit::CrashInput> crashes =
      autoexploit::fuzz(binary, seeds, options);
  std::cerr << crashes.size() << " crash class(es) in " << execs << " execs\n";
  for (size_t i = 0; i < crashes.size(); ++i) {
    const auto& c = crashes[i];
    std::cout << "crash " << i << ": " << svm::fault_reason_name(c.fault.reason)
              << " fault_ip=" << util::hex32(c.fault.fault_ip) << " site="
              << util::hex32(c.fault.site_ip) << " len=" << c.bytes.size() << "\n";
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      util::write_file(std::filesystem::path(out_dir) /
                           ("crash_" + std::to_string(i) + ".bin"),
                       c.bytes);
    }
  }
  return crashes.empty() ? 1 : 0;
}

int cmd_exploit(const std::string& cb, const std::string& seed_input,
                const std::string& out, uint64_t execs, uint64_t rng, int workers) {
  const pbf::PandoraBinary binary = load_pbf(cb);
  autoexploit::FuzzOptions options;
  options.execs = execs;
  options.rng_seed = rng;
  options.workers = workers;
  const std::vector<std::vector<uint8_t>> seeds = {util::read_file(seed_input)};
  try {
    const autoexploit::PipelineResult result =
        autoexploit::exploit_pipeline(binary, seeds, options);
    const std::string text = pov::serialize_pov(result.script);
    util::write_text_file(out, text);
    util::write_text_file(out + ".log", result.transcript);
    std::cerr << result.transcript;
    std::cerr << "wrote " << out << "\n";
    return 0;
  } catch (const autoexploit::NoCrash& e) {
    std::cerr << "exploit failed: " << e.what() << "\n";
    return 1;
  } catch (const autoexploit::NoControl& e) {
    std::cerr << "exploit failed: " << e.what() << "\n";
    return 1;
  }
}

int cmd_corpus_build(const std::string& out_dir) {
  corpus::write_corpus(out_dir);
  std::cerr << "corpus written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int dispatch(int argc, char** argv) {
  CLI::App app{"pandora: an isolated range for exercising automated exploit tools"};
  app.require_subcommand(1);

  const uint64_t default_budget = env_u64("PANDORA_BUDGET", svm::kDefaultBudget);
  const uint16_t default_port =
      static_cast<uint16_t>(env_u64("PANDORA_PORT", range::kDefaultPort));

  std::string src, out = "out.pbf";
  auto* build = app.add_subcommand("build", "assemble a source file into a binary");
  build->add_option("src", src, "assembly source")->required();
  build->add_option("-o,--out", out, "output binary path");

  std::string verify_path;
  auto* verify = app.add_subcommand("verify", "check a file against the container rules");
  verify->add_option("file", verify_path, "file to verify")->required();

  std::string disasm_path;
  auto* disasm = app.add_subcommand("disasm", "disassemble a binary's code sections");
  disasm->add_option("bin", disasm_path, "binary to disassemble")->required();

  std::string run_path;
  uint64_t run_seed = 1, run_budget = default_budget, run_secret_seed = 1;
  auto* runc = app.add_subcommand("run", "execute a binary locally with stdio bridging");
  runc->add_option("bin", run_path, "binary to run")->required();
  runc->add_option("--seed", run_seed, "VM PRNG seed");
  runc->add_option("--budget", run_budget, "instruction budget");
  runc->add_option("--secret-seed", run_secret_seed, "secret page seed");

  std::string serve_path;
  uint16_t serve_port = default_port;
  uint64_t serve_seed = 1, serve_budget = default_budget;
  auto* serve = app.add_subcommand("serve", "serve a challenge binary over TCP");
  serve->add_option("--cb", serve_path, "challenge binary")->required();
  serve->add_option("--port", serve_port, "listen port (0 = ephemeral)");
  serve->add_option("--seed", serve_seed, "server seed");
  serve->add_option("--budget", serve_budget, "instruction budget");

  std::string replay_pov_path, replay_host = "127.0.0.1";
  uint16_t replay_port = default_port;
  unsigned replay_timeout = 10;
  auto* replayc = app.add_subcommand("replay", "drive a POV against a range server");
  replayc->add_option("--pov", replay_pov_path, "POV script")->required();
  replayc->add_option("--host", replay_host, "server host");
  replayc->add_option("--port", replay_port, "server port");
  replayc->add_option("--timeout", replay_timeout, "socket timeout in seconds");

  std::string fuzz_cb, fuzz_seed_input, fuzz_out;
  uint64_t fuzz_execs = 50000, fuzz_rng = 1;
  int fuzz_workers = 1;
  auto* fuzz = app.add_subcommand("fuzz", "coverage-guided fuzzing of a binary");
  fuzz->add_option("--cb", fuzz_cb, "challenge binary")->required();
  fuzz->add_option("--seed-input", fuzz_seed_input, "file with the seed input")
      ->required();
  fuzz->add_option("--execs", fuzz_execs, "execution budget");
  fuzz->add_option("--rng", fuzz_rng, "fuzzer RNG seed");
  fuzz->add_option("--workers", fuzz_workers, "worker threads (>1 is nondeterministic)");
  fuzz->add_option("--out", fuzz_out, "directory for crash inputs");

  std::string ex_cb, ex_seed_input, ex_out = "out.pov";
  uint64_t ex_execs = 50000, ex_rng = 1;
  int ex_workers = 1;
  auto* exploit = app.add_subcommand("exploit", "fuzz, triage and emit a verified POV");
  exploit->add_option("--cb", ex_cb, "challenge binary")->required();
  exploit->add_option("--seed-input", ex_seed_input, "file with the seed input")
      ->required();
  exploit->add_option("--out", ex_out, "output POV path");
  exploit->add_option("--execs", ex_execs, "fuzzing execution budget");
  exploit->add_option("--rng", ex_rng, "fuzzer RNG seed");
  exploit->add_option("--workers", ex_workers, "fuzzing worker threads");

  auto* corpusc = app.add_subcommand("corpus", "corpus maintenance");
  std::string corpus_out = "corpus-out";
  auto* corpus_build = corpusc->add_subcommand("build", "write and assemble the corpus");
  corpus_build->add_option("--out", corpus_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*build) return cmd_build(src, out);
    if (*verify) return cmd_verify(verify_path);
    if (*disasm) return cmd_disasm(disasm_path);
    if (*runc) return cmd_run(run_path, run_seed, run_budget, run_secret_seed);
    if (*serve) return cmd_serve(serve_path, serve_port, serve_seed, serve_budget);
    if (*replayc)
      return cmd_replay(replay_pov_path, replay_host, replay_port, replay_timeout);
    if (*fuzz)
      return cmd_fuzz(fuzz_cb, fuzz_seed_input, fuzz_execs, fuzz_rng, fuzz_workers,
                      fuzz_out);
    if (*exploit)
      return cmd_exploit(ex_cb, ex_seed_input, ex_out, ex_execs, ex_rng, ex_workers);
    if (*corpusc) {
      if (*corpus_build) return cmd_corpus_build(corpus_out);
      std::cerr << "usage: pandora corpus build [--out DIR]\n";
      return 2;
    }
  } catch (const pbf::FormatError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const pbf::PbfError& e) {
    std::cerr << "invalid binary: " << e.what() << "\n";
    return 1;
  } catch (const pov::PovError& e) {
    std::cerr << "invalid POV: " << e.what() << "\n";
    return 1;
  } catch (const replay::ReplayError& e) {
    std::cerr << "replay failed: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace pandora::cli
