#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "pandora/util.hpp"

// Subprocess-level checks of the installed tool: exit codes and the exact
// foreign-binary message.

namespace {

namespace fs = std::filesystem;
using pandora::util::read_text_file;
using pandora::util::write_text_file;

struct Sandbox {
  Sandbox() {
    dir = fs::temp_directory_path() /
          ("pandora_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }
  fs::path dir;
};

int run_cmd(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("corpus build, verify and run drive the documented exit codes") {
  Sandbox sandbox;
  const std::string bin = PANDORA_BIN;
  const fs::path out = sandbox.dir / "corpus";

  CHECK(run_cmd(bin + " corpus build --out " + q(out) + " 2>/dev/null") == 0);
  REQUIRE(fs::exists(out / "greeter.pbf"));

  CHECK(run_cmd(bin + " verify " + q(out / "greeter.pbf") + " >/dev/null 2>&1") == 0);

  // budget exhaustion is an operational failure: exit 1
  CHECK(run_cmd(bin + " run " + q(out / "counter.pbf") +
                " --budget 10000 </dev/null >/dev/null 2>&1") == 1);
}

TEST_CASE("verify answers a foreign binary with the shell's message") {
  Sandbox sandbox;
  const std::string bin = PANDORA_BIN;
  const fs::path elf = fs::path(PANDORA_FIXTURE_DIR) / "elf_hello";
  const fs::path err = sandbox.dir / "stderr.txt";

  const int code =
      run_cmd(bin + " verify " + q(elf) + " 2>" + q(err) + " >/dev/null");
  CHECK(code == 1);
  CHECK(read_text_file(err) == "cannot execute binary file: Exec format error\n");
}

TEST_CASE("build assembles a source file that verify accepts") {
  Sandbox sandbox;
  const std::string bin = PANDORA_BIN;
  const fs::path src = sandbox.dir / "tiny.pasm";
  const fs::path out = sandbox.dir / "tiny.pbf";
  write_text_file(src, ".code\nMOVI r1, 0\nMOVI r0, 1\nSYS\n");

  CHECK(run_cmd(bin + " build " + q(src) + " -o " + q(out) + " 2>/dev/null") == 0);
  CHECK(run_cmd(bin + " verify " + q(out) + " >/dev/null 2>&1") == 0);
  CHECK(run_cmd(bin + " run " + q(out) + " </dev/null >/dev/null 2>&1") == 0);
  CHECK(run_cmd(bin + " disasm " + q(out) + " >/dev/null 2>&1") == 0);
}

TEST_CASE("usage errors exit 2") {
  const std::string bin = PANDORA_BIN;
  CHECK(run_cmd(bin + " >/dev/null 2>&1") == 2);
  CHECK(run_cmd(bin + " frobnicate >/dev/null 2>&1") == 2);
  CHECK(run_cmd(bin + " replay >/dev/null 2>&1") == 2);
}
