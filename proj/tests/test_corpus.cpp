#include <doctest.h>

#include <json.hpp>

#include "pandora/autoexploit.hpp"
#include "pandora/corpus.hpp"
#include "pandora/svm.hpp"
#include "pandora/util.hpp"

using namespace pandora;

TEST_CASE("every challenge builds, verifies and is no foreign format") {
  const corpus::BuiltCorpus built = corpus::build_corpus();
  CHECK(built.binaries.size() == 4);
  for (const auto& [name, binary] : built.binaries) {
    CAPTURE(name);
    const auto image = pbf::serialize_binary(binary);
    CHECK(pbf::verify_binary(image).pass);
    CHECK(pbf::check_foreign_format(image) == pbf::ForeignKind::Pbf);
  }
  CHECK(built.ref_povs.count("greeter") == 1);
  CHECK(built.ref_povs.count("leaky") == 1);
}

TEST_CASE("the manifest constants parse and match the challenge table") {
  const auto manifest = nlohmann::json::parse(corpus::manifest_json());
  for (const auto& spec : corpus::challenges()) {
    CAPTURE(spec.name);
    REQUIRE(manifest.contains(spec.name));
    CHECK(manifest[spec.name]["vuln_class"] == spec.vuln_class);
  }
  CHECK(manifest["greeter"]["regnum"] == 5);
  CHECK(manifest["greeter"]["name_field_reg_offset"] == 40);
  CHECK(manifest["greeter"]["name_field_ip_offset"] == 44);
}

TEST_CASE("greeter dialog: set then print echoes the name") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  // chunk boundaries mirror one client write per menu interaction
  svm::ChunkedIo io({{'1', '\n'},
                     {'h', 'e', 'l', 'l', 'o', ' ', 'w', 'o', 'r', 'l', 'd'},
                     {'2', '\n'},
                     {'3', '\n'}});
  const auto secret = svm::make_secret(1);
  const svm::ExecOutcome o = svm::run(greeter, 1, secret, io, {});
  CHECK(o.kind == svm::ExecOutcome::Kind::Exited);
  const std::string out(io.output().begin(), io.output().end());
  CHECK(out.find("hello world\n") != std::string::npos);
}

TEST_CASE("greeter faults with the name's bytes 44..47 as the target") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  const auto pattern = autoexploit::cyclic_pattern(48);
  std::vector<uint8_t> input = {'1', '\n'};
  input.insert(input.end(), pattern.begin(), pattern.end());
  svm::BufferIo io(input);
  const auto secret = svm::make_secret(1);
  const svm::ExecOutcome o = svm::run(greeter, 1, secret, io, {});
  REQUIRE(o.kind == svm::ExecOutcome::Kind::Faulted);
  CHECK(o.fault->reason == svm::FaultReason::ExecFault);
  CHECK(o.fault->fault_ip == util::rd_u32(&pattern[44]));
  CHECK(o.fault->regs[5] == util::rd_u32(&pattern[40]));
  CHECK(o.fault->regs[1] == 0);  // the epilogue zeroes r1
}

TEST_CASE("a 44-byte name returns cleanly; 46 bytes crash") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  const auto secret = svm::make_secret(1);
  auto run_name = [&](size_t len) {
    std::vector<uint8_t> input = {'1', '\n'};
    input.insert(input.end(), len, 'x');
    svm::BufferIo io(input);
    return svm::run(greeter, 1, secret, io, {});
  };
  CHECK(run_name(44).kind == svm::ExecOutcome::Kind::Exited);
  CHECK(run_name(46).kind == svm::ExecOutcome::Kind::Faulted);
}

TEST_CASE("counter prints ascending integers until the budget ends") {
  const pbf::PandoraBinary counter = corpus::build_challenge("counter");
  svm::BufferIo io({});
  const auto secret = svm::make_secret(1);
  svm::RunOptions options;
  options.budget = 10000;
  const svm::ExecOutcome o = svm::run(counter, 1, secret, io, options);
  CHECK(o.kind == svm::ExecOutcome::Kind::BudgetExhausted);
  const std::string out(io.output().begin(), io.output().end());
  CHECK(out.rfind("1\n2\n3\n4\n", 0) == 0);
}

TEST_CASE("leaky transmits four secret bytes at the requested offset") {
  const pbf::PandoraBinary leaky = corpus::build_challenge("leaky");
  const auto secret = svm::make_secret(99);
  svm::BufferIo io({'3', '7'});
  const svm::ExecOutcome o = svm::run(leaky, 1, secret, io, {});
  CHECK(o.kind == svm::ExecOutcome::Kind::Exited);
  const auto& out = io.output();
  REQUIRE(out.size() == 5 + 4);  // prompt plus leak
  CHECK(std::vector<uint8_t>(out.begin() + 5, out.end()) ==
        std::vector<uint8_t>(secret.begin() + 37, secret.begin() + 41));
}

TEST_CASE("the embedded corpus matches the checked-in files") {
  const std::filesystem::path dir = PANDORA_CORPUS_DIR;
  for (const auto& spec : corpus::challenges()) {
    CAPTURE(spec.name);
    CHECK(util::read_text_file(dir / (spec.name + ".pasm")) == spec.source);
    if (spec.ref_pov)
      CHECK(util::read_text_file(dir / (spec.name + "_ref.pov")) == spec.ref_pov);
  }
  CHECK(util::read_text_file(dir / "manifest.json") == corpus::manifest_json());
}

TEST_CASE("write_corpus produces loadable artifacts") {
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "pandora_corpus_test";
  std::filesystem::remove_all(dir);
  corpus::write_corpus(dir);
  for (const auto& spec : corpus::challenges()) {
    const auto image = util::read_file(dir / (spec.name + ".pbf"));
    CHECK(pbf::verify_binary(image).pass);
  }
  std::filesystem::remove_all(dir);
}
