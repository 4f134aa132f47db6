#include <doctest.h>

#include "pandora/corpus.hpp"
#include "pandora/range_server.hpp"
#include "pandora/replay.hpp"

using namespace pandora;

namespace {

struct LiveServer {
  explicit LiveServer(const std::string& challenge, uint64_t seed = 1) {
    range::RangeServer::Options options;
    options.port = 0;  // ephemeral
    options.server_seed = seed;
    server = std::make_unique<range::RangeServer>(
        corpus::build_challenge(challenge), options);
    port = server->start();
  }
  ~LiveServer() { server->stop(); }

  std::unique_ptr<range::RangeServer> server;
  uint16_t port = 0;
};

pov::PovScript ref_script(const char* challenge) {
  return pov::parse_pov(corpus::find_challenge(challenge)->ref_pov);
}

}  // namespace

TEST_CASE("the reference greeter POV succeeds over real TCP") {
  LiveServer live("greeter", 41);
  const replay::ReplayResult result =
      replay::replay_pov(ref_script("greeter"), "127.0.0.1", live.port,
                         std::chrono::seconds(10), "greeter_ref.pov");
  REQUIRE(result.got_verdict);
  CHECK(result.verdict.success == range::SuccessKind::Type1);
  CHECK(result.verdict.crashed);
  CHECK(result.verdict.type1.regnum == 5);
  CHECK(result.report.rfind("# greeter_ref.pov\n# negotiation type: 1\n", 0) == 0);
}

TEST_CASE("a POV written for another binary fails cleanly") {
  LiveServer live("counter", 42);
  // greeter's exploit means nothing to counter; budget runs out, judge says no
  const replay::ReplayResult result = replay::replay_pov(
      ref_script("greeter"), "127.0.0.1", live.port, std::chrono::seconds(30));
  REQUIRE(result.got_verdict);
  CHECK(result.verdict.success == range::SuccessKind::None);
}

TEST_CASE("unreachable endpoints raise ConnectError") {
  try {
    replay::replay_pov(ref_script("greeter"), "127.0.0.1", 1);
    FAIL("expected ConnectError");
  } catch (const replay::ReplayError& e) {
    CHECK(e.kind == replay::ReplayError::Kind::Connect);
  }
}

TEST_CASE("a delimiter that never arrives is a read mismatch") {
  LiveServer live("greeter", 43);
  pov::PovScript script = pov::parse_pov(
      "pov 1\n"
      "negotiate type1 ipmask=ffffffff regmask=ffffffff regnum=0\n"
      "write 3\\n\n"
      "readuntil 00\n"
      "waitclose\n");
  try {
    replay::replay_pov(script, "127.0.0.1", live.port);
    FAIL("expected ReadMismatch");
  } catch (const replay::ReplayError& e) {
    CHECK(e.kind == replay::ReplayError::Kind::ReadMismatch);
  }
}

TEST_CASE("the reference leaky POV proves a type 2 disclosure") {
  LiveServer live("leaky", 44);
  const replay::ReplayResult result = replay::replay_pov(
      ref_script("leaky"), "127.0.0.1", live.port, std::chrono::seconds(10),
      "leaky_ref.pov");
  REQUIRE(result.got_verdict);
  CHECK(result.verdict.success == range::SuccessKind::Type2);
  CHECK(result.report.find("# negotiation type: 2\n") != std::string::npos);
}

TEST_CASE("replays against fixed seeds print identical reports") {
  auto one = [&] {
    LiveServer live("greeter", 4242);
    const replay::ReplayResult result = replay::replay_pov(
        ref_script("greeter"), "127.0.0.1", live.port, std::chrono::seconds(10),
        "greeter_ref.pov");
    return result.report;
  };
  const std::string a = one();
  const std::string b = one();
  CHECK(a == b);
  CHECK(std::count(a.begin(), a.end(), '\n') == 4);
}

TEST_CASE("stdout is data: captures hold raw bytes only") {
  LiveServer live("leaky", 45);
  pov::PovScript script = pov::parse_pov(
      "pov 2\n"
      "negotiate type2\n"
      "write 00\n"
      "readn 5 as prompt\n"
      "readn 4 as leak\n"
      "submit leak\n"
      "waitclose\n");
  const replay::ReplayResult result =
      replay::replay_pov(script, "127.0.0.1", live.port);
  REQUIRE(result.got_verdict);
  CHECK(result.verdict.success == range::SuccessKind::Type2);
}
