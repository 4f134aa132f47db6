#include <doctest.h>

#include <thread>

#include "pandora/corpus.hpp"
#include "pandora/range_server.hpp"
#include "pandora/replay.hpp"
#include "pandora/util.hpp"

using namespace pandora;

namespace {

// Runs a full in-process session: server on one pipe end, a raw frame script
// or the replay engine on the other.
template <typename Client>
range::Verdict run_pipe_session(const pbf::PandoraBinary& binary,
                                uint64_t server_seed, uint64_t vm_seed,
                                Client&& client) {
  range::PipePair pair = range::make_pipe_pair();
  range::Verdict verdict;
  std::thread server([&] {
    verdict = range::run_session(binary, *pair.a, server_seed, vm_seed);
  });
  client(*pair.b);
  server.join();
  return verdict;
}

}  // namespace

TEST_CASE("negotiation accepts strong masks and draws seeded values") {
  util::SplitMix64 stream(99);
  const pov::Type1Response a =
      range::negotiate_type1({0x7F7F7F7F, 0x7F7F7F7F, 5}, stream);
  util::SplitMix64 stream2(99);
  const pov::Type1Response b =
      range::negotiate_type1({0x7F7F7F7F, 0x7F7F7F7F, 5}, stream2);
  CHECK(a == b);  // deterministic given the stream seed
}

TEST_CASE("negotiation rejects weak masks and bad register indices") {
  util::SplitMix64 stream(1);
  CHECK_THROWS_AS(range::negotiate_type1({0x000000FF, 0xFFFFFFFF, 0}, stream),
                  range::NegotiationRejected);
  CHECK_THROWS_AS(range::negotiate_type1({0xFFFFFFFF, 0x000000FF, 0}, stream),
                  range::NegotiationRejected);
  CHECK_THROWS_AS(range::negotiate_type1({0xFFFFFFFF, 0xFFFFFFFF, 8}, stream),
                  range::NegotiationRejected);
}

TEST_CASE("type 2 negotiation announces the secret region") {
  const pov::Type2Response r = range::negotiate_type2();
  CHECK(r.addr == 0x43470000);
  CHECK(r.size == 0x1000);
  CHECK(r.length == 4);
}

TEST_CASE("judge_type1 satisfies the masked-equality definition") {
  svm::FaultRecord fault;
  fault.fault_ip = 0x1E5D4C03;
  fault.regs[5] = 0x22392E5D;
  pov::Type1Negotiation n{0x7F7F7F7F, 0x7F7F7F7F, 5, 0x1E5D4C03, 0x22392E5D};
  CHECK(range::judge_type1(fault, n));

  // zero masks make any value pair equal
  pov::Type1Negotiation zero{0, 0, 3, 0x12345678, 0x9ABCDEF0};
  CHECK(range::judge_type1(fault, zero));

  // no fault, no success
  CHECK_FALSE(range::judge_type1(std::nullopt, n));

  // a flipped bit under the mask breaks it
  n.ipvalue ^= 0x01;
  CHECK_FALSE(range::judge_type1(fault, n));
}

TEST_CASE("judge_type1 is monotone under mask weakening") {
  util::SplitMix64 rng(0x107A);
  for (int i = 0; i < 500; ++i) {
    svm::FaultRecord fault;
    fault.fault_ip = rng.next_u32();
    for (auto& r : fault.regs) r = rng.next_u32();
    pov::Type1Negotiation n;
    n.ipmask = rng.next_u32();
    n.regmask = rng.next_u32();
    n.regnum = uint32_t(rng.below(8));
    // Half the time, force a match under the mask.
    if (rng.below(2)) {
      n.ipvalue = fault.fault_ip ^ (rng.next_u32() & ~n.ipmask);
      n.regvalue = fault.regs[n.regnum] ^ (rng.next_u32() & ~n.regmask);
    } else {
      n.ipvalue = rng.next_u32();
      n.regvalue = rng.next_u32();
    }
    if (!range::judge_type1(fault, n)) continue;
    pov::Type1Negotiation weaker = n;
    weaker.ipmask &= rng.next_u32();
    weaker.regmask &= rng.next_u32();
    CHECK(range::judge_type1(fault, weaker));
  }
}

TEST_CASE("judge_type2 window and length rules") {
  const std::vector<uint8_t> secret = svm::make_secret(123);
  pov::Type2Negotiation n{0x43470000, 0x1000, 4};

  std::vector<uint8_t> window(secret.begin() + 100, secret.begin() + 104);
  CHECK(range::judge_type2(window, secret, n));

  std::vector<uint8_t> three(secret.begin() + 100, secret.begin() + 103);
  CHECK_FALSE(range::judge_type2(three, secret, n));

  // brute-force a 4-byte sequence absent from the secret page
  util::SplitMix64 rng(7);
  std::vector<uint8_t> absent(4);
  while (true) {
    for (auto& b : absent) b = uint8_t(rng.below(256));
    auto it = std::search(secret.begin(), secret.end(), absent.begin(), absent.end());
    if (it == secret.end()) break;
  }
  CHECK_FALSE(range::judge_type2(absent, secret, n));
}

TEST_CASE("the verdict report reproduces the four-line block") {
  range::Verdict v;
  v.crashed = true;
  v.success = range::SuccessKind::Type1;
  v.nego = range::NegoKind::Type1;
  v.type1 = {0x7F7F7F7F, 0x7F7F7F7F, 5, 0x1E5D4C03, 0x22392E5D};
  const std::string report = range::format_verdict_report(v, "pov_1.pov");
  CHECK(report ==
        "# pov_1.pov\n"
        "# negotiation type: 1\n"
        "# type 1 masks: 7f7f7f7f 7f7f7f7f\n"
        "# type 1 pov: 1e5d4c03 22392e5d 5\n");
}

TEST_CASE("type 2 and negotiation-free verdicts have their own report forms") {
  range::Verdict v;
  v.nego = range::NegoKind::Type2;
  v.type2 = {0x43470000, 0x1000, 4};
  CHECK(range::format_verdict_report(v, "x") ==
        "# x\n# negotiation type: 2\n# type 2 pov: 43470000 00001000 4\n");

  range::Verdict none;
  CHECK(range::format_verdict_report(none, "y") ==
        "# y\n# negotiation type: none\n");
}

TEST_CASE("verdicts round-trip through the wire codec") {
  util::SplitMix64 rng(0xBEEF);
  for (int i = 0; i < 300; ++i) {
    range::Verdict v;
    v.crashed = rng.below(2) == 1;
    if (rng.below(2)) {
      svm::FaultRecord f;
      f.reason = static_cast<svm::FaultReason>(1 + rng.below(5));
      f.fault_ip = rng.next_u32();
      f.site_ip = f.fault_ip;  // wire form carries one address
      for (auto& r : f.regs) r = rng.next_u32();
      v.fault = f;
    }
    v.success = static_cast<range::SuccessKind>(rng.below(3));
    v.nego = static_cast<range::NegoKind>(rng.below(3));
    if (v.nego == range::NegoKind::Type1)
      v.type1 = {rng.next_u32(), rng.next_u32(), uint32_t(rng.below(8)),
                 rng.next_u32(), rng.next_u32()};
    if (v.nego == range::NegoKind::Type2)
      v.type2 = {rng.next_u32(), rng.next_u32(), rng.next_u32()};
    if (rng.below(3) == 0) v.note = "note " + std::to_string(i);
    CHECK(range::decode_verdict(range::encode_verdict(v)) == v);
  }
}

TEST_CASE("a benign session ends with no crash and no success") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  const range::Verdict v =
      run_pipe_session(greeter, 10, 11, [](range::FrameConn& conn) {
        range::Frame f;
        f.channel = range::Channel::Stdin;
        f.payload = {'3', '\n'};
        conn.write_frame(f);
        conn.close_write();
        range::Frame in;
        while (conn.read_frame(in)) {
        }
      });
  CHECK_FALSE(v.crashed);
  CHECK(v.success == range::SuccessKind::None);
  CHECK(v.nego == range::NegoKind::None);
}

TEST_CASE("a second negotiation poisons the session") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  const range::Verdict v =
      run_pipe_session(greeter, 10, 11, [](range::FrameConn& conn) {
        const auto request =
            pov::encode_request(pov::Type1Request{0xFFFFFFFF, 0xFFFFFFFF, 5});
        range::Frame f;
        f.channel = range::Channel::Negotiation;
        f.payload = request;
        conn.write_frame(f);
        conn.write_frame(f);  // double negotiation
        conn.close_write();
        range::Frame in;
        while (conn.read_frame(in)) {
        }
      });
  CHECK(v.success == range::SuccessKind::None);
  CHECK(v.note.find("double negotiation") != std::string::npos);
}

TEST_CASE("rejected negotiations surface in the verdict note") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  const range::Verdict v =
      run_pipe_session(greeter, 10, 11, [](range::FrameConn& conn) {
        const auto request =
            pov::encode_request(pov::Type1Request{0x000000FF, 0xFFFFFFFF, 5});
        range::Frame f;
        f.channel = range::Channel::Negotiation;
        f.payload = request;
        conn.write_frame(f);
        conn.close_write();
        range::Frame in;
        while (conn.read_frame(in)) {
        }
      });
  CHECK(v.success == range::SuccessKind::None);
  CHECK(v.note.find("rejected") != std::string::npos);
}

TEST_CASE("session determinism: equal seeds and bytes give equal verdict frames") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  const pov::PovScript script = pov::parse_pov(
      corpus::find_challenge("greeter")->ref_pov);
  auto one_run = [&] {
    range::PipePair pair = range::make_pipe_pair();
    range::Verdict verdict;
    std::thread server([&] {
      verdict = range::run_session(greeter, *pair.a, 77, 78);
    });
    replay::run_script(*pair.b, script, "det");
    server.join();
    return range::encode_verdict(verdict);
  };
  CHECK(one_run() == one_run());
}

TEST_CASE("the verdict frame is always the final frame of a session") {
  const pbf::PandoraBinary greeter = corpus::build_challenge("greeter");
  range::PipePair pair = range::make_pipe_pair();
  std::thread server([&] { range::run_session(greeter, *pair.a, 5, 6); });
  range::Frame f;
  f.channel = range::Channel::Stdin;
  f.payload = {'3', '\n'};
  pair.b->write_frame(f);
  pair.b->close_write();
  bool saw_verdict = false;
  range::Frame in;
  while (pair.b->read_frame(in)) {
    CHECK_FALSE(saw_verdict);  // nothing may follow the verdict
    if (in.channel == range::Channel::Verdict) saw_verdict = true;
  }
  CHECK(saw_verdict);
  server.join();
}
