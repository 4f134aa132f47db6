#pragma once

#include <chrono>
#include <cstdint>
#include <string>

#include "pandora/frame.hpp"
#include "pandora/pov.hpp"
#include "pandora/range_server.hpp"

namespace pandora::replay {

// The vulnerability manager: drives a POV script against a range-server
// session and renders the verdict report. The client treats stdout purely as
// data; nothing received is ever interpreted or executed host-side.

struct ReplayError : std::runtime_error {
  enum class Kind { Connect, Timeout, Protocol, ReadMismatch };

  ReplayError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind(kind) {}

  Kind kind;
};

struct ReplayResult {
  bool got_verdict = false;
  range::Verdict verdict;
  std::string transcript;  // action-by-action log
  std::string report;      // format_verdict_report output
};

/// Executes the script over an established framed connection. Consecutive
/// write actions coalesce into a single stdin frame, so a payload assembled
/// from several writes reaches the binary as one contiguous burst.
ReplayResult run_script(range::FrameConn& conn, const pov::PovScript& script,
                        std::string_view name);

/// Connects over TCP and runs the script. Throws ReplayError{Connect} when
/// the endpoint is unreachable and {Timeout} when the server stalls.
ReplayResult replay_pov(const pov::PovScript& script, const std::string& host,
                        uint16_t port,
                        std::chrono::seconds timeout = std::chrono::seconds(10),
                        std::string_view name = "pov");

}  // namespace pandora::replay
