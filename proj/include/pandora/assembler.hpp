#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "pandora/pbf.hpp"

namespace pandora::assembler {

// Two-pass assembler for pvm32 text sources ('#' comments, one statement per
// line). Pass 1 assigns addresses and collects labels, pass 2 encodes.
// Directives: .code .data .entry .word .byte .ascii .zero
// Operands: rN registers, decimal/0x/negative immediates, label and label+N.

inline constexpr uint32_t kCodeBase = 0x00010000;
inline constexpr uint32_t kDataBase = 0x00200000;

struct AsmError : std::runtime_error {
  enum class Kind {
    Syntax,
    UnknownMnemonic,
    DuplicateLabel,
    UnresolvedLabel,
    ImmediateOverflow,
  };

  AsmError(Kind kind, int line, const std::string& message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message),
        kind(kind),
        line(line) {}

  Kind kind;
  int line;
};

pbf::PandoraBinary assemble(std::string_view source);

/// One line per 8-byte unit of every code section. Blocks that do not
/// re-encode exactly (unknown opcode, nonzero unused fields) render as a raw
/// ".word lo, hi" pair, so reassembling the output reproduces the code bytes.
std::string disassemble(const pbf::PandoraBinary& b);

}  // namespace pandora::assembler
