#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace pandora::pov {

// Declarative proof-of-vulnerability scripts plus the negotiation wire codec
// shared by the range server and the replay client. Scripts are plain text
// (one action per line, '#' comments) so an exploit artifact stays
// inspectable; the grammar is pinned in docs/pov-format.md.

struct PovError : std::runtime_error {
  enum class Kind {
    Syntax,
    UnboundVariable,
    MultipleNegotiations,
    TypeMismatch,
    BadType,
    ShortMessage,
  };

  PovError(Kind kind, int line, const std::string& message)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message
                                    : message),
        kind(kind),
        line(line) {}

  Kind kind;
  int line;
};

// --- write templates ------------------------------------------------------

struct PadToken {  // pad(N,BB): N copies of hex byte BB
  uint32_t count = 0;
  uint8_t byte = 0;
  bool operator==(const PadToken&) const = default;
};
struct VarToken {  // var(name): 4 bytes, little-endian, of a bound scalar
  std::string name;
  bool operator==(const VarToken&) const = default;
};
struct BytesToken {  // literal token or hex(...)
  std::vector<uint8_t> data;
  bool operator==(const BytesToken&) const = default;
};
using TemplateToken = std::variant<BytesToken, PadToken, VarToken>;
using Template = std::vector<TemplateToken>;

using BindingValue = std::variant<uint32_t, std::vector<uint8_t>>;
using Bindings = std::map<std::string, BindingValue>;

/// Expands a template: literals copied, pad repeated, var(x) as 4 bytes LE.
/// Throws PovError{UnboundVariable} for a missing binding and
/// {TypeMismatch} when var() names a captured buffer instead of a scalar.
std::vector<uint8_t> substitute(const Template& tmpl, const Bindings& bindings);

// --- script actions -------------------------------------------------------

struct WriteAction {
  Template data;
  bool operator==(const WriteAction&) const = default;
};
struct ReadNAction {
  uint32_t count = 0;
  std::string capture;  // optional
  bool operator==(const ReadNAction&) const = default;
};
struct ReadUntilAction {
  uint8_t delim = 0;
  std::string capture;  // optional; excludes the delimiter
  bool operator==(const ReadUntilAction&) const = default;
};
struct NegotiateType1Action {
  uint32_t ipmask = 0;
  uint32_t regmask = 0;
  uint32_t regnum = 0;
  bool operator==(const NegotiateType1Action&) const = default;
};
struct NegotiateType2Action {
  bool operator==(const NegotiateType2Action&) const = default;
};
struct SliceAction {
  std::string src;
  uint32_t offset = 0;
  uint32_t len = 0;
  std::string dest;
  bool operator==(const SliceAction&) const = default;
};
struct SubmitAction {  // type-2 submission of a captured buffer
  std::string var;
  bool operator==(const SubmitAction&) const = default;
};
struct WaitCloseAction {
  bool operator==(const WaitCloseAction&) const = default;
};

using PovAction = std::variant<WriteAction, ReadNAction, ReadUntilAction,
                               NegotiateType1Action, NegotiateType2Action,
                               SliceAction, SubmitAction, WaitCloseAction>;

struct PovScript {
  int type = 1;  // declared POV type: 1 or 2
  std::vector<PovAction> actions;
  bool operator==(const PovScript&) const = default;
};

/// Parses and statically validates a script: exactly one negotiation, which
/// matches the declared type; variables bound before use; submit only in
/// type-2 scripts.
PovScript parse_pov(std::string_view text);

/// Canonical text form; parse_pov(serialize_pov(s)) == s.
std::string serialize_pov(const PovScript& s);

// --- negotiation messages -------------------------------------------------

inline constexpr uint32_t kMinMaskPopcount = 20;

struct Type1Request {
  uint32_t ipmask = 0;
  uint32_t regmask = 0;
  uint32_t regnum = 0;
  bool operator==(const Type1Request&) const = default;
};
struct Type2Request {
  bool operator==(const Type2Request&) const = default;
};
using NegotiationRequest = std::variant<Type1Request, Type2Request>;

struct Type1Response {
  uint32_t ipvalue = 0;
  uint32_t regvalue = 0;
  bool operator==(const Type1Response&) const = default;
};
struct Type2Response {
  uint32_t addr = 0;
  uint32_t size = 0;
  uint32_t length = 0;
  bool operator==(const Type2Response&) const = default;
};

// Completed negotiations, as echoed in verdicts and used by the judges.
struct Type1Negotiation {
  uint32_t ipmask = 0;
  uint32_t regmask = 0;
  uint32_t regnum = 0;
  uint32_t ipvalue = 0;
  uint32_t regvalue = 0;
  bool operator==(const Type1Negotiation&) const = default;
};
struct Type2Negotiation {
  uint32_t addr = 0;
  uint32_t size = 0;
  uint32_t length = 0;
  bool operator==(const Type2Negotiation&) const = default;
};

// Wire layout (all little-endian, exact length required):
//   Type 1 request:  u32 type=1, u32 ipmask, u32 regmask, u32 regnum
//   Type 1 response: u32 ipvalue, u32 regvalue
//   Type 2 request:  u32 type=2
//   Type 2 response: u32 addr, u32 size, u32 length
//   Type 2 submission: `length` raw bytes
std::vector<uint8_t> encode_request(const NegotiationRequest& req);
NegotiationRequest decode_request(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_type1_response(const Type1Response& resp);
Type1Response decode_type1_response(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_type2_response(const Type2Response& resp);
Type2Response decode_type2_response(std::span<const uint8_t> bytes);

}  // namespace pandora::pov
