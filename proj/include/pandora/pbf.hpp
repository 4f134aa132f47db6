#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pandora::pbf {

// Pandora Binary Format. A deliberately host-alien executable container:
// its magic matches no loader on any mainstream operating system, so a
// challenge binary copied out of the range is inert. Layout is fixed
// little-endian and documented in docs/pbf-format.md.

inline constexpr std::array<uint8_t, 4> kMagic = {0x7F, 'P', 'B', 'F'};
inline constexpr uint16_t kVersion = 1;
inline constexpr uint16_t kArchPvm32 = 1;
inline constexpr uint32_t kPageSize = 4096;
inline constexpr size_t kHeaderSize = 20;
inline constexpr size_t kSectionDescSize = 20;

// Exact message a generic shell prints for an alien binary; `verify` and
// parse_binary reproduce it so range-side and host-side failures read alike.
inline constexpr const char* kExecFormatErrorMsg =
    "cannot execute binary file: Exec format error";

enum class SectionKind : uint8_t { Code = 1, Data = 2 };

enum PermBits : uint8_t {
  kPermRead = 1,
  kPermWrite = 2,
  kPermExec = 4,
};

struct PbfError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : PbfError {
  using PbfError::PbfError;
};
struct TruncatedError : PbfError {
  using PbfError::PbfError;
};
struct ChecksumError : PbfError {
  using PbfError::PbfError;
};
struct SectionOverlapError : PbfError {
  using PbfError::PbfError;
};
struct BadEntryError : PbfError {
  using PbfError::PbfError;
};
struct InvariantViolation : PbfError {
  using PbfError::PbfError;
};

struct Section {
  SectionKind kind = SectionKind::Code;
  uint8_t perms = 0;
  uint32_t file_offset = 0;  // canonical: packed right after the descriptor table
  uint32_t vaddr = 0;
  uint32_t file_size = 0;
  uint32_t mem_size = 0;  // >= file_size; excess is zero-filled at load
  std::vector<uint8_t> payload;

  bool operator==(const Section&) const = default;
};

struct PbfHeader {
  uint16_t version = kVersion;
  uint16_t arch = kArchPvm32;
  uint32_t entry = 0;
  uint16_t section_count = 0;
  uint32_t checksum = 0;  // CRC-32 over all section payload bytes, in order

  bool operator==(const PbfHeader&) const = default;
};

struct PandoraBinary {
  PbfHeader header;
  std::vector<Section> sections;

  bool operator==(const PandoraBinary&) const = default;
};

enum class ForeignKind { Elf, Pe, MachO, Shebang, Pbf, Unknown };

const char* foreign_kind_name(ForeignKind k);

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool pass = false;

  const VerifyCheck* find(std::string_view name) const;
};

/// Parses and fully validates a PBF image.
/// Throws FormatError (with kExecFormatErrorMsg when the magic is foreign),
/// TruncatedError, ChecksumError, SectionOverlapError or BadEntryError.
PandoraBinary parse_binary(std::span<const uint8_t> bytes);

/// Emits the canonical byte image. Throws InvariantViolation if `b` breaks
/// any container invariant. parse_binary(serialize_binary(b)) == b.
std::vector<uint8_t> serialize_binary(const PandoraBinary& b);

/// Runs every container check and reports each outcome instead of throwing.
VerifyReport verify_binary(std::span<const uint8_t> bytes);

/// Classifies leading bytes against the known-loader magic table.
ForeignKind check_foreign_format(std::span<const uint8_t> bytes);

/// Throws InvariantViolation describing the first violated invariant.
void validate(const PandoraBinary& b);

/// Builds a canonical binary from sections: assigns header fields, file
/// offsets and checksum, sets perms from section kind, then validates.
PandoraBinary make_binary(uint32_t entry, std::vector<Section> sections);

}  // namespace pandora::pbf
