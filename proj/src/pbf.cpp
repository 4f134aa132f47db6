#include "pandora/pbf.hpp"

#include <algorithm>
#include <cstring>

#include "pandora/util.hpp"

namespace pandora::pbf {

namespace {

using util::rd_u16;
using util::rd_u32;

struct ForeignMagic {
  ForeignKind kind;
  std::vector<uint8_t> bytes;
};

// On-disk leading bytes of every loader family we refuse to resemble.
// Mach-O appears in both endiannesses plus the fat (universal) magic.
const std::vector<ForeignMagic>& foreign_magic_table() {
  static const std::vector<ForeignMagic> table = {
      {ForeignKind::Elf, {0x7F, 'E', 'L', 'F'}},
      {ForeignKind::Pe, {'M', 'Z'}},
      {ForeignKind::MachO, {0xFE, 0xED, 0xFA, 0xCE}},
      {ForeignKind::MachO, {0xFE, 0xED, 0xFA, 0xCF}},
      {ForeignKind::MachO, {0xCE, 0xFA, 0xED, 0xFE}},
      {ForeignKind::MachO, {0xCF, 0xFA, 0xED, 0xFE}},
      {ForeignKind::MachO, {0xCA, 0xFE, 0xBA, 0xBE}},
      {ForeignKind::MachO, {0xBE, 0xBA, 0xFE, 0xCA}},
      {ForeignKind::Shebang, {'#', '!'}},
  };
  return table;
}

bool starts_with(std::span<const uint8_t> bytes, std::span<const uint8_t> prefix) {
  return bytes.size() >= prefix.size() &&
         std::equal(prefix.begin(), prefix.end(), bytes.begin());
}

uint32_t checksum_of(const std::vector<Section>& sections) {
  std::vector<uint8_t> all;
  for (const auto& s : sections) all.insert(all.end(), s.payload.begin(), s.payload.end());
  return util::crc32_ieee(all);
}

uint8_t perms_for_kind(SectionKind k) {
  return k == SectionKind::Code ? (kPermRead | kPermExec) : (kPermRead | kPermWrite);
}

// Structural checks shared by parse, serialize and verify. Throws the typed
// error for the first violation found.
void check_sections(const std::vector<Section>& sections, uint32_t entry) {
  for (size_t i = 0; i < sections.size(); ++i) {
    const Section& s = sections[i];
    if (s.kind != SectionKind::Code && s.kind != SectionKind::Data)
      throw FormatError("section " + std::to_string(i) + ": unknown kind");
    if (s.perms != perms_for_kind(s.kind))
      throw FormatError("section " + std::to_string(i) +
                        ": perms inconsistent with kind");
    if (s.vaddr % kPageSize != 0)
      throw FormatError("section " + std::to_string(i) + ": vaddr not page-aligned");
    if (s.mem_size < s.file_size)
      throw FormatError("section " + std::to_string(i) + ": mem_size < file_size");
    if (s.mem_size == 0)
      throw FormatError("section " + std::to_string(i) + ": empty mapping");
    if (s.payload.size() != s.file_size)
      throw InvariantViolation("section " + std::to_string(i) +
                               ": payload size != file_size");
    uint64_t end = uint64_t(s.vaddr) + s.mem_size;
    if (end > 0x100000000ULL)
      throw FormatError("section " + std::to_string(i) + ": wraps address space");
  }
  for (size_t i = 0; i < sections.size(); ++i)
    for (size_t j = i + 1; j < sections.size(); ++j) {
      uint64_t a0 = sections[i].vaddr, a1 = a0 + sections[i].mem_size;
      uint64_t b0 = sections[j].vaddr, b1 = b0 + sections[j].mem_size;
      if (a0 < b1 && b0 < a1)
        throw SectionOverlapError("sections " + std::to_string(i) + " and " +
                                  std::to_string(j) + " overlap");
    }
  size_t holding = 0;
  for (const auto& s : sections) {
    if ((s.perms & kPermExec) == 0) continue;
    if (entry >= s.vaddr && entry < s.vaddr + s.mem_size) ++holding;
  }
  if (holding != 1)
    throw BadEntryError("entry 0x" + util::hex32(entry) +
                        " lies inside " + std::to_string(holding) +
                        " executable sections (need exactly 1)");
}

struct ParsedHeader {
  PbfHeader header;
};

ParsedHeader parse_header(std::span<const uint8_t> bytes) {
  if (bytes.size() < kMagic.size())
    throw TruncatedError("input shorter than magic");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw FormatError(kExecFormatErrorMsg);
  if (bytes.size() < kHeaderSize) throw TruncatedError("truncated header");
  ParsedHeader p;
  p.header.version = rd_u16(&bytes[4]);
  p.header.arch = rd_u16(&bytes[6]);
  p.header.entry = rd_u32(&bytes[8]);
  p.header.section_count = rd_u16(&bytes[12]);
  const uint16_t pad = rd_u16(&bytes[14]);
  p.header.checksum = rd_u32(&bytes[16]);
  if (p.header.version != kVersion)
    throw FormatError("unsupported version " + std::to_string(p.header.version));
  if (p.header.arch != kArchPvm32)
    throw FormatError("unsupported arch " + std::to_string(p.header.arch));
  if (pad != 0) throw FormatError("nonzero header padding");
  return p;
}

std::vector<Section> parse_section_table(std::span<const uint8_t> bytes,
                                         uint16_t count) {
  const size_t table_end = kHeaderSize + size_t(count) * kSectionDescSize;
  if (bytes.size() < table_end) throw TruncatedError("truncated section table");
  std::vector<Section> sections;
  sections.reserve(count);
  uint32_t expect_offset = static_cast<uint32_t>(table_end);
  for (uint16_t i = 0; i < count; ++i) {
    const uint8_t* d = &bytes[kHeaderSize + size_t(i) * kSectionDescSize];
    Section s;
    s.kind = static_cast<SectionKind>(d[0]);
    s.perms = d[1];
    if (d[2] != 0 || d[3] != 0)
      throw FormatError("section " + std::to_string(i) + ": nonzero padding");
    s.file_offset = rd_u32(d + 4);
    s.vaddr = rd_u32(d + 8);
    s.file_size = rd_u32(d + 12);
    s.mem_size = rd_u32(d + 16);
    if (s.file_offset != expect_offset)
      throw FormatError("section " + std::to_string(i) +
                        ": non-canonical file_offset");
    uint64_t payload_end = uint64_t(s.file_offset) + s.file_size;
    if (payload_end > bytes.size())
      throw TruncatedError("section " + std::to_string(i) +
                           " payload extends past end of file");
    s.payload.assign(bytes.begin() + s.file_offset,
                     bytes.begin() + s.file_offset + s.file_size);
    expect_offset = static_cast<uint32_t>(payload_end);
    sections.push_back(std::move(s));
  }
  if (bytes.size() != expect_offset)
    throw FormatError("trailing bytes after last section payload");
  return sections;
}

}  // namespace

const char* foreign_kind_name(ForeignKind k) {
  switch (k) {
    case ForeignKind::Elf: return "ELF";
    case ForeignKind::Pe: return "PE";
    case ForeignKind::MachO: return "Mach-O";
    case ForeignKind::Shebang: return "shebang";
    case ForeignKind::Pbf: return "PBF";
    case ForeignKind::Unknown: return "unknown";
  }
  return "unknown";
}

const VerifyCheck* VerifyReport::find(std::string_view name) const {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

ForeignKind check_foreign_format(std::span<const uint8_t> bytes) {
  for (const auto& fm : foreign_magic_table())
    if (starts_with(bytes, fm.bytes)) return fm.kind;
  if (starts_with(bytes, kMagic)) return ForeignKind::Pbf;
  return ForeignKind::Unknown;
}

PandoraBinary parse_binary(std::span<const uint8_t> bytes) {
  ParsedHeader p = parse_header(bytes);
  PandoraBinary b;
  b.header = p.header;
  b.sections = parse_section_table(bytes, p.header.section_count);
  check_sections(b.sections, b.header.entry);
  const uint32_t computed = checksum_of(b.sections);
  if (computed != b.header.checksum)
    throw ChecksumError("checksum mismatch: header " + util::hex32(b.header.checksum) +
                        ", payload " + util::hex32(computed));
  return b;
}

void validate(const PandoraBinary& b) {
  try {
    if (b.header.version != kVersion) throw FormatError("unsupported version");
    if (b.header.arch != kArchPvm32) throw FormatError("unsupported arch");
    if (b.header.section_count != b.sections.size())
      throw InvariantViolation("section_count does not match section list");
    check_sections(b.sections, b.header.entry);
    uint32_t expect_offset =
        static_cast<uint32_t>(kHeaderSize + b.sections.size() * kSectionDescSize);
    for (size_t i = 0; i < b.sections.size(); ++i) {
      if (b.sections[i].file_offset != expect_offset)
        throw InvariantViolation("section " + std::to_string(i) +
                                 ": non-canonical file_offset");
      expect_offset += b.sections[i].file_size;
    }
    if (checksum_of(b.sections) != b.header.checksum)
      throw InvariantViolation("checksum does not match payload");
  } catch (const InvariantViolation&) {
    throw;
  } catch (const PbfError& e) {
    throw InvariantViolation(e.what());
  }
}

std::vector<uint8_t> serialize_binary(const PandoraBinary& b) {
  validate(b);
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  util::wr_u16(out, b.header.version);
  util::wr_u16(out, b.header.arch);
  util::wr_u32(out, b.header.entry);
  util::wr_u16(out, b.header.section_count);
  util::wr_u16(out, 0);
  util::wr_u32(out, b.header.checksum);
  for (const auto& s : b.sections) {
    out.push_back(static_cast<uint8_t>(s.kind));
    out.push_back(s.perms);
    out.push_back(0);
    out.push_back(0);
    util::wr_u32(out, s.file_offset);
    util::wr_u32(out, s.vaddr);
    util::wr_u32(out, s.file_size);
    util::wr_u32(out, s.mem_size);
  }
  for (const auto& s : b.sections)
    out.insert(out.end(), s.payload.begin(), s.payload.end());
  return out;
}

PandoraBinary make_binary(uint32_t entry, std::vector<Section> sections) {
  PandoraBinary b;
  uint32_t offset =
      static_cast<uint32_t>(kHeaderSize + sections.size() * kSectionDescSize);
  for (auto& s : sections) {
    s.perms = perms_for_kind(s.kind);
    s.file_size = static_cast<uint32_t>(s.payload.size());
    if (s.mem_size < s.file_size) s.mem_size = s.file_size;
    s.file_offset = offset;
    offset += s.file_size;
  }
  b.sections = std::move(sections);
  b.header.entry = entry;
  b.header.section_count = static_cast<uint16_t>(b.sections.size());
  b.header.checksum = checksum_of(b.sections);
  validate(b);
  return b;
}

VerifyReport verify_binary(std::span<const uint8_t> bytes) {
  VerifyReport report;
  auto add = [&](std::string name, bool pass, std::string detail) {
    report.checks.push_back({std::move(name), pass, std::move(detail)});
  };

  const bool magic_ok =
      bytes.size() >= kMagic.size() && std::equal(kMagic.begin(), kMagic.end(), bytes.begin());
  add("magic", magic_ok,
      magic_ok ? "PBF signature present" : "leading bytes are not the PBF signature");

  const ForeignKind fk = check_foreign_format(bytes);
  const bool foreign_ok = fk == ForeignKind::Pbf || fk == ForeignKind::Unknown;
  add("foreign-magic", foreign_ok,
      foreign_ok ? "matches no known loader signature"
                 : std::string("matches foreign signature: ") + foreign_kind_name(fk));

  PandoraBinary b;
  bool structure_ok = false;
  std::string structure_detail;
  try {
    ParsedHeader p = parse_header(bytes);
    b.header = p.header;
    b.sections = parse_section_table(bytes, p.header.section_count);
    structure_ok = true;
  } catch (const PbfError& e) {
    structure_detail = e.what();
  }

  if (!structure_ok) {
    add("section-bounds", false,
        magic_ok ? structure_detail : "not evaluated: " + structure_detail);
    add("entry", false, "not evaluated");
    add("checksum", false, "not evaluated");
  } else {
    try {
      check_sections(b.sections, b.header.entry);
      add("section-bounds", true, "descriptors and mappings consistent");
      add("entry", true, "entry inside exactly one executable section");
    } catch (const BadEntryError& e) {
      add("section-bounds", true, "descriptors and mappings consistent");
      add("entry", false, e.what());
    } catch (const PbfError& e) {
      add("section-bounds", false, e.what());
      add("entry", false, "not evaluated");
    }
    const uint32_t computed = checksum_of(b.sections);
    const bool sum_ok = computed == b.header.checksum;
    add("checksum", sum_ok,
        sum_ok ? "payload CRC-32 matches header"
               : "header " + util::hex32(b.header.checksum) + " != payload " +
                     util::hex32(computed));
  }

  report.pass = std::all_of(report.checks.begin(), report.checks.end(),
                            [](const VerifyCheck& c) { return c.pass; });
  return report;
}

}  // namespace pandora::pbf
