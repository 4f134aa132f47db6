#include "pandora/assembler.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "pandora/isa.hpp"
#include "pandora/util.hpp"

namespace pandora::assembler {

namespace {

using isa::Opcode;
using isa::OperandForm;
using Kind = AsmError::Kind;

struct Token {
  std::string text;
};

struct Statement {
  int line = 0;
  std::string label;             // optional "name:" prefix
  std::string op;                // mnemonic or directive (".word" etc.)
  std::vector<std::string> args; // comma/space separated operands
  std::string raw_args;          // original tail, for .ascii
};

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::toupper(c); });
  return s;
}

// Strips a '#' comment, honoring double-quoted strings for .ascii lines.
std::string strip_comment(std::string_view line) {
  std::string out;
  bool in_quote = false;
  bool escaped = false;
  for (char c : line) {
    if (in_quote) {
      out.push_back(c);
      if (escaped)
        escaped = false;
      else if (c == '\\')
        escaped = true;
      else if (c == '"')
        in_quote = false;
      continue;
    }
    if (c == '#') break;
    if (c == '"') in_quote = true;
    out.push_back(c);
  }
  return out;
}

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<Statement> parse_lines(std::string_view source) {
  std::vector<Statement> out;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= source.size()) {
    size_t nl = source.find('\n', pos);
    std::string_view raw = source.substr(
        pos, nl == std::string_view::npos ? source.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? source.size() + 1 : nl + 1;
    ++line_no;

    std::string text = trim(strip_comment(raw));
    if (text.empty()) continue;

    Statement st;
    st.line = line_no;

    // optional leading "label:" (identifier followed by ':')
    if (is_ident_start(text[0])) {
      size_t i = 1;
      while (i < text.size() && is_ident_char(text[i])) ++i;
      if (i < text.size() && text[i] == ':') {
        st.label = text.substr(0, i);
        text = trim(text.substr(i + 1));
      }
    }
    if (text.empty()) {
      out.push_back(std::move(st));
      continue;
    }

    size_t sp = text.find_first_of(" \t");
    st.op = text.substr(0, sp);
    std::string tail = sp == std::string::npos ? "" : trim(text.substr(sp + 1));
    st.raw_args = tail;
    // split on commas and whitespace (outside quotes)
    std::string cur;
    bool in_quote = false, escaped = false;
    for (char c : tail) {
      if (in_quote) {
        cur.push_back(c);
        if (escaped)
          escaped = false;
        else if (c == '\\')
          escaped = true;
        else if (c == '"')
          in_quote = false;
        continue;
      }
      if (c == '"') {
        in_quote = true;
        cur.push_back(c);
        continue;
      }
      if (c == ',' || c == ' ' || c == '\t') {
        if (!cur.empty()) st.args.push_back(std::move(cur));
        cur.clear();
        continue;
      }
      cur.push_back(c);
    }
    if (!cur.empty()) st.args.push_back(std::move(cur));
    out.push_back(std::move(st));
  }
  return out;
}

std::vector<uint8_t> decode_string_literal(const std::string& arg, int line) {
  if (arg.size() < 2 || arg.front() != '"' || arg.back() != '"')
    throw AsmError(Kind::Syntax, line, ".ascii expects a double-quoted string");
  std::vector<uint8_t> out;
  for (size_t i = 1; i + 1 < arg.size(); ++i) {
    char c = arg[i];
    if (c != '\\') {
      out.push_back(static_cast<uint8_t>(c));
      continue;
    }
    if (i + 2 >= arg.size() + 1) throw AsmError(Kind::Syntax, line, "dangling escape");
    char e = arg[++i];
    switch (e) {
      case 'n': out.push_back('\n'); break;
      case 't': out.push_back('\t'); break;
      case 'r': out.push_back('\r'); break;
      case '0': out.push_back(0); break;
      case '\\': out.push_back('\\'); break;
      case '"': out.push_back('"'); break;
      case 'x': {
        if (i + 2 >= arg.size())
          throw AsmError(Kind::Syntax, line, "\\x needs two hex digits");
        auto hex = [&](char h) -> int {
          if (h >= '0' && h <= '9') return h - '0';
          if (h >= 'a' && h <= 'f') return h - 'a' + 10;
          if (h >= 'A' && h <= 'F') return h - 'A' + 10;
          throw AsmError(Kind::Syntax, line, "bad hex digit in \\x escape");
        };
        out.push_back(static_cast<uint8_t>(hex(arg[i + 1]) * 16 + hex(arg[i + 2])));
        i += 2;
        break;
      }
      default:
        throw AsmError(Kind::Syntax, line, std::string("unknown escape \\") + e);
    }
  }
  return out;
}

struct ExprValue {
  std::optional<std::string> label;  // when set, add label address to offset
  int64_t offset = 0;
};

// number | label | label+N | label-N
ExprValue parse_expr(const std::string& arg, int line) {
  ExprValue v;
  if (arg.empty()) throw AsmError(Kind::Syntax, line, "empty operand");
  auto parse_number = [&](std::string_view text) -> int64_t {
    bool neg = false;
    if (!text.empty() && (text[0] == '-' || text[0] == '+')) {
      neg = text[0] == '-';
      text.remove_prefix(1);
    }
    int base = 10;
    if (text.size() > 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X')) {
      base = 16;
      text.remove_prefix(2);
    }
    uint64_t mag = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), mag, base);
    if (ec != std::errc() || p != text.data() + text.size())
      throw AsmError(Kind::Syntax, line, "bad number '" + arg + "'");
    if (mag > 0x100000000ULL)
      throw AsmError(Kind::ImmediateOverflow, line, "immediate out of range");
    return neg ? -static_cast<int64_t>(mag) : static_cast<int64_t>(mag);
  };

  if (is_ident_start(arg[0])) {
    size_t i = 1;
    while (i < arg.size() && is_ident_char(arg[i])) ++i;
    v.label = arg.substr(0, i);
    if (i < arg.size()) {
      if (arg[i] != '+' && arg[i] != '-')
        throw AsmError(Kind::Syntax, line, "bad operand '" + arg + "'");
      int64_t off = parse_number(std::string_view(arg).substr(i + 1));
      v.offset = arg[i] == '-' ? -off : off;
    }
    return v;
  }
  v.offset = parse_number(arg);
  return v;
}

std::optional<uint8_t> parse_register(const std::string& arg) {
  if (arg.size() != 2 || (arg[0] != 'r' && arg[0] != 'R')) return std::nullopt;
  if (arg[1] < '0' || arg[1] > '7') return std::nullopt;
  return static_cast<uint8_t>(arg[1] - '0');
}

enum class SectionSel { None, Code, Data };

struct PendingInstr {
  int line = 0;
  Opcode op = Opcode::Invalid;
  uint8_t rd = 0, rs1 = 0, rs2 = 0;
  ExprValue imm;
  size_t offset = 0;  // into the code image
};

struct PendingWord {
  int line = 0;
  ExprValue value;
  SectionSel section = SectionSel::Code;
  size_t offset = 0;
};

uint32_t resolve(const ExprValue& v, const std::map<std::string, uint32_t>& labels,
                 int line) {
  int64_t value = v.offset;
  if (v.label) {
    auto it = labels.find(*v.label);
    if (it == labels.end())
      throw AsmError(Kind::UnresolvedLabel, line, "unresolved label '" + *v.label + "'");
    value += it->second;
  }
  if (value < -int64_t(0x80000000LL) || value > int64_t(0xFFFFFFFFLL))
    throw AsmError(Kind::ImmediateOverflow, line, "immediate out of range");
  return static_cast<uint32_t>(value);
}

}  // namespace

pbf::PandoraBinary assemble(std::string_view source) {
  const std::vector<Statement> statements = parse_lines(source);

  std::map<std::string, uint32_t> labels;
  std::vector<uint8_t> code, data;
  std::vector<PendingInstr> instrs;
  std::vector<PendingWord> words;
  std::optional<ExprValue> entry;
  int entry_line = 0;

  SectionSel section = SectionSel::Code;
  auto image_of = [](SectionSel s, std::vector<uint8_t>& c,
                     std::vector<uint8_t>& d) -> std::vector<uint8_t>& {
    return s == SectionSel::Data ? d : c;
  };

  auto here = [&](SectionSel s) {
    return s == SectionSel::Data ? kDataBase + static_cast<uint32_t>(data.size())
                                 : kCodeBase + static_cast<uint32_t>(code.size());
  };

  for (const Statement& st : statements) {
    if (!st.label.empty()) {
      if (labels.count(st.label))
        throw AsmError(Kind::DuplicateLabel, st.line,
                       "duplicate label '" + st.label + "'");
      labels[st.label] = here(section);
    }
    if (st.op.empty()) continue;

    if (st.op[0] == '.') {
      const std::string d = st.op;
      if (d == ".code") {
        section = SectionSel::Code;
      } else if (d == ".data") {
        section = SectionSel::Data;
      } else if (d == ".entry") {
        if (st.args.size() != 1)
          throw AsmError(Kind::Syntax, st.line, ".entry expects one operand");
        entry = parse_expr(st.args[0], st.line);
        entry_line = st.line;
      } else if (d == ".word") {
        if (st.args.empty())
          throw AsmError(Kind::Syntax, st.line, ".word expects at least one value");
        for (const auto& a : st.args) {
          auto& img = image_of(section, code, data);
          words.push_back({st.line, parse_expr(a, st.line), section, img.size()});
          img.insert(img.end(), {0, 0, 0, 0});
        }
      } else if (d == ".byte") {
        if (st.args.empty())
          throw AsmError(Kind::Syntax, st.line, ".byte expects at least one value");
        for (const auto& a : st.args) {
          ExprValue v = parse_expr(a, st.line);
          if (v.label)
            throw AsmError(Kind::Syntax, st.line, ".byte cannot take a label");
          if (v.offset < -128 || v.offset > 255)
            throw AsmError(Kind::ImmediateOverflow, st.line, "byte out of range");
          image_of(section, code, data).push_back(static_cast<uint8_t>(v.offset));
        }
      } else if (d == ".ascii") {
        auto bytes = decode_string_literal(trim(st.raw_args), st.line);
        auto& img = image_of(section, code, data);
        img.insert(img.end(), bytes.begin(), bytes.end());
      } else if (d == ".zero") {
        if (st.args.size() != 1)
          throw AsmError(Kind::Syntax, st.line, ".zero expects a count");
        ExprValue v = parse_expr(st.args[0], st.line);
        if (v.label || v.offset < 0 || v.offset > 0x100000)
          throw AsmError(Kind::Syntax, st.line, "bad .zero count");
        auto& img = image_of(section, code, data);
        img.insert(img.end(), static_cast<size_t>(v.offset), 0);
      } else {
        throw AsmError(Kind::UnknownMnemonic, st.line, "unknown directive " + d);
      }
      continue;
    }

    // instruction
    if (section != SectionSel::Code)
      throw AsmError(Kind::Syntax, st.line, "instruction outside .code");
    const std::string mnemonic = upper(st.op);
    auto op = isa::opcode_for_mnemonic(mnemonic);
    if (!op)
      throw AsmError(Kind::UnknownMnemonic, st.line,
                     "unknown mnemonic '" + st.op + "'");
    const isa::OpInfo* info = isa::op_info(*op);

    PendingInstr pi;
    pi.line = st.line;
    pi.op = *op;
    pi.offset = code.size();

    auto need_args = [&](size_t lo, size_t hi) {
      if (st.args.size() < lo || st.args.size() > hi)
        throw AsmError(Kind::Syntax, st.line,
                       mnemonic + ": wrong operand count");
    };
    auto reg_arg = [&](size_t i) {
      auto r = parse_register(st.args[i]);
      if (!r)
        throw AsmError(Kind::Syntax, st.line,
                       mnemonic + ": operand " + std::to_string(i + 1) +
                           " must be a register r0..r7");
      return *r;
    };

    switch (info->form) {
      case OperandForm::None:
        need_args(0, 0);
        break;
      case OperandForm::RdImm:
        need_args(2, 2);
        pi.rd = reg_arg(0);
        pi.imm = parse_expr(st.args[1], st.line);
        break;
      case OperandForm::RdRs1:
        need_args(2, 2);
        pi.rd = reg_arg(0);
        pi.rs1 = reg_arg(1);
        break;
      case OperandForm::RdRs1Rs2:
        need_args(3, 3);
        pi.rd = reg_arg(0);
        pi.rs1 = reg_arg(1);
        pi.rs2 = reg_arg(2);
        break;
      case OperandForm::RdRs1Imm:
        need_args(3, 3);
        pi.rd = reg_arg(0);
        pi.rs1 = reg_arg(1);
        pi.imm = parse_expr(st.args[2], st.line);
        break;
      case OperandForm::Rs1Rs2:
        need_args(2, 2);
        pi.rs1 = reg_arg(0);
        pi.rs2 = reg_arg(1);
        break;
      case OperandForm::Rs1Imm:
        need_args(2, 2);
        pi.rs1 = reg_arg(0);
        pi.imm = parse_expr(st.args[1], st.line);
        break;
      case OperandForm::Imm:
        need_args(1, 1);
        pi.imm = parse_expr(st.args[0], st.line);
        break;
      case OperandForm::Rs1:
        need_args(1, 1);
        pi.rs1 = reg_arg(0);
        break;
      case OperandForm::Rd:
        need_args(1, 1);
        pi.rd = reg_arg(0);
        break;
      case OperandForm::RdRs1OptImm:
        need_args(2, 3);
        pi.rd = reg_arg(0);
        pi.rs1 = reg_arg(1);
        if (st.args.size() == 3) pi.imm = parse_expr(st.args[2], st.line);
        break;
      case OperandForm::Rs1Rs2OptImm:
        need_args(2, 3);
        pi.rs1 = reg_arg(0);
        pi.rs2 = reg_arg(1);
        if (st.args.size() == 3) pi.imm = parse_expr(st.args[2], st.line);
        break;
    }
    instrs.push_back(std::move(pi));
    code.insert(code.end(), isa::kInstructionSize, 0);
  }

  // pass 2: encode with resolved labels
  for (const PendingInstr& pi : instrs) {
    isa::Instruction ins;
    ins.opcode = pi.op;
    ins.rd = pi.rd;
    ins.rs1 = pi.rs1;
    ins.rs2 = pi.rs2;
    ins.imm = resolve(pi.imm, labels, pi.line);
    isa::encode(ins, std::span<uint8_t, isa::kInstructionSize>(
                         &code[pi.offset], isa::kInstructionSize));
  }
  for (const PendingWord& pw : words) {
    auto& img = pw.section == SectionSel::Data ? data : code;
    util::wr_u32_at(&img[pw.offset], resolve(pw.value, labels, pw.line));
  }

  if (code.empty())
    throw AsmError(Kind::Syntax, statements.empty() ? 1 : statements.back().line,
                   "no code emitted");

  uint32_t entry_addr = kCodeBase;
  if (entry) entry_addr = resolve(*entry, labels, entry_line);

  std::vector<pbf::Section> sections;
  {
    pbf::Section s;
    s.kind = pbf::SectionKind::Code;
    s.vaddr = kCodeBase;
    s.payload = code;
    s.mem_size = static_cast<uint32_t>(code.size());
    sections.push_back(std::move(s));
  }
  if (!data.empty()) {
    pbf::Section s;
    s.kind = pbf::SectionKind::Data;
    s.vaddr = kDataBase;
    s.payload = data;
    s.mem_size = static_cast<uint32_t>(data.size());
    sections.push_back(std::move(s));
  }
  return pbf::make_binary(entry_addr, std::move(sections));
}

namespace {

std::string render_imm(uint32_t imm) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%x", imm);
  return buf;
}

// Renders one decoded instruction, or nothing if it would not re-encode to
// the identical 8 bytes.
std::optional<std::string> render(const isa::Instruction& ins) {
  const isa::OpInfo* info = isa::op_info(ins.opcode);
  if (!info) return std::nullopt;

  auto reg = [](uint8_t r) { return "r" + std::to_string(r); };
  auto used_ok = [&](bool use_rd, bool use_rs1, bool use_rs2, bool use_imm) {
    if (!use_rd && ins.rd != 0) return false;
    if (!use_rs1 && ins.rs1 != 0) return false;
    if (!use_rs2 && ins.rs2 != 0) return false;
    if (!use_imm && ins.imm != 0) return false;
    if (use_rd && ins.rd >= isa::kRegisterCount) return false;
    if (use_rs1 && ins.rs1 >= isa::kRegisterCount) return false;
    if (use_rs2 && ins.rs2 >= isa::kRegisterCount) return false;
    return true;
  };

  std::string m(info->mnemonic);
  switch (info->form) {
    case OperandForm::None:
      if (!used_ok(false, false, false, false)) return std::nullopt;
      return m;
    case OperandForm::RdImm:
      if (!used_ok(true, false, false, true)) return std::nullopt;
      return m + " " + reg(ins.rd) + ", " + render_imm(ins.imm);
    case OperandForm::RdRs1:
      if (!used_ok(true, true, false, false)) return std::nullopt;
      return m + " " + reg(ins.rd) + ", " + reg(ins.rs1);
    case OperandForm::RdRs1Rs2:
      if (!used_ok(true, true, true, false)) return std::nullopt;
      return m + " " + reg(ins.rd) + ", " + reg(ins.rs1) + ", " + reg(ins.rs2);
    case OperandForm::RdRs1Imm:
      if (!used_ok(true, true, false, true)) return std::nullopt;
      return m + " " + reg(ins.rd) + ", " + reg(ins.rs1) + ", " + render_imm(ins.imm);
    case OperandForm::Rs1Rs2:
      if (!used_ok(false, true, true, false)) return std::nullopt;
      return m + " " + reg(ins.rs1) + ", " + reg(ins.rs2);
    case OperandForm::Rs1Imm:
      if (!used_ok(false, true, false, true)) return std::nullopt;
      return m + " " + reg(ins.rs1) + ", " + render_imm(ins.imm);
    case OperandForm::Imm:
      if (!used_ok(false, false, false, true)) return std::nullopt;
      return m + " " + render_imm(ins.imm);
    case OperandForm::Rs1:
      if (!used_ok(false, true, false, false)) return std::nullopt;
      return m + " " + reg(ins.rs1);
    case OperandForm::Rd:
      if (!used_ok(true, false, false, false)) return std::nullopt;
      return m + " " + reg(ins.rd);
    case OperandForm::RdRs1OptImm:
      if (!used_ok(true, true, false, true)) return std::nullopt;
      if (ins.imm == 0) return m + " " + reg(ins.rd) + ", " + reg(ins.rs1);
      return m + " " + reg(ins.rd) + ", " + reg(ins.rs1) + ", " + render_imm(ins.imm);
    case OperandForm::Rs1Rs2OptImm:
      if (!used_ok(false, true, true, true)) return std::nullopt;
      if (ins.imm == 0) return m + " " + reg(ins.rs1) + ", " + reg(ins.rs2);
      return m + " " + reg(ins.rs1) + ", " + reg(ins.rs2) + ", " + render_imm(ins.imm);
  }
  return std::nullopt;
}

}  // namespace

std::string disassemble(const pbf::PandoraBinary& b) {
  std::ostringstream out;
  out << ".code\n";
  for (const auto& sec : b.sections) {
    if (sec.kind != pbf::SectionKind::Code) continue;
    for (size_t off = 0; off + isa::kInstructionSize <= sec.payload.size();
         off += isa::kInstructionSize) {
      std::span<const uint8_t, isa::kInstructionSize> block(&sec.payload[off],
                                                            isa::kInstructionSize);
      const isa::Instruction ins = isa::decode(block);
      auto text = render(ins);
      if (text) {
        out << "    " << *text << "\n";
      } else {
        out << "    .word " << render_imm(util::rd_u32(&block[0])) << ", "
            << render_imm(util::rd_u32(&block[4])) << "\n";
      }
    }
    // trailing partial block (never produced by this assembler)
    const size_t rem = sec.payload.size() % isa::kInstructionSize;
    for (size_t i = sec.payload.size() - rem; i < sec.payload.size(); ++i)
      out << "    .byte " << int(sec.payload[i]) << "\n";
  }
  return out.str();
}

}  // namespace pandora::assembler
