#include "pandora/pov.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <optional>
#include <set>
#include <sstream>

#include "pandora/util.hpp"

namespace pandora::pov {

namespace {

using Kind = PovError::Kind;

const std::set<std::string>& reserved_names() {
  static const std::set<std::string> names = {"ipvalue", "regvalue", "addr",
                                              "size", "length"};
  return names;
}

bool is_ident(const std::string& s) {
  if (s.empty()) return false;
  if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_') return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_';
  });
}

uint64_t parse_uint(const std::string& s, int base, int line, const char* what) {
  std::string_view v(s);
  if (base == 16 && v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X'))
    v.remove_prefix(2);
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out, base);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw PovError(Kind::Syntax, line, std::string("bad ") + what + " '" + s + "'");
  return out;
}

uint32_t parse_u32(const std::string& s, int base, int line, const char* what) {
  uint64_t v = parse_uint(s, base, line, what);
  if (v > 0xFFFFFFFFULL)
    throw PovError(Kind::Syntax, line, std::string(what) + " out of range");
  return static_cast<uint32_t>(v);
}

std::vector<uint8_t> parse_hex_bytes(const std::string& s, int line) {
  if (s.empty() || s.size() % 2 != 0)
    throw PovError(Kind::Syntax, line, "hex(...) needs an even number of digits");
  auto digit = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw PovError(Kind::Syntax, line, "bad hex digit in hex(...)");
  };
  std::vector<uint8_t> out;
  for (size_t i = 0; i < s.size(); i += 2)
    out.push_back(static_cast<uint8_t>(digit(s[i]) * 16 + digit(s[i + 1])));
  return out;
}

std::vector<uint8_t> unescape_literal(const std::string& s, int line) {
  std::vector<uint8_t> out;
  for (size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c != '\\') {
      out.push_back(static_cast<uint8_t>(c));
      continue;
    }
    if (i + 1 >= s.size()) throw PovError(Kind::Syntax, line, "dangling escape");
    char e = s[++i];
    switch (e) {
      case 'n': out.push_back('\n'); break;
      case 't': out.push_back('\t'); break;
      case 'r': out.push_back('\r'); break;
      case '0': out.push_back(0); break;
      case '\\': out.push_back('\\'); break;
      case 'x': {
        if (i + 2 >= s.size())
          throw PovError(Kind::Syntax, line, "\\x needs two hex digits");
        auto bytes = parse_hex_bytes(s.substr(i + 1, 2), line);
        out.push_back(bytes[0]);
        i += 2;
        break;
      }
      default:
        throw PovError(Kind::Syntax, line, std::string("unknown escape \\") + e);
    }
  }
  return out;
}

TemplateToken parse_template_token(const std::string& tok, int line) {
  auto functional = [&](const char* name) -> std::optional<std::string> {
    std::string prefix = std::string(name) + "(";
    if (tok.rfind(prefix, 0) != 0) return std::nullopt;
    if (tok.back() != ')')
      throw PovError(Kind::Syntax, line, "missing ')' in " + tok);
    return tok.substr(prefix.size(), tok.size() - prefix.size() - 1);
  };
  if (auto body = functional("pad")) {
    size_t comma = body->find(',');
    if (comma == std::string::npos)
      throw PovError(Kind::Syntax, line, "pad(count,byte) expects two arguments");
    PadToken t;
    t.count = parse_u32(body->substr(0, comma), 10, line, "pad count");
    uint32_t b = parse_u32(body->substr(comma + 1), 16, line, "pad byte");
    if (b > 0xFF) throw PovError(Kind::Syntax, line, "pad byte out of range");
    t.byte = static_cast<uint8_t>(b);
    return t;
  }
  if (auto body = functional("var")) {
    if (!is_ident(*body))
      throw PovError(Kind::Syntax, line, "bad variable name '" + *body + "'");
    return VarToken{*body};
  }
  if (auto body = functional("hex")) {
    return BytesToken{parse_hex_bytes(*body, line)};
  }
  return BytesToken{unescape_literal(tok, line)};
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

std::vector<uint8_t> substitute(const Template& tmpl, const Bindings& bindings) {
  std::vector<uint8_t> out;
  for (const TemplateToken& tok : tmpl) {
    if (const auto* b = std::get_if<BytesToken>(&tok)) {
      out.insert(out.end(), b->data.begin(), b->data.end());
    } else if (const auto* p = std::get_if<PadToken>(&tok)) {
      out.insert(out.end(), p->count, p->byte);
    } else {
      const auto& v = std::get<VarToken>(tok);
      auto it = bindings.find(v.name);
      if (it == bindings.end())
        throw PovError(Kind::UnboundVariable, 0, "unbound variable '" + v.name + "'");
      const auto* scalar = std::get_if<uint32_t>(&it->second);
      if (!scalar)
        throw PovError(Kind::TypeMismatch, 0,
                       "var(" + v.name + ") names a capture, not a scalar");
      util::wr_u32(out, *scalar);
    }
  }
  return out;
}

PovScript parse_pov(std::string_view text) {
  PovScript script;
  bool have_header = false;
  bool have_negotiation = false;
  int nego_type = 0;
  std::set<std::string> scalars;
  std::set<std::string> buffers;
  int line_no = 0;
  int last_line = 0;

  auto bind_capture = [&](const std::string& name, int line) {
    if (name.empty()) return;
    if (!is_ident(name))
      throw PovError(Kind::Syntax, line, "bad capture name '" + name + "'");
    if (reserved_names().count(name))
      throw PovError(Kind::Syntax, line, "'" + name + "' is a reserved name");
    buffers.insert(name);
  };
  auto check_buffer_use = [&](const std::string& name, int line) {
    if (buffers.count(name)) return;
    if (scalars.count(name))
      throw PovError(Kind::TypeMismatch, line,
                     "'" + name + "' is a scalar, expected a capture");
    throw PovError(Kind::UnboundVariable, line, "unbound variable '" + name + "'");
  };

  size_t pos = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string raw(text.substr(
        pos, nl == std::string_view::npos ? text.size() - pos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    size_t hash = std::string::npos;
    {  // strip comments ('#' starts a comment anywhere outside tokens we care about)
      hash = raw.find('#');
      if (hash != std::string::npos) raw = raw.substr(0, hash);
    }
    std::vector<std::string> tokens = split_ws(raw);
    if (tokens.empty()) continue;
    last_line = line_no;

    if (!have_header) {
      if (tokens[0] != "pov" || tokens.size() != 2)
        throw PovError(Kind::Syntax, line_no, "expected 'pov <1|2>' header");
      uint32_t t = parse_u32(tokens[1], 10, line_no, "pov type");
      if (t != 1 && t != 2)
        throw PovError(Kind::Syntax, line_no, "pov type must be 1 or 2");
      script.type = static_cast<int>(t);
      have_header = true;
      continue;
    }

    const std::string& verb = tokens[0];
    if (verb == "write") {
      WriteAction a;
      for (size_t i = 1; i < tokens.size(); ++i) {
        TemplateToken tok = parse_template_token(tokens[i], line_no);
        if (const auto* v = std::get_if<VarToken>(&tok)) {
          if (!scalars.count(v->name)) {
            if (buffers.count(v->name))
              throw PovError(Kind::TypeMismatch, line_no,
                             "var(" + v->name + ") names a capture, not a scalar");
            throw PovError(Kind::UnboundVariable, line_no,
                           "variable '" + v->name + "' used before negotiation");
          }
        }
        a.data.push_back(std::move(tok));
      }
      script.actions.emplace_back(std::move(a));
    } else if (verb == "readn") {
      if (tokens.size() != 2 && !(tokens.size() == 4 && tokens[2] == "as"))
        throw PovError(Kind::Syntax, line_no, "usage: readn <count> [as <name>]");
      ReadNAction a;
      a.count = parse_u32(tokens[1], 10, line_no, "read count");
      if (tokens.size() == 4) {
        a.capture = tokens[3];
        bind_capture(a.capture, line_no);
      }
      script.actions.emplace_back(std::move(a));
    } else if (verb == "readuntil") {
      if (tokens.size() != 2 && !(tokens.size() == 4 && tokens[2] == "as"))
        throw PovError(Kind::Syntax, line_no, "usage: readuntil <hexbyte> [as <name>]");
      ReadUntilAction a;
      uint32_t d = parse_u32(tokens[1], 16, line_no, "delimiter");
      if (d > 0xFF) throw PovError(Kind::Syntax, line_no, "delimiter out of range");
      a.delim = static_cast<uint8_t>(d);
      if (tokens.size() == 4) {
        a.capture = tokens[3];
        bind_capture(a.capture, line_no);
      }
      script.actions.emplace_back(std::move(a));
    } else if (verb == "negotiate") {
      if (have_negotiation)
        throw PovError(Kind::MultipleNegotiations, line_no,
                       "script already negotiated");
      if (tokens.size() < 2)
        throw PovError(Kind::Syntax, line_no, "usage: negotiate type1|type2 ...");
      if (tokens[1] == "type1") {
        NegotiateType1Action a;
        bool saw_ip = false, saw_reg = false, saw_num = false;
        for (size_t i = 2; i < tokens.size(); ++i) {
          const std::string& t = tokens[i];
          size_t eq = t.find('=');
          if (eq == std::string::npos)
            throw PovError(Kind::Syntax, line_no, "expected key=value, got '" + t + "'");
          std::string key = t.substr(0, eq), value = t.substr(eq + 1);
          if (key == "ipmask") {
            a.ipmask = parse_u32(value, 16, line_no, "ipmask");
            saw_ip = true;
          } else if (key == "regmask") {
            a.regmask = parse_u32(value, 16, line_no, "regmask");
            saw_reg = true;
          } else if (key == "regnum") {
            a.regnum = parse_u32(value, 10, line_no, "regnum");
            saw_num = true;
          } else {
            throw PovError(Kind::Syntax, line_no, "unknown key '" + key + "'");
          }
        }
        if (!saw_ip || !saw_reg || !saw_num)
          throw PovError(Kind::Syntax, line_no,
                         "negotiate type1 needs ipmask, regmask and regnum");
        if (script.type != 1)
          throw PovError(Kind::TypeMismatch, line_no,
                         "type 1 negotiation in a type 2 script");
        scalars.insert("ipvalue");
        scalars.insert("regvalue");
        script.actions.emplace_back(a);
      } else if (tokens[1] == "type2") {
        if (tokens.size() != 2)
          throw PovError(Kind::Syntax, line_no, "negotiate type2 takes no arguments");
        if (script.type != 2)
          throw PovError(Kind::TypeMismatch, line_no,
                         "type 2 negotiation in a type 1 script");
        scalars.insert("addr");
        scalars.insert("size");
        scalars.insert("length");
        script.actions.emplace_back(NegotiateType2Action{});
      } else {
        throw PovError(Kind::Syntax, line_no, "negotiate type must be type1 or type2");
      }
      have_negotiation = true;
      nego_type = script.type;
    } else if (verb == "slice") {
      if (tokens.size() != 6 || tokens[4] != "as")
        throw PovError(Kind::Syntax, line_no,
                       "usage: slice <src> <offset> <len> as <dest>");
      SliceAction a;
      a.src = tokens[1];
      check_buffer_use(a.src, line_no);
      a.offset = parse_u32(tokens[2], 10, line_no, "slice offset");
      a.len = parse_u32(tokens[3], 10, line_no, "slice length");
      a.dest = tokens[5];
      bind_capture(a.dest, line_no);
      script.actions.emplace_back(std::move(a));
    } else if (verb == "submit") {
      if (tokens.size() != 2)
        throw PovError(Kind::Syntax, line_no, "usage: submit <var>");
      if (script.type != 2)
        throw PovError(Kind::TypeMismatch, line_no, "submit requires a type 2 script");
      if (nego_type != 2)
        throw PovError(Kind::TypeMismatch, line_no, "submit before negotiation");
      SubmitAction a;
      a.var = tokens[1];
      check_buffer_use(a.var, line_no);
      script.actions.emplace_back(std::move(a));
    } else if (verb == "waitclose") {
      if (tokens.size() != 1)
        throw PovError(Kind::Syntax, line_no, "waitclose takes no arguments");
      script.actions.emplace_back(WaitCloseAction{});
    } else {
      throw PovError(Kind::Syntax, line_no, "unknown action '" + verb + "'");
    }
  }

  if (!have_header)
    throw PovError(Kind::Syntax, std::max(1, line_no - 1), "missing 'pov' header");
  if (!have_negotiation)
    throw PovError(Kind::Syntax, std::max(1, last_line),
                   "script must contain exactly one negotiate action");
  return script;
}

namespace {

bool renders_directly(const std::vector<uint8_t>& data) {
  if (data.empty()) return false;
  for (uint8_t b : data) {
    // '#' opens a comment and parens open functional tokens, so any byte
    // outside this safe set forces the hex(...) rendering.
    const bool printable =
        b >= 0x21 && b <= 0x7E && b != '(' && b != ')' && b != '\\' && b != '#';
    const bool escapable = b == '\n' || b == '\t' || b == '\r' || b == '\\';
    if (!printable && !escapable) return false;
  }
  return true;
}

std::string render_bytes(const std::vector<uint8_t>& data) {
  if (renders_directly(data)) {
    std::string out;
    for (uint8_t b : data) {
      switch (b) {
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        case '\\': out += "\\\\"; break;
        default: out.push_back(static_cast<char>(b));
      }
    }
    return out;
  }
  std::string out = "hex(";
  for (uint8_t b : data) {
    char buf[3];
    std::snprintf(buf, sizeof(buf), "%02x", b);
    out += buf;
  }
  return out + ")";
}

std::string render_template(const Template& tmpl) {
  std::string out;
  for (const TemplateToken& tok : tmpl) {
    if (!out.empty()) out += " ";
    if (const auto* b = std::get_if<BytesToken>(&tok)) {
      out += render_bytes(b->data);
    } else if (const auto* p = std::get_if<PadToken>(&tok)) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "pad(%u,%02x)", p->count, p->byte);
      out += buf;
    } else {
      out += "var(" + std::get<VarToken>(tok).name + ")";
    }
  }
  return out;
}

}  // namespace

std::string serialize_pov(const PovScript& s) {
  std::ostringstream out;
  out << "pov " << s.type << "\n";
  for (const PovAction& action : s.actions) {
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, WriteAction>) {
            out << "write " << render_template(a.data) << "\n";
          } else if constexpr (std::is_same_v<T, ReadNAction>) {
            out << "readn " << a.count;
            if (!a.capture.empty()) out << " as " << a.capture;
            out << "\n";
          } else if constexpr (std::is_same_v<T, ReadUntilAction>) {
            char buf[3];
            std::snprintf(buf, sizeof(buf), "%02x", a.delim);
            out << "readuntil " << buf;
            if (!a.capture.empty()) out << " as " << a.capture;
            out << "\n";
          } else if constexpr (std::is_same_v<T, NegotiateType1Action>) {
            out << "negotiate type1 ipmask=" << util::hex32(a.ipmask)
                << " regmask=" << util::hex32(a.regmask) << " regnum=" << a.regnum
                << "\n";
          } else if constexpr (std::is_same_v<T, NegotiateType2Action>) {
            out << "negotiate type2\n";
          } else if constexpr (std::is_same_v<T, SliceAction>) {
            out << "slice " << a.src << " " << a.offset << " " << a.len << " as "
                << a.dest << "\n";
          } else if constexpr (std::is_same_v<T, SubmitAction>) {
            out << "submit " << a.var << "\n";
          } else {
            out << "waitclose\n";
          }
        },
        action);
  }
  return out.str();
}

// --- negotiation codec ------------------------------------------------------

std::vector<uint8_t> encode_request(const NegotiationRequest& req) {
  std::vector<uint8_t> out;
  if (const auto* t1 = std::get_if<Type1Request>(&req)) {
    util::wr_u32(out, 1);
    util::wr_u32(out, t1->ipmask);
    util::wr_u32(out, t1->regmask);
    util::wr_u32(out, t1->regnum);
  } else {
    util::wr_u32(out, 2);
  }
  return out;
}

NegotiationRequest decode_request(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4)
    throw PovError(PovError::Kind::ShortMessage, 0, "negotiation request too short");
  const uint32_t type = util::rd_u32(bytes.data());
  if (type == 1) {
    if (bytes.size() != 16)
      throw PovError(PovError::Kind::ShortMessage, 0,
                     "type 1 request must be exactly 16 bytes");
    Type1Request r;
    r.ipmask = util::rd_u32(bytes.data() + 4);
    r.regmask = util::rd_u32(bytes.data() + 8);
    r.regnum = util::rd_u32(bytes.data() + 12);
    return r;
  }
  if (type == 2) {
    if (bytes.size() != 4)
      throw PovError(PovError::Kind::ShortMessage, 0,
                     "type 2 request must be exactly 4 bytes");
    return Type2Request{};
  }
  throw PovError(PovError::Kind::BadType, 0,
                 "unknown negotiation type " + std::to_string(type));
}

std::vector<uint8_t> encode_type1_response(const Type1Response& resp) {
  std::vector<uint8_t> out;
  util::wr_u32(out, resp.ipvalue);
  util::wr_u32(out, resp.regvalue);
  return out;
}

Type1Response decode_type1_response(std::span<const uint8_t> bytes) {
  if (bytes.size() != 8)
    throw PovError(PovError::Kind::ShortMessage, 0,
                   "type 1 response must be exactly 8 bytes");
  return Type1Response{util::rd_u32(bytes.data()), util::rd_u32(bytes.data() + 4)};
}

std::vector<uint8_t> encode_type2_response(const Type2Response& resp) {
  std::vector<uint8_t> out;
  util::wr_u32(out, resp.addr);
  util::wr_u32(out, resp.size);
  util::wr_u32(out, resp.length);
  return out;
}

Type2Response decode_type2_response(std::span<const uint8_t> bytes) {
  if (bytes.size() != 12)
    throw PovError(PovError::Kind::ShortMessage, 0,
                   "type 2 response must be exactly 12 bytes");
  return Type2Response{util::rd_u32(bytes.data()), util::rd_u32(bytes.data() + 4),
                       util::rd_u32(bytes.data() + 8)};
}

}  // namespace pandora::pov
