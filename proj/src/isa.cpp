#include "pandora/isa.hpp"

#include "pandora/util.hpp"

namespace pandora::isa {

Instruction decode(std::span<const uint8_t, kInstructionSize> bytes) {
  Instruction ins;
  const uint8_t op = bytes[0];
  ins.opcode = (op >= 1 && op <= kMaxOpcode) ? static_cast<Opcode>(op) : Opcode::Invalid;
  ins.rd = bytes[1];
  ins.rs1 = bytes[2];
  ins.rs2 = bytes[3];
  ins.imm = util::rd_u32(&bytes[4]);
  return ins;
}

void encode(const Instruction& ins, std::span<uint8_t, kInstructionSize> out) {
  out[0] = static_cast<uint8_t>(ins.opcode);
  out[1] = ins.rd;
  out[2] = ins.rs1;
  out[3] = ins.rs2;
  util::wr_u32_at(&out[4], ins.imm);
}

const OpInfo* op_info(Opcode op) {
  for (const auto& info : kOpTable)
    if (info.op == op) return &info;
  return nullptr;
}

std::optional<Opcode> opcode_for_mnemonic(std::string_view mnemonic) {
  for (const auto& info : kOpTable)
    if (info.mnemonic == mnemonic) return info.op;
  return std::nullopt;
}

}  // namespace pandora::isa
