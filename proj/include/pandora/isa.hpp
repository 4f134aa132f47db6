#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace pandora::isa {

// pvm32: fixed-width 8-byte instructions over eight 32-bit registers.
// Encoding: opcode(1) rd(1) rs1(1) rs2(1) imm(4, little-endian).
// This table is the single source of truth for opcode numbers and operand
// shapes; the assembler, disassembler and VM all use it (docs/isa.md).

inline constexpr size_t kInstructionSize = 8;
inline constexpr int kRegisterCount = 8;
inline constexpr int kStackRegister = 7;  // r7 is the stack pointer by convention

enum class Opcode : uint8_t {
  Invalid = 0,
  Movi = 1,
  Mov = 2,
  Add = 3,
  Addi = 4,
  Sub = 5,
  Xor = 6,
  And = 7,
  Or = 8,
  Cmp = 9,
  Cmpi = 10,
  Jmp = 11,
  Jz = 12,
  Jnz = 13,
  Jl = 14,
  Call = 15,
  Push = 16,
  Pop = 17,
  Ret = 18,
  Ldw = 19,
  Stw = 20,
  Ldb = 21,
  Stb = 22,
  Sys = 23,
  Nop = 24,
};

inline constexpr uint8_t kMaxOpcode = 24;

// Which encoding fields an instruction legitimately uses. Unused fields must
// be zero; the disassembler falls back to raw .word output otherwise so that
// reassembly is byte-exact.
enum class OperandForm {
  None,        // RET, NOP, SYS
  RdImm,       // MOVI rd, imm
  RdRs1,       // MOV rd, rs1
  RdRs1Rs2,    // ADD/SUB/XOR/AND/OR rd, rs1, rs2
  RdRs1Imm,    // ADDI rd, rs1, imm
  Rs1Rs2,      // CMP rs1, rs2
  Rs1Imm,      // CMPI rs1, imm
  Imm,         // JMP/JZ/JNZ/JL/CALL target
  Rs1,         // PUSH rs1
  Rd,          // POP rd
  RdRs1OptImm,   // LDW/LDB rd, rs1[, imm]
  Rs1Rs2OptImm,  // STW/STB rs1, rs2[, imm]  (stores rs2 at [rs1+imm])
};

struct OpInfo {
  Opcode op;
  std::string_view mnemonic;
  OperandForm form;
};

inline constexpr std::array<OpInfo, 24> kOpTable = {{
    {Opcode::Movi, "MOVI", OperandForm::RdImm},
    {Opcode::Mov, "MOV", OperandForm::RdRs1},
    {Opcode::Add, "ADD", OperandForm::RdRs1Rs2},
    {Opcode::Addi, "ADDI", OperandForm::RdRs1Imm},
    {Opcode::Sub, "SUB", OperandForm::RdRs1Rs2},
    {Opcode::Xor, "XOR", OperandForm::RdRs1Rs2},
    {Opcode::And, "AND", OperandForm::RdRs1Rs2},
    {Opcode::Or, "OR", OperandForm::RdRs1Rs2},
    {Opcode::Cmp, "CMP", OperandForm::Rs1Rs2},
    {Opcode::Cmpi, "CMPI", OperandForm::Rs1Imm},
    {Opcode::Jmp, "JMP", OperandForm::Imm},
    {Opcode::Jz, "JZ", OperandForm::Imm},
    {Opcode::Jnz, "JNZ", OperandForm::Imm},
    {Opcode::Jl, "JL", OperandForm::Imm},
    {Opcode::Call, "CALL", OperandForm::Imm},
    {Opcode::Push, "PUSH", OperandForm::Rs1},
    {Opcode::Pop, "POP", OperandForm::Rd},
    {Opcode::Ret, "RET", OperandForm::None},
    {Opcode::Ldw, "LDW", OperandForm::RdRs1OptImm},
    {Opcode::Stw, "STW", OperandForm::Rs1Rs2OptImm},
    {Opcode::Ldb, "LDB", OperandForm::RdRs1OptImm},
    {Opcode::Stb, "STB", OperandForm::Rs1Rs2OptImm},
    {Opcode::Sys, "SYS", OperandForm::None},
    {Opcode::Nop, "NOP", OperandForm::None},
}};

struct Instruction {
  Opcode opcode = Opcode::Invalid;
  uint8_t rd = 0;
  uint8_t rs1 = 0;
  uint8_t rs2 = 0;
  uint32_t imm = 0;

  bool operator==(const Instruction&) const = default;
};

/// Total on any 8-byte block; unknown opcodes decode to Opcode::Invalid.
Instruction decode(std::span<const uint8_t, kInstructionSize> bytes);

void encode(const Instruction& ins, std::span<uint8_t, kInstructionSize> out);

const OpInfo* op_info(Opcode op);
std::optional<Opcode> opcode_for_mnemonic(std::string_view mnemonic);

}  // namespace pandora::isa
