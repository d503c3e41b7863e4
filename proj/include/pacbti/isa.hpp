#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace pacbti {

// Toy ISA: uniform one-address-unit instructions, up to three operands.
enum class Opcode : uint8_t {
    Mov,
    Ldr,
    Str,
    Add,
    Sub,
    Cmp,
    B,
    BCond,
    Bl,
    Bx,
    Blx,
    Push,
    Pop,
    Pacg,
    Aut,
    Pacbti,
    Bti,
    Ret,
    Msr,
    Mrs,
    Svc,
    Out,
    Halt,
    Nop,
};

enum class OperandKind : uint8_t { Reg = 0, Imm = 1 };

struct Operand {
    OperandKind kind = OperandKind::Imm;
    uint32_t value = 0;
};

// Register operand encoding: 0..12 -> r0..r12, 13 -> sp, 14 -> lr.
inline constexpr uint32_t kRegSp = 13;
inline constexpr uint32_t kRegLr = 14;

// Condition codes carried as the first operand of BCond.
enum class Cond : uint8_t { Eq = 0, Ne, Lt, Ge, Gt, Le };

// Special-register ids for Msr/Mrs.
inline constexpr uint32_t kSregControl = 0; // PACBTI feature enables
inline constexpr uint32_t kSregPriv = 1;    // 1 = unprivileged

struct Instruction {
    Opcode op = Opcode::Nop;
    uint8_t nops = 0;
    std::array<Operand, 3> ops{};
};

std::string_view opcode_name(Opcode op);
std::optional<Opcode> opcode_from_name(std::string_view name);
std::string_view cond_name(Cond c);

/// Stable 32-bit encoding of an instruction, returned when a code cell is
/// read as data.
uint32_t encode_word(const Instruction& ins);

} // namespace pacbti
