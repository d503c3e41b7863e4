#include "pacbti/isa.hpp"

#include <utility>

namespace pacbti {

namespace {

struct OpName {
    Opcode op;
    std::string_view name;
};

constexpr OpName kOpNames[] = {
    {Opcode::Mov, "MOV"},   {Opcode::Ldr, "LDR"},       {Opcode::Str, "STR"},
    {Opcode::Add, "ADD"},   {Opcode::Sub, "SUB"},       {Opcode::Cmp, "CMP"},
    {Opcode::B, "B"},       {Opcode::BCond, "BCOND"},   {Opcode::Bl, "BL"},
    {Opcode::Bx, "BX"},     {Opcode::Blx, "BLX"},       {Opcode::Push, "PUSH"},
    {Opcode::Pop, "POP"},   {Opcode::Pacg, "PACG"},     {Opcode::Aut, "AUT"},
    {Opcode::Pacbti, "PACBTI"}, {Opcode::Bti, "BTI"},   {Opcode::Ret, "RET"},
    {Opcode::Msr, "MSR"},   {Opcode::Mrs, "MRS"},       {Opcode::Svc, "SVC"},
    {Opcode::Out, "OUT"},   {Opcode::Halt, "HALT"},     {Opcode::Nop, "NOP"},
};

} // namespace

std::string_view opcode_name(Opcode op) {
    for (const auto& e : kOpNames)
        if (e.op == op)
            return e.name;
    return "?";
}

std::optional<Opcode> opcode_from_name(std::string_view name) {
    for (const auto& e : kOpNames)
        if (e.name == name)
            return e.op;
    return std::nullopt;
}

std::string_view cond_name(Cond c) {
    switch (c) {
    case Cond::Eq: return "EQ";
    case Cond::Ne: return "NE";
    case Cond::Lt: return "LT";
    case Cond::Ge: return "GE";
    case Cond::Gt: return "GT";
    case Cond::Le: return "LE";
    }
    return "?";
}

uint32_t encode_word(const Instruction& ins) {
    uint32_t w = static_cast<uint32_t>(ins.op) | (uint32_t(ins.nops) << 5);
    for (uint8_t i = 0; i < ins.nops && i < 3; ++i) {
        const auto& o = ins.ops[i];
        w ^= (uint32_t(o.kind) << (7 + i)) ^ (o.value << (10 + 7 * i)) ^ (o.value >> (10 + 3 * i));
    }
    return w;
}

} // namespace pacbti
