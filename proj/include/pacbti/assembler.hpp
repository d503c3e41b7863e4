#pragma once

#include <map>
#include <string>
#include <vector>

#include "pacbti/image.hpp"
#include "pacbti/isa.hpp"

namespace pacbti {

struct SyntaxError : SimError {
    SyntaxError(int line, const std::string& msg);
    int line;
};

struct UnresolvedLabel : SimError {
    explicit UnresolvedLabel(const std::string& name);
    std::string name;
};

struct InstrumentTwice : SimError {
    InstrumentTwice() : SimError("program is already instrumented") {}
};

struct ImageOverflow : SimError {
    using SimError::SimError;
};

struct AsmOperand {
    enum class Kind { Reg, Imm, LabelRef };
    Kind kind = Kind::Imm;
    uint32_t value = 0;
    std::string label;
};

struct AsmInstr {
    Opcode op = Opcode::Nop;
    std::vector<AsmOperand> ops;
    int line = 0;
};

/// One body element: either a label marker or an instruction.
struct AsmItem {
    bool is_label = false;
    std::string label;
    bool indirect = false; // label marked as an indirect-branch target
    AsmInstr instr;
};

struct AsmFunction {
    std::string name;
    bool indirect_target = false;
    std::vector<AsmItem> items;
    int line = 0;

    bool is_leaf() const;
};

struct DataBlob {
    std::string name;
    std::vector<uint32_t> cells;
    int line = 0;
};

struct InstrumentConfig {
    bool pac = false;
    bool bti = false;
};

struct RegionPlan {
    uint32_t code_base = 0;
    uint32_t code_capacity = 0;
    uint32_t data_base = 0;
    uint32_t data_capacity = 0;
    uint32_t stack_base = 0;
    uint32_t stack_length = 0;
};

RegionPlan default_region_plan();

struct Program {
    std::vector<AsmFunction> functions;
    std::vector<DataBlob> data;
    std::string entry; // function name
    RegionPlan plan = default_region_plan();

    size_t instruction_count() const;
};

/// Parses the line-oriented assembly grammar. All referenced labels must
/// exist and be unique.
Program parse_program(const std::string& text);

/// PACBTI instrumentation. With pac: PACBTI at every function entry, AUT
/// before every RET, r12 spill/reload around non-leaf bodies. With bti only:
/// BTI at every function entry (mirroring observed compiler behavior).
/// Either way, marked non-entry indirect targets gain a BTI pad.
Program instrument(const Program& p, const InstrumentConfig& cfg);

struct SymbolTable {
    struct FuncInfo {
        uint32_t begin = 0;
        uint32_t end = 0; // one past the last instruction
        bool leaf = true;
        bool indirect_target = false;
    };
    std::map<std::string, uint32_t> symbols;
    std::map<std::string, FuncInfo> functions;
    uint32_t entry = 0;
    uint32_t halt_stub = 0;

    uint32_t addr(const std::string& name) const; // throws UnresolvedLabel
};

struct Assembled {
    ProgramImage image;
    SymbolTable symbols;
};

/// Deterministic image emission: code section (plus a hidden one-cell exit
/// stub), data section, non-executable stack.
Assembled assemble(const Program& p);

} // namespace pacbti
