#include "pacbti/assembler.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

namespace pacbti {

SyntaxError::SyntaxError(int line_no, const std::string& msg)
    : SimError("line " + std::to_string(line_no) + ": " + msg), line(line_no) {}

UnresolvedLabel::UnresolvedLabel(const std::string& n)
    : SimError("unresolved label: " + n), name(n) {}

bool AsmFunction::is_leaf() const {
    for (const auto& it : items)
        if (!it.is_label && (it.instr.op == Opcode::Bl || it.instr.op == Opcode::Blx))
            return false;
    return true;
}

RegionPlan default_region_plan() {
    return {kNsCodeBase, 0x4000, kNsDataBase, 0x4000, kNsStackBase, kNsStackLength};
}

size_t Program::instruction_count() const {
    size_t n = 0;
    for (const auto& f : functions)
        for (const auto& it : f.items)
            if (!it.is_label)
                ++n;
    return n;
}

namespace {

std::string strip(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(uint8_t(s[b])))
        ++b;
    while (e > b && std::isspace(uint8_t(s[e - 1])))
        --e;
    return s.substr(b, e - b);
}

std::string upper(std::string s) {
    for (char& c : s)
        c = char(std::toupper(uint8_t(c)));
    return s;
}

bool valid_name(const std::string& s) {
    if (s.empty() || (!std::isalpha(uint8_t(s[0])) && s[0] != '_'))
        return false;
    return std::all_of(s.begin(), s.end(),
                       [](char c) { return std::isalnum(uint8_t(c)) || c == '_'; });
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    bool in_str = false;
    for (const char c : s) {
        if (c == '"')
            in_str = !in_str;
        if (c == ',' && !in_str) {
            out.push_back(strip(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!strip(cur).empty() || !out.empty())
        out.push_back(strip(cur));
    return out;
}

uint32_t parse_number(const std::string& tok, int line) {
    try {
        size_t pos = 0;
        long long v;
        if (tok.size() > 2 && tok[0] == '0' && (tok[1] == 'x' || tok[1] == 'X'))
            v = std::stoll(tok.substr(2), &pos, 16), pos += 2;
        else
            v = std::stoll(tok, &pos, 10);
        if (pos != tok.size())
            throw SyntaxError(line, "bad number: " + tok);
        return uint32_t(v);
    } catch (const SyntaxError&) {
        throw;
    } catch (...) {
        throw SyntaxError(line, "bad number: " + tok);
    }
}

AsmOperand parse_operand(const std::string& tok, int line) {
    if (tok.empty())
        throw SyntaxError(line, "empty operand");
    const std::string u = upper(tok);
    if (u == "SP")
        return {AsmOperand::Kind::Reg, kRegSp, {}};
    if (u == "LR")
        return {AsmOperand::Kind::Reg, kRegLr, {}};
    if (u.size() >= 2 && u[0] == 'R' && std::isdigit(uint8_t(u[1]))) {
        const uint32_t idx = parse_number(u.substr(1), line);
        if (idx > 12)
            throw SyntaxError(line, "register out of range: " + tok);
        return {AsmOperand::Kind::Reg, idx, {}};
    }
    if (tok[0] == '#') {
        const std::string body = tok.substr(1);
        if (body.empty())
            throw SyntaxError(line, "empty immediate");
        if (std::isdigit(uint8_t(body[0])) || body[0] == '-')
            return {AsmOperand::Kind::Imm, parse_number(body, line), {}};
        if (!valid_name(body))
            throw SyntaxError(line, "bad immediate: " + tok);
        return {AsmOperand::Kind::LabelRef, 0, body};
    }
    if (std::isdigit(uint8_t(tok[0])) || tok[0] == '-')
        return {AsmOperand::Kind::Imm, parse_number(tok, line), {}};
    if (!valid_name(tok))
        throw SyntaxError(line, "bad operand: " + tok);
    return {AsmOperand::Kind::LabelRef, 0, tok};
}

struct Shape {
    // r = register, v = register or immediate/label, l = label/immediate,
    // s = special register name, i = immediate. Lowercase = required,
    // uppercase = optional.
    const char* pattern;
};

Shape shape_for(Opcode op) {
    switch (op) {
    case Opcode::Mov: return {"rv"};
    case Opcode::Ldr: return {"rrI"};
    case Opcode::Str: return {"rrI"};
    case Opcode::Add:
    case Opcode::Sub: return {"rrV"}; // two-operand form expanded by caller
    case Opcode::Cmp: return {"rv"};
    case Opcode::B: return {"l"};
    case Opcode::Bl: return {"l"};
    case Opcode::Bx:
    case Opcode::Blx: return {"r"};
    case Opcode::Push:
    case Opcode::Pop: return {"r"};
    case Opcode::Msr: return {"sv"};
    case Opcode::Mrs: return {"rs"};
    case Opcode::Svc: return {"I"};
    case Opcode::Out: return {"v"};
    default: return {""};
    }
}

void check_shape(const AsmInstr& ins, int line) {
    const Shape sh = shape_for(ins.op);
    const std::string pat = sh.pattern;
    size_t required = 0;
    for (const char c : pat)
        if (std::islower(uint8_t(c)))
            ++required;
    if (ins.ops.size() < required || ins.ops.size() > pat.size())
        throw SyntaxError(line, std::string(opcode_name(ins.op)) + ": wrong operand count");
    for (size_t i = 0; i < ins.ops.size(); ++i) {
        const char c = char(std::tolower(uint8_t(pat[i])));
        const auto k = ins.ops[i].kind;
        const bool ok = (c == 'r' && k == AsmOperand::Kind::Reg) ||
                        (c == 'v') ||
                        (c == 'l' && k != AsmOperand::Kind::Reg) ||
                        (c == 'i' && k == AsmOperand::Kind::Imm) ||
                        (c == 's' && k == AsmOperand::Kind::Imm);
        if (!ok)
            throw SyntaxError(line, std::string(opcode_name(ins.op)) + ": bad operand " +
                                        std::to_string(i + 1));
    }
}

AsmInstr parse_instruction(const std::string& text, int line) {
    const size_t sp = text.find_first_of(" \t");
    std::string mn = upper(sp == std::string::npos ? text : text.substr(0, sp));
    const std::string rest = sp == std::string::npos ? "" : strip(text.substr(sp));

    AsmInstr ins;
    ins.line = line;

    // Conditional-branch aliases.
    static const std::map<std::string, Cond> kConds = {
        {"BEQ", Cond::Eq}, {"BNE", Cond::Ne}, {"BLT", Cond::Lt},
        {"BGE", Cond::Ge}, {"BGT", Cond::Gt}, {"BLE", Cond::Le}};
    if (const auto c = kConds.find(mn); c != kConds.end()) {
        ins.op = Opcode::BCond;
        ins.ops.push_back({AsmOperand::Kind::Imm, uint32_t(c->second), {}});
        if (rest.empty())
            throw SyntaxError(line, mn + ": missing target");
        ins.ops.push_back(parse_operand(rest, line));
        if (ins.ops[1].kind == AsmOperand::Kind::Reg)
            throw SyntaxError(line, mn + ": target must be a label");
        return ins;
    }

    const auto op = opcode_from_name(mn);
    if (!op || *op == Opcode::BCond)
        throw SyntaxError(line, "unknown instruction: " + mn);
    ins.op = *op;

    std::vector<std::string> toks = rest.empty() ? std::vector<std::string>{} : split_commas(rest);
    for (auto& t : toks) {
        if (ins.op == Opcode::Msr && ins.ops.empty()) {
            const std::string u = upper(t);
            if (u != "CTRL" && u != "PRIV")
                throw SyntaxError(line, "MSR: unknown special register " + t);
            ins.ops.push_back({AsmOperand::Kind::Imm, u == "CTRL" ? kSregControl : kSregPriv, {}});
            continue;
        }
        if (ins.op == Opcode::Mrs && ins.ops.size() == 1) {
            const std::string u = upper(t);
            if (u != "CTRL" && u != "PRIV")
                throw SyntaxError(line, "MRS: unknown special register " + t);
            ins.ops.push_back({AsmOperand::Kind::Imm, u == "CTRL" ? kSregControl : kSregPriv, {}});
            continue;
        }
        ins.ops.push_back(parse_operand(t, line));
    }

    // ADD/SUB two-operand form: rd, op2 == rd, rd, op2.
    if ((ins.op == Opcode::Add || ins.op == Opcode::Sub) && ins.ops.size() == 2)
        ins.ops.insert(ins.ops.begin() + 1, ins.ops[0]);

    check_shape(ins, line);
    return ins;
}

void parse_db(const std::string& rest, std::vector<uint32_t>& cells, int line) {
    for (const auto& tok : split_commas(rest)) {
        if (tok.empty())
            throw SyntaxError(line, "empty db item");
        if (tok.front() == '"') {
            if (tok.size() < 2 || tok.back() != '"')
                throw SyntaxError(line, "unterminated string");
            for (size_t i = 1; i + 1 < tok.size(); ++i)
                cells.push_back(uint8_t(tok[i]));
            continue;
        }
        const size_t star = tok.find('*');
        if (star != std::string::npos) {
            const uint32_t v = parse_number(strip(tok.substr(0, star)), line);
            const uint32_t n = parse_number(strip(tok.substr(star + 1)), line);
            if (n > 1u << 16)
                throw SyntaxError(line, "db repeat too large");
            cells.insert(cells.end(), n, v);
            continue;
        }
        cells.push_back(parse_number(tok, line));
    }
}

} // namespace

Program parse_program(const std::string& text) {
    Program p;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    AsmFunction* fn = nullptr;
    DataBlob* blob = nullptr;

    while (std::getline(in, raw)) {
        ++line;
        if (const size_t c = raw.find(';'); c != std::string::npos)
            raw.erase(c);
        const std::string s = strip(raw);
        if (s.empty())
            continue;

        if (s.rfind("fn ", 0) == 0) {
            if (s.back() != ':')
                throw SyntaxError(line, "function header must end with ':'");
            std::string name = strip(s.substr(3, s.size() - 4));
            bool indirect = false;
            if (const size_t bang = name.find('!'); bang != std::string::npos) {
                if (strip(name.substr(bang + 1)) != "indirect")
                    throw SyntaxError(line, "unknown function attribute");
                indirect = true;
                name = strip(name.substr(0, bang));
            }
            if (!valid_name(name))
                throw SyntaxError(line, "bad function name: " + name);
            p.functions.push_back({name, indirect, {}, line});
            fn = &p.functions.back();
            blob = nullptr;
            continue;
        }

        if (s.rfind("db", 0) == 0 && (s.size() == 2 || std::isspace(uint8_t(s[2])))) {
            if (!blob)
                throw SyntaxError(line, "db outside a data blob");
            parse_db(strip(s.substr(2)), blob->cells, line);
            continue;
        }

        if (s.back() == ':') {
            std::string name = strip(s.substr(0, s.size() - 1));
            bool indirect = false;
            if (const size_t bang = name.find('!'); bang != std::string::npos) {
                if (strip(name.substr(bang + 1)) != "indirect")
                    throw SyntaxError(line, "unknown label attribute");
                indirect = true;
                name = strip(name.substr(0, bang));
            }
            if (!valid_name(name))
                throw SyntaxError(line, "bad label: " + name);
            if (fn) {
                AsmItem item;
                item.is_label = true;
                item.label = name;
                item.indirect = indirect;
                fn->items.push_back(std::move(item));
            } else {
                if (indirect)
                    throw SyntaxError(line, "data labels cannot be indirect targets");
                p.data.push_back({name, {}, line});
                blob = &p.data.back();
            }
            continue;
        }

        if (!fn)
            throw SyntaxError(line, "instruction outside a function");
        AsmItem item;
        item.instr = parse_instruction(s, line);
        fn->items.push_back(std::move(item));
    }

    // Uniqueness and resolvability.
    std::set<std::string> names;
    const auto define = [&](const std::string& n, int at) {
        if (!names.insert(n).second)
            throw SyntaxError(at, "duplicate label: " + n);
    };
    for (const auto& f : p.functions) {
        define(f.name, f.line);
        for (const auto& it : f.items)
            if (it.is_label)
                define(it.label, 0);
    }
    for (const auto& d : p.data)
        define(d.name, d.line);

    for (const auto& f : p.functions)
        for (const auto& it : f.items)
            if (!it.is_label)
                for (const auto& op : it.instr.ops)
                    if (op.kind == AsmOperand::Kind::LabelRef && !names.count(op.label))
                        throw UnresolvedLabel(op.label);

    if (p.functions.empty())
        throw SyntaxError(0, "program has no functions");
    p.entry = "main";
    if (!std::any_of(p.functions.begin(), p.functions.end(),
                     [](const AsmFunction& f) { return f.name == "main"; }))
        throw SyntaxError(0, "no entry function 'main'");
    return p;
}

Program instrument(const Program& p, const InstrumentConfig& cfg) {
    if (!cfg.pac && !cfg.bti)
        return p;

    Program out = p;
    const auto plain_instr = [](Opcode op) {
        AsmItem it;
        it.instr.op = op;
        return it;
    };
    const auto reg_instr = [](Opcode op, uint32_t reg) {
        AsmItem it;
        it.instr.op = op;
        it.instr.ops.push_back({AsmOperand::Kind::Reg, reg, {}});
        return it;
    };

    for (auto& f : out.functions) {
        for (const auto& it : f.items) {
            if (it.is_label)
                continue;
            if (it.instr.op == Opcode::Pacbti || it.instr.op == Opcode::Bti)
                throw InstrumentTwice();
            break;
        }

        const bool leaf = f.is_leaf();
        std::vector<AsmItem> body;
        if (cfg.pac) {
            body.push_back(plain_instr(Opcode::Pacbti));
            if (!leaf)
                body.push_back(reg_instr(Opcode::Push, 12));
        } else {
            body.push_back(plain_instr(Opcode::Bti));
        }
        for (const auto& it : f.items) {
            if (it.is_label) {
                body.push_back(it);
                if (it.indirect)
                    body.push_back(plain_instr(Opcode::Bti));
                continue;
            }
            if (cfg.pac && it.instr.op == Opcode::Ret) {
                if (!leaf)
                    body.push_back(reg_instr(Opcode::Pop, 12));
                body.push_back(plain_instr(Opcode::Aut));
            }
            body.push_back(it);
        }
        f.items = std::move(body);
    }
    return out;
}

uint32_t SymbolTable::addr(const std::string& name) const {
    const auto it = symbols.find(name);
    if (it == symbols.end())
        throw UnresolvedLabel(name);
    return it->second;
}

Assembled assemble(const Program& p) {
    Assembled out;
    SymbolTable& sym = out.symbols;

    // First pass: addresses.
    uint32_t addr = p.plan.code_base;
    for (const auto& f : p.functions) {
        SymbolTable::FuncInfo info;
        info.begin = addr;
        info.leaf = f.is_leaf();
        info.indirect_target = f.indirect_target;
        sym.symbols[f.name] = addr;
        for (const auto& it : f.items) {
            if (it.is_label)
                sym.symbols[it.label] = addr;
            else
                ++addr;
        }
        info.end = addr;
        sym.functions[f.name] = info;
    }
    sym.halt_stub = addr;
    sym.symbols["__halt"] = addr;
    ++addr;
    const uint32_t code_len = addr - p.plan.code_base;
    if (code_len > p.plan.code_capacity)
        throw ImageOverflow("code section exceeds region plan");

    uint32_t daddr = p.plan.data_base;
    for (const auto& d : p.data) {
        sym.symbols[d.name] = daddr;
        daddr += uint32_t(d.cells.size());
    }
    const uint32_t data_len = daddr - p.plan.data_base;
    if (data_len > p.plan.data_capacity)
        throw ImageOverflow("data section exceeds region plan");

    sym.entry = sym.addr(p.entry);

    // Second pass: emit.
    ProgramImage::Region code;
    code.name = "code";
    code.base = p.plan.code_base;
    code.length = code_len;
    code.kind = RegionKind::Code;
    code.readable = true;
    code.writable = false;
    code.executable = true;
    code.world = World::NonSecure;

    const auto resolve = [&](const AsmOperand& o) -> Operand {
        switch (o.kind) {
        case AsmOperand::Kind::Reg: return {OperandKind::Reg, o.value};
        case AsmOperand::Kind::Imm: return {OperandKind::Imm, o.value};
        case AsmOperand::Kind::LabelRef: return {OperandKind::Imm, sym.addr(o.label)};
        }
        return {};
    };

    for (const auto& f : p.functions) {
        for (const auto& it : f.items) {
            if (it.is_label)
                continue;
            Instruction ins;
            ins.op = it.instr.op;
            ins.nops = uint8_t(it.instr.ops.size());
            for (size_t i = 0; i < it.instr.ops.size() && i < 3; ++i)
                ins.ops[i] = resolve(it.instr.ops[i]);
            code.code.push_back(ins);
        }
    }
    code.code.push_back({Opcode::Halt, 0, {}});
    out.image.regions.push_back(std::move(code));

    ProgramImage::Region data;
    data.name = "data";
    data.base = p.plan.data_base;
    data.length = std::max<uint32_t>(data_len, 1);
    data.kind = RegionKind::Data;
    data.readable = true;
    data.writable = true;
    data.executable = false;
    data.world = World::NonSecure;
    for (const auto& d : p.data)
        data.data.insert(data.data.end(), d.cells.begin(), d.cells.end());
    data.data.resize(data.length);
    out.image.regions.push_back(std::move(data));

    ProgramImage::Region stack;
    stack.name = "stack";
    stack.base = p.plan.stack_base;
    stack.length = p.plan.stack_length;
    stack.kind = RegionKind::Data;
    stack.readable = true;
    stack.writable = true;
    stack.executable = false; // stacks are never executable
    stack.world = World::NonSecure;
    out.image.regions.push_back(std::move(stack));

    return out;
}

} // namespace pacbti
