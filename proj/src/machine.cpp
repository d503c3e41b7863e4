#include "pacbti/machine.hpp"

#include <algorithm>
#include <cstring>

#include "pacbti/crypto.hpp"
#include "pacbti/image.hpp"
#include "pacbti/securezone.hpp"

namespace pacbti {

std::string_view world_name(World w) {
    return w == World::Secure ? "secure" : "non-secure";
}

UndecodableInstruction::UndecodableInstruction(uint32_t addr)
    : SimError("undecodable instruction fetch at address 0x" + [addr] {
          char buf[16];
          std::snprintf(buf, sizeof(buf), "%08x", addr);
          return std::string(buf);
      }()) {}

uint32_t pac_tag(uint32_t pointer, uint32_t modifier, const PacKeySet& keys) {
    uint8_t msg[8];
    for (int i = 0; i < 4; ++i) {
        msg[i] = uint8_t(pointer >> (8 * i));
        msg[4 + i] = uint8_t(modifier >> (8 * i));
    }
    const uint64_t full = crypto::siphash24(keys.key, msg);
    const uint8_t w = keys.tag_width;
    if (w >= 32)
        return static_cast<uint32_t>(full);
    return static_cast<uint32_t>(full) & ((1u << w) - 1u);
}

uint32_t encode_control(const PacbtiControl& c) {
    return (uint32_t(c.pac_priv) << 3) | (uint32_t(c.pac_unpriv) << 2) |
           (uint32_t(c.bti_priv) << 1) | uint32_t(c.bti_unpriv);
}

PacbtiControl decode_control(uint32_t v) {
    PacbtiControl c;
    c.pac_priv = (v >> 3) & 1;
    c.pac_unpriv = (v >> 2) & 1;
    c.bti_priv = (v >> 1) & 1;
    c.bti_unpriv = v & 1;
    return c;
}

std::string_view fault_kind_name(FaultKind k) {
    switch (k) {
    case FaultKind::UsageInvalidState: return "UsageFault(InvalidState)";
    case FaultKind::MemFault: return "MemFault";
    case FaultKind::HardFault: return "HardFault";
    }
    return "?";
}

uint32_t& MachineState::sp() {
    return world == World::Secure ? regs.sp_s : regs.sp_ns;
}

uint32_t MachineState::sp() const {
    return world == World::Secure ? regs.sp_s : regs.sp_ns;
}

uint32_t& MachineState::sp_for(World w) {
    return w == World::Secure ? regs.sp_s : regs.sp_ns;
}

MemoryRegion* MachineState::find_region(uint32_t addr) {
    for (auto& r : memory)
        if (r.contains(addr))
            return &r;
    return nullptr;
}

const MemoryRegion* MachineState::find_region(uint32_t addr) const {
    for (const auto& r : memory)
        if (r.contains(addr))
            return &r;
    return nullptr;
}

MemoryRegion* MachineState::region_named(std::string_view name) {
    for (auto& r : memory)
        if (r.name == name)
            return &r;
    return nullptr;
}

void MachineState::add_region(MemoryRegion r) {
    for (const auto& ex : memory) {
        const uint64_t a0 = ex.base, a1 = uint64_t(ex.base) + ex.length;
        const uint64_t b0 = r.base, b1 = uint64_t(r.base) + r.length;
        if (a0 < b1 && b0 < a1)
            throw SimError("memory regions overlap: " + ex.name + " and " + r.name);
    }
    if (r.kind == RegionKind::Code)
        r.code.resize(r.length);
    else
        r.data.resize(r.length);
    memory.push_back(std::move(r));
}

MachineState::ReadResult MachineState::try_read(uint32_t addr, World w, bool privileged) const {
    const MemoryRegion* r = find_region(addr);
    if (!r || !r->readable)
        return {};
    if (r->world == World::Secure && w != World::Secure)
        return {};
    if (r->privileged_only && !privileged)
        return {};
    const uint32_t off = addr - r->base;
    if (r->kind == RegionKind::Code)
        return {true, encode_word(r->code[off])};
    return {true, r->data[off]};
}

bool MachineState::try_write(uint32_t addr, uint32_t value, World w, bool privileged) {
    MemoryRegion* r = find_region(addr);
    if (!r || !r->writable || r->kind == RegionKind::Code)
        return false;
    if (r->world == World::Secure && w != World::Secure)
        return false;
    if (r->privileged_only && !privileged)
        return false;
    r->data[addr - r->base] = value;
    return true;
}

const Instruction* MachineState::try_fetch(uint32_t addr, World w, bool privileged) const {
    const MemoryRegion* r = find_region(addr);
    if (!r || !r->executable)
        return nullptr;
    if (r->world != w)
        return nullptr;
    if (r->privileged_only && !privileged)
        return nullptr;
    if (r->kind != RegionKind::Code)
        throw UndecodableInstruction(addr);
    return &r->code[addr - r->base];
}

uint32_t MachineState::read_word(uint32_t addr) const {
    const auto res = try_read(addr, World::Secure, true);
    if (!res.ok)
        throw SimError("secure read of unmapped address");
    return res.value;
}

bool MachineState::pac_enabled() const {
    if (world != World::NonSecure)
        return false;
    return regs.privileged ? control.pac_priv : control.pac_unpriv;
}

bool MachineState::bti_enabled() const {
    if (world != World::NonSecure)
        return false;
    return regs.privileged ? control.bti_priv : control.bti_unpriv;
}

Fault MachineState::make_fault(FaultKind kind, bool invalid_state) const {
    Fault f;
    f.kind = kind;
    f.world = world;
    f.pc = regs.pc;
    f.epsr_b = regs.epsr_b;
    f.privileged = regs.privileged;
    f.cfsr_invalid_state = invalid_state;
    return f;
}

uint32_t MachineState::operand_value(const Operand& o) const {
    if (o.kind == OperandKind::Imm)
        return o.value;
    if (o.value < 13)
        return regs.r[o.value];
    if (o.value == kRegSp)
        return sp();
    if (o.value == kRegLr)
        return regs.lr;
    throw SimError("bad register operand");
}

uint32_t& MachineState::reg_slot(uint32_t index) {
    if (index < 13)
        return regs.r[index];
    if (index == kRegSp)
        return sp();
    if (index == kRegLr)
        return regs.lr;
    throw SimError("bad register destination");
}

StepResult MachineState::step() {
    const Instruction* ins = try_fetch(regs.pc, world, regs.privileged);
    if (!ins) {
        // An instruction-fetch permission violation is a memory fault on pc.
        return {StepStatus::Faulted, make_fault(FaultKind::MemFault, false)};
    }

    // Landing-pad check: pending from the previous indirect branch.
    if (regs.epsr_b) {
        if (ins->op == Opcode::Pacbti || ins->op == Opcode::Bti || !bti_enabled()) {
            regs.epsr_b = false;
        } else {
            Fault f = make_fault(FaultKind::UsageInvalidState, true);
            f.epsr_b = true;
            return {StepStatus::Faulted, f};
        }
    }

    const auto val = [&](int i) { return operand_value(ins->ops[i]); };

    const uint32_t call_target =
        (ins->op == Opcode::Bl || ins->op == Opcode::Blx) ? val(0) : 0;
    trace.instr(regs.pc, uint8_t(world), regs.privileged, handler_mode, ins->op, sp(),
                call_target);
    ++executed;
    const auto reg_index = [&](int i) -> uint32_t {
        if (ins->ops[i].kind != OperandKind::Reg)
            throw SimError("register operand expected");
        return ins->ops[i].value;
    };

    switch (ins->op) {
    case Opcode::Mov:
        reg_slot(reg_index(0)) = val(1);
        break;
    case Opcode::Ldr: {
        const uint32_t addr = val(1) + (ins->nops > 2 ? val(2) : 0);
        const auto res = try_read(addr, world, regs.privileged);
        if (!res.ok)
            return {StepStatus::Faulted, make_fault(FaultKind::MemFault, false)};
        reg_slot(reg_index(0)) = res.value;
        break;
    }
    case Opcode::Str: {
        const uint32_t addr = val(1) + (ins->nops > 2 ? val(2) : 0);
        if (!try_write(addr, val(0), world, regs.privileged))
            return {StepStatus::Faulted, make_fault(FaultKind::MemFault, false)};
        break;
    }
    case Opcode::Add:
        reg_slot(reg_index(0)) = val(1) + val(2);
        break;
    case Opcode::Sub:
        reg_slot(reg_index(0)) = val(1) - val(2);
        break;
    case Opcode::Cmp: {
        const uint32_t a = val(0), b = val(1);
        regs.flag_z = a == b;
        regs.flag_n = int32_t(a - b) < 0;
        break;
    }
    case Opcode::B:
        regs.pc = val(0);
        return {StepStatus::Continue, {}};
    case Opcode::BCond: {
        const Cond c = static_cast<Cond>(ins->ops[0].value);
        bool take = false;
        switch (c) {
        case Cond::Eq: take = regs.flag_z; break;
        case Cond::Ne: take = !regs.flag_z; break;
        case Cond::Lt: take = regs.flag_n; break;
        case Cond::Ge: take = !regs.flag_n; break;
        case Cond::Gt: take = !regs.flag_z && !regs.flag_n; break;
        case Cond::Le: take = regs.flag_z || regs.flag_n; break;
        }
        if (take) {
            regs.pc = val(1);
            return {StepStatus::Continue, {}};
        }
        break;
    }
    case Opcode::Bl:
        regs.lr = regs.pc + 1;
        regs.pc = val(0);
        return {StepStatus::Continue, {}};
    case Opcode::Bx: {
        const uint32_t target = val(0);
        if (target == kExcReturn) {
            exception_return(*this);
            return {StepStatus::Continue, {}};
        }
        if (bti_enabled())
            regs.epsr_b = true;
        regs.pc = target;
        return {StepStatus::Continue, {}};
    }
    case Opcode::Blx: {
        const uint32_t target = val(0);
        regs.lr = regs.pc + 1;
        if (bti_enabled())
            regs.epsr_b = true;
        regs.pc = target;
        return {StepStatus::Continue, {}};
    }
    case Opcode::Push: {
        const uint32_t target = sp() - 1;
        if (!try_write(target, val(0), world, regs.privileged))
            return {StepStatus::Faulted, make_fault(FaultKind::MemFault, false)};
        sp() = target;
        break;
    }
    case Opcode::Pop: {
        const auto res = try_read(sp(), world, regs.privileged);
        if (!res.ok)
            return {StepStatus::Faulted, make_fault(FaultKind::MemFault, false)};
        reg_slot(reg_index(0)) = res.value;
        sp() += 1;
        break;
    }
    case Opcode::Pacg:
    case Opcode::Pacbti:
        if (pac_enabled())
            regs.r[12] = pac_tag(regs.lr, sp(), keys);
        break;
    case Opcode::Aut:
        if (pac_enabled() && pac_tag(regs.lr, sp(), keys) != regs.r[12])
            return {StepStatus::Faulted, make_fault(FaultKind::UsageInvalidState, true)};
        break;
    case Opcode::Bti:
        break; // landing pad; the pending check above already consumed epsr_b
    case Opcode::Ret: {
        const uint32_t target = regs.lr;
        if (target == kExcReturn) {
            exception_return(*this);
            return {StepStatus::Continue, {}};
        }
        regs.pc = target;
        return {StepStatus::Continue, {}};
    }
    case Opcode::Msr: {
        if (!regs.privileged)
            return {StepStatus::Faulted, make_fault(FaultKind::UsageInvalidState, true)};
        const uint32_t sreg = ins->ops[0].value;
        if (sreg == kSregControl)
            control = decode_control(val(1));
        else if (sreg == kSregPriv)
            regs.privileged = (val(1) & 1) == 0;
        else
            throw SimError("unknown special register in MSR");
        break;
    }
    case Opcode::Mrs: {
        const uint32_t sreg = ins->ops[1].value;
        uint32_t v = 0;
        if (sreg == kSregControl)
            v = encode_control(control);
        else if (sreg == kSregPriv)
            v = regs.privileged ? 0 : 1;
        else
            throw SimError("unknown special register in MRS");
        reg_slot(reg_index(0)) = v;
        break;
    }
    case Opcode::Svc: {
        const auto it = sysctl.vectors.find({world, kVecSvc});
        if (it == sysctl.vectors.end())
            return {StepStatus::Faulted, make_fault(FaultKind::HardFault, false)};
        regs.pc += 1; // resume past the SVC after the handler returns
        const FaultContext ctx = capture_context(*this, make_fault(FaultKind::HardFault, false));
        exception_entry(*this, ctx, world, it->second);
        return {StepStatus::Continue, {}};
    }
    case Opcode::Out:
        out.push_back(char(val(0) & 0xFF));
        break;
    case Opcode::Halt:
        trace.event(TraceEvent::Halted, regs.pc);
        return {StepStatus::Halted, {}};
    case Opcode::Nop:
        break;
    }

    regs.pc += 1;
    return {StepStatus::Continue, {}};
}

void load_image(MachineState& m, const ProgramImage& image) {
    for (const auto& ir : image.regions) {
        MemoryRegion* existing = nullptr;
        for (auto& r : m.memory)
            if (r.base == ir.base) {
                existing = &r;
                break;
            }
        if (existing) {
            existing->name = ir.name;
            existing->length = ir.length;
            existing->kind = ir.kind;
            existing->readable = ir.readable;
            existing->writable = ir.writable;
            existing->executable = ir.executable;
            existing->world = ir.world;
            existing->privileged_only = ir.privileged_only;
            existing->code = ir.code;
            existing->data = ir.data;
            existing->code.resize(ir.kind == RegionKind::Code ? ir.length : 0);
            existing->data.resize(ir.kind == RegionKind::Data ? ir.length : 0);
        } else {
            MemoryRegion r;
            r.name = ir.name;
            r.base = ir.base;
            r.length = ir.length;
            r.kind = ir.kind;
            r.readable = ir.readable;
            r.writable = ir.writable;
            r.executable = ir.executable;
            r.world = ir.world;
            r.privileged_only = ir.privileged_only;
            r.code = ir.code;
            r.data = ir.data;
            m.add_region(std::move(r));
        }
    }
}

void machine_reset(MachineState& m, const ProgramImage& image, std::mt19937_64& rng) {
    m.regs = RegisterFile{};
    m.world = World::Secure;
    m.handler_mode = false;
    m.pending.clear();
    m.current_ctx.reset();
    m.exception_frames.clear();
    m.keys.key = {rng(), rng()};
    load_image(m, image);
    m.regs.pc = kResetVector;
}

} // namespace pacbti
