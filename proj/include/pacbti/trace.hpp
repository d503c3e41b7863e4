#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pacbti/isa.hpp"

namespace pacbti {

enum class TraceEvent : uint8_t {
    Instr,
    FaultRaised,      // a = fault pc, b = FaultKind
    Escalated,        // usage fault escalated to secure HardFault
    HandlerEnter,     // a = handler pc
    FlihCapture,
    Lockdown,         // a = stub address
    InterruptPended,  // a = irq id, b = world
    InterruptCleared, // a = irq id
    InterruptDispatch,// a = irq id
    SlihPersist,      // a = record sequence
    ExceptionReturn,
    Reset,            // a = boot epoch after the reset
    Recover,
    Halted,
};

struct TraceEntry {
    TraceEvent event = TraceEvent::Instr;
    uint32_t pc = 0;
    uint32_t a = 0;
    uint32_t b = 0;
    uint8_t world = 0; // World enum value
    bool privileged = false;
    bool handler_mode = false;
    Opcode op = Opcode::Nop;
    uint32_t sp = 0; // current world's sp before execution (Instr entries)
};

class Trace {
public:
    bool enabled = false;
    std::vector<TraceEntry> entries;

    // a = branch target for BL/BLX entries (the call-count oracle input).
    void instr(uint32_t pc, uint8_t world, bool priv, bool handler, Opcode op, uint32_t sp,
               uint32_t a = 0) {
        if (!enabled)
            return;
        entries.push_back({TraceEvent::Instr, pc, a, 0, world, priv, handler, op, sp});
    }
    void event(TraceEvent e, uint32_t a = 0, uint32_t b = 0) {
        if (!enabled)
            return;
        TraceEntry t;
        t.event = e;
        t.a = a;
        t.b = b;
        entries.push_back(t);
    }
};

struct AuditResult {
    bool ok = true;
    std::string detail;
};

/// No non-secure instruction executes between a PACBTI usage fault and the
/// lockdown, and afterwards only inside [stub_begin, stub_end) until the
/// device resets or recovers.
AuditResult audit_no_resume(const Trace& t, uint32_t stub_begin, uint32_t stub_end);

/// No non-secure instruction executes while any secure interrupt is pending.
AuditResult audit_secure_priority(const Trace& t);

class MachineState;

/// Every executed instruction was fetched from an executable region of the
/// world it ran in.
AuditResult audit_executable_fetches(const Trace& t, const MachineState& m);

} // namespace pacbti
