#pragma once

#include <optional>

#include "pacbti/machine.hpp"

namespace pacbti {

/// Simulated lockup (double fault during stacking, missing handler).
struct LockupError : SimError {
    using SimError::SimError;
};

struct UnknownIrq : SimError {
    using SimError::SimError;
};

// The RunPBA SLIH trigger: an otherwise unused secure GPIO interrupt.
inline constexpr int kRunPbaSlihIrq = 5;

struct DispatchOutcome {
    FaultKind final_kind = FaultKind::HardFault;
    World handled_world = World::Secure;
    uint32_t handler_pc = 0;
    bool escalated = false; // usage fault escalated to HardFault
};

FaultContext capture_context(const MachineState& m, const Fault& f);

/// Stacks the context on the interrupted world's stack and enters the
/// handler. Throws LockupError if stacking itself faults.
void exception_entry(MachineState& m, const FaultContext& ctx, World target_world,
                     uint32_t handler_pc);

/// Pops the active exception frame and resumes the interrupted context.
void exception_return(MachineState& m);

/// Routes a fault from machine.step(). Under the RunPBA configuration a
/// non-secure UsageFault escalates to a secure HardFault at the highest
/// priority.
DispatchOutcome raise_fault(MachineState& m, const Fault& f);

void pend_interrupt(MachineState& m, const PendedInterrupt& irq);

/// Highest-priority dispatchable interrupt; secure interrupts always win
/// over non-secure regardless of numeric priority.
std::optional<PendedInterrupt> take_next_interrupt(MachineState& m);

/// Removes every pending interrupt except the RunPBA SLIH trigger.
int clear_nonessential_interrupts(MachineState& m);

/// Asserts the RunPBA register configuration (SHCSR_NS.USGFAULTACT=0,
/// AIRCR.BFHFNMINS=1).
void audit_runpba_config(const MachineState& m);

} // namespace pacbti
