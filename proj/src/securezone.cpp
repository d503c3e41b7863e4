#include "pacbti/securezone.hpp"

#include <algorithm>

namespace pacbti {

namespace {

// Frame layout, ascending from the post-push sp.
// [0..3] r0-r3, [4] r12, [5] lr, [6] return pc, [7] psr
constexpr uint32_t kFrameCells = 8;
constexpr uint32_t kPsrEpsrB = 1u << 0;
constexpr uint32_t kPsrPrivileged = 1u << 1;
constexpr uint32_t kPsrSecure = 1u << 2;

uint32_t handler_for(const MachineState& m, World w, int vec) {
    const auto it = m.sysctl.vectors.find({w, vec});
    if (it == m.sysctl.vectors.end())
        throw LockupError("no handler registered for vector " + std::to_string(vec) + " in " +
                          std::string(world_name(w)) + " world");
    return it->second;
}

} // namespace

FaultContext capture_context(const MachineState& m, const Fault& f) {
    FaultContext ctx;
    ctx.stacked_pc = f.pc;
    ctx.stacked_sp = f.world == World::Secure ? m.regs.sp_s : m.regs.sp_ns;
    ctx.stacked_lr = m.regs.lr;
    for (int i = 0; i < 4; ++i)
        ctx.stacked_r0_r3[i] = m.regs.r[i];
    ctx.stacked_r12 = m.regs.r[12];
    ctx.epsr_b = f.epsr_b;
    ctx.world = f.world;
    ctx.privileged = f.privileged;
    ctx.cfsr_invalid_state = f.cfsr_invalid_state;
    return ctx;
}

void exception_entry(MachineState& m, const FaultContext& ctx, World target_world,
                     uint32_t handler_pc) {
    uint32_t& sp = m.sp_for(ctx.world);
    const uint32_t frame = sp - kFrameCells;
    const uint32_t psr = (ctx.epsr_b ? kPsrEpsrB : 0) | (ctx.privileged ? kPsrPrivileged : 0) |
                         (ctx.world == World::Secure ? kPsrSecure : 0);
    const uint32_t cells[kFrameCells] = {ctx.stacked_r0_r3[0], ctx.stacked_r0_r3[1],
                                         ctx.stacked_r0_r3[2], ctx.stacked_r0_r3[3],
                                         ctx.stacked_r12,      ctx.stacked_lr,
                                         ctx.stacked_pc,       psr};
    for (uint32_t i = 0; i < kFrameCells; ++i) {
        if (!m.try_write(frame + i, cells[i], ctx.world, true))
            throw LockupError("double fault: exception stacking failed at 0x" +
                              std::to_string(frame + i));
    }
    sp = frame;
    m.current_ctx = ctx;
    m.exception_frames.push_back(ctx.world);
    m.regs.lr = kExcReturn;
    m.regs.pc = handler_pc;
    m.regs.epsr_b = false;
    m.regs.privileged = true;
    m.world = target_world;
    m.handler_mode = true;
    m.trace.event(TraceEvent::HandlerEnter, handler_pc, uint32_t(target_world));
}

void exception_return(MachineState& m) {
    if (m.exception_frames.empty())
        throw LockupError("exception return with no active frame");
    const World frame_world = m.exception_frames.back();
    m.exception_frames.pop_back();
    uint32_t& sp = m.sp_for(frame_world);
    uint32_t cells[kFrameCells];
    for (uint32_t i = 0; i < kFrameCells; ++i) {
        const auto r = m.try_read(sp + i, frame_world, true);
        if (!r.ok)
            throw LockupError("exception return: frame unreadable");
        cells[i] = r.value;
    }
    sp += kFrameCells;
    for (int i = 0; i < 4; ++i)
        m.regs.r[i] = cells[i];
    m.regs.r[12] = cells[4];
    m.regs.lr = cells[5];
    m.regs.pc = cells[6];
    const uint32_t psr = cells[7];
    m.regs.epsr_b = psr & kPsrEpsrB;
    m.regs.privileged = psr & kPsrPrivileged;
    m.world = (psr & kPsrSecure) ? World::Secure : World::NonSecure;
    m.handler_mode = !m.exception_frames.empty();
    m.trace.event(TraceEvent::ExceptionReturn, m.regs.pc);
}

DispatchOutcome raise_fault(MachineState& m, const Fault& f) {
    m.trace.event(TraceEvent::FaultRaised, f.pc, uint32_t(f.kind));
    const FaultContext ctx = capture_context(m, f);
    DispatchOutcome out;

    World target = f.world;
    int vec = kVecHardFault;
    FaultKind final_kind = f.kind;

    switch (f.kind) {
    case FaultKind::UsageInvalidState: {
        const bool banked_handler_active =
            f.world == World::Secure ||
            (m.sysctl.shcsr_ns_usgfaultact &&
             m.sysctl.vectors.count({World::NonSecure, kVecUsageFault}));
        if (f.world == World::NonSecure && banked_handler_active) {
            target = World::NonSecure;
            vec = kVecUsageFault;
        } else {
            // With the non-secure UsageFault handler disabled the processor
            // escalates to HardFault; BFHFNMINS=1 routes it to the secure state.
            final_kind = FaultKind::HardFault;
            out.escalated = f.world == World::NonSecure;
            if (out.escalated)
                m.trace.event(TraceEvent::Escalated, f.pc);
            target = m.sysctl.aircr_bfhfnmins ? World::Secure : f.world;
            vec = kVecHardFault;
        }
        break;
    }
    case FaultKind::MemFault:
        if (m.sysctl.vectors.count({f.world, kVecMemFault})) {
            vec = kVecMemFault;
        } else {
            final_kind = FaultKind::HardFault;
            target = m.sysctl.aircr_bfhfnmins ? World::Secure : f.world;
            vec = kVecHardFault;
        }
        break;
    case FaultKind::HardFault:
        target = m.sysctl.aircr_bfhfnmins ? World::Secure : f.world;
        vec = kVecHardFault;
        break;
    }

    const uint32_t handler = handler_for(m, target, vec);
    exception_entry(m, ctx, target, handler);
    out.final_kind = final_kind;
    out.handled_world = target;
    out.handler_pc = handler;
    return out;
}

void pend_interrupt(MachineState& m, const PendedInterrupt& irq) {
    if (!m.sysctl.vectors.count({irq.world, irq.id}))
        throw UnknownIrq("interrupt " + std::to_string(irq.id) + " not registered");
    m.pending.push_back(irq);
    m.trace.event(TraceEvent::InterruptPended, uint32_t(irq.id), uint32_t(irq.world));
}

std::optional<PendedInterrupt> take_next_interrupt(MachineState& m) {
    if (m.pending.empty())
        return std::nullopt;
    const auto best = std::min_element(
        m.pending.begin(), m.pending.end(), [](const PendedInterrupt& a, const PendedInterrupt& b) {
            // All secure interrupts dispatch before any non-secure interrupt.
            const int wa = a.world == World::Secure ? 0 : 1;
            const int wb = b.world == World::Secure ? 0 : 1;
            return std::tie(wa, a.priority, a.id) < std::tie(wb, b.priority, b.id);
        });
    const PendedInterrupt irq = *best;
    m.pending.erase(best);
    m.trace.event(TraceEvent::InterruptDispatch, uint32_t(irq.id));
    return irq;
}

int clear_nonessential_interrupts(MachineState& m) {
    int cleared = 0;
    for (auto it = m.pending.begin(); it != m.pending.end();) {
        if (it->world == World::Secure && it->id == kRunPbaSlihIrq) {
            ++it;
        } else {
            m.trace.event(TraceEvent::InterruptCleared, uint32_t(it->id));
            it = m.pending.erase(it);
            ++cleared;
        }
    }
    return cleared;
}

void audit_runpba_config(const MachineState& m) {
    if (m.sysctl.shcsr_ns_usgfaultact)
        throw SimError("RunPBA configuration violated: SHCSR_NS.USGFAULTACT must be 0");
    if (!m.sysctl.aircr_bfhfnmins)
        throw SimError("RunPBA configuration violated: AIRCR.BFHFNMINS must be 1");
}

} // namespace pacbti
