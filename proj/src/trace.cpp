#include "pacbti/trace.hpp"

#include <cstdio>
#include <set>

#include "pacbti/machine.hpp"

namespace pacbti {

namespace {

std::string hex(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", v);
    return buf;
}

} // namespace

AuditResult audit_no_resume(const Trace& t, uint32_t stub_begin, uint32_t stub_end) {
    // Phases per fault episode: normal -> escalating (PACBTI usage fault
    // raised) -> locked (lockdown applied) -> normal again at reset/recover.
    enum class Phase { Normal, Escalating, Locked };
    Phase phase = Phase::Normal;
    bool episode_is_pacbti = false;

    for (size_t i = 0; i < t.entries.size(); ++i) {
        const TraceEntry& e = t.entries[i];
        switch (e.event) {
        case TraceEvent::FaultRaised:
            if (phase == Phase::Normal) {
                phase = Phase::Escalating;
                episode_is_pacbti = false;
            }
            break;
        case TraceEvent::Lockdown:
            phase = Phase::Locked;
            episode_is_pacbti = true;
            break;
        case TraceEvent::Reset:
        case TraceEvent::Recover:
            phase = Phase::Normal;
            break;
        case TraceEvent::Instr:
            if (e.world != 0)
                break; // secure activity is outside the NSPE audit
            if (phase == Phase::Escalating)
                return {false, "non-secure instruction at " + hex(e.pc) +
                                   " executed between fault and lockdown (entry " +
                                   std::to_string(i) + ")"};
            if (phase == Phase::Locked && episode_is_pacbti &&
                (e.pc < stub_begin || e.pc >= stub_end))
                return {false, "non-secure instruction at " + hex(e.pc) +
                                   " outside the loop stub after lockdown"};
            break;
        default:
            break;
        }
    }
    return {};
}

AuditResult audit_secure_priority(const Trace& t) {
    std::multiset<uint32_t> pending_secure;
    for (size_t i = 0; i < t.entries.size(); ++i) {
        const TraceEntry& e = t.entries[i];
        switch (e.event) {
        case TraceEvent::InterruptPended:
            if (e.b == 1)
                pending_secure.insert(e.a);
            break;
        case TraceEvent::InterruptDispatch:
        case TraceEvent::InterruptCleared:
            if (const auto it = pending_secure.find(e.a); it != pending_secure.end())
                pending_secure.erase(it);
            break;
        case TraceEvent::Reset:
            pending_secure.clear();
            break;
        case TraceEvent::Instr:
            if (e.world == 0 && !pending_secure.empty())
                return {false, "non-secure instruction at " + hex(e.pc) +
                                   " executed with a secure interrupt pending (entry " +
                                   std::to_string(i) + ")"};
            break;
        default:
            break;
        }
    }
    return {};
}

AuditResult audit_executable_fetches(const Trace& t, const MachineState& m) {
    for (const TraceEntry& e : t.entries) {
        if (e.event != TraceEvent::Instr)
            continue;
        const MemoryRegion* r = m.find_region(e.pc);
        if (!r || !r->executable)
            return {false, "instruction executed from non-executable address " + hex(e.pc)};
        if (uint8_t(r->world) != e.world)
            return {false, "instruction at " + hex(e.pc) + " executed across worlds"};
    }
    return {};
}

} // namespace pacbti
