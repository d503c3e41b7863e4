#pragma once

#include <random>
#include <string>

#include "pacbti/assembler.hpp"
#include "pacbti/machine.hpp"

namespace pacbti::testing {

inline Assembled build(const std::string& src, InstrumentConfig cfg = {}) {
    return assemble(instrument(parse_program(src), cfg));
}

/// A bare machine pointed straight at NSPE code (no device layer, no secure
/// boot); faults come back as step results.
struct TestMachine {
    MachineState m;
    Assembled a;

    explicit TestMachine(const std::string& src, InstrumentConfig cfg = {}, uint64_t seed = 42) {
        a = build(src, cfg);
        std::mt19937_64 rng(seed);
        machine_reset(m, a.image, rng);
        m.control = {true, true, true, true};
        m.regs.sp_ns = kNsStackBase + kNsStackLength;
        m.regs.lr = a.symbols.halt_stub;
        m.regs.pc = a.symbols.entry;
        m.world = World::NonSecure;
        m.regs.privileged = true;
        m.trace.enabled = true;
    }

    uint32_t addr(const std::string& name) const { return a.symbols.addr(name); }

    // Steps until pc hits the target (checked before each step).
    StepResult run_until_pc(uint32_t pc, uint64_t budget = 100000) {
        StepResult res{};
        while (budget--) {
            if (m.regs.pc == pc)
                return res;
            res = m.step();
            if (res.status != StepStatus::Continue)
                return res;
        }
        throw SimError("run_until_pc budget exhausted");
    }

    // Steps until the program halts or faults.
    StepResult run_to_end(uint64_t budget = 100000) {
        while (budget--) {
            const StepResult res = m.step();
            if (res.status != StepStatus::Continue)
                return res;
        }
        throw SimError("run_to_end budget exhausted");
    }
};

} // namespace pacbti::testing
