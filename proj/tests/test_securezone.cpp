#include <doctest.h>

#include "helpers.hpp"
#include "pacbti/securezone.hpp"

using namespace pacbti;
using pacbti::testing::TestMachine;

namespace {

const char* kFaulty = R"(
fn main:
  PUSH lr
  BL victim
  POP lr
  RET

fn victim:
  PUSH lr
  BL leafy
  POP lr
  RET

fn leafy:
  NOP
  RET

fn ns_handler:
  HALT
  RET
)";

// Runs the protected program into an AUT mismatch and returns the fault.
Fault make_pac_fault(TestMachine& t) {
    const auto victim = t.a.symbols.functions.at("victim");
    uint32_t call_pc = 0;
    for (uint32_t a = victim.begin; a < victim.end; ++a)
        if (t.a.image.regions[0].code[a - t.a.image.regions[0].base].op == Opcode::Bl)
            call_pc = a;
    t.run_until_pc(call_pc);
    t.m.try_write(t.m.regs.sp_ns, 0xBADBAD, World::NonSecure, true);
    const StepResult res = t.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    return res.fault;
}

} // namespace

TEST_CASE("non-secure usage fault escalates to the secure HardFault handler") {
    TestMachine t(kFaulty, {true, true});
    t.m.sysctl.vectors[{World::Secure, kVecHardFault}] = kSecureHardFaultHandler;
    const Fault f = make_pac_fault(t);
    const uint32_t sp_before = t.m.regs.sp_ns;

    const DispatchOutcome out = raise_fault(t.m, f);
    CHECK(out.escalated);
    CHECK(out.final_kind == FaultKind::HardFault);
    CHECK(out.handled_world == World::Secure);
    CHECK(out.handler_pc == kSecureHardFaultHandler);
    CHECK(t.m.world == World::Secure);
    CHECK(t.m.handler_mode);
    CHECK(t.m.regs.pc == kSecureHardFaultHandler);
    CHECK(t.m.regs.lr == kExcReturn);

    // The context was stacked on the non-secure stack and captured.
    CHECK(t.m.regs.sp_ns == sp_before - 8);
    REQUIRE(t.m.current_ctx.has_value());
    CHECK(t.m.current_ctx->stacked_pc == f.pc);
    CHECK(t.m.current_ctx->cfsr_invalid_state);
    CHECK(t.m.current_ctx->world == World::NonSecure);
    const auto frame_pc = t.m.try_read(t.m.regs.sp_ns + 6, World::Secure, true);
    CHECK(frame_pc.value == f.pc);
}

TEST_CASE("exception return restores the interrupted context") {
    TestMachine t(kFaulty, {true, true});
    t.m.sysctl.vectors[{World::Secure, kVecHardFault}] = kSecureHardFaultHandler;
    const Fault f = make_pac_fault(t);
    const RegisterFile before = t.m.regs;
    raise_fault(t.m, f);
    exception_return(t.m);
    CHECK(t.m.world == World::NonSecure);
    CHECK_FALSE(t.m.handler_mode);
    CHECK(t.m.regs.pc == f.pc);
    CHECK(t.m.regs.lr == before.lr);
    CHECK(t.m.regs.sp_ns == before.sp_ns);
    CHECK(t.m.regs.r[0] == before.r[0]);
    CHECK(t.m.regs.r[12] == before.r[12]);
}

TEST_CASE("secure-world fault stays on the secure path without escalation") {
    TestMachine t(kFaulty);
    t.m.sysctl.vectors[{World::Secure, kVecHardFault}] = kSecureHardFaultHandler;
    t.m.regs.sp_s = kNsStackBase + 64; // somewhere writable for the frame
    Fault f;
    f.kind = FaultKind::MemFault;
    f.world = World::Secure;
    f.pc = kResetVector;
    f.privileged = true;

    const DispatchOutcome out = raise_fault(t.m, f);
    CHECK_FALSE(out.escalated);
    CHECK(out.handled_world == World::Secure);
    CHECK(out.final_kind == FaultKind::HardFault);
}

TEST_CASE("enabled banked handler keeps the usage fault in the non-secure world") {
    TestMachine t(kFaulty, {true, true});
    t.m.sysctl.shcsr_ns_usgfaultact = true;
    t.m.sysctl.vectors[{World::NonSecure, kVecUsageFault}] = t.addr("ns_handler");
    const Fault f = make_pac_fault(t);

    const DispatchOutcome out = raise_fault(t.m, f);
    CHECK_FALSE(out.escalated);
    CHECK(out.handled_world == World::NonSecure);
    CHECK(out.handler_pc == t.addr("ns_handler"));
    CHECK(t.m.world == World::NonSecure);
    CHECK(t.m.handler_mode);
    // The toy handler runs to its HALT.
    CHECK(t.run_to_end().status == StepStatus::Halted);
}

TEST_CASE("missing stack lockup is a double fault") {
    TestMachine t(kFaulty, {true, true});
    t.m.sysctl.vectors[{World::Secure, kVecHardFault}] = kSecureHardFaultHandler;
    const Fault f = make_pac_fault(t);
    t.m.regs.sp_ns = t.addr("main") + 4; // stacking into code must fail
    CHECK_THROWS_AS(raise_fault(t.m, f), LockupError);
}

TEST_CASE("secure interrupts dispatch before non-secure regardless of priority") {
    TestMachine t(kFaulty);
    t.m.sysctl.vectors[{World::NonSecure, 16}] = t.addr("ns_handler");
    t.m.sysctl.vectors[{World::Secure, kRunPbaSlihIrq}] = kSecureSlihHandler;
    t.m.sysctl.vectors[{World::Secure, 3}] = kSecureSlihHandler;

    pend_interrupt(t.m, {16, World::NonSecure, 0, InterruptKind::Ordinary});
    pend_interrupt(t.m, {kRunPbaSlihIrq, World::Secure, 9, InterruptKind::Slih});
    pend_interrupt(t.m, {3, World::Secure, 5, InterruptKind::Ordinary});

    const auto first = take_next_interrupt(t.m);
    REQUIRE(first);
    CHECK(first->world == World::Secure);
    CHECK(first->id == 3); // lower priority number wins among secure
    const auto second = take_next_interrupt(t.m);
    REQUIRE(second);
    CHECK(second->id == kRunPbaSlihIrq);
    const auto third = take_next_interrupt(t.m);
    REQUIRE(third);
    CHECK(third->world == World::NonSecure);
    CHECK_FALSE(take_next_interrupt(t.m));
}

TEST_CASE("pending an unregistered interrupt is rejected") {
    TestMachine t(kFaulty);
    CHECK_THROWS_AS(pend_interrupt(t.m, {31, World::NonSecure, 0, InterruptKind::Ordinary}),
                    UnknownIrq);
}

TEST_CASE("clearing non-essential interrupts keeps only the RunPBA trigger") {
    TestMachine t(kFaulty);
    t.m.sysctl.vectors[{World::NonSecure, 16}] = t.addr("ns_handler");
    t.m.sysctl.vectors[{World::Secure, kRunPbaSlihIrq}] = kSecureSlihHandler;

    SUBCASE("attacker interrupt is dropped") {
        pend_interrupt(t.m, {16, World::NonSecure, 0, InterruptKind::Ordinary});
        pend_interrupt(t.m, {kRunPbaSlihIrq, World::Secure, 0, InterruptKind::Slih});
        CHECK(clear_nonessential_interrupts(t.m) == 1);
        REQUIRE(t.m.pending.size() == 1);
        CHECK(t.m.pending[0].id == kRunPbaSlihIrq);
    }
    SUBCASE("only the trigger pending") {
        pend_interrupt(t.m, {kRunPbaSlihIrq, World::Secure, 0, InterruptKind::Slih});
        CHECK(clear_nonessential_interrupts(t.m) == 0);
    }
    SUBCASE("empty set") {
        CHECK(clear_nonessential_interrupts(t.m) == 0);
    }
}

TEST_CASE("config audit rejects non-RunPBA register settings") {
    TestMachine t(kFaulty);
    t.m.sysctl.shcsr_ns_usgfaultact = false;
    t.m.sysctl.aircr_bfhfnmins = true;
    CHECK_NOTHROW(audit_runpba_config(t.m));
    t.m.sysctl.shcsr_ns_usgfaultact = true;
    CHECK_THROWS_AS(audit_runpba_config(t.m), SimError);
    t.m.sysctl.shcsr_ns_usgfaultact = false;
    t.m.sysctl.aircr_bfhfnmins = false;
    CHECK_THROWS_AS(audit_runpba_config(t.m), SimError);
}
