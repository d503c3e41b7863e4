#include <doctest.h>

#include "helpers.hpp"

using namespace pacbti;
using pacbti::testing::TestMachine;

namespace {

const char* kCallee = R"(
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

fn evil:
  OUT r0
  RET
)";

} // namespace

TEST_CASE("protected call round-trips without a fault") {
    TestMachine t(kCallee, {true, true});
    const StepResult res = t.run_to_end();
    CHECK(res.status == StepStatus::Halted);
}

TEST_CASE("overwritten return address faults at the AUT") {
    TestMachine t(kCallee, {true, true});
    const auto victim = t.a.symbols.functions.at("victim");
    // Stop at the call inside victim: the stacked pair sits at sp.
    uint32_t call_pc = 0;
    for (uint32_t a = victim.begin; a < victim.end; ++a)
        if (t.a.image.regions[0].code[a - t.a.image.regions[0].base].op == Opcode::Bl)
            call_pc = a;
    REQUIRE(call_pc != 0);
    t.run_until_pc(call_pc);

    CHECK(t.m.try_write(t.m.regs.sp_ns, t.addr("evil"), World::NonSecure, true));
    const StepResult res = t.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::UsageInvalidState);
    CHECK(res.fault.cfsr_invalid_state);
    // The stored pc points at the verification instruction (AUT before RET).
    const uint32_t aut_pc = victim.end - 2;
    CHECK(res.fault.pc == aut_pc);
    CHECK(t.a.image.regions[0].code[aut_pc - t.a.image.regions[0].base].op == Opcode::Aut);
    // The tag register is left untouched by a failed authentication.
    CHECK(t.m.regs.r[12] != 0);
}

TEST_CASE("indirect branch to a non-landing-pad faults with EPSR.B set") {
    const char* src = R"(
fn main:
  MOV r3, target
  ADD r3, r3, #1
  BLX r3
  RET

fn target:
  MOV r0, #1
  MOV r0, #2
  RET
)";
    TestMachine t(src, {true, true});
    const StepResult res = t.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::UsageInvalidState);
    CHECK(res.fault.epsr_b);
    CHECK(res.fault.pc == t.addr("target") + 1);
}

TEST_CASE("indirect branch onto a landing pad proceeds") {
    const char* src = R"(
fn main:
  PUSH lr
  MOV r3, target
  BLX r3
  POP lr
  RET

fn target!indirect:
  MOV r0, #1
  RET
)";
    TestMachine t(src, {true, true});
    CHECK(t.run_to_end().status == StepStatus::Halted);
    CHECK_FALSE(t.m.regs.epsr_b);
}

TEST_CASE("store to a non-writable region is a MemFault") {
    const char* src = R"(
fn main:
  MOV r1, main
  STR r0, r1
  RET
)";
    TestMachine t(src);
    const StepResult res = t.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::MemFault);
    CHECK_FALSE(res.fault.cfsr_invalid_state);
}

TEST_CASE("secure memory is inaccessible to non-secure code") {
    const char* src = R"(
fn main:
  MOV r1, #0x30000000
  LDR r0, r1
  RET
)";
    TestMachine t(src);
    MemoryRegion sram;
    sram.name = "sram";
    sram.base = kSecureRamBase;
    sram.length = 64;
    sram.writable = true;
    sram.world = World::Secure;
    t.m.add_region(std::move(sram));

    const StepResult res = t.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::MemFault);

    // The secure side reads and writes it freely.
    CHECK(t.m.try_write(kSecureRamBase, 7, World::Secure, true));
    CHECK(t.m.try_read(kSecureRamBase, World::Secure, true).value == 7);
}

TEST_CASE("unprivileged MSR to the control register faults") {
    const char* src = R"(
fn main:
  MOV r0, #1
  MSR priv, r0
  MOV r1, #0
  MSR ctrl, r1
  RET
)";
    TestMachine t(src);
    const StepResult res = t.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::UsageInvalidState);
    CHECK_FALSE(res.fault.privileged);
    // The drop itself worked; the control write did not.
    CHECK_FALSE(t.m.regs.privileged);
    CHECK(t.m.control.pac_priv);
}

TEST_CASE("privileged MSR/MRS round-trips the control register") {
    const char* src = R"(
fn main:
  MOV r0, #10
  MSR ctrl, r0
  MRS r1, ctrl
  OUT r1
  RET
)";
    TestMachine t(src);
    CHECK(t.run_to_end().status == StepStatus::Halted);
    CHECK(t.m.out == std::string(1, char(10)));
    CHECK(t.m.control.pac_priv);
    CHECK_FALSE(t.m.control.pac_unpriv);
    CHECK(t.m.control.bti_priv);
    CHECK_FALSE(t.m.control.bti_unpriv);
}

TEST_CASE("PAC and BTI instructions are NOPs with all control bits clear") {
    const char* src = R"(
fn main:
  PUSH lr
  MOV r12, #1234
  AUT
  BTI
  PACG
  PACBTI
  MOV r3, pad
  BLX r3
  POP lr
  RET

fn pad:
  MOV r0, #5
  OUT r0
  RET
)";
    TestMachine off(src);
    off.m.control = {};
    CHECK(off.run_to_end().status == StepStatus::Halted);
    CHECK(off.m.regs.r[12] == 1234); // PACG stayed inert
    CHECK(off.m.out == std::string(1, char(5)));

    // With PAC enabled the same program faults at the stale-tag AUT.
    TestMachine on(src);
    const StepResult res = on.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::UsageInvalidState);
}

TEST_CASE("arithmetic, branches and the stack behave") {
    const char* src = R"(
fn main:
  MOV r0, #0
  MOV r1, #5
again:
  ADD r0, r0, r1
  SUB r1, r1, #1
  CMP r1, #0
  BGT again
  PUSH r0
  POP r2
  OUT r2
  MOV r3, #7
  CMP r3, #9
  BLT less
  OUT r3
less:
  SUB r4, r3, #9
  CMP r4, #0
  BGE done
  MOV r5, #1
  OUT r5
done:
  RET
)";
    TestMachine t(src);
    CHECK(t.run_to_end().status == StepStatus::Halted);
    // 5+4+3+2+1 = 15, then the BLT skips OUT r3, then 7-9 < 0 prints 1.
    CHECK(t.m.out == std::string({char(15), char(1)}));
}

TEST_CASE("ldr/str with offsets") {
    const char* src = R"(
buf:
  db 11, 22, 33

fn main:
  MOV r1, buf
  LDR r0, r1, #2
  OUT r0
  MOV r2, #44
  STR r2, r1, #1
  LDR r3, r1, #1
  OUT r3
  RET
)";
    TestMachine t(src);
    CHECK(t.run_to_end().status == StepStatus::Halted);
    CHECK(t.m.out == std::string({char(33), char(44)}));
}

TEST_CASE("reset rotates the PAC key and returns to the secure reset vector") {
    TestMachine t(kCallee);
    std::mt19937_64 rng(9);
    machine_reset(t.m, t.a.image, rng);
    const auto key1 = t.m.keys.key;
    CHECK(t.m.world == World::Secure);
    CHECK(t.m.regs.privileged);
    CHECK(t.m.regs.pc == kResetVector);
    CHECK(t.m.regs.r[5] == 0);

    machine_reset(t.m, t.a.image, rng);
    CHECK(t.m.keys.key != key1); // the RNG stream advances

    // Same master seed reproduces the same key sequence.
    std::mt19937_64 rng2(9);
    MachineState m2;
    machine_reset(m2, t.a.image, rng2);
    CHECK(m2.keys.key == key1);
}

TEST_CASE("reset reloads image contents") {
    const char* src = R"(
counter:
  db 1

fn main:
  MOV r1, counter
  LDR r0, r1
  ADD r0, r0, #1
  STR r0, r1
  RET
)";
    TestMachine t(src);
    CHECK(t.run_to_end().status == StepStatus::Halted);
    CHECK(t.m.try_read(t.addr("counter"), World::Secure, true).value == 2);
    std::mt19937_64 rng(1);
    machine_reset(t.m, t.a.image, rng);
    CHECK(t.m.try_read(t.addr("counter"), World::Secure, true).value == 1);
}

TEST_CASE("fetch from an executable data region is undecodable") {
    MachineState m;
    MemoryRegion weird;
    weird.name = "weird";
    weird.base = 0x100;
    weird.length = 4;
    weird.executable = true;
    weird.world = World::NonSecure;
    m.add_region(std::move(weird));
    m.world = World::NonSecure;
    m.regs.pc = 0x100;
    CHECK_THROWS_AS((void)m.step(), UndecodableInstruction);
}

TEST_CASE("instruction fetch respects world and privilege") {
    TestMachine t(kCallee);
    // Fetching non-secure code from the secure world is denied.
    t.m.world = World::Secure;
    const StepResult res = t.m.step();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::MemFault);
}

TEST_CASE("overlapping regions are rejected") {
    MachineState m;
    MemoryRegion a;
    a.name = "a";
    a.base = 0x100;
    a.length = 16;
    m.add_region(std::move(a));
    MemoryRegion b;
    b.name = "b";
    b.base = 0x108;
    b.length = 16;
    CHECK_THROWS_AS(m.add_region(std::move(b)), SimError);
}

TEST_CASE("SVC dispatches to the registered handler and resumes") {
    const char* src = R"(
fn main:
  MOV r0, #1
  OUT r0
  SVC #0
  MOV r0, #3
  OUT r0
  RET

fn svc_handler:
  MOV r0, #2
  OUT r0
  RET
)";
    TestMachine t(src);
    t.m.sysctl.vectors[{World::NonSecure, kVecSvc}] = t.addr("svc_handler");
    CHECK(t.run_to_end().status == StepStatus::Halted);
    CHECK(t.m.out == std::string({1, 2, 3}));

    // Without a handler the SVC raises a HardFault.
    TestMachine bare(src);
    const StepResult res = bare.run_to_end();
    REQUIRE(res.status == StepStatus::Faulted);
    CHECK(res.fault.kind == FaultKind::HardFault);
}
