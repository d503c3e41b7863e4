#include <doctest.h>

#include <map>
#include <thread>

#include "helpers.hpp"
#include "pacbti/device.hpp"
#include "pacbti/harness.hpp"

using namespace pacbti;
using pacbti::testing::build;

namespace {

std::string scen(const std::string& name) {
    return std::string(PACBTI_SCENARIOS) + "/" + name;
}

std::string fixture(const std::string& name) {
    return std::string(PACBTI_FIXTURES) + "/" + name;
}

/// Trace call-count oracle: executed-instruction delta added by the
/// instrumentation is 2 per dynamic call plus a spill pair per non-leaf
/// call. Boot handoffs count as calls into the entry.
uint64_t predicted_added(const Trace& t, const SymbolTable& sym) {
    std::map<uint32_t, const SymbolTable::FuncInfo*> by_begin;
    for (const auto& [name, info] : sym.functions)
        by_begin[info.begin] = &info;
    uint64_t added = 0;
    const auto add_call = [&](uint32_t target) {
        const auto it = by_begin.find(target);
        if (it == by_begin.end())
            return; // call into the exit stub or a label
        added += 2 + (it->second->leaf ? 0 : 2);
    };
    for (const auto& e : t.entries) {
        if (e.event == TraceEvent::Instr && (e.op == Opcode::Bl || e.op == Opcode::Blx))
            add_call(e.a);
        else if (e.event == TraceEvent::Reset)
            add_call(sym.entry);
    }
    return added;
}

} // namespace

TEST_CASE("scenario scripts parse") {
    const Scenario s = parse_scenario("name = x\n"
                                      "program = prog.s\n"
                                      "pac = true\n"
                                      "bti = false\n"
                                      "attack = PacReuse\n"
                                      "policy = ResetAfterPersist\n"
                                      "attest_at = 3, 9\n"
                                      "seed = 77\n"
                                      "input = hello\n",
                                      "/base");
    CHECK(s.name == "x");
    CHECK(s.program == "/base/prog.s");
    CHECK(s.instrument.pac);
    CHECK_FALSE(s.instrument.bti);
    CHECK(s.attack == AttackKind::PacReuse);
    CHECK(s.policy == PostFaultPolicy::ResetAfterPersist);
    CHECK(s.attest_at == std::vector<uint64_t>{3, 9});
    CHECK(s.seed == 77);
    CHECK(s.input == "hello");
    CHECK_THROWS_AS(parse_scenario("bogus = 1\nprogram = p\n", ""), ScenarioError);
}

TEST_CASE("backward-edge exploit: plain image leaks and resumes") {
    const ScenarioReport r = run_scenario(load_scenario(scen("rop_plain.toy")));
    CHECK(r.secret_leaked);
    CHECK_FALSE(r.fault_raised);
    CHECK(r.lifecycle_final == Lifecycle::Secured);
    // Normal flow resumed after the leak: the dispatch path still printed.
    CHECK(r.out_stream.find(">hi!") != std::string::npos);
    CHECK(r.detection_gap); // attested clean although the secret leaked
}

TEST_CASE("backward-edge exploit: protected image faults at the AUT") {
    const RunArtifacts art = run_scenario_full(load_scenario(scen("rop_protected.toy")));
    const ScenarioReport& r = art.report;
    CHECK_FALSE(r.secret_leaked);
    CHECK(r.fault_raised);
    REQUIRE(r.fault_kind.has_value());
    CHECK(*r.fault_kind == FaultClass::PacFault);
    CHECK(r.lifecycle_final == Lifecycle::NspeCompromised);
    REQUIRE(r.tokens.size() == 1);
    CHECK(r.tokens[0].claims.status == VerifyStatus::Accepted);
    CHECK(r.tokens[0].claims.lifecycle.runtime_failure);
    CHECK_FALSE(r.detection_gap);

    const AuditResult audit = audit_no_resume(art.trace, art.stub_begin, art.stub_end);
    CHECK_MESSAGE(audit.ok, audit.detail);
}

TEST_CASE("backward-edge exploit under the reset policy recovers to SECURED") {
    const ScenarioReport r = run_scenario(load_scenario(scen("rop_protected_reset.toy")));
    CHECK_FALSE(r.secret_leaked);
    CHECK(r.fault_raised);
    CHECK(r.lifecycle_final == Lifecycle::Secured);
    REQUIRE(r.tokens.size() == 1);
    CHECK(r.tokens[0].claims.lifecycle.runtime_failure); // evidence persisted
    CHECK(r.tokens[0].claims.claims.boot_epoch == 2);
}

TEST_CASE("forward-edge exploit: plain image leaks, protected faults on the pad check") {
    const ScenarioReport plain = run_scenario(load_scenario(scen("bti_plain.toy")));
    CHECK(plain.secret_leaked);
    CHECK_FALSE(plain.fault_raised);

    const ScenarioReport prot = run_scenario(load_scenario(scen("bti_protected.toy")));
    CHECK_FALSE(prot.secret_leaked);
    REQUIRE(prot.fault_kind.has_value());
    CHECK(*prot.fault_kind == FaultClass::BtiFault);
    CHECK(prot.lifecycle_final == Lifecycle::NspeCompromised);
}

TEST_CASE("rop plan targets the exact stacked lr slot") {
    for (const bool instrumented : {false, true}) {
        Scenario s = load_scenario(scen(instrumented ? "rop_protected.toy" : "rop_plain.toy"));
        const Program prog = instrument(parse_program(read_text_file(s.program)), s.instrument);
        const Assembled a = assemble(prog);
        const InjectionPlan plan = attack_rop_return(prog, a, s);

        // Independent re-derivation: observe sp directly at echo entry on a
        // fresh device instead of going through the trace.
        Device dev(assemble(prog), {s.seed, s.policy, s.tag_width, false, "", instrumented});
        dev.write_input("input_a", s.input);
        dev.write_input("input_b", s.input);
        const uint32_t echo_entry = dev.symbols.functions.at("echo").begin;
        for (int i = 0; i < 100000 && dev.m.regs.pc != echo_entry; ++i)
            dev.step_once();
        REQUIRE(dev.m.regs.pc == echo_entry);
        CHECK(plan.expected_lr_slot == dev.m.regs.sp_ns - (instrumented ? 2 : 1));
    }
}

TEST_CASE("forward plan targets a non-landing-pad address") {
    Scenario s = load_scenario(scen("bti_protected.toy"));
    const Program prog = instrument(parse_program(read_text_file(s.program)), s.instrument);
    const Assembled a = assemble(prog);
    const InjectionPlan plan = attack_bti_forward(prog, a, s);
    // The last write before the terminator carries the branch target.
    const uint32_t target = plan.actions[plan.actions.size() - 2].value;
    CHECK(target == a.symbols.addr("dump_state") + 1);
    const auto& code = a.image.regions[0];
    CHECK(code.code[target - code.base].op != Opcode::Pacbti);
    CHECK(code.code[target - code.base].op != Opcode::Bti);
}

TEST_CASE("attack planner rejects programs without the expected shape") {
    Scenario s = load_scenario(scen("rop_plain.toy"));
    s.program = fixture("reuse_pair.s");
    CHECK_THROWS_AS(run_scenario(s), GadgetNotFound);
}

TEST_CASE("pac reuse replays a harvested tag without a fault") {
    const ScenarioReport r = run_scenario(load_scenario(scen("reuse.toy")));
    CHECK_FALSE(r.fault_raised);
    // Benign stream is ".A.B"; the replayed return re-enters the site-A
    // continuation once more.
    CHECK(r.out_stream == ".A.A.B");
    CHECK(r.lifecycle_final == Lifecycle::Secured);
}

TEST_CASE("fop window outside checkpoints reproduces the TOCTOU gap") {
    const ScenarioReport r = run_scenario(load_scenario(scen("fop_gap.toy")));
    CHECK(r.secret_leaked);
    CHECK_FALSE(r.fault_raised);
    CHECK(r.detection_gap);
    for (const auto& t : r.tokens) {
        CHECK(t.claims.status == VerifyStatus::Accepted);
        CHECK_FALSE(t.claims.lifecycle.runtime_failure);
        CHECK(t.claims.lifecycle.pac_priv); // both checkpoints look clean
    }
}

TEST_CASE("fop checkpoint inside the window exposes the disabled features") {
    const ScenarioReport r = run_scenario(load_scenario(scen("fop_detected.toy")));
    CHECK(r.secret_leaked);
    CHECK_FALSE(r.detection_gap);
    REQUIRE(r.tokens.size() == 3);
    CHECK(r.tokens[0].claims.lifecycle.pac_priv);
    CHECK_FALSE(r.tokens[1].claims.lifecycle.pac_priv);
    CHECK_FALSE(r.tokens[1].claims.lifecycle.bti_unpriv);
    CHECK(r.tokens[2].claims.lifecycle.pac_priv);
}

TEST_CASE("the control gadget requires privileged execution") {
    const char* src = R"(
fn main:
  MOV r0, #1
  MSR priv, r0
unpriv:
  NOP
  B unpriv
  RET

fn spin:
sp2:
  B sp2
  RET
)";
    Device dev(build(src, {true, true}), {3, PostFaultPolicy::HoldInSpe, 32, false, ""});
    dev.run(10);
    REQUIRE_FALSE(dev.m.regs.privileged);
    CHECK_THROWS_AS(fop_set_control(dev, false), NotPrivileged);
}

TEST_CASE("brute force at a narrow tag width succeeds at the predicted rate") {
    const Program prog =
        instrument(parse_program(read_text_file(fixture("brute_loop.s"))), {true, true});
    Device dev(assemble(prog), {31, PostFaultPolicy::ResetAfterPersist, 4, false, ""});
    std::mt19937_64 rng(400);
    const BruteForceStats st = attack_brute_force(dev, 400, 4, rng);
    CHECK(st.attempts == 400);
    // Binomial(400, 1/16): mean 25, sigma ~4.84.
    CHECK(st.successes >= 11);
    CHECK(st.successes <= 40);
    CHECK(st.resets == st.attempts - st.successes);
    CHECK(dev.m.out.find("PWNED") != std::string::npos);
}

TEST_CASE("brute force at the full tag width never lands") {
    const Program prog =
        instrument(parse_program(read_text_file(fixture("brute_loop.s"))), {true, true});
    Device dev(assemble(prog), {32, PostFaultPolicy::ResetAfterPersist, 32, false, ""});
    std::mt19937_64 rng(2);
    const BruteForceStats st = attack_brute_force(dev, 2000, 32, rng);
    CHECK(st.successes == 0);
    CHECK(st.resets == 2000);
}

TEST_CASE("brute force demands the reset policy") {
    const Program prog =
        instrument(parse_program(read_text_file(fixture("brute_loop.s"))), {true, true});
    Device dev(assemble(prog), {31, PostFaultPolicy::HoldInSpe, 4, false, ""});
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(attack_brute_force(dev, 10, 4, rng), ScenarioError);
}

TEST_CASE("instrumentation preserves benign behavior across the corpus") {
    for (const std::string& name :
         {std::string("echo_service.s"), std::string("reuse_pair.s"), std::string("empty.s"),
          std::string("overhead/fib.s"), std::string("overhead/loop_sum.s"),
          std::string("overhead/calls_chain.s"), std::string("overhead/string_rev.s")}) {
        const Program plain = parse_program(read_text_file(fixture(name)));
        std::string out_plain, out_inst;
        for (const bool inst : {false, true}) {
            const Program p = inst ? instrument(plain, {true, true}) : plain;
            Device dev(assemble(p), {5, PostFaultPolicy::HoldInSpe, 32, false, "", inst});
            if (dev.symbols.symbols.count("input_a"))
                dev.write_input("input_a", "hey");
            if (dev.symbols.symbols.count("input_b"))
                dev.write_input("input_b", "hey");
            dev.run(1000000);
            REQUIRE_MESSAGE(dev.halted, name);
            CHECK_MESSAGE(!dev.first_fault.has_value(), name); // no false positives
            (inst ? out_inst : out_plain) = dev.m.out;
        }
        CHECK_MESSAGE(out_plain == out_inst, name);
    }
}

TEST_CASE("executed-count delta equals the trace call-count prediction") {
    for (const std::string& name :
         {std::string("echo_service.s"), std::string("empty.s"), std::string("overhead/fib.s"),
          std::string("overhead/loop_sum.s"), std::string("overhead/calls_chain.s"),
          std::string("overhead/string_rev.s")}) {
        const Program plain = parse_program(read_text_file(fixture(name)));
        const Program inst = instrument(plain, {true, true});

        uint64_t plain_count = 0;
        {
            Device dev(assemble(plain), {5, PostFaultPolicy::HoldInSpe, 32, false, "", false});
            if (dev.symbols.symbols.count("input_a"))
                dev.write_input("input_a", "hey");
            if (dev.symbols.symbols.count("input_b"))
                dev.write_input("input_b", "hey");
            dev.run(1000000);
            plain_count = dev.m.executed;
        }
        Device dev(assemble(inst), {5, PostFaultPolicy::HoldInSpe, 32, true, ""});
        if (dev.symbols.symbols.count("input_a"))
            dev.write_input("input_a", "hey");
        if (dev.symbols.symbols.count("input_b"))
            dev.write_input("input_b", "hey");
        dev.run(1000000);
        REQUIRE(dev.halted);
        const uint64_t predicted = predicted_added(dev.m.trace, dev.symbols);
        CHECK_MESSAGE(dev.m.executed == plain_count + predicted, name);
    }
}

TEST_CASE("empty main's overhead is exactly one prologue/epilogue pair") {
    const OverheadReport r = overhead_report(fixture("empty.s"), "");
    CHECK(r.plain_count == 2);        // RET plus the exit stub's HALT
    CHECK(r.instrumented_count == 4); // PACBTI and AUT added
    CHECK(r.ratio == doctest::Approx(2.0));
}

TEST_CASE("recursion shows the highest overhead ratio in the corpus") {
    std::map<std::string, double> ratios;
    for (const std::string& name : {std::string("fib.s"), std::string("loop_sum.s"),
                                   std::string("calls_chain.s"), std::string("string_rev.s")})
        ratios[name] = overhead_report(fixture("overhead/" + name), "").ratio;
    for (const auto& [name, ratio] : ratios)
        if (name != "fib.s")
            CHECK_MESSAGE(ratios.at("fib.s") > ratio, name);
}

TEST_CASE("reports serialize deterministically") {
    const Scenario s = load_scenario(scen("rop_protected.toy"));
    const std::string a = run_scenario(s).serialize();
    const std::string b = run_scenario(s).serialize();
    CHECK(a == b);
    CHECK(a.find("name = rop_protected") == 0);
    CHECK(a.find("fault_kind = PacFault") != std::string::npos);
}

TEST_CASE("scenario corpus honors the trace audits") {
    for (const std::string& name :
         {std::string("benign_echo.toy"), std::string("rop_plain.toy"),
          std::string("rop_protected.toy"), std::string("rop_protected_reset.toy"),
          std::string("bti_plain.toy"), std::string("bti_protected.toy"),
          std::string("reuse.toy"), std::string("fop_gap.toy"),
          std::string("fop_detected.toy")}) {
        const RunArtifacts art = run_scenario_full(load_scenario(scen(name)));
        const AuditResult nr = audit_no_resume(art.trace, art.stub_begin, art.stub_end);
        CHECK_MESSAGE(nr.ok, name, ": ", nr.detail);
        const AuditResult pr = audit_secure_priority(art.trace);
        CHECK_MESSAGE(pr.ok, name, ": ", pr.detail);
        CHECK_MESSAGE(art.exec_audit.ok, name, ": ", art.exec_audit.detail);
    }
}

TEST_CASE("whenever a fault is raised, later checkpoints carry the evidence") {
    for (const std::string& name :
         {std::string("rop_protected.toy"), std::string("rop_protected_reset.toy"),
          std::string("bti_protected.toy")}) {
        const ScenarioReport r = run_scenario(load_scenario(scen(name)));
        REQUIRE_MESSAGE(r.fault_raised, name);
        REQUIRE_MESSAGE(!r.tokens.empty(), name);
        for (const auto& t : r.tokens)
            CHECK_MESSAGE(t.claims.lifecycle.runtime_failure, name);
    }
}

TEST_CASE("benign scenario records overhead counts for both images") {
    const ScenarioReport r = run_scenario(load_scenario(scen("benign_echo.toy")));
    CHECK_FALSE(r.secret_leaked);
    CHECK_FALSE(r.fault_raised);
    CHECK(r.instr_plain > 0);
    CHECK(r.instr_instrumented > r.instr_plain);
    CHECK_FALSE(r.detection_gap);
    REQUIRE(r.tokens.size() == 2);
    CHECK(r.tokens[0].claims.status == VerifyStatus::Accepted);
}

TEST_CASE("devices are isolated values; scenarios run in parallel") {
    const Scenario s = load_scenario(scen("rop_protected.toy"));
    std::string reports[2];
    std::thread a([&] { reports[0] = run_scenario(s).serialize(); });
    std::thread b([&] { reports[1] = run_scenario(s).serialize(); });
    a.join();
    b.join();
    CHECK(reports[0] == reports[1]);
    CHECK(reports[0] == run_scenario(s).serialize());
}
