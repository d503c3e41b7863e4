#include "pacbti/harness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace pacbti {

std::string_view attack_name(AttackKind a) {
    switch (a) {
    case AttackKind::None: return "None";
    case AttackKind::RopReturn: return "RopReturn";
    case AttackKind::BtiForwardEdge: return "BtiForwardEdge";
    case AttackKind::PacBruteForce: return "PacBruteForce";
    case AttackKind::PacReuse: return "PacReuse";
    case AttackKind::FopDisablePacbti: return "FopDisablePacbti";
    }
    return "?";
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw SimError("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

namespace {

std::string strip(const std::string& s) {
    const size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return "";
    const size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

AttackKind attack_from_name(const std::string& s) {
    for (const AttackKind a :
         {AttackKind::None, AttackKind::RopReturn, AttackKind::BtiForwardEdge,
          AttackKind::PacBruteForce, AttackKind::PacReuse, AttackKind::FopDisablePacbti})
        if (attack_name(a) == s)
            return a;
    throw ScenarioError("unknown attack: " + s);
}

bool bool_from(const std::string& s) {
    if (s == "true" || s == "1")
        return true;
    if (s == "false" || s == "0")
        return false;
    throw ScenarioError("bad boolean: " + s);
}

} // namespace

Scenario parse_scenario(const std::string& text, const std::string& base_dir) {
    Scenario s;
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
        if (const size_t c = raw.find(';'); c != std::string::npos)
            raw.erase(c);
        const std::string line = strip(raw);
        if (line.empty())
            continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ScenarioError("bad scenario line: " + line);
        const std::string key = strip(line.substr(0, eq));
        const std::string val = strip(line.substr(eq + 1));
        if (key == "name")
            s.name = val;
        else if (key == "program")
            s.program = base_dir.empty() ? val : base_dir + "/" + val;
        else if (key == "pac")
            s.instrument.pac = bool_from(val);
        else if (key == "bti")
            s.instrument.bti = bool_from(val);
        else if (key == "attack")
            s.attack = attack_from_name(val);
        else if (key == "attempts")
            s.attempts = std::stoull(val);
        else if (key == "tag_width")
            s.tag_width = uint8_t(std::stoul(val));
        else if (key == "policy")
            s.policy = val == "ResetAfterPersist" ? PostFaultPolicy::ResetAfterPersist
                                                  : PostFaultPolicy::HoldInSpe;
        else if (key == "attest_at") {
            std::stringstream ss(val);
            std::string tok;
            while (std::getline(ss, tok, ','))
                s.attest_at.push_back(std::stoull(strip(tok)));
        } else if (key == "seed")
            s.seed = std::stoull(val);
        else if (key == "input")
            s.input = val;
        else if (key == "disable_step")
            s.disable_step = std::stoull(val);
        else if (key == "enable_step")
            s.enable_step = std::stoull(val);
        else if (key == "step_limit")
            s.step_limit = std::stoull(val);
        else
            throw ScenarioError("unknown scenario key: " + key);
    }
    if (s.program.empty())
        throw ScenarioError("scenario has no program");
    return s;
}

Scenario load_scenario(const std::string& path) {
    return parse_scenario(read_text_file(path),
                          std::filesystem::path(path).parent_path().string());
}

namespace {

// Benign reference run used as the stack-layout and timing oracle.
Trace scout_run(const Assembled& asmb, const Scenario& s, uint64_t budget = 200000) {
    Device dev(asmb, {s.seed, s.policy, s.tag_width, true, "",
                      s.instrument.pac || s.instrument.bti});
    if (dev.symbols.symbols.count("input_a"))
        dev.write_input("input_a", s.input);
    if (dev.symbols.symbols.count("input_b"))
        dev.write_input("input_b", s.input);
    dev.run(budget);
    if (!dev.halted)
        throw ScenarioError("scout run did not terminate");
    return std::move(dev.m.trace);
}

const Instruction& image_instr(const Assembled& asmb, uint32_t addr) {
    for (const auto& r : asmb.image.regions)
        if (r.kind == RegionKind::Code && addr >= r.base && addr - r.base < r.length)
            return r.code[addr - r.base];
    throw ScenarioError("address not in a code section");
}

bool image_is_instrumented_at(const Assembled& asmb, uint32_t addr) {
    const Opcode op = image_instr(asmb, addr).op;
    return op == Opcode::Pacbti || op == Opcode::Bti;
}

/// sp observed at the n-th execution of pc (1-based) in a benign trace,
/// together with the step index of that execution.
struct TracePoint {
    uint64_t step = 0;
    uint32_t sp = 0;
    bool found = false;
};

TracePoint nth_execution(const Trace& t, uint32_t pc, int n) {
    uint64_t step = 0;
    for (const auto& e : t.entries) {
        if (e.event != TraceEvent::Instr)
            continue;
        if (e.pc == pc && --n == 0)
            return {step, e.sp, true};
        ++step;
    }
    return {};
}

uint32_t find_op_in_function(const Assembled& asmb, const SymbolTable::FuncInfo& f, Opcode op) {
    for (uint32_t a = f.begin; a < f.end; ++a)
        if (image_instr(asmb, a).op == op)
            return a;
    throw GadgetNotFound(std::string(opcode_name(op)) + " inside function");
}

uint32_t require_symbol(const Assembled& asmb, const std::string& name) {
    const auto it = asmb.symbols.symbols.find(name);
    if (it == asmb.symbols.symbols.end())
        throw GadgetNotFound(name);
    return it->second;
}

} // namespace

InjectionPlan attack_rop_return(const Program&, const Assembled& asmb, const Scenario& s) {
    const uint32_t input_a = require_symbol(asmb, "input_a");
    const uint32_t gadget = require_symbol(asmb, "report_loop");
    const auto echo = asmb.symbols.functions.find("echo");
    if (echo == asmb.symbols.functions.end())
        throw GadgetNotFound("echo");

    const Trace scout = scout_run(asmb, s);
    const TracePoint entry = nth_execution(scout, echo->second.begin, 1);
    if (!entry.found)
        throw ScenarioError("benign run never reached echo");
    // Saved return address: one slot under the spilled tag when instrumented.
    const bool instrumented = image_is_instrumented_at(asmb, echo->second.begin);
    const uint32_t lr_slot = entry.sp - (instrumented ? 2 : 1);

    InjectionPlan plan;
    plan.expected_lr_slot = lr_slot;
    for (uint32_t i = 0; i < 8; ++i)
        plan.actions.push_back({0, InjectionPlan::Kind::Write, input_a + i, 'A', 0});
    plan.actions.push_back({0, InjectionPlan::Kind::Write, input_a + 8, gadget, 0});
    plan.actions.push_back({0, InjectionPlan::Kind::Write, input_a + 9, 0, 0});
    return plan;
}

InjectionPlan attack_bti_forward(const Program&, const Assembled& asmb, const Scenario& s) {
    (void)s;
    const uint32_t input_b = require_symbol(asmb, "input_b");
    const uint32_t handler_ptr = require_symbol(asmb, "handler_ptr");
    uint32_t target = require_symbol(asmb, "dump_state");
    if (image_is_instrumented_at(asmb, target))
        ++target; // skip the landing pad; land on a plain instruction

    InjectionPlan plan;
    plan.expected_lr_slot = handler_ptr;
    for (uint32_t i = 0; i < 8; ++i)
        plan.actions.push_back({0, InjectionPlan::Kind::Write, input_b + i, 'B', 0});
    plan.actions.push_back({0, InjectionPlan::Kind::Write, input_b + 8, target, 0});
    plan.actions.push_back({0, InjectionPlan::Kind::Write, input_b + 9, 0, 0});
    return plan;
}

InjectionPlan attack_pac_reuse(const Program&, const Assembled& asmb, const Scenario& s) {
    if (!s.instrument.pac)
        throw ScenarioError("PacReuse needs a PAC-instrumented image");
    const auto victim = asmb.symbols.functions.find("victim");
    if (victim == asmb.symbols.functions.end())
        throw GadgetNotFound("victim");
    const uint32_t call_in_victim = find_op_in_function(asmb, victim->second, Opcode::Bl);

    const Trace scout = scout_run(asmb, s);
    const TracePoint entry = nth_execution(scout, victim->second.begin, 1);
    const TracePoint site_a = nth_execution(scout, call_in_victim, 1);
    const TracePoint site_b = nth_execution(scout, call_in_victim, 2);
    if (!entry.found || !site_a.found || !site_b.found)
        throw ScenarioError("benign run does not exercise both call sites");

    const uint32_t lr_slot = entry.sp - 2; // under PACBTI + spilled tag
    const uint32_t tag_slot = entry.sp - 1;

    InjectionPlan plan;
    plan.expected_lr_slot = lr_slot;
    plan.actions.push_back({site_a.step, InjectionPlan::Kind::Harvest, lr_slot, 0, 0});
    plan.actions.push_back({site_a.step, InjectionPlan::Kind::Harvest, tag_slot, 0, 1});
    plan.actions.push_back({site_b.step, InjectionPlan::Kind::WriteHarvested, lr_slot, 0, 0});
    plan.actions.push_back({site_b.step, InjectionPlan::Kind::WriteHarvested, tag_slot, 0, 1});
    return plan;
}

void fop_set_control(Device& dev, bool enabled) {
    // The dispatcher gadget runs MSR on the control register, so it needs
    // privileged NSPE execution.
    if (dev.m.world != World::NonSecure || !dev.m.regs.privileged)
        throw NotPrivileged();
    dev.m.control = enabled ? PacbtiControl{true, true, true, true} : PacbtiControl{};
}

BruteForceStats attack_brute_force(Device& dev, uint64_t attempts, uint8_t tag_width,
                                   std::mt19937_64& rng) {
    if (dev.runpba.policy != PostFaultPolicy::ResetAfterPersist)
        throw ScenarioError("brute force needs the ResetAfterPersist policy");
    dev.m.keys.tag_width = tag_width;

    const auto victim = dev.symbols.functions.find("victim");
    if (victim == dev.symbols.functions.end())
        throw GadgetNotFound("victim");
    const uint32_t win = [&] {
        const auto it = dev.symbols.symbols.find("win");
        if (it == dev.symbols.symbols.end())
            throw GadgetNotFound("win");
        return it->second;
    }();
    // Inject at the call inside victim: the stacked (lr, tag) pair is
    // complete there and sits right at sp.
    uint32_t inject_pc = 0;
    for (uint32_t a = victim->second.begin; a < victim->second.end && !inject_pc; ++a) {
        const MemoryRegion* r = dev.m.find_region(a);
        if (r && r->kind == RegionKind::Code && r->code[a - r->base].op == Opcode::Bl)
            inject_pc = a;
    }
    if (!inject_pc)
        throw GadgetNotFound("BL inside victim");
    const uint32_t mask = tag_width >= 32 ? 0xFFFFFFFFu : (1u << tag_width) - 1u;

    BruteForceStats stats;
    stats.attempts = attempts;
    const uint32_t epoch_start = dev.boot_epoch;

    const auto run_until_inject = [&]() {
        for (uint64_t i = 0; i < 200000; ++i) {
            if (!dev.halted && dev.m.regs.pc == inject_pc && dev.m.world == World::NonSecure)
                return;
            dev.step_once();
        }
        throw ScenarioError("trial loop never reached the injection point");
    };

    for (uint64_t n = 0; n < attempts; ++n) {
        run_until_inject();
        const uint32_t sp = dev.m.regs.sp_ns;
        dev.attacker_write(sp, win);                   // stacked return address
        dev.attacker_write(sp + 1, uint32_t(rng()) & mask); // forged tag
        const uint32_t epoch_before = dev.boot_epoch;
        dev.step_once(); // leave the injection point
        for (uint64_t i = 0; i < 200000; ++i) {
            if (dev.boot_epoch != epoch_before)
                break; // authentication failed; RunPBA reset the device
            if (dev.m.regs.pc == inject_pc)
                break; // flow came back around through the hijacked target
            dev.step_once();
        }
        if (dev.boot_epoch != epoch_before)
            continue; // failure counted via the epoch
        ++stats.successes;
    }
    stats.resets = dev.boot_epoch - epoch_start;
    return stats;
}

std::string ScenarioReport::serialize() const {
    std::ostringstream os;
    os << "name = " << name << "\n";
    os << "secret_leaked = " << (secret_leaked ? "true" : "false") << "\n";
    os << "fault_raised = " << (fault_raised ? "true" : "false") << "\n";
    os << "fault_kind = " << (fault_kind ? fault_class_name(*fault_kind) : "none") << "\n";
    char pcbuf[16];
    std::snprintf(pcbuf, sizeof(pcbuf), "0x%08x", fault_pc);
    os << "fault_pc = " << pcbuf << "\n";
    os << "lifecycle_final = " << lifecycle_name(lifecycle_final) << "\n";
    os << "instr_plain = " << instr_plain << "\n";
    os << "instr_instrumented = " << instr_instrumented << "\n";
    os << "detection_gap = " << (detection_gap ? "true" : "false") << "\n";
    os << "tokens = " << tokens.size() << "\n";
    for (size_t i = 0; i < tokens.size(); ++i) {
        const auto& t = tokens[i];
        const auto& lc = t.claims.lifecycle;
        char psabuf[8];
        std::snprintf(psabuf, sizeof(psabuf), "0x%02x", lc.psa_state);
        os << "token[" << i << "] = step=" << t.step << " status="
           << verify_status_name(t.claims.status) << " psa=" << psabuf
           << " runtime_failure=" << lc.runtime_failure
           << " malfunction=" << lc.runpba_malfunction << " pac_priv=" << lc.pac_priv
           << " pac_unpriv=" << lc.pac_unpriv << " bti_priv=" << lc.bti_priv
           << " bti_unpriv=" << lc.bti_unpriv << " boot_epoch=" << t.claims.claims.boot_epoch
           << " fault_count=" << t.claims.claims.fault_count << "\n";
    }
    os << "out = \"";
    for (const char ch : out_stream) {
        if (ch >= 0x20 && ch < 0x7F && ch != '"' && ch != '\\') {
            os << ch;
        } else {
            char esc[8];
            std::snprintf(esc, sizeof(esc), "\\x%02x", uint8_t(ch));
            os << esc;
        }
    }
    os << "\"\n";
    return os.str();
}

RunArtifacts run_scenario_full(const Scenario& s) {
    const std::string src = read_text_file(s.program);
    const Program plain = parse_program(src);
    const Program prog = instrument(plain, s.instrument);
    const bool instrumented = s.instrument.pac || s.instrument.bti;
    Assembled active = assemble(prog);

    std::string secret;
    for (const auto& d : plain.data)
        if (d.name == "secret")
            for (const uint32_t c : d.cells) {
                if (!c)
                    break;
                secret.push_back(char(c));
            }

    const DeviceOptions opt{s.seed, s.policy, s.tag_width, true, s.state_dir, instrumented};
    Device dev(assemble(prog), opt);
    if (dev.symbols.symbols.count("input_a"))
        dev.write_input("input_a", s.input);
    if (dev.symbols.symbols.count("input_b"))
        dev.write_input("input_b", s.input);

    RunArtifacts art;
    ScenarioReport& rep = art.report;
    rep.name = s.name;
    art.stub_begin = dev.runpba.loop_stub_begin;
    art.stub_end = dev.runpba.loop_stub_end;

    const MacKey verifier_key = *dev.attest_key; // shared symmetric key
    std::mt19937_64 verifier_rng(s.seed ^ 0x76657269ULL);
    std::mt19937_64 attacker_rng(s.seed ^ 0x61747461ULL);

    if (s.attack == AttackKind::PacBruteForce) {
        const BruteForceStats stats = attack_brute_force(dev, s.attempts, s.tag_width, attacker_rng);
        (void)stats;
        for (const uint64_t at : s.attest_at)
            rep.tokens.push_back({at, attest_loopback(dev, verifier_key, verifier_rng)});
    } else {
        InjectionPlan plan;
        switch (s.attack) {
        case AttackKind::RopReturn:
            plan = attack_rop_return(plain, active, s);
            break;
        case AttackKind::BtiForwardEdge:
            plan = attack_bti_forward(plain, active, s);
            break;
        case AttackKind::PacReuse:
            plan = attack_pac_reuse(plain, active, s);
            break;
        case AttackKind::FopDisablePacbti:
            // FOP grants execution inside the window; the payload itself is
            // the return-address smash, which PACBTI would otherwise catch.
            plan = attack_rop_return(plain, active, s);
            break;
        default:
            break;
        }

        uint64_t last_interesting = 0;
        for (const auto& a : plan.actions)
            last_interesting = std::max(last_interesting, a.step);
        for (const uint64_t at : s.attest_at)
            last_interesting = std::max(last_interesting, at);
        if (s.attack == AttackKind::FopDisablePacbti)
            last_interesting = std::max({last_interesting, s.disable_step, s.enable_step});

        std::array<uint32_t, 4> slots{};
        for (uint64_t step = 0; step <= s.step_limit; ++step) {
            if (s.attack == AttackKind::FopDisablePacbti) {
                if (step == s.disable_step)
                    fop_set_control(dev, false);
                if (step == s.enable_step)
                    fop_set_control(dev, true);
            }
            for (const auto& a : plan.actions) {
                if (a.step != step)
                    continue;
                switch (a.kind) {
                case InjectionPlan::Kind::Write:
                    dev.attacker_write(a.addr, a.value);
                    break;
                case InjectionPlan::Kind::Harvest: {
                    const auto v = dev.attacker_read(a.addr);
                    if (!v)
                        throw ScenarioError("harvest read denied");
                    slots[size_t(a.slot)] = *v;
                    break;
                }
                case InjectionPlan::Kind::WriteHarvested:
                    dev.attacker_write(a.addr, slots[size_t(a.slot)]);
                    break;
                }
            }
            if (std::find(s.attest_at.begin(), s.attest_at.end(), step) != s.attest_at.end())
                rep.tokens.push_back({step, attest_loopback(dev, verifier_key, verifier_rng)});

            if (!dev.halted)
                dev.step_once();
            else if (step >= last_interesting)
                break;
        }
    }

    rep.secret_leaked = !secret.empty() && dev.m.out.find(secret) != std::string::npos;
    rep.fault_raised = dev.first_fault.has_value();
    rep.fault_kind = dev.first_fault;
    rep.fault_pc = dev.first_fault_pc;
    rep.lifecycle_final = dev.runpba.lifecycle;
    rep.out_stream = dev.m.out;
    if (instrumented)
        rep.instr_instrumented = dev.m.executed;
    else
        rep.instr_plain = dev.m.executed;

    if (s.attack == AttackKind::None) {
        // Benign scenario: run the other configuration for overhead data.
        const Program other =
            instrumented ? plain : instrument(plain, InstrumentConfig{true, true});
        Device dv(assemble(other), {s.seed, s.policy, s.tag_width, false, "", !instrumented});
        if (dv.symbols.symbols.count("input_a"))
            dv.write_input("input_a", s.input);
        if (dv.symbols.symbols.count("input_b"))
            dv.write_input("input_b", s.input);
        dv.run(s.step_limit);
        if (!dv.halted)
            throw NonTermination();
        if (instrumented)
            rep.instr_plain = dv.m.executed;
        else
            rep.instr_instrumented = dv.m.executed;
    }

    // A token flags the attack when it carries the runtime-failure bit or
    // reports a feature off that this deployment is supposed to run with.
    bool flagged = false;
    for (const auto& t : rep.tokens) {
        if (t.claims.status != VerifyStatus::Accepted)
            continue;
        const auto& lc = t.claims.lifecycle;
        if (lc.runtime_failure ||
            (instrumented && !(lc.pac_priv && lc.pac_unpriv && lc.bti_priv && lc.bti_unpriv)))
            flagged = true;
    }
    const bool attack_succeeded = rep.secret_leaked;
    rep.detection_gap = attack_succeeded && !flagged && !rep.tokens.empty();

    art.exec_audit = audit_executable_fetches(dev.m.trace, dev.m);
    art.trace = std::move(dev.m.trace);
    return art;
}

ScenarioReport run_scenario(const Scenario& s) {
    return run_scenario_full(s).report;
}

OverheadReport overhead_report(const std::string& program_path, const std::string& input,
                               uint64_t step_limit) {
    const std::string src = read_text_file(program_path);
    const Program plain = parse_program(src);
    const Program inst = instrument(plain, InstrumentConfig{true, true});

    const auto count = [&](const Program& p, bool control_on) {
        Device dev(assemble(p), {1, PostFaultPolicy::HoldInSpe, 32, false, "", control_on});
        if (dev.symbols.symbols.count("input_a"))
            dev.write_input("input_a", input);
        if (dev.symbols.symbols.count("input_b"))
            dev.write_input("input_b", input);
        dev.run(step_limit);
        if (!dev.halted)
            throw NonTermination();
        if (dev.first_fault)
            throw ScenarioError("benign overhead run faulted");
        return dev.m.executed;
    };

    OverheadReport rep;
    rep.plain_count = count(plain, false);
    rep.instrumented_count = count(inst, true);
    rep.ratio = double(rep.instrumented_count) / double(rep.plain_count);
    return rep;
}

} // namespace pacbti
