#include "pacbti/device.hpp"

#include <filesystem>
#include <fstream>

namespace pacbti {

namespace {

constexpr uint32_t kSecureCodeLength = 16;

std::string to_hex(std::span<const uint8_t> bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (const uint8_t b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xF]);
    }
    return s;
}

std::vector<uint8_t> from_hex(const std::string& s) {
    const auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9')
            return c - '0';
        if (c >= 'a' && c <= 'f')
            return c - 'a' + 10;
        if (c >= 'A' && c <= 'F')
            return c - 'A' + 10;
        return -1;
    };
    std::vector<uint8_t> out;
    for (size_t i = 0; i + 1 < s.size(); i += 2) {
        const int hi = nib(s[i]), lo = nib(s[i + 1]);
        if (hi < 0 || lo < 0)
            throw SimError("bad hex string");
        out.push_back(uint8_t(hi << 4 | lo));
    }
    return out;
}

} // namespace

Device::Device(Assembled assembled, const DeviceOptions& options) {
    symbols = std::move(assembled.symbols);
    image = std::move(assembled.image);
    opt = options;
    rng.seed(opt.seed);
    m.trace.enabled = opt.trace;
    m.keys.tag_width = opt.tag_width;
    runpba.policy = opt.policy;

    install_secure_world();

    // Lockdown target: the provisioned infinite-loop stub.
    if (const auto it = symbols.functions.find("spin"); it != symbols.functions.end()) {
        runpba.loop_stub_begin = it->second.begin;
        runpba.loop_stub_end = it->second.end;
    } else {
        runpba.loop_stub_begin = symbols.halt_stub;
        runpba.loop_stub_end = symbols.halt_stub + 1;
    }

    // Provisioning: the device generates its own cryptographic key and is
    // locked into the secured state.
    MacKey key;
    for (auto& b : key)
        b = uint8_t(rng());
    attest_key = key;
    for (auto& b : instance_id)
        b = uint8_t(rng());
    runpba.transition(Lifecycle::Secured);

    reset();
    save_state();
}

void Device::install_secure_world() {
    MemoryRegion srot;
    srot.name = "srot";
    srot.base = kResetVector;
    srot.length = kSecureCodeLength;
    srot.kind = RegionKind::Code;
    srot.readable = true;
    srot.executable = true;
    srot.world = World::Secure;
    srot.privileged_only = true;
    m.add_region(std::move(srot));

    MemoryRegion sram;
    sram.name = "sram";
    sram.base = kSecureRamBase;
    sram.length = kSecureRamLength;
    sram.kind = RegionKind::Data;
    sram.readable = true;
    sram.writable = true;
    sram.world = World::Secure;
    sram.privileged_only = true;
    m.add_region(std::move(sram));
}

void Device::secure_boot() {
    // RunPBA register configuration (asserted by the config audit).
    m.sysctl.shcsr_ns_usgfaultact = false;
    m.sysctl.aircr_bfhfnmins = true;
    m.sysctl.vectors[{World::Secure, kVecHardFault}] = kSecureHardFaultHandler;
    m.sysctl.vectors[{World::Secure, kRunPbaSlihIrq}] = kSecureSlihHandler;
    runpba.its.init(m);

    // NSPE initialization: PACBTI enabled on both privilege levels (when
    // this build ships with it), stacks at the region tops, entry invoked
    // with lr at the exit stub.
    m.control = opt.control_on ? PacbtiControl{true, true, true, true} : PacbtiControl{};
    m.regs.sp_s = kSecureRamBase + kSecureRamLength;
    m.regs.sp_ns = kNsStackBase + kNsStackLength;
    m.regs.lr = symbols.halt_stub;
    m.regs.pc = symbols.entry;
    m.world = World::NonSecure;
    m.regs.privileged = true;
}

void Device::reset() {
    machine_reset(m, image, rng);
    ++boot_epoch;
    m.trace.event(TraceEvent::Reset, boot_epoch);
    secure_boot();
    steps_since_reset = 0;
    halted = false;
}

void Device::dispatch_interrupts() {
    while (!m.handler_mode) {
        // Peek: a non-secure interrupt must not be taken out of the set if a
        // toy handler will run; secure ones are consumed natively here.
        const auto irq = take_next_interrupt(m);
        if (!irq)
            return;
        if (irq->world == World::Secure) {
            if (irq->id == kRunPbaSlihIrq && irq->kind == InterruptKind::Slih) {
                run_slih();
            }
            // Other secure interrupts have no partition behavior modeled.
            continue;
        }
        // Non-secure interrupt: exception entry into the registered toy
        // handler; resumes the interrupted context on return.
        Fault resume;
        resume.kind = FaultKind::HardFault;
        resume.world = m.world;
        resume.pc = m.regs.pc;
        resume.epsr_b = m.regs.epsr_b;
        resume.privileged = m.regs.privileged;
        resume.cfsr_invalid_state = false;
        const FaultContext ctx = capture_context(m, resume);
        exception_entry(m, ctx, World::NonSecure, m.sysctl.vectors.at({World::NonSecure, irq->id}));
        return;
    }
}

DeviceRun Device::step_once() {
    if (halted)
        return DeviceRun::Halted;

    dispatch_interrupts();
    if (halted)
        return DeviceRun::Halted;

    const StepResult res = m.step();
    ++steps_since_reset;
    switch (res.status) {
    case StepStatus::Continue:
        return DeviceRun::Running;
    case StepStatus::Halted:
        halted = true;
        return DeviceRun::Halted;
    case StepStatus::Faulted:
        handle_fault(res.fault);
        return halted ? DeviceRun::Halted : DeviceRun::Running;
    }
    return DeviceRun::Running;
}

void Device::run(uint64_t max_steps) {
    for (uint64_t i = 0; i < max_steps; ++i)
        if (step_once() == DeviceRun::Halted)
            return;
}

void Device::handle_fault(const Fault& f) {
    const DispatchOutcome out = raise_fault(m, f);
    if (out.handled_world == World::Secure)
        secure_hardfault_handler();
    // A non-secure handler (non-RunPBA configuration) executes as toy code.
}

void Device::secure_hardfault_handler() {
    const FaultContext ctx = *m.current_ctx;
    if (ctx.cfsr_invalid_state && ctx.world == World::NonSecure) {
        const FaultClass cls = classify_fault(ctx, m);
        if (cls != FaultClass::OtherInvalidState) {
            if (!first_fault) {
                first_fault = cls;
                first_fault_pc = ctx.stacked_pc;
            }
            runpba.flih_capture(ctx);
            m.trace.event(TraceEvent::FlihCapture, ctx.stacked_pc);
            lockdown_nspe(m, runpba.loop_stub_begin);
            clear_nonessential_interrupts(m);
            pend_interrupt(m, {kRunPbaSlihIrq, World::Secure, 0, InterruptKind::Slih});
            exception_return(m);
            return;
        }
    }
    // Anything else keeps the TF-M default behavior: reset the device.
    reset();
}

void Device::run_slih() {
    runpba.slih_persist(m, boot_epoch);
    save_state();
    if (runpba.policy == PostFaultPolicy::ResetAfterPersist) {
        runpba.transition(Lifecycle::Secured);
        reset();
    }
}

std::vector<uint8_t> Device::build_token(const std::array<uint8_t, 32>& nonce) {
    if (runpba.lifecycle == Lifecycle::Decommissioned)
        throw DecommissionedError();
    if (!attest_key)
        throw KeyMissing();

    const RunPbaStatus st = runpba.query_status(m);
    LifecycleClaim lc;
    lc.psa_state = psa_state_code(runpba.lifecycle);
    lc.runtime_failure = st.runtime_failure || runpba.lifecycle == Lifecycle::NspeCompromised;
    lc.runpba_malfunction = st.malfunction;
    lc.pac_priv = st.control.pac_priv;
    lc.pac_unpriv = st.control.pac_unpriv;
    lc.bti_priv = st.control.bti_priv;
    lc.bti_unpriv = st.control.bti_unpriv;

    TokenClaims c;
    c.nonce = nonce;
    c.instance_id = instance_id;
    c.lifecycle = encode_lifecycle_claim(lc);
    c.boot_epoch = boot_epoch;
    try {
        c.fault_count = runpba.its.count(m);
    } catch (const StorageFailure&) {
        c.fault_count = 0; // malfunction already raised in the claim
    }
    return encode_token(c, *attest_key);
}

Lifecycle Device::recover(RecoverDecision d) {
    if (runpba.lifecycle != Lifecycle::NspeCompromised)
        throw InvalidTransition(runpba.lifecycle, d == RecoverDecision::Recover
                                                      ? Lifecycle::Secured
                                                      : Lifecycle::Decommissioned);
    m.trace.event(TraceEvent::Recover);
    if (d == RecoverDecision::Recover) {
        runpba.transition(Lifecycle::Secured);
        reset(); // NSPE restarts from the reset vector; records are retained
    } else {
        runpba.transition(Lifecycle::Decommissioned);
        attest_key.reset(); // secrets permanently inaccessible
        save_state();
    }
    return runpba.lifecycle;
}

bool Device::attacker_write(uint32_t addr, uint32_t value) {
    return m.try_write(addr, value, World::NonSecure, true);
}

std::optional<uint32_t> Device::attacker_read(uint32_t addr) const {
    const auto r = m.try_read(addr, World::NonSecure, true);
    if (!r.ok)
        return std::nullopt;
    return r.value;
}

void Device::write_input(const std::string& blob, const std::string& text) {
    const uint32_t base = symbols.addr(blob);
    uint32_t a = base;
    for (const char ch : text)
        if (!m.try_write(a++, uint8_t(ch), World::NonSecure, true))
            throw SimError("input does not fit into " + blob);
    if (!m.try_write(a, 0, World::NonSecure, true))
        throw SimError("input does not fit into " + blob);
}

void Device::save_state() {
    if (opt.state_dir.empty())
        return;
    namespace fs = std::filesystem;
    fs::create_directories(opt.state_dir);
    write_file(opt.state_dir + "/image.bin", image.serialize());
    write_file(opt.state_dir + "/its.bin", runpba.its.serialize(m));

    std::ofstream meta(opt.state_dir + "/meta.txt", std::ios::trunc);
    meta << "lifecycle = " << lifecycle_name(runpba.lifecycle) << "\n";
    meta << "boot_epoch = " << boot_epoch << "\n";
    meta << "control = " << encode_control(m.control) << "\n";
    meta << "instance_id = " << to_hex(instance_id) << "\n";
    meta << "malfunction = " << (runpba.malfunction ? 1 : 0) << "\n";

    if (attest_key) {
        std::ofstream kf(opt.state_dir + "/attest.key", std::ios::trunc);
        kf << to_hex(*attest_key) << "\n";
    } else {
        std::error_code ec;
        fs::remove(opt.state_dir + "/attest.key", ec);
    }
}

Device Device::from_state_dir(const std::string& dir) {
    Device dev;
    dev.opt.state_dir = dir;
    dev.opt.trace = false;
    dev.image = ProgramImage::deserialize(read_file(dir + "/image.bin"));
    dev.install_secure_world();
    load_image(dev.m, dev.image);
    dev.runpba.its.load(dev.m, read_file(dir + "/its.bin"));

    std::ifstream meta(dir + "/meta.txt");
    if (!meta)
        throw SimError("missing meta.txt in " + dir);
    const auto trim = [](std::string s) {
        const size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos)
            return std::string();
        const size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    std::string line;
    while (std::getline(meta, line)) {
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            continue;
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "lifecycle") {
            for (int s = 0; s <= int(Lifecycle::Decommissioned); ++s)
                if (lifecycle_name(Lifecycle(s)) == val)
                    dev.runpba.lifecycle = Lifecycle(s);
        } else if (key == "boot_epoch") {
            dev.boot_epoch = uint32_t(std::stoul(val));
        } else if (key == "control") {
            dev.m.control = decode_control(uint32_t(std::stoul(val)));
        } else if (key == "instance_id") {
            const auto bytes = from_hex(val);
            std::copy_n(bytes.begin(), std::min(bytes.size(), dev.instance_id.size()),
                        dev.instance_id.begin());
        } else if (key == "malfunction") {
            dev.runpba.malfunction = val != "0";
        }
    }

    std::ifstream kf(dir + "/attest.key");
    if (kf) {
        std::string hexkey;
        kf >> hexkey;
        const auto bytes = from_hex(hexkey);
        if (bytes.size() == 32) {
            MacKey key;
            std::copy_n(bytes.begin(), 32, key.begin());
            dev.attest_key = key;
        }
    }
    return dev;
}

} // namespace pacbti
