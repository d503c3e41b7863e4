#include "pacbti/runpba.hpp"

#include <cstring>

namespace pacbti {

std::string_view lifecycle_name(Lifecycle s) {
    switch (s) {
    case Lifecycle::AssemblyAndTest: return "ASSEMBLY_AND_TEST";
    case Lifecycle::Provisioning: return "PROVISIONING";
    case Lifecycle::Secured: return "SECURED";
    case Lifecycle::NspeCompromised: return "NSPE_COMPROMISED";
    case Lifecycle::RecoverableDebug: return "RECOVERABLE_DEBUG";
    case Lifecycle::Decommissioned: return "DECOMMISSIONED";
    }
    return "?";
}

InvalidTransition::InvalidTransition(Lifecycle from, Lifecycle to)
    : SimError("illegal lifecycle transition " + std::string(lifecycle_name(from)) + " -> " +
               std::string(lifecycle_name(to))) {}

bool lifecycle_transition_ok(Lifecycle from, Lifecycle to) {
    if (to == Lifecycle::Decommissioned)
        return true;
    if (from == Lifecycle::Provisioning && to == Lifecycle::Secured)
        return true;
    if (from == Lifecycle::Secured && to == Lifecycle::NspeCompromised)
        return true;
    if (from == Lifecycle::NspeCompromised && to == Lifecycle::Secured)
        return true;
    return false;
}

std::string_view fault_class_name(FaultClass c) {
    switch (c) {
    case FaultClass::PacFault: return "PacFault";
    case FaultClass::BtiFault: return "BtiFault";
    case FaultClass::OtherInvalidState: return "OtherInvalidState";
    }
    return "?";
}

void encode_fault_record(const FaultRecord& r, std::vector<uint8_t>& out) {
    const auto put_u32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i)
            out.push_back(uint8_t(v >> (8 * i)));
    };
    put_u32(r.sequence);
    out.push_back(uint8_t(r.kind));
    put_u32(r.fault_pc);
    put_u32(r.fault_sp);
    put_u32(r.fault_lr);
    out.push_back(uint8_t(r.privileged));
    put_u32(r.boot_epoch);
}

FaultRecord decode_fault_record(const uint8_t* p) {
    const auto get_u32 = [&](size_t off) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= uint32_t(p[off + i]) << (8 * i);
        return v;
    };
    FaultRecord r;
    r.sequence = get_u32(0);
    r.kind = static_cast<FaultClass>(p[4]);
    r.fault_pc = get_u32(5);
    r.fault_sp = get_u32(9);
    r.fault_lr = get_u32(13);
    r.privileged = p[17];
    r.boot_epoch = get_u32(18);
    return r;
}

namespace {

constexpr char kItsMagic[4] = {'I', 'T', 'S', '1'};

} // namespace

void ItsStore::init(MachineState& m) {
    const auto head = m.try_read(base, World::Secure, true);
    if (head.ok && head.value == uint32_t(kItsMagic[0]))
        return; // already initialized (survives resets)
    for (int i = 0; i < 4; ++i)
        if (!m.try_write(base + i, uint8_t(kItsMagic[i]), World::Secure, true))
            throw StorageFailure("ITS init failed");
    for (int i = 0; i < 4; ++i)
        if (!m.try_write(base + 4 + i, 0, World::Secure, true))
            throw StorageFailure("ITS init failed");
}

uint32_t ItsStore::count(const MachineState& m) const {
    for (int i = 0; i < 4; ++i) {
        const auto r = m.try_read(base + i, World::Secure, true);
        if (!r.ok || r.value != uint32_t(kItsMagic[i]))
            throw StorageFailure("ITS header unreadable");
    }
    uint32_t n = 0;
    for (int i = 0; i < 4; ++i) {
        const auto r = m.try_read(base + 4 + i, World::Secure, true);
        if (!r.ok)
            throw StorageFailure("ITS header unreadable");
        n |= (r.value & 0xFF) << (8 * i);
    }
    return n;
}

void ItsStore::append(MachineState& m, const FaultRecord& rec) {
    const uint32_t n = count(m);
    std::vector<uint8_t> bytes;
    encode_fault_record(rec, bytes);
    const uint32_t off = base + 8 + n * uint32_t(kFaultRecordBytes);
    for (size_t i = 0; i < bytes.size(); ++i)
        if (!m.try_write(off + uint32_t(i), bytes[i], World::Secure, true))
            throw StorageFailure("ITS record write failed");
    const uint32_t next = n + 1;
    for (int i = 0; i < 4; ++i)
        if (!m.try_write(base + 4 + i, (next >> (8 * i)) & 0xFF, World::Secure, true))
            throw StorageFailure("ITS count update failed");
}

std::vector<FaultRecord> ItsStore::read_all(const MachineState& m) const {
    const uint32_t n = count(m);
    std::vector<FaultRecord> out;
    out.reserve(n);
    uint8_t buf[kFaultRecordBytes];
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t off = base + 8 + i * uint32_t(kFaultRecordBytes);
        for (size_t k = 0; k < kFaultRecordBytes; ++k) {
            const auto r = m.try_read(off + uint32_t(k), World::Secure, true);
            if (!r.ok)
                throw StorageFailure("ITS record unreadable");
            buf[k] = uint8_t(r.value);
        }
        out.push_back(decode_fault_record(buf));
    }
    return out;
}

std::vector<uint8_t> ItsStore::serialize(const MachineState& m) const {
    const uint32_t n = count(m);
    const uint32_t total = 8 + n * uint32_t(kFaultRecordBytes);
    std::vector<uint8_t> out;
    out.reserve(total);
    for (uint32_t i = 0; i < total; ++i) {
        const auto r = m.try_read(base + i, World::Secure, true);
        if (!r.ok)
            throw StorageFailure("ITS unreadable");
        out.push_back(uint8_t(r.value));
    }
    return out;
}

void ItsStore::load(MachineState& m, const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kItsMagic, 4) != 0)
        throw StorageFailure("bad ITS file");
    for (size_t i = 0; i < bytes.size(); ++i)
        if (!m.try_write(base + uint32_t(i), bytes[i], World::Secure, true))
            throw StorageFailure("ITS load failed");
}

std::vector<FaultRecord> parse_its_file(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kItsMagic, 4) != 0)
        throw StorageFailure("bad ITS file");
    uint32_t n = 0;
    for (int i = 0; i < 4; ++i)
        n |= uint32_t(bytes[4 + i]) << (8 * i);
    if (bytes.size() < 8 + size_t(n) * kFaultRecordBytes)
        throw StorageFailure("truncated ITS file");
    std::vector<FaultRecord> out;
    for (uint32_t i = 0; i < n; ++i)
        out.push_back(decode_fault_record(bytes.data() + 8 + i * kFaultRecordBytes));
    return out;
}

FaultClass classify_fault(const FaultContext& ctx, const MachineState& m) {
    if (!ctx.cfsr_invalid_state || ctx.world != World::NonSecure)
        throw NotInvalidState();
    const MemoryRegion* r = m.find_region(ctx.stacked_pc);
    if (r && r->kind == RegionKind::Code && r->code[ctx.stacked_pc - r->base].op == Opcode::Aut)
        return FaultClass::PacFault;
    if (ctx.epsr_b)
        return FaultClass::BtiFault;
    return FaultClass::OtherInvalidState;
}

void lockdown_nspe(MachineState& m, uint32_t stub_addr) {
    // The stacked frame sits at the (untouched) non-secure sp; cell 6 holds
    // the return pc.
    const uint32_t frame = m.regs.sp_ns;
    if (!m.try_write(frame + 6, stub_addr, World::Secure, true))
        throw SimError("lockdown: cannot rewrite stacked pc");
    m.trace.event(TraceEvent::Lockdown, stub_addr);
}

void RunPbaPartition::transition(Lifecycle to) {
    if (!lifecycle_transition_ok(lifecycle, to))
        throw InvalidTransition(lifecycle, to);
    lifecycle = to;
}

void RunPbaPartition::flih_capture(const FaultContext& ctx) {
    if (buffer.has_value())
        malfunction = true; // previous fault not yet drained
    buffer = ctx;
}

FaultRecord RunPbaPartition::slih_persist(MachineState& m, uint32_t boot_epoch) {
    if (!buffer.has_value())
        throw SimError("SLIH dispatched with an empty fault buffer");
    const FaultContext ctx = *buffer;
    FaultRecord rec;
    rec.kind = classify_fault(ctx, m);
    rec.fault_pc = ctx.stacked_pc;
    rec.fault_sp = ctx.stacked_sp;
    rec.fault_lr = ctx.stacked_lr;
    rec.privileged = ctx.privileged;
    rec.boot_epoch = boot_epoch;
    try {
        rec.sequence = its.count(m) + 1;
        its.append(m, rec);
    } catch (const StorageFailure&) {
        malfunction = true;
    }
    buffer.reset();
    if (lifecycle == Lifecycle::Secured)
        transition(Lifecycle::NspeCompromised);
    m.trace.event(TraceEvent::SlihPersist, rec.sequence);
    return rec;
}

RunPbaStatus RunPbaPartition::query_status(const MachineState& m) const {
    RunPbaStatus st;
    st.malfunction = malfunction;
    st.control = m.control; // read live from the NSPE-visible control registers
    bool failed_record = false;
    try {
        for (const auto& r : its.read_all(m))
            if (r.kind == FaultClass::PacFault || r.kind == FaultClass::BtiFault)
                failed_record = true;
    } catch (const StorageFailure&) {
        st.malfunction = true;
    }
    st.runtime_failure = failed_record || lifecycle == Lifecycle::NspeCompromised;
    return st;
}

} // namespace pacbti
