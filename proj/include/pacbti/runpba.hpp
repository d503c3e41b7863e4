#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pacbti/machine.hpp"

namespace pacbti {

enum class Lifecycle : uint8_t {
    AssemblyAndTest,
    Provisioning,
    Secured,
    NspeCompromised,
    RecoverableDebug,
    Decommissioned,
};

std::string_view lifecycle_name(Lifecycle s);

struct InvalidTransition : SimError {
    InvalidTransition(Lifecycle from, Lifecycle to);
};

/// Legal transitions: PROVISIONING->SECURED, SECURED->NSPE_COMPROMISED,
/// NSPE_COMPROMISED->SECURED, and any->DECOMMISSIONED. Everything else is
/// rejected.
bool lifecycle_transition_ok(Lifecycle from, Lifecycle to);

enum class FaultClass : uint8_t { PacFault, BtiFault, OtherInvalidState };

std::string_view fault_class_name(FaultClass c);

struct NotInvalidState : SimError {
    NotInvalidState() : SimError("fault context is not a non-secure invalid-state usage fault") {}
};

struct StorageFailure : SimError {
    using SimError::SimError;
};

/// Classified, persisted evidence of a PACBTI violation.
struct FaultRecord {
    uint32_t sequence = 0;
    FaultClass kind = FaultClass::OtherInvalidState;
    uint32_t fault_pc = 0;
    uint32_t fault_sp = 0;
    uint32_t fault_lr = 0;
    bool privileged = true;
    uint32_t boot_epoch = 0;
};

// Fixed-width little-endian record: sequence u32, kind u8, fault_pc u32,
// fault_sp u32, fault_lr u32, privileged u8, boot_epoch u32.
inline constexpr size_t kFaultRecordBytes = 22;

void encode_fault_record(const FaultRecord& r, std::vector<uint8_t>& out);
FaultRecord decode_fault_record(const uint8_t* p);

/// Internal trusted storage. The backing memory is a secure RAM region
/// (byte per cell, header "ITS1" + u32 count + records); any NSPE access
/// of that region is a MemFault. Contents survive machine resets and can be
/// mirrored to a file.
class ItsStore {
public:
    uint32_t base = kSecureRamBase;

    void init(MachineState& m); // writes an empty header if none present
    void append(MachineState& m, const FaultRecord& r); // throws StorageFailure
    uint32_t count(const MachineState& m) const;        // throws StorageFailure
    std::vector<FaultRecord> read_all(const MachineState& m) const;

    std::vector<uint8_t> serialize(const MachineState& m) const;
    void load(MachineState& m, const std::vector<uint8_t>& bytes);
};

/// Parses an ITS backing file ("ITS1" header) without a machine.
std::vector<FaultRecord> parse_its_file(const std::vector<uint8_t>& bytes);

/// PacFault iff the faulting instruction is an AUT, else BtiFault iff the
/// stacked EPSR.B was set, else OtherInvalidState.
FaultClass classify_fault(const FaultContext& ctx, const MachineState& m);

/// Overwrites the stacked non-secure return pc with the infinite-loop stub.
void lockdown_nspe(MachineState& m, uint32_t stub_addr);

enum class PostFaultPolicy : uint8_t { HoldInSpe, ResetAfterPersist };

struct RunPbaStatus {
    bool runtime_failure = false;
    bool malfunction = false;
    PacbtiControl control;
};

/// The RunPBA Application RoT partition state.
class RunPbaPartition {
public:
    Lifecycle lifecycle = Lifecycle::Provisioning;
    PostFaultPolicy policy = PostFaultPolicy::HoldInSpe;
    bool malfunction = false;
    std::optional<FaultContext> buffer; // FLIH capture buffer (one deep)
    uint32_t loop_stub_begin = 0;
    uint32_t loop_stub_end = 0;
    ItsStore its;

    void transition(Lifecycle to); // throws InvalidTransition

    /// FLIH: byte-exact copy into the partition buffer. A still-occupied
    /// buffer is overwritten and flags a malfunction.
    void flih_capture(const FaultContext& ctx);

    /// SLIH: classify, persist, clear the buffer, drive the lifecycle to
    /// NSPE_COMPROMISED. A storage failure sets the malfunction flag.
    FaultRecord slih_persist(MachineState& m, uint32_t boot_epoch);

    RunPbaStatus query_status(const MachineState& m) const;
};

} // namespace pacbti
