#pragma once

#include <optional>
#include <random>
#include <string>

#include "pacbti/assembler.hpp"
#include "pacbti/attestation.hpp"
#include "pacbti/machine.hpp"
#include "pacbti/runpba.hpp"
#include "pacbti/securezone.hpp"

namespace pacbti {

struct DecommissionedError : SimError {
    DecommissionedError() : SimError("device is decommissioned") {}
};

struct KeyMissing : SimError {
    KeyMissing() : SimError("attestation key not provisioned") {}
};

struct DeviceOptions {
    uint64_t seed = 1;
    PostFaultPolicy policy = PostFaultPolicy::HoldInSpe;
    uint8_t tag_width = 32;
    bool trace = true;
    std::string state_dir;  // empty = in-memory only
    bool control_on = true; // NSPE boot enables PACBTI (off for baseline builds)
};

enum class RecoverDecision : uint8_t { Recover, Decommission };

enum class DeviceRun : uint8_t { Running, Halted };

/// One provisioned simulated device: the machine core, the TrustZone secure
/// side running natively, and the RunPBA partition.
class Device {
public:
    Device(Assembled assembled, const DeviceOptions& opt);

    /// Rebuilds an idle device from a persisted state directory (image,
    /// ITS contents, attestation key, lifecycle). Serves attestation and
    /// fault queries; not meant to resume mid-run execution.
    static Device from_state_dir(const std::string& dir);

    MachineState m;
    RunPbaPartition runpba;
    SymbolTable symbols;
    ProgramImage image;
    DeviceOptions opt;
    std::mt19937_64 rng;

    uint32_t boot_epoch = 0;
    std::optional<MacKey> attest_key;
    std::array<uint8_t, 16> instance_id{};
    uint64_t steps_since_reset = 0;
    bool halted = false;

    // First PACBTI violation seen, for reporting.
    std::optional<FaultClass> first_fault;
    uint32_t first_fault_pc = 0;

    /// Full reset: machine reset (key rotation), secure boot, NSPE handoff.
    void reset();

    DeviceRun step_once();
    void run(uint64_t max_steps);

    std::vector<uint8_t> build_token(const std::array<uint8_t, 32>& nonce);
    Lifecycle recover(RecoverDecision d);

    // Attacker primitive: arbitrary NSPE read/write respecting permissions.
    bool attacker_write(uint32_t addr, uint32_t value);
    std::optional<uint32_t> attacker_read(uint32_t addr) const;

    /// Host-side console input: writes a NUL-terminated string into a data
    /// blob, one character per cell.
    void write_input(const std::string& blob, const std::string& text);

    void save_state();

private:
    Device() = default;
    void install_secure_world();
    void secure_boot();
    void handle_fault(const Fault& f);
    void secure_hardfault_handler();
    void run_slih();
    void dispatch_interrupts();
};

} // namespace pacbti
