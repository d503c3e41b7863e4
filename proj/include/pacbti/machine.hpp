#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacbti/isa.hpp"
#include "pacbti/trace.hpp"

namespace pacbti {

class ProgramImage;

enum class World : uint8_t { NonSecure = 0, Secure = 1 };

std::string_view world_name(World w);

/// Any condition that stops the simulation itself (as opposed to an
/// architectural fault, which is a normal step result).
struct SimError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UndecodableInstruction : SimError {
    explicit UndecodableInstruction(uint32_t addr);
};

enum class RegionKind : uint8_t { Data = 0, Code = 1 };

/// One mapped range of the 32-bit address space. A cell is one address unit:
/// code cells hold a decoded instruction, data cells a 32-bit word.
struct MemoryRegion {
    std::string name;
    uint32_t base = 0;
    uint32_t length = 0; // address units
    RegionKind kind = RegionKind::Data;
    bool readable = true;
    bool writable = false;
    bool executable = false;
    World world = World::NonSecure;
    bool privileged_only = false;
    std::vector<Instruction> code; // kind == Code
    std::vector<uint32_t> data;    // kind == Data

    bool contains(uint32_t addr) const { return addr >= base && addr - base < length; }
};

struct PacKeySet {
    std::array<uint64_t, 2> key{};
    uint8_t tag_width = 32; // 32 unless a statistical scenario reduces it
};

/// Keyed PRF of (pointer, modifier), truncated to keys.tag_width bits and
/// zero-extended to 32 bits.
uint32_t pac_tag(uint32_t pointer, uint32_t modifier, const PacKeySet& keys);

/// PACBTI feature enables per privilege level; writable only via a
/// privileged MSR.
struct PacbtiControl {
    bool pac_priv = false;
    bool pac_unpriv = false;
    bool bti_priv = false;
    bool bti_unpriv = false;
};

uint32_t encode_control(const PacbtiControl& c);
PacbtiControl decode_control(uint32_t v);

enum class FaultKind : uint8_t { UsageInvalidState, MemFault, HardFault };

std::string_view fault_kind_name(FaultKind k);

/// Synchronous fault descriptor produced by step(); pc still addresses the
/// faulting instruction when this is returned.
struct Fault {
    FaultKind kind = FaultKind::HardFault;
    World world = World::NonSecure;
    uint32_t pc = 0;
    bool epsr_b = false;
    bool privileged = true;
    bool cfsr_invalid_state = false;
};

struct RegisterFile {
    std::array<uint32_t, 13> r{}; // r0..r12; r12 doubles as the PAC tag register
    uint32_t sp_s = 0;
    uint32_t sp_ns = 0; // sp is banked per security world
    uint32_t lr = 0;
    uint32_t pc = 0;
    bool epsr_b = false;    // set between an indirect branch and the next fetch
    bool privileged = true;
    bool flag_z = false;
    bool flag_n = false;
};

/// Interrupt/fault vector ids. Negative ids are system exceptions, ids >= 0
/// are external interrupts (0-15 secure, 16-31 non-secure).
inline constexpr int kVecHardFault = -1;
inline constexpr int kVecUsageFault = -2;
inline constexpr int kVecMemFault = -3;
inline constexpr int kVecSvc = -4;

struct SystemControl {
    bool shcsr_ns_usgfaultact = false; // RunPBA requires 0
    bool aircr_bfhfnmins = true;       // RunPBA requires 1
    std::map<std::pair<World, int>, uint32_t> vectors;
};

enum class InterruptKind : uint8_t { Flih, Slih, Ordinary };

struct PendedInterrupt {
    int id = 0;
    World world = World::NonSecure;
    int priority = 0; // lower = more urgent
    InterruptKind kind = InterruptKind::Ordinary;
};

/// Stacked exception frame plus status registers captured at fault time.
struct FaultContext {
    uint32_t stacked_pc = 0;
    uint32_t stacked_sp = 0;
    uint32_t stacked_lr = 0;
    std::array<uint32_t, 4> stacked_r0_r3{};
    uint32_t stacked_r12 = 0;
    bool epsr_b = false;
    World world = World::NonSecure;
    bool privileged = true;
    bool cfsr_invalid_state = false;
};

enum class StepStatus : uint8_t { Continue, Halted, Faulted };

struct StepResult {
    StepStatus status = StepStatus::Continue;
    Fault fault{};
};

// Fixed address map.
inline constexpr uint32_t kResetVector = 0x10000000;
inline constexpr uint32_t kSecureHardFaultHandler = 0x10000001;
inline constexpr uint32_t kSecureSlihHandler = 0x10000002;
inline constexpr uint32_t kSecureRamBase = 0x30000000;
inline constexpr uint32_t kSecureRamLength = 1u << 18;
inline constexpr uint32_t kNsCodeBase = 0x00001000;
inline constexpr uint32_t kNsDataBase = 0x20000000;
inline constexpr uint32_t kNsStackBase = 0x20010000;
inline constexpr uint32_t kNsStackLength = 1024;
inline constexpr uint32_t kExcReturn = 0xFFFFFFF1;

/// One simulated device core: registers, permissioned memory, PAC keys and
/// the pending-interrupt machinery. Isolated value; never shared mutably.
class MachineState {
public:
    RegisterFile regs;
    World world = World::Secure;
    bool handler_mode = false;
    PacKeySet keys;
    PacbtiControl control;
    SystemControl sysctl;
    std::vector<PendedInterrupt> pending;
    std::vector<MemoryRegion> memory;
    std::optional<FaultContext> current_ctx;  // captured at the last dispatch
    std::vector<World> exception_frames;      // stack world of each active frame

    std::string out;       // OUT byte stream (survives resets)
    uint64_t executed = 0; // stepped instructions, cumulative
    Trace trace;

    uint32_t& sp();
    uint32_t sp() const;
    uint32_t& sp_for(World w);

    MemoryRegion* find_region(uint32_t addr);
    const MemoryRegion* find_region(uint32_t addr) const;
    MemoryRegion* region_named(std::string_view name);

    void add_region(MemoryRegion r); // rejects overlaps

    struct ReadResult {
        bool ok = false;
        uint32_t value = 0;
    };
    // Checked accesses on behalf of (accessor world, accessor privilege).
    ReadResult try_read(uint32_t addr, World w, bool privileged) const;
    bool try_write(uint32_t addr, uint32_t value, World w, bool privileged);
    const Instruction* try_fetch(uint32_t addr, World w, bool privileged) const;

    // Unchecked secure-side helpers (native RoT code paths).
    uint32_t read_word(uint32_t addr) const;

    /// Executes exactly one instruction at pc.
    StepResult step();

private:
    bool pac_enabled() const;
    bool bti_enabled() const;
    Fault make_fault(FaultKind kind, bool invalid_state) const;
    uint32_t operand_value(const Operand& o) const;
    uint32_t& reg_slot(uint32_t index);
};

/// Loads (or re-loads) the image's regions into the machine. Regions not
/// described by the image (secure RAM, the ITS mirror) are left untouched.
void load_image(MachineState& m, const ProgramImage& image);

/// Spec reset: registers cleared, pc at the reset vector in the secure
/// world, a fresh PAC key drawn from the seeded RNG, image regions
/// re-loaded. ITS contents are owned by runpba and survive.
void machine_reset(MachineState& m, const ProgramImage& image, std::mt19937_64& rng);

} // namespace pacbti
