#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pacbti/device.hpp"

namespace pacbti {

struct ScenarioError : SimError {
    using SimError::SimError;
};

struct GadgetNotFound : SimError {
    explicit GadgetNotFound(const std::string& what) : SimError("gadget not found: " + what) {}
};

struct NotPrivileged : SimError {
    NotPrivileged() : SimError("PACBTI control gadget requires privileged execution") {}
};

struct NonTermination : SimError {
    NonTermination() : SimError("program did not terminate within the step limit") {}
};

enum class AttackKind : uint8_t {
    None,
    RopReturn,
    BtiForwardEdge,
    PacBruteForce,
    PacReuse,
    FopDisablePacbti,
};

std::string_view attack_name(AttackKind a);

/// Line-oriented key = value scenario script. The seed fully determines the
/// run.
struct Scenario {
    std::string name = "scenario";
    std::string program; // assembly source path
    InstrumentConfig instrument;
    AttackKind attack = AttackKind::None;
    uint64_t attempts = 10000; // brute force
    uint8_t tag_width = 32;
    PostFaultPolicy policy = PostFaultPolicy::HoldInSpe;
    std::vector<uint64_t> attest_at; // step checkpoints
    uint64_t seed = 1;
    std::string input;
    uint64_t disable_step = 0; // FOP window
    uint64_t enable_step = 0;
    uint64_t step_limit = 10'000'000;
    std::string state_dir; // set by the CLI, not the script
};

Scenario load_scenario(const std::string& path);
Scenario parse_scenario(const std::string& text, const std::string& base_dir);

/// Out-of-band attacker actions, computed against a benign scout run and
/// applied through the NSPE read/write primitive.
struct InjectionPlan {
    enum class Kind : uint8_t { Write, Harvest, WriteHarvested };
    struct Action {
        uint64_t step = 0;
        Kind kind = Kind::Write;
        uint32_t addr = 0;
        uint32_t value = 0;
        int slot = 0;
    };
    std::vector<Action> actions;
    uint32_t expected_lr_slot = 0; // stacked-lr slot the plan targets
};

struct TokenObservation {
    uint64_t step = 0;
    VerifiedClaims claims;
};

struct ScenarioReport {
    std::string name;
    bool secret_leaked = false;
    bool fault_raised = false;
    std::optional<FaultClass> fault_kind;
    uint32_t fault_pc = 0;
    Lifecycle lifecycle_final = Lifecycle::Secured;
    std::vector<TokenObservation> tokens;
    uint64_t instr_plain = 0;
    uint64_t instr_instrumented = 0;
    bool detection_gap = false;
    std::string out_stream;

    std::string serialize() const; // deterministic structured text
};

struct RunArtifacts {
    ScenarioReport report;
    Trace trace;
    uint32_t stub_begin = 0;
    uint32_t stub_end = 0;
    AuditResult exec_audit; // executable-fetch check against the final map
};

ScenarioReport run_scenario(const Scenario& s);
RunArtifacts run_scenario_full(const Scenario& s);

// Attack planners (echo-service fixture layout).
InjectionPlan attack_rop_return(const Program& prog, const Assembled& asmb, const Scenario& s);
InjectionPlan attack_bti_forward(const Program& prog, const Assembled& asmb, const Scenario& s);
InjectionPlan attack_pac_reuse(const Program& prog, const Assembled& asmb, const Scenario& s);

struct BruteForceStats {
    uint64_t successes = 0;
    uint64_t attempts = 0;
    uint64_t resets = 0;
};

/// Forges random tags for a fixed pointer; every failure faults, persists
/// and resets the device (key rotation).
BruteForceStats attack_brute_force(Device& dev, uint64_t attempts, uint8_t tag_width,
                                   std::mt19937_64& rng);

/// Clears the PACBTI control bits through a simulated privileged gadget.
/// Throws NotPrivileged when the NSPE is not running privileged.
void fop_set_control(Device& dev, bool enabled);

struct OverheadReport {
    uint64_t plain_count = 0;
    uint64_t instrumented_count = 0;
    double ratio = 0;
};

/// Runs plain and instrumented images on identical input and counts
/// executed instructions.
OverheadReport overhead_report(const std::string& program_path, const std::string& input,
                               uint64_t step_limit = 10'000'000);

std::string read_text_file(const std::string& path);

} // namespace pacbti
