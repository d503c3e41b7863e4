#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pacbti/isa.hpp"
#include "pacbti/machine.hpp"

namespace pacbti {

/// Flat list of (region descriptor, byte payload) records. Deterministic
/// binary layout: little-endian fields, 4-byte lengths, 17 bytes per
/// instruction record, 4 bytes per data cell. Region names are not part of
/// the wire format.
class ProgramImage {
public:
    struct Region {
        std::string name;
        uint32_t base = 0;
        uint32_t length = 0; // address units
        RegionKind kind = RegionKind::Data;
        bool readable = true;
        bool writable = false;
        bool executable = false;
        World world = World::NonSecure;
        bool privileged_only = false;
        std::vector<Instruction> code;
        std::vector<uint32_t> data;
    };

    std::vector<Region> regions;

    std::vector<uint8_t> serialize() const;
    static ProgramImage deserialize(const std::vector<uint8_t>& bytes);

    /// Total mapped size in address units.
    uint32_t total_units() const;
    /// Size of executable sections in address units.
    uint32_t code_units() const;
};

void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::string& path);

} // namespace pacbti
