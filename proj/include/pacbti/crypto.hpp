#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace pacbti::crypto {

/// SipHash-2-4 with a 128-bit key. Used as the PAC pseudorandom function.
uint64_t siphash24(const std::array<uint64_t, 2>& key, std::span<const uint8_t> msg);

struct Sha256 {
    Sha256();
    void update(std::span<const uint8_t> data);
    std::array<uint8_t, 32> digest();

private:
    void process_block(const uint8_t* block);
    std::array<uint32_t, 8> state_;
    std::array<uint8_t, 64> buf_;
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
};

std::array<uint8_t, 32> sha256(std::span<const uint8_t> data);

/// HMAC-SHA256; used for the attestation token authenticator.
std::array<uint8_t, 32> hmac_sha256(std::span<const uint8_t> key, std::span<const uint8_t> msg);

} // namespace pacbti::crypto
