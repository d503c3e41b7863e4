#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pacbti/machine.hpp"
#include "pacbti/runpba.hpp"

namespace pacbti {

/// The 16-bit security lifecycle claim: PSA state in the low byte,
/// implementation-defined RunPBA status bits in the high byte.
/// bit 15 runtime_failure, bit 14 runpba_malfunction, bit 13 pac_priv,
/// bit 12 pac_unpriv, bit 11 bti_priv, bit 10 bti_unpriv, bits 9-8 reserved.
struct LifecycleClaim {
    uint8_t psa_state = 0;
    bool runtime_failure = false;
    bool runpba_malfunction = false;
    bool pac_priv = false;
    bool pac_unpriv = false;
    bool bti_priv = false;
    bool bti_unpriv = false;
};

uint16_t encode_lifecycle_claim(const LifecycleClaim& c);
/// nullopt when the reserved bits are set; the decoder is the source of
/// truth for the packing.
std::optional<LifecycleClaim> decode_lifecycle_claim(uint16_t v);

uint8_t psa_state_code(Lifecycle s);

struct TokenClaims {
    std::array<uint8_t, 32> nonce{};
    std::array<uint8_t, 16> instance_id{};
    uint16_t lifecycle = 0;
    uint32_t boot_epoch = 0;
    uint32_t fault_count = 0;
};

// Token wire format: "RPB1" | nonce(32) | instance_id(16) | lifecycle(2 BE)
// | boot_epoch(4 BE) | fault_count(4 BE) | authenticator(32).
inline constexpr size_t kTokenBytes = 94;

using MacKey = std::array<uint8_t, 32>;

/// Produces and checks the 32-byte token authenticator. Abstract so a
/// detached-signature scheme can replace the symmetric MAC.
class Authenticator {
public:
    virtual ~Authenticator() = default;
    virtual std::array<uint8_t, 32> tag(std::span<const uint8_t> claims) const = 0;
    virtual bool check(std::span<const uint8_t> claims, std::span<const uint8_t> tag) const;
};

class HmacAuthenticator : public Authenticator {
public:
    explicit HmacAuthenticator(const MacKey& key) : key_(key) {}
    std::array<uint8_t, 32> tag(std::span<const uint8_t> claims) const override;

private:
    MacKey key_;
};

/// Canonical claim encoding (the MAC input): the 58 bytes between the magic
/// and the authenticator.
std::vector<uint8_t> encode_claims(const TokenClaims& c);
std::vector<uint8_t> encode_token(const TokenClaims& c, const Authenticator& auth);
std::vector<uint8_t> encode_token(const TokenClaims& c, const MacKey& key);

enum class VerifyStatus : uint8_t { Accepted, BadAuthenticator, NonceMismatch, MalformedToken };

std::string_view verify_status_name(VerifyStatus s);

struct VerifiedClaims {
    VerifyStatus status = VerifyStatus::MalformedToken;
    TokenClaims claims{};
    LifecycleClaim lifecycle{};
};

/// Accepts iff the authenticator matches the canonical encoding under key
/// and the nonce matches. The authenticator is checked first.
VerifiedClaims verify_token(std::span<const uint8_t> token,
                            const std::array<uint8_t, 32>& expected_nonce,
                            const Authenticator& auth);
VerifiedClaims verify_token(std::span<const uint8_t> token,
                            const std::array<uint8_t, 32>& expected_nonce, const MacKey& key);

struct TransportClosed : SimError {
    TransportClosed() : SimError("transport closed") {}
};

/// Byte-stream endpoint; message framing is layered on top.
class ByteStream {
public:
    virtual ~ByteStream() = default;
    virtual size_t read(uint8_t* buf, size_t n) = 0; // 0 = closed
    virtual void write(std::span<const uint8_t> data) = 0;
};

/// 4-byte big-endian length prefix per message. A stream that closes
/// mid-message yields the partial payload.
class FramedTransport {
public:
    explicit FramedTransport(ByteStream& s) : stream_(s) {}
    void send(std::span<const uint8_t> msg);
    std::optional<std::vector<uint8_t>> recv();

private:
    ByteStream& stream_;
};

/// In-memory duplex pipe for desk-scale verification.
struct LoopbackPipe {
    struct End;
    std::shared_ptr<End> a_end;
    std::shared_ptr<End> b_end;

    LoopbackPipe();
    ByteStream& a();
    ByteStream& b();
    void close_b_to_a();
};

class Device;

std::array<uint8_t, 32> make_nonce(std::mt19937_64& rng);

/// Verifier side, second half: receive the token and verify it against the
/// nonce already sent.
VerifiedClaims finish_challenge(FramedTransport& t, const std::array<uint8_t, 32>& nonce,
                                const MacKey& key);

/// Verifier side over a blocking transport: sends a fresh random nonce,
/// receives and verifies the token.
VerifiedClaims challenge_response(FramedTransport& t, const MacKey& key, std::mt19937_64& rng);

/// Device side: answers one challenge. Returns false when the peer closed.
bool serve_attestation_once(FramedTransport& t, Device& dev);

/// Full exchange over an in-memory pipe against a live device.
VerifiedClaims attest_loopback(Device& dev, const MacKey& key, std::mt19937_64& rng);

// TCP plumbing for the CLI endpoints.
class TcpStream : public ByteStream {
public:
    explicit TcpStream(int fd) : fd_(fd) {}
    ~TcpStream() override;
    TcpStream(const TcpStream&) = delete;
    TcpStream& operator=(const TcpStream&) = delete;
    size_t read(uint8_t* buf, size_t n) override;
    void write(std::span<const uint8_t> data) override;

private:
    int fd_;
};

std::unique_ptr<TcpStream> tcp_connect(const std::string& host_port);

class TcpListener {
public:
    explicit TcpListener(const std::string& host_port);
    ~TcpListener();
    std::unique_ptr<TcpStream> accept_one();
    uint16_t port() const { return port_; }

private:
    int fd_;
    uint16_t port_ = 0;
};

} // namespace pacbti
