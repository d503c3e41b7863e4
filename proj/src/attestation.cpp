#include "pacbti/attestation.hpp"

#include <algorithm>
#include <cstring>
#include <deque>

#include "pacbti/crypto.hpp"
#include "pacbti/device.hpp"

namespace pacbti {

namespace {
constexpr char kTokenMagic[4] = {'R', 'P', 'B', '1'};
constexpr uint16_t kReservedMask = 0x0300; // bits 9-8
} // namespace

uint16_t encode_lifecycle_claim(const LifecycleClaim& c) {
    uint16_t v = c.psa_state;
    v |= uint16_t(c.bti_unpriv) << 10;
    v |= uint16_t(c.bti_priv) << 11;
    v |= uint16_t(c.pac_unpriv) << 12;
    v |= uint16_t(c.pac_priv) << 13;
    v |= uint16_t(c.runpba_malfunction) << 14;
    v |= uint16_t(c.runtime_failure) << 15;
    return v;
}

std::optional<LifecycleClaim> decode_lifecycle_claim(uint16_t v) {
    if (v & kReservedMask)
        return std::nullopt;
    LifecycleClaim c;
    c.psa_state = uint8_t(v & 0xFF);
    c.bti_unpriv = (v >> 10) & 1;
    c.bti_priv = (v >> 11) & 1;
    c.pac_unpriv = (v >> 12) & 1;
    c.pac_priv = (v >> 13) & 1;
    c.runpba_malfunction = (v >> 14) & 1;
    c.runtime_failure = (v >> 15) & 1;
    return c;
}

uint8_t psa_state_code(Lifecycle s) {
    switch (s) {
    case Lifecycle::AssemblyAndTest: return 0x10;
    case Lifecycle::Provisioning: return 0x20;
    case Lifecycle::Secured: return 0x30;
    case Lifecycle::NspeCompromised: return 0x35;
    case Lifecycle::RecoverableDebug: return 0x50;
    case Lifecycle::Decommissioned: return 0x60;
    }
    return 0;
}

std::vector<uint8_t> encode_claims(const TokenClaims& c) {
    std::vector<uint8_t> out;
    out.reserve(58);
    out.insert(out.end(), c.nonce.begin(), c.nonce.end());
    out.insert(out.end(), c.instance_id.begin(), c.instance_id.end());
    out.push_back(uint8_t(c.lifecycle >> 8));
    out.push_back(uint8_t(c.lifecycle));
    for (int i = 3; i >= 0; --i)
        out.push_back(uint8_t(c.boot_epoch >> (8 * i)));
    for (int i = 3; i >= 0; --i)
        out.push_back(uint8_t(c.fault_count >> (8 * i)));
    return out;
}

bool Authenticator::check(std::span<const uint8_t> claims, std::span<const uint8_t> t) const {
    const auto want = tag(claims);
    return t.size() == want.size() && std::equal(want.begin(), want.end(), t.begin());
}

std::array<uint8_t, 32> HmacAuthenticator::tag(std::span<const uint8_t> claims) const {
    return crypto::hmac_sha256(key_, claims);
}

std::vector<uint8_t> encode_token(const TokenClaims& c, const Authenticator& auth) {
    std::vector<uint8_t> out;
    out.reserve(kTokenBytes);
    out.insert(out.end(), kTokenMagic, kTokenMagic + 4);
    const auto claims = encode_claims(c);
    out.insert(out.end(), claims.begin(), claims.end());
    const auto tag = auth.tag(claims);
    out.insert(out.end(), tag.begin(), tag.end());
    return out;
}

std::vector<uint8_t> encode_token(const TokenClaims& c, const MacKey& key) {
    return encode_token(c, HmacAuthenticator(key));
}

std::string_view verify_status_name(VerifyStatus s) {
    switch (s) {
    case VerifyStatus::Accepted: return "accepted";
    case VerifyStatus::BadAuthenticator: return "bad-authenticator";
    case VerifyStatus::NonceMismatch: return "nonce-mismatch";
    case VerifyStatus::MalformedToken: return "malformed-token";
    }
    return "?";
}

VerifiedClaims verify_token(std::span<const uint8_t> token,
                            const std::array<uint8_t, 32>& expected_nonce,
                            const Authenticator& auth) {
    VerifiedClaims out;
    if (token.size() != kTokenBytes || std::memcmp(token.data(), kTokenMagic, 4) != 0) {
        out.status = VerifyStatus::MalformedToken;
        return out;
    }
    const std::span<const uint8_t> claims = token.subspan(4, 58);
    const std::span<const uint8_t> mac = token.subspan(62, 32);
    if (!auth.check(claims, mac)) {
        out.status = VerifyStatus::BadAuthenticator;
        return out;
    }

    TokenClaims c;
    std::copy_n(claims.begin(), 32, c.nonce.begin());
    std::copy_n(claims.begin() + 32, 16, c.instance_id.begin());
    c.lifecycle = uint16_t(claims[48]) << 8 | claims[49];
    for (int i = 0; i < 4; ++i)
        c.boot_epoch = (c.boot_epoch << 8) | claims[50 + i];
    for (int i = 0; i < 4; ++i)
        c.fault_count = (c.fault_count << 8) | claims[54 + i];
    out.claims = c;

    if (!std::equal(c.nonce.begin(), c.nonce.end(), expected_nonce.begin())) {
        out.status = VerifyStatus::NonceMismatch;
        return out;
    }
    const auto lc = decode_lifecycle_claim(c.lifecycle);
    if (!lc) {
        out.status = VerifyStatus::MalformedToken;
        return out;
    }
    out.lifecycle = *lc;
    out.status = VerifyStatus::Accepted;
    return out;
}

VerifiedClaims verify_token(std::span<const uint8_t> token,
                            const std::array<uint8_t, 32>& expected_nonce, const MacKey& key) {
    return verify_token(token, expected_nonce, HmacAuthenticator(key));
}

void FramedTransport::send(std::span<const uint8_t> msg) {
    uint8_t hdr[4];
    for (int i = 0; i < 4; ++i)
        hdr[i] = uint8_t(msg.size() >> (8 * (3 - i)));
    stream_.write({hdr, 4});
    stream_.write(msg);
}

std::optional<std::vector<uint8_t>> FramedTransport::recv() {
    uint8_t hdr[4];
    size_t got = 0;
    while (got < 4) {
        const size_t n = stream_.read(hdr + got, 4 - got);
        if (n == 0)
            return got == 0 ? std::optional<std::vector<uint8_t>>{} : std::optional{std::vector<uint8_t>{}};
        got += n;
    }
    uint32_t len = 0;
    for (int i = 0; i < 4; ++i)
        len = (len << 8) | hdr[i];
    if (len > (1u << 20))
        throw SimError("oversized frame");
    std::vector<uint8_t> msg(len);
    size_t off = 0;
    while (off < len) {
        const size_t n = stream_.read(msg.data() + off, len - off);
        if (n == 0) {
            msg.resize(off); // peer closed mid-message; hand back the partial
            break;
        }
        off += n;
    }
    return msg;
}

struct LoopbackPipe::End : ByteStream {
    std::deque<uint8_t> in;
    End* peer = nullptr;
    bool closed = false;

    size_t read(uint8_t* buf, size_t n) override {
        const size_t take = std::min(n, in.size());
        for (size_t i = 0; i < take; ++i) {
            buf[i] = in.front();
            in.pop_front();
        }
        if (take == 0 && closed)
            return 0;
        if (take == 0)
            throw TransportClosed(); // nothing buffered and nothing will come
        return take;
    }
    void write(std::span<const uint8_t> data) override {
        if (!peer)
            throw TransportClosed();
        peer->in.insert(peer->in.end(), data.begin(), data.end());
    }
};

LoopbackPipe::LoopbackPipe() : a_end(std::make_shared<End>()), b_end(std::make_shared<End>()) {
    a_end->peer = b_end.get();
    b_end->peer = a_end.get();
}

ByteStream& LoopbackPipe::a() {
    return *a_end;
}

ByteStream& LoopbackPipe::b() {
    return *b_end;
}

void LoopbackPipe::close_b_to_a() {
    b_end->peer = nullptr;
    a_end->closed = true;
}

std::array<uint8_t, 32> make_nonce(std::mt19937_64& rng) {
    std::array<uint8_t, 32> nonce;
    for (auto& b : nonce)
        b = uint8_t(rng());
    return nonce;
}

VerifiedClaims finish_challenge(FramedTransport& t, const std::array<uint8_t, 32>& nonce,
                                const MacKey& key) {
    const auto reply = t.recv();
    if (!reply)
        throw TransportClosed();
    return verify_token(*reply, nonce, key);
}

VerifiedClaims challenge_response(FramedTransport& t, const MacKey& key, std::mt19937_64& rng) {
    const auto nonce = make_nonce(rng);
    t.send(nonce);
    return finish_challenge(t, nonce, key);
}

bool serve_attestation_once(FramedTransport& t, Device& dev) {
    const auto challenge = t.recv();
    if (!challenge)
        return false;
    if (challenge->size() != 32)
        return false; // malformed challenge; drop the request
    std::array<uint8_t, 32> nonce;
    std::copy_n(challenge->begin(), 32, nonce.begin());
    const auto token = dev.build_token(nonce);
    t.send(token);
    return true;
}

VerifiedClaims attest_loopback(Device& dev, const MacKey& key, std::mt19937_64& rng) {
    LoopbackPipe pipe;
    FramedTransport verifier(pipe.a());
    FramedTransport service(pipe.b());
    const auto nonce = make_nonce(rng);
    verifier.send(nonce);
    serve_attestation_once(service, dev);
    return finish_challenge(verifier, nonce, key);
}

} // namespace pacbti
