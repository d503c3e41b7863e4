#include "pacbti/image.hpp"

#include <cstring>
#include <fstream>

namespace pacbti {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'I', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(uint8_t(v >> (8 * i)));
}

uint32_t get_u32(const std::vector<uint8_t>& in, size_t& off) {
    if (off + 4 > in.size())
        throw SimError("truncated image");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= uint32_t(in[off + i]) << (8 * i);
    off += 4;
    return v;
}

uint8_t get_u8(const std::vector<uint8_t>& in, size_t& off) {
    if (off >= in.size())
        throw SimError("truncated image");
    return in[off++];
}

constexpr size_t kInstrBytes = 17; // opcode, operand count, 3 x (kind, u32 value)

} // namespace

std::vector<uint8_t> ProgramImage::serialize() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, uint32_t(regions.size()));
    for (const auto& r : regions) {
        put_u32(out, r.base);
        put_u32(out, r.length);
        out.push_back(uint8_t(r.kind));
        out.push_back(uint8_t(r.readable) | (uint8_t(r.writable) << 1) |
                      (uint8_t(r.executable) << 2));
        out.push_back(uint8_t(r.world));
        out.push_back(uint8_t(r.privileged_only));
        if (r.kind == RegionKind::Code) {
            put_u32(out, uint32_t(r.code.size() * kInstrBytes));
            for (const auto& ins : r.code) {
                out.push_back(uint8_t(ins.op));
                out.push_back(ins.nops);
                for (int i = 0; i < 3; ++i) {
                    out.push_back(uint8_t(ins.ops[i].kind));
                    put_u32(out, ins.ops[i].value);
                }
            }
        } else {
            // Canonical form: trailing zero cells are implied by the region
            // length and carry no payload bytes.
            size_t n = r.data.size();
            while (n > 0 && r.data[n - 1] == 0)
                --n;
            put_u32(out, uint32_t(n * 4));
            for (size_t i = 0; i < n; ++i)
                put_u32(out, r.data[i]);
        }
    }
    return out;
}

ProgramImage ProgramImage::deserialize(const std::vector<uint8_t>& bytes) {
    size_t off = 0;
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw SimError("bad image magic");
    off = 4;
    const uint32_t count = get_u32(bytes, off);
    ProgramImage img;
    for (uint32_t n = 0; n < count; ++n) {
        Region r;
        r.base = get_u32(bytes, off);
        r.length = get_u32(bytes, off);
        r.kind = static_cast<RegionKind>(get_u8(bytes, off));
        const uint8_t flags = get_u8(bytes, off);
        r.readable = flags & 1;
        r.writable = flags & 2;
        r.executable = flags & 4;
        r.world = static_cast<World>(get_u8(bytes, off));
        r.privileged_only = get_u8(bytes, off);
        const uint32_t payload = get_u32(bytes, off);
        r.name = "region" + std::to_string(n);
        if (r.kind == RegionKind::Code) {
            if (payload % kInstrBytes)
                throw SimError("bad code payload size");
            const uint32_t n_ins = payload / kInstrBytes;
            if (n_ins > r.length)
                throw SimError("code payload exceeds region length");
            for (uint32_t i = 0; i < n_ins; ++i) {
                Instruction ins;
                ins.op = static_cast<Opcode>(get_u8(bytes, off));
                ins.nops = get_u8(bytes, off);
                for (int k = 0; k < 3; ++k) {
                    ins.ops[k].kind = static_cast<OperandKind>(get_u8(bytes, off));
                    ins.ops[k].value = get_u32(bytes, off);
                }
                r.code.push_back(ins);
            }
            r.code.resize(r.length);
        } else {
            if (payload % 4)
                throw SimError("bad data payload size");
            const uint32_t n_cells = payload / 4;
            if (n_cells > r.length)
                throw SimError("data payload exceeds region length");
            for (uint32_t i = 0; i < n_cells; ++i)
                r.data.push_back(get_u32(bytes, off));
            r.data.resize(r.length);
        }
        img.regions.push_back(std::move(r));
    }
    return img;
}

uint32_t ProgramImage::total_units() const {
    uint32_t n = 0;
    for (const auto& r : regions)
        n += r.length;
    return n;
}

uint32_t ProgramImage::code_units() const {
    uint32_t n = 0;
    for (const auto& r : regions)
        if (r.executable)
            n += r.length;
    return n;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw SimError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw SimError("cannot open " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f),
                                std::istreambuf_iterator<char>());
}

} // namespace pacbti
