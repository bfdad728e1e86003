#include "divctl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <zlib.h>

#include "divctl/errors.hpp"

namespace divctl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const CheckpointBlock* Checkpoint::find(const std::string& name) const {
    for (const auto& b : blocks) {
        if (b.name == name) {
            return &b;
        }
    }
    return nullptr;
}

const CheckpointBlock& Checkpoint::get(const std::string& name, BlockKind kind) const {
    const CheckpointBlock* b = find(name);
    if (b == nullptr) {
        throw LoadError("checkpoint has no block '" + name + "'");
    }
    if (b->kind != kind) {
        throw LoadError("checkpoint block '" + name + "' has an unexpected kind");
    }
    return *b;
}

void Checkpoint::put_f64(std::string name, Shape shape, std::span<const double> values) {
    require(shape_numel(shape) == values.size(), "put_f64: shape does not match value count for " + name);
    CheckpointBlock b;
    b.name = std::move(name);
    b.kind = BlockKind::f64;
    b.shape = std::move(shape);
    b.f64.assign(values.begin(), values.end());
    blocks.push_back(std::move(b));
}

void Checkpoint::put_text(std::string name, std::string text) {
    CheckpointBlock b;
    b.name = std::move(name);
    b.kind = BlockKind::text;
    b.shape = {text.size()};
    b.text = std::move(text);
    blocks.push_back(std::move(b));
}

void Checkpoint::put_u64(std::string name, std::vector<std::uint64_t> values) {
    CheckpointBlock b;
    b.name = std::move(name);
    b.kind = BlockKind::u64;
    b.shape = {values.size()};
    b.u64 = std::move(values);
    blocks.push_back(std::move(b));
}

namespace {

constexpr char kMagic[4] = {'D', 'I', 'V', 'C'};

class Writer {
public:
    template <class T>
    void pod(const T& v) {
        raw(&v, sizeof v);
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}
    template <class T>
    T pod(const std::string& what) {
        T v;
        raw(&v, sizeof v, what);
        return v;
    }
    void raw(void* p, std::size_t n, const std::string& what) {
        if (bytes.size() - pos < n) {
            throw LoadError("checkpoint truncated while reading " + what);
        }
        std::memcpy(p, bytes.data() + pos, n);
        pos += n;
    }
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

std::size_t payload_bytes(const CheckpointBlock& b) {
    switch (b.kind) {
        case BlockKind::f64: return b.f64.size() * 8;
        case BlockKind::text: return b.text.size();
        case BlockKind::u64: return b.u64.size() * 8;
    }
    return 0;
}

const void* payload_ptr(const CheckpointBlock& b) {
    switch (b.kind) {
        case BlockKind::f64: return b.f64.data();
        case BlockKind::text: return b.text.data();
        case BlockKind::u64: return b.u64.data();
    }
    return nullptr;
}

// CRC over the name, kind, dims and payload.
std::uint32_t block_crc(const std::string& name, std::uint32_t kind, const Shape& shape, const void* payload,
                        std::size_t len) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(&kind), sizeof kind);
    for (std::size_t d : shape) {
        const std::uint64_t d64 = d;
        crc = crc32(crc, reinterpret_cast<const Bytef*>(&d64), sizeof d64);
    }
    crc = crc32(crc, static_cast<const Bytef*>(payload), static_cast<uInt>(len));
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.raw(kMagic, 4);
    w.pod(ckpt.version);
    w.raw(ckpt.config_digest.data(), ckpt.config_digest.size());
    w.pod(ckpt.step);
    w.pod(static_cast<std::uint32_t>(ckpt.blocks.size()));
    for (const auto& b : ckpt.blocks) {
        w.pod(static_cast<std::uint32_t>(b.name.size()));
        w.raw(b.name.data(), b.name.size());
        const auto kind = static_cast<std::uint32_t>(b.kind);
        w.pod(kind);
        w.pod(static_cast<std::uint32_t>(b.shape.size()));
        for (std::size_t d : b.shape) {
            w.pod(static_cast<std::uint64_t>(d));
        }
        const std::size_t len = payload_bytes(b);
        w.pod(static_cast<std::uint64_t>(len));
        w.pod(block_crc(b.name, kind, b.shape, payload_ptr(b), len));
        w.raw(payload_ptr(b), len);
    }
    return std::move(w.out);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    char magic[4];
    r.raw(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw LoadError("not a checkpoint file (bad magic)");
    }
    Checkpoint c;
    c.version = r.pod<std::uint32_t>("version");
    if (c.version > kCheckpointVersion) {
        throw LoadError("checkpoint format version " + std::to_string(c.version) + " is newer than this build (" +
                        std::to_string(kCheckpointVersion) + ")");
    }
    if (c.version == 0) {
        throw LoadError("checkpoint format version 0 is invalid");
    }
    r.raw(c.config_digest.data(), c.config_digest.size(), "config digest");
    c.step = r.pod<std::uint64_t>("step");
    const auto n = r.pod<std::uint32_t>("block count");
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string where = "block #" + std::to_string(i);
        const auto name_len = r.pod<std::uint32_t>(where + " name length");
        if (name_len > 4096) {
            throw LoadError(where + ": implausible name length");
        }
        CheckpointBlock b;
        b.name.resize(name_len);
        r.raw(b.name.data(), name_len, where + " name");
        const std::string bw = "block '" + b.name + "'";
        const auto kind = r.pod<std::uint32_t>(bw + " kind");
        if (kind > 2) {
            throw LoadError(bw + ": unknown block kind " + std::to_string(kind));
        }
        b.kind = static_cast<BlockKind>(kind);
        const auto ndim = r.pod<std::uint32_t>(bw + " rank");
        if (ndim > 8) {
            throw LoadError(bw + ": implausible rank");
        }
        std::size_t elems = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const auto dim = r.pod<std::uint64_t>(bw + " dims");
            if (dim > (std::uint64_t{1} << 40)) {
                throw LoadError(bw + ": implausible dimension");
            }
            b.shape.push_back(static_cast<std::size_t>(dim));
            elems *= static_cast<std::size_t>(dim);
        }
        const auto len = r.pod<std::uint64_t>(bw + " payload length");
        const std::size_t expect = b.kind == BlockKind::text ? elems : elems * 8;
        if (len != expect) {
            throw LoadError(bw + ": payload length " + std::to_string(len) + " does not match shape (" +
                            std::to_string(expect) + " bytes)");
        }
        const auto crc = r.pod<std::uint32_t>(bw + " checksum");
        switch (b.kind) {
            case BlockKind::f64:
                b.f64.resize(elems);
                r.raw(b.f64.data(), len, bw + " payload");
                break;
            case BlockKind::text:
                b.text.resize(elems);
                r.raw(b.text.data(), len, bw + " payload");
                break;
            case BlockKind::u64:
                b.u64.resize(elems);
                r.raw(b.u64.data(), len, bw + " payload");
                break;
        }
        if (block_crc(b.name, kind, b.shape, payload_ptr(b), len) != crc) {
            throw LoadError(bw + ": checksum mismatch (corrupted data)");
        }
        c.blocks.push_back(std::move(b));
    }
    if (r.pos != bytes.size()) {
        throw LoadError("checkpoint has " + std::to_string(bytes.size() - r.pos) + " trailing bytes");
    }
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const auto bytes = serialize_checkpoint(ckpt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ContractError("cannot write checkpoint to '" + tmp + "'");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            throw ContractError("short write to '" + tmp + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw NotFoundError("checkpoint '" + path + "' not found");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return deserialize_checkpoint(bytes);
    } catch (const LoadError& e) {
        throw LoadError(path + ": " + e.what());
    }
}

}  // namespace divctl
