#include "dlra/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace dlra {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'R', 'A'};

std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f32: return 4;
        case Dtype::f64: return 8;
        case Dtype::u8: return 1;
    }
    return 0;
}

void append_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

void append_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const std::string& what) const {
        if (pos + n > buf.size())
            throw FormatError("truncated container: expected " + what, pos);
    }
    std::uint8_t u8(const std::string& what) {
        need(1, what);
        return buf[pos++];
    }
    std::uint16_t u16(const std::string& what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(buf[pos]) | static_cast<std::uint16_t>(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
};

std::size_t checked_count(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (auto d : dims) {
        if (d == 0) throw DataError("tensor entry has a zero dimension");
        if (n > std::numeric_limits<std::uint32_t>::max() / d)
            throw DataError("tensor entry too large");
        n *= d;
    }
    return n;
}

}  // namespace

std::size_t Checkpoint::Entry::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

void Checkpoint::put_f32(const std::string& name, std::vector<std::size_t> dims, const std::vector<float>& data) {
    if (checked_count(dims) != data.size()) throw DataError("entry '" + name + "': dims do not match data length");
    Entry e;
    e.dtype = Dtype::f32;
    e.dims = std::move(dims);
    e.payload.resize(data.size() * 4);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(data[i]);
        for (int k = 0; k < 4; ++k) e.payload[i * 4 + k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
    }
    entries_[name] = std::move(e);
}

void Checkpoint::put_f64(const std::string& name, std::vector<std::size_t> dims, const std::vector<double>& data) {
    if (checked_count(dims) != data.size()) throw DataError("entry '" + name + "': dims do not match data length");
    Entry e;
    e.dtype = Dtype::f64;
    e.dims = std::move(dims);
    e.payload.resize(data.size() * 8);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(data[i]);
        for (int k = 0; k < 8; ++k) e.payload[i * 8 + k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
    }
    entries_[name] = std::move(e);
}

void Checkpoint::put_u8(const std::string& name, std::vector<std::size_t> dims, const std::vector<std::uint8_t>& data) {
    if (checked_count(dims) != data.size()) throw DataError("entry '" + name + "': dims do not match data length");
    Entry e;
    e.dtype = Dtype::u8;
    e.dims = std::move(dims);
    e.payload.assign(data.begin(), data.end());
    entries_[name] = std::move(e);
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
    if (text.empty()) throw DataError("entry '" + name + "': empty text");
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    put_u8(name, {bytes.size()}, bytes);
}

bool Checkpoint::has(const std::string& name) const { return entries_.count(name) != 0; }

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("missing entry '" + name + "'");
    return it->second;
}

std::vector<float> Checkpoint::get_f32(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != Dtype::f32) throw DataError("entry '" + name + "' is not f32");
    std::vector<float> out(e.element_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(e.payload[i * 4 + k]) << (8 * k);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

std::vector<double> Checkpoint::get_f64(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != Dtype::f64) throw DataError("entry '" + name + "' is not f64");
    std::vector<double> out(e.element_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(e.payload[i * 8 + k]) << (8 * k);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

std::vector<std::uint8_t> Checkpoint::get_u8(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != Dtype::u8) throw DataError("entry '" + name + "' is not u8");
    return std::vector<std::uint8_t>(e.payload.begin(), e.payload.end());
}

std::string Checkpoint::get_text(const std::string& name) const {
    auto bytes = get_u8(name);
    return std::string(bytes.begin(), bytes.end());
}

std::vector<unsigned char> Checkpoint::serialize() const {
    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    append_u32(out, kVersion);
    append_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max())
            throw DataError("entry name length out of range: '" + name + "'");
        if (e.dims.size() > std::numeric_limits<std::uint8_t>::max())
            throw DataError("entry '" + name + "' has too many dimensions");
        append_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<unsigned char>(e.dtype));
        out.push_back(static_cast<unsigned char>(e.dims.size()));
        for (auto d : e.dims) append_u32(out, static_cast<std::uint32_t>(d));
        out.insert(out.end(), e.payload.begin(), e.payload.end());
    }
    return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<unsigned char>& bytes) {
    ByteReader r{bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("bad magic, expected DLRA", 0);
    r.pos = 4;
    std::size_t version_at = r.pos;
    std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw FormatError("unsupported container version " + std::to_string(version), version_at);
    std::uint32_t count = r.u32("entry count");
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::size_t name_at = r.pos;
        std::uint16_t name_len = r.u16("name length");
        if (name_len == 0) throw FormatError("empty entry name", name_at);
        r.need(name_len, "entry name");
        std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + name_len));
        r.pos += name_len;
        if (ck.entries_.count(name)) throw FormatError("duplicate entry '" + name + "'", name_at);
        std::size_t dtype_at = r.pos;
        std::uint8_t dt = r.u8("dtype");
        if (dt > 2) throw FormatError("unknown dtype " + std::to_string(dt), dtype_at);
        std::uint8_t ndim = r.u8("rank");
        if (ndim == 0) throw FormatError("entry '" + name + "' has rank zero", r.pos - 1);
        Entry e;
        e.dtype = static_cast<Dtype>(dt);
        std::size_t n = 1;
        for (std::uint8_t k = 0; k < ndim; ++k) {
            std::size_t dim_at = r.pos;
            std::uint32_t d = r.u32("dimension");
            if (d == 0) throw FormatError("entry '" + name + "' has a zero dimension", dim_at);
            // headroom for the widest element so the payload size cannot wrap
            if (n > std::numeric_limits<std::size_t>::max() / 8 / d)
                throw FormatError("entry '" + name + "' dimensions overflow", dim_at);
            e.dims.push_back(d);
            n *= d;
        }
        std::size_t payload_bytes = n * dtype_size(e.dtype);
        r.need(payload_bytes, "tensor payload of entry '" + name + "'");
        e.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + payload_bytes));
        r.pos += payload_bytes;
        ck.entries_[name] = std::move(e);
    }
    if (r.pos != bytes.size())
        throw FormatError("trailing bytes after last entry", r.pos);
    return ck;
}

void Checkpoint::save(const std::string& path) const {
    auto bytes = serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace dlra
