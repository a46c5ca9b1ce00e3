#include "emostyle/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "emostyle/errors.hpp"

namespace emostyle {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace detail {

std::uint32_t crc32(const unsigned char* bytes, std::size_t n) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ bytes[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

}  // namespace detail

namespace {

constexpr char kMagic[] = "EMOSTYLE1";  // 9 bytes on disk, no terminator
constexpr std::size_t kMagicLen = 9;
constexpr std::size_t kMaxRank = 8;
constexpr std::size_t kMaxNumel = std::size_t(1) << 40;

void put_raw(std::string& buf, const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
}
void put_u16(std::string& buf, std::uint16_t v) { put_raw(buf, &v, 2); }
void put_u32(std::string& buf, std::uint32_t v) { put_raw(buf, &v, 4); }
void put_u64(std::string& buf, std::uint64_t v) { put_raw(buf, &v, 8); }

void put_record(std::string& buf, const std::string& name, std::uint8_t dtype,
                const Shape& dims, const void* payload, std::size_t payload_bytes) {
    if (name.empty()) throw ValidationError("checkpoint: empty tensor name");
    if (name.size() > std::numeric_limits<std::uint16_t>::max())
        throw ValidationError("checkpoint: tensor name too long: '" + name.substr(0, 32) + "...'");
    if (dims.size() > kMaxRank)
        throw ValidationError("checkpoint: rank " + std::to_string(dims.size()) + " exceeds " +
                              std::to_string(kMaxRank) + " for '" + name + "'");
    put_u16(buf, std::uint16_t(name.size()));
    put_raw(buf, name.data(), name.size());
    buf.push_back(char(dtype));
    buf.push_back(char(std::uint8_t(dims.size())));
    for (std::size_t d : dims) put_u64(buf, std::uint64_t(d));
    put_raw(buf, payload, payload_bytes);
}

struct Cursor {
    const std::string& bytes;
    std::size_t pos = 0;

    void require(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw ValidationError(std::string("checkpoint truncated reading ") + what);
    }
    void read_raw(void* out, std::size_t n, const char* what) {
        require(n, what);
        std::memcpy(out, bytes.data() + pos, n);
        pos += n;
    }
    std::uint16_t read_u16(const char* what) {
        std::uint16_t v;
        read_raw(&v, 2, what);
        return v;
    }
    std::uint32_t read_u32(const char* what) {
        std::uint32_t v;
        read_raw(&v, 4, what);
        return v;
    }
    std::uint64_t read_u64(const char* what) {
        std::uint64_t v;
        read_raw(&v, 8, what);
        return v;
    }
    std::uint8_t read_u8(const char* what) {
        std::uint8_t v;
        read_raw(&v, 1, what);
        return v;
    }
};

std::string encode_config(const std::string& text) {
    std::string payload(text.size() * 4, '\0');
    for (std::size_t i = 0; i < text.size(); ++i) {
        const float f = float(static_cast<unsigned char>(text[i]));
        std::memcpy(payload.data() + 4 * i, &f, 4);
    }
    return payload;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
    for (const auto& [name, t] : data.f32) {
        (void)t;
        if (data.f64.count(name))
            throw ValidationError("checkpoint: '" + name + "' present in both f32 and f64");
        if (name.rfind("__", 0) == 0)
            throw ValidationError("checkpoint: name '" + name + "' uses the reserved __ prefix");
    }
    for (const auto& [name, t] : data.f64) {
        (void)t;
        if (name.rfind("__", 0) == 0)
            throw ValidationError("checkpoint: name '" + name + "' uses the reserved __ prefix");
    }

    std::string buf;
    put_raw(buf, kMagic, kMagicLen);
    put_u32(buf, data.version);
    put_u64(buf, std::uint64_t(data.f32.size() + data.f64.size() + 3));

    const std::string config_payload = encode_config(data.config_text);
    put_record(buf, "__meta.config", 0, Shape{data.config_text.size()}, config_payload.data(),
               config_payload.size());
    double rng_bits[2];
    std::memcpy(&rng_bits[0], &data.rng_key, 8);
    std::memcpy(&rng_bits[1], &data.rng_counter, 8);
    put_record(buf, "__meta.rng", 1, Shape{2}, rng_bits, 16);

    // Two-pointer merge keeps the combined stream sorted by name, so the file
    // bytes depend only on contents, never on insertion history.
    auto fit = data.f32.begin();
    auto dit = data.f64.begin();
    while (fit != data.f32.end() || dit != data.f64.end()) {
        const bool take_f32 =
            dit == data.f64.end() || (fit != data.f32.end() && fit->first < dit->first);
        if (take_f32) {
            put_record(buf, fit->first, 0, fit->second.shape, fit->second.data.data(),
                       fit->second.data.size() * sizeof(float));
            ++fit;
        } else {
            put_record(buf, dit->first, 1, dit->second.shape, dit->second.data.data(),
                       dit->second.data.size() * sizeof(double));
            ++dit;
        }
    }

    const std::uint32_t crc =
        detail::crc32(reinterpret_cast<const unsigned char*>(buf.data()), buf.size());
    float crc_bits;
    std::memcpy(&crc_bits, &crc, 4);
    put_record(buf, "__crc32", 0, Shape{1}, &crc_bits, 4);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: '" + path.string() + "'");
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw IoError("failed writing checkpoint: '" + path.string() + "'");
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading checkpoint: '" + path.string() + "'");

    Cursor cur{bytes};
    char magic[kMagicLen];
    cur.read_raw(magic, kMagicLen, "magic");
    if (std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw ValidationError("bad checkpoint magic (not an EMOSTYLE1 file)");

    CheckpointData data;
    data.version = cur.read_u32("version");
    if (data.version != kCheckpointVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(data.version) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")");

    const std::uint64_t count = cur.read_u64("record count");
    bool have_config = false, have_rng = false, have_crc = false;
    for (std::uint64_t rec = 0; rec < count; ++rec) {
        const std::size_t record_start = cur.pos;
        const std::uint16_t name_len = cur.read_u16("name length");
        std::string name(name_len, '\0');
        cur.read_raw(name.data(), name_len, "name");
        const std::uint8_t dtype = cur.read_u8("dtype");
        if (dtype > 1)
            throw ValidationError("checkpoint: unknown dtype " + std::to_string(dtype) + " for '" +
                                  name + "'");
        const std::uint8_t rank = cur.read_u8("rank");
        if (rank > kMaxRank)
            throw ValidationError("checkpoint: implausible rank " + std::to_string(rank) +
                                  " for '" + name + "'");
        Shape dims(rank);
        std::size_t numel = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            const std::uint64_t d = cur.read_u64("dims");
            if (d != 0 && numel > kMaxNumel / d)
                throw ValidationError("checkpoint: implausible tensor size for '" + name + "'");
            dims[i] = std::size_t(d);
            numel *= std::size_t(d);
        }
        const std::size_t payload = numel * (dtype == 0 ? 4 : 8);
        cur.require(payload, "payload");
        const char* p = bytes.data() + cur.pos;
        cur.pos += payload;

        if (name == "__crc32") {
            if (rec + 1 != count)
                throw ValidationError("checkpoint: __crc32 record is not last");
            if (dtype != 0 || numel != 1)
                throw ValidationError("checkpoint: malformed __crc32 record");
            std::uint32_t stored;
            std::memcpy(&stored, p, 4);
            const std::uint32_t actual = detail::crc32(
                reinterpret_cast<const unsigned char*>(bytes.data()), record_start);
            if (stored != actual)
                throw ValidationError("checkpoint integrity check failed (crc mismatch)");
            have_crc = true;
        } else if (name == "__meta.config") {
            if (dtype != 0 || rank != 1)
                throw ValidationError("checkpoint: malformed __meta.config record");
            data.config_text.resize(numel);
            for (std::size_t i = 0; i < numel; ++i) {
                float f;
                std::memcpy(&f, p + 4 * i, 4);
                data.config_text[i] = char(static_cast<unsigned char>(f));
            }
            have_config = true;
        } else if (name == "__meta.rng") {
            if (dtype != 1 || numel != 2)
                throw ValidationError("checkpoint: malformed __meta.rng record");
            std::memcpy(&data.rng_key, p, 8);
            std::memcpy(&data.rng_counter, p + 8, 8);
            have_rng = true;
        } else if (name.rfind("__", 0) == 0) {
            throw ValidationError("checkpoint: unknown reserved record '" + name + "'");
        } else if (dtype == 0) {
            Tensor<float> t(dims);
            std::memcpy(t.data.data(), p, payload);
            if (!data.f32.emplace(name, std::move(t)).second || data.f64.count(name))
                throw ValidationError("checkpoint: duplicate tensor name '" + name + "'");
        } else {
            Tensor<double> t(dims);
            std::memcpy(t.data.data(), p, payload);
            if (!data.f64.emplace(name, std::move(t)).second || data.f32.count(name))
                throw ValidationError("checkpoint: duplicate tensor name '" + name + "'");
        }
    }
    if (cur.pos != bytes.size())
        throw ValidationError("checkpoint: trailing bytes after the last record");
    if (!have_crc) throw ValidationError("checkpoint: missing __crc32 record");
    if (!have_config) throw ValidationError("checkpoint: missing __meta.config record");
    if (!have_rng) throw ValidationError("checkpoint: missing __meta.rng record");
    return data;
}

}  // namespace emostyle
