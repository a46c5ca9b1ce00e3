#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <type_traits>

#include "emostyle/params.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Everything a resumed run needs: a config snapshot, the trainer RNG state,
// and every named tensor (model params, dictionary entries, usage counts,
// optimizer moments). f32 and f64 tensors live in separate maps; a name must
// not appear in both, and names starting with "__" are reserved for the
// file's own metadata records.
struct CheckpointData {
    std::uint32_t version = kCheckpointVersion;
    std::string config_text;
    std::uint64_t rng_key = 0;
    std::uint64_t rng_counter = 0;
    std::map<std::string, Tensor<float>> f32;
    std::map<std::string, Tensor<double>> f64;
};

// Binary layout, little-endian throughout: magic "EMOSTYLE1" (9 bytes),
// u32 version, u64 record count, then records of
//   u16 name length | name | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u64
//   dims | raw row-major payload.
// Metadata rides in reserved records: "__meta.config" (config bytes as f32
// values), "__meta.rng" (two u64 bit-copied into f64 slots), and "__crc32"
// last (CRC-32 of every byte before that record, bit-copied into one f32).
// Saving the same data twice produces byte-identical files.
void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& path);

template <class S>
std::map<std::string, Tensor<S>>& tensor_map(CheckpointData& d) {
    if constexpr (std::is_same_v<S, float>)
        return d.f32;
    else
        return d.f64;
}

template <class S>
const std::map<std::string, Tensor<S>>& tensor_map(const CheckpointData& d) {
    if constexpr (std::is_same_v<S, float>)
        return d.f32;
    else
        return d.f64;
}

// Stores every parameter under "<prefix><name>".
template <class S>
void pack_params(CheckpointData& d, const std::string& prefix, const ParamSet<S>& params) {
    auto& m = tensor_map<S>(d);
    for (const auto& [name, t] : params.entries()) m.insert_or_assign(prefix + name, t);
}

// Collects every "<prefix>..." tensor into a fresh ParamSet, prefix stripped.
template <class S>
ParamSet<S> unpack_params(const CheckpointData& d, const std::string& prefix) {
    ParamSet<S> out;
    for (const auto& [name, t] : tensor_map<S>(d))
        if (name.size() > prefix.size() && name.rfind(prefix, 0) == 0)
            out.add(name.substr(prefix.size()), t);
    return out;
}

namespace detail {
// Reflected CRC-32 (polynomial 0xEDB88320), the common PNG/zip flavor.
std::uint32_t crc32(const unsigned char* bytes, std::size_t n);
}  // namespace detail

}  // namespace emostyle
