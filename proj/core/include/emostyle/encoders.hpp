#pragma once

#include <array>
#include <string>
#include <string_view>

#include "emostyle/image.hpp"
#include "emostyle/params.hpp"
#include "emostyle/tape.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

inline constexpr int kNumEmotions = 8;

// Canonical order; indices are stable everywhere (manifests, dictionaries,
// probe labels).
const std::array<std::string_view, kNumEmotions>& emotion_names();
int emotion_index(std::string_view name);  // throws ValidationError listing valid names
std::string_view emotion_name(int index);

template <class S>
Tensor<S> encode_emotion(int index);  // one-hot {8}

inline constexpr std::size_t kContentTokenCount = 16;
inline constexpr std::size_t kEmbedDim = 64;
inline constexpr std::size_t kRawFeatureDim = 8;
inline constexpr std::size_t kStyleDim = 64;

// Token grid is always 4x4; the standard image side is 32 (8x8 patches).
// Sides 8 and 16 are accepted so reduced-size gradient checks stay cheap.
bool content_side_supported(std::size_t side);

// Per patch: [mean R, mean G, mean B, std R, std G, std B, Sobel density, mean luma]. {16,8}
template <class S>
Tensor<S> content_raw_features(const Image& img);

// Fixed 2D sinusoidal encodings over the 4x4 grid. {16,64}
template <class S>
const Tensor<S>& content_posenc();

// content.proj.w {8,64}, content.proj.b {64}
template <class S>
void add_content_params(ParamSet<S>& ps, Rng rng);

// Learned projection of raw patch stats plus the fixed positional table. {16,64}
template <class S>
NodeId content_tokens_node(Tape<S>& tape, const Tensor<S>& raw, const ParamSet<S>& ps);

template <class S>
Tensor<S> encode_content(const Image& img, const ParamSet<S>& ps);

// Fixed texture-statistics style encoder: 16 seeded 3x3x3 filters, their
// 16x16 Gram matrix (upper triangle incl. diagonal, pixel-count normalized)
// plus mean RGB, sent through a seeded orthonormal 139->64 map. No learned
// state; same image gives the identical vector on every call.
template <class S>
Tensor<S> encode_style(const Image& img);

inline constexpr std::size_t kTextVocab = 1024;

// text.embed {1024,64}; row 0 is the pad token
template <class S>
void add_text_params(ParamSet<S>& ps, Rng rng);

// Whitespace tokens, seeded stable hash into rows 1..1023, pad/truncate to
// 16, same positional table as images. {16,64}
template <class S>
Tensor<S> encode_text(const std::string& prompt, const ParamSet<S>& ps);

}  // namespace emostyle
