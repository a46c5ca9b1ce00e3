#include "emostyle/encoders.hpp"

#include <cmath>
#include <sstream>
#include <vector>

#include "emostyle/errors.hpp"

namespace emostyle {

namespace {

constexpr std::uint64_t kStyleEncoderSeed = 71;  // pinned; part of the feature definition
constexpr std::uint64_t kTextHashSeed = 1031;

std::vector<double> style_filters() {
    Rng rng = Rng(kStyleEncoderSeed).derive("style.filters");
    std::vector<double> f(16 * 27);
    for (double& v : f) v = rng.gaussian();
    for (std::size_t k = 0; k < 16; ++k) {
        double norm = 0;
        for (std::size_t i = 0; i < 27; ++i) norm += f[k * 27 + i] * f[k * 27 + i];
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < 27; ++i) f[k * 27 + i] /= norm;
    }
    return f;
}

// Orthonormal columns via modified Gram-Schmidt on a seeded Gaussian draw.
std::vector<double> style_projection() {
    const std::size_t rows = 139, cols = 64;
    Rng rng = Rng(kStyleEncoderSeed).derive("style.proj");
    std::vector<double> q(rows * cols);
    for (double& v : q) v = rng.gaussian();
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t p = 0; p < c; ++p) {
            double dot = 0;
            for (std::size_t r = 0; r < rows; ++r) dot += q[r * cols + c] * q[r * cols + p];
            for (std::size_t r = 0; r < rows; ++r) q[r * cols + c] -= dot * q[r * cols + p];
        }
        double norm = 0;
        for (std::size_t r = 0; r < rows; ++r) norm += q[r * cols + c] * q[r * cols + c];
        norm = std::sqrt(norm);
        for (std::size_t r = 0; r < rows; ++r) q[r * cols + c] /= norm;
    }
    return q;
}

}  // namespace

const std::array<std::string_view, kNumEmotions>& emotion_names() {
    static const std::array<std::string_view, kNumEmotions> names = {
        "amusement", "awe", "contentment", "excitement", "anger", "disgust", "fear", "sadness"};
    return names;
}

int emotion_index(std::string_view name) {
    const auto& names = emotion_names();
    for (int i = 0; i < kNumEmotions; ++i)
        if (names[static_cast<std::size_t>(i)] == name) return i;
    std::ostringstream msg;
    msg << "unknown emotion '" << name << "'; valid names:";
    for (const auto& n : names) msg << " " << n;
    throw ValidationError(msg.str());
}

std::string_view emotion_name(int index) {
    if (index < 0 || index >= kNumEmotions)
        throw ValidationError("emotion index " + std::to_string(index) + " out of range 0..7");
    return emotion_names()[static_cast<std::size_t>(index)];
}

template <class S>
Tensor<S> encode_emotion(int index) {
    (void)emotion_name(index);
    Tensor<S> v = Tensor<S>::zeros({static_cast<std::size_t>(kNumEmotions)});
    v.data[static_cast<std::size_t>(index)] = S(1);
    return v;
}

bool content_side_supported(std::size_t side) { return side == 8 || side == 16 || side == 32; }

template <class S>
Tensor<S> content_raw_features(const Image& img) {
    if (img.h != img.w || !content_side_supported(img.h))
        throw ValidationError("encode_content: expected a 32x32x3 image (8 or 16 square accepted for reduced "
                              "checks), got " +
                              std::to_string(img.h) + "x" + std::to_string(img.w));
    const std::size_t side = img.h;
    const std::size_t patch = side / 4;
    const std::vector<float> lum = luma(img);
    const std::vector<float> edges = sobel_magnitude(lum, side, side);

    Tensor<S> raw = Tensor<S>::zeros({kContentTokenCount, kRawFeatureDim});
    for (std::size_t gy = 0; gy < 4; ++gy)
        for (std::size_t gx = 0; gx < 4; ++gx) {
            const std::size_t tok = gy * 4 + gx;
            double mean[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
            double edge_sum = 0, luma_sum = 0;
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t px = 0; px < patch; ++px) {
                    const std::size_t y = gy * patch + py, x = gx * patch + px;
                    for (std::size_t c = 0; c < 3; ++c) {
                        const double v = img.at(c, y, x);
                        mean[c] += v;
                        sq[c] += v * v;
                    }
                    edge_sum += edges[y * side + x];
                    luma_sum += lum[y * side + x];
                }
            const double n = static_cast<double>(patch * patch);
            for (std::size_t c = 0; c < 3; ++c) {
                const double m = mean[c] / n;
                raw.at(tok, c) = static_cast<S>(m);
                raw.at(tok, 3 + c) = static_cast<S>(std::sqrt(std::max(0.0, sq[c] / n - m * m)));
            }
            raw.at(tok, 6) = static_cast<S>(edge_sum / n);
            raw.at(tok, 7) = static_cast<S>(luma_sum / n);
        }
    return raw;
}

template <class S>
const Tensor<S>& content_posenc() {
    static const Tensor<S> table = [] {
        Tensor<S> pe = Tensor<S>::zeros({kContentTokenCount, kEmbedDim});
        for (std::size_t gy = 0; gy < 4; ++gy)
            for (std::size_t gx = 0; gx < 4; ++gx) {
                const std::size_t tok = gy * 4 + gx;
                for (std::size_t i = 0; i < 16; ++i) {
                    const double freq = std::pow(10000.0, -static_cast<double>(i) / 16.0);
                    pe.at(tok, 2 * i) = static_cast<S>(std::sin(static_cast<double>(gx) * freq));
                    pe.at(tok, 2 * i + 1) = static_cast<S>(std::cos(static_cast<double>(gx) * freq));
                    pe.at(tok, 32 + 2 * i) = static_cast<S>(std::sin(static_cast<double>(gy) * freq));
                    pe.at(tok, 32 + 2 * i + 1) = static_cast<S>(std::cos(static_cast<double>(gy) * freq));
                }
            }
        return pe;
    }();
    return table;
}

template <class S>
void add_content_params(ParamSet<S>& ps, Rng rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(kRawFeatureDim));
    ps.add("content.proj.w", Tensor<S>::random_normal({kRawFeatureDim, kEmbedDim}, rng.derive("content.proj.w"), sd));
    ps.add("content.proj.b", Tensor<S>::zeros({kEmbedDim}));
}

template <class S>
NodeId content_tokens_node(Tape<S>& tape, const Tensor<S>& raw, const ParamSet<S>& ps) {
    NodeId projected = affine(tape, tape.constant(raw), tape.param(ps, "content.proj.w"),
                              tape.param(ps, "content.proj.b"));
    return tape.add(projected, tape.constant(content_posenc<S>()));
}

template <class S>
Tensor<S> encode_content(const Image& img, const ParamSet<S>& ps) {
    Tape<S> tape;
    return tape.value(content_tokens_node(tape, content_raw_features<S>(img), ps));
}

template <class S>
Tensor<S> encode_style(const Image& img) {
    if (img.h != img.w || !content_side_supported(img.h))
        throw ValidationError("encode_style: expected a 32x32x3 image (8 or 16 square accepted for reduced "
                              "checks), got " +
                              std::to_string(img.h) + "x" + std::to_string(img.w));
    static const std::vector<double> filters = style_filters();
    static const std::vector<double> proj = style_projection();

    const std::size_t h = img.h, w = img.w, hw = h * w;
    std::vector<double> resp(16 * hw, 0.0);
    for (std::size_t k = 0; k < 16; ++k) {
        const double* f = filters.data() + k * 27;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0;
                for (std::size_t c = 0; c < 3; ++c)
                    for (int ky = -1; ky <= 1; ++ky)
                        for (int kx = -1; kx <= 1; ++kx) {
                            const long sy = static_cast<long>(y) + ky, sx = static_cast<long>(x) + kx;
                            if (sy < 0 || sy >= static_cast<long>(h) || sx < 0 || sx >= static_cast<long>(w))
                                continue;
                            acc += static_cast<double>(img.at(c, static_cast<std::size_t>(sy),
                                                              static_cast<std::size_t>(sx))) *
                                   f[(c * 3 + static_cast<std::size_t>(ky + 1)) * 3 +
                                     static_cast<std::size_t>(kx + 1)];
                        }
                resp[k * hw + y * w + x] = acc;
            }
    }

    std::vector<double> vec;
    vec.reserve(139);
    for (std::size_t a = 0; a < 16; ++a)
        for (std::size_t b = a; b < 16; ++b) {
            double dot = 0;
            for (std::size_t i = 0; i < hw; ++i) dot += resp[a * hw + i] * resp[b * hw + i];
            vec.push_back(dot / static_cast<double>(hw));
        }
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0;
        for (std::size_t i = 0; i < hw; ++i) m += img.data[c * hw + i];
        vec.push_back(m / static_cast<double>(hw));
    }

    Tensor<S> out = Tensor<S>::zeros({kStyleDim});
    for (std::size_t j = 0; j < kStyleDim; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < 139; ++i) acc += proj[i * kStyleDim + j] * vec[i];
        out.data[j] = static_cast<S>(acc);
    }
    return out;
}

template <class S>
void add_text_params(ParamSet<S>& ps, Rng rng) {
    ps.add("text.embed", Tensor<S>::random_normal({kTextVocab, kEmbedDim}, rng.derive("text.embed"), 0.3));
}

template <class S>
Tensor<S> encode_text(const std::string& prompt, const ParamSet<S>& ps) {
    std::istringstream in(prompt);
    std::vector<std::string> words;
    for (std::string word; in >> word;) words.push_back(word);
    if (words.empty()) throw ValidationError("encode_text: prompt has no tokens");

    const Tensor<S>& table = ps.param("text.embed");
    Tensor<S> tokens = Tensor<S>::zeros({kContentTokenCount, kEmbedDim});
    for (std::size_t i = 0; i < kContentTokenCount; ++i) {
        std::size_t row = 0;  // pad
        if (i < words.size()) row = 1 + Rng(kTextHashSeed).derive(words[i]).next_u64() % (kTextVocab - 1);
        for (std::size_t j = 0; j < kEmbedDim; ++j) tokens.at(i, j) = table.at(row, j);
    }
    const Tensor<S>& pe = content_posenc<S>();
    for (std::size_t i = 0; i < tokens.numel(); ++i) tokens.data[i] += pe.data[i];
    return tokens;
}

template Tensor<float> encode_emotion<float>(int);
template Tensor<double> encode_emotion<double>(int);
template Tensor<float> content_raw_features<float>(const Image&);
template Tensor<double> content_raw_features<double>(const Image&);
template const Tensor<float>& content_posenc<float>();
template const Tensor<double>& content_posenc<double>();
template void add_content_params<float>(ParamSet<float>&, Rng);
template void add_content_params<double>(ParamSet<double>&, Rng);
template NodeId content_tokens_node<float>(Tape<float>&, const Tensor<float>&, const ParamSet<float>&);
template NodeId content_tokens_node<double>(Tape<double>&, const Tensor<double>&, const ParamSet<double>&);
template Tensor<float> encode_content<float>(const Image&, const ParamSet<float>&);
template Tensor<double> encode_content<double>(const Image&, const ParamSet<double>&);
template Tensor<float> encode_style<float>(const Image&);
template Tensor<double> encode_style<double>(const Image&);
template void add_text_params<float>(ParamSet<float>&, Rng);
template void add_text_params<double>(ParamSet<double>&, Rng);
template Tensor<float> encode_text<float>(const std::string&, const ParamSet<float>&);
template Tensor<double> encode_text<double>(const std::string&, const ParamSet<double>&);

}  // namespace emostyle
