#include "emostyle/pipeline.hpp"

#include "emostyle/encoders.hpp"
#include "emostyle/errors.hpp"
#include "emostyle/generator.hpp"

namespace emostyle {

namespace {

template <class S>
Tensor<S> pick_style(const StyleDicts<S>& dicts, int emotion, const Tensor<S>* query, int style_index) {
    if (emotion < 0 || emotion >= kNumEmotions)
        throw ValidationError("infer: emotion index " + std::to_string(emotion) + " out of range");
    if (dicts.by_emotion.size() != std::size_t(kNumEmotions))
        throw ValidationError("infer: dictionary set must cover all " + std::to_string(kNumEmotions) +
                              " emotions");
    const Tensor<S>& entries = dicts.by_emotion[std::size_t(emotion)].entries;
    std::size_t k;
    if (style_index >= 0) {
        if (std::size_t(style_index) >= entries.shape[0])
            throw ValidationError("infer: style index " + std::to_string(style_index) + " >= K = " +
                                  std::to_string(entries.shape[0]));
        k = std::size_t(style_index);
    } else {
        k = nearest_entry(*query, emotion, dicts);
    }
    Tensor<S> z(Shape{entries.shape[1]});
    for (std::size_t j = 0; j < z.numel(); ++j) z.data[j] = entries.at(k, j);
    return z;
}

}  // namespace

template <class S>
Image infer_stylized(const ParamSet<S>& params, const StyleDicts<S>& dicts, const ReasonerShape& rshape,
                     const Image& content, int emotion, const InferOptions& opts) {
    if (content.h != content.w || !content_side_supported(content.w))
        throw ValidationError("infer: unsupported content image size " + std::to_string(content.w) + "x" +
                              std::to_string(content.h));
    if (dicts.dim() != rshape.d_s)
        throw ShapeError("infer: dictionary dim " + std::to_string(dicts.dim()) + " vs reasoner d_s " +
                         std::to_string(rshape.d_s));
    const Tensor<S> tokens = encode_content<S>(content, params);
    Tensor<S> z;
    if (opts.style_index >= 0) {
        z = pick_style<S>(dicts, emotion, nullptr, opts.style_index);
    } else {
        const Tensor<S> q = reason(encode_emotion<S>(emotion), tokens, params, rshape);
        z = pick_style<S>(dicts, emotion, &q, -1);
    }
    const Tensor<S> cimg = to_tensor<S>(content);
    return sample<S>(&tokens, &cimg, &z, content.w, opts.steps, opts.s_style, opts.s_content, opts.seed,
                     params);
}

template <class S>
Image infer_stylized_prompt(const ParamSet<S>& params, const StyleDicts<S>& dicts,
                            const ReasonerShape& rshape, const std::string& prompt, int emotion,
                            std::size_t side, const InferOptions& opts) {
    if (!content_side_supported(side))
        throw ValidationError("infer: unsupported output side " + std::to_string(side));
    if (dicts.dim() != rshape.d_s)
        throw ShapeError("infer: dictionary dim " + std::to_string(dicts.dim()) + " vs reasoner d_s " +
                         std::to_string(rshape.d_s));
    const Tensor<S> tokens = encode_text<S>(prompt, params);
    Tensor<S> z;
    if (opts.style_index >= 0) {
        z = pick_style<S>(dicts, emotion, nullptr, opts.style_index);
    } else {
        const Tensor<S> q = reason(encode_emotion<S>(emotion), tokens, params, rshape);
        z = pick_style<S>(dicts, emotion, &q, -1);
    }
    return sample<S>(&tokens, nullptr, &z, side, opts.steps, opts.s_style, opts.s_content, opts.seed,
                     params);
}

template Image infer_stylized<float>(const ParamSet<float>&, const StyleDicts<float>&, const ReasonerShape&,
                                     const Image&, int, const InferOptions&);
template Image infer_stylized<double>(const ParamSet<double>&, const StyleDicts<double>&,
                                      const ReasonerShape&, const Image&, int, const InferOptions&);
template Image infer_stylized_prompt<float>(const ParamSet<float>&, const StyleDicts<float>&,
                                            const ReasonerShape&, const std::string&, int, std::size_t,
                                            const InferOptions&);
template Image infer_stylized_prompt<double>(const ParamSet<double>&, const StyleDicts<double>&,
                                             const ReasonerShape&, const std::string&, int, std::size_t,
                                             const InferOptions&);

}  // namespace emostyle
