#pragma once

#include <cstdint>
#include <string>

#include "emostyle/image.hpp"
#include "emostyle/params.hpp"
#include "emostyle/quantizer.hpp"
#include "emostyle/reasoner.hpp"

namespace emostyle {

struct InferOptions {
    int steps = 50;
    double s_style = 1.0;
    double s_content = 1.0;
    std::uint64_t seed = 0;
    int style_index = -1;  // >= 0 picks that dictionary entry directly, skipping the reasoner
};

// Content-image path: encode, reason, snap to the nearest prototype (no usage
// bump), then guided sampling at the content's resolution.
template <class S>
Image infer_stylized(const ParamSet<S>& params, const StyleDicts<S>& dicts, const ReasonerShape& rshape,
                     const Image& content, int emotion, const InferOptions& opts);

// Prompt path: text tokens stand in for the content tokens and no image
// conditioning is offered, so the sampler leans on the learned nulls.
template <class S>
Image infer_stylized_prompt(const ParamSet<S>& params, const StyleDicts<S>& dicts,
                            const ReasonerShape& rshape, const std::string& prompt, int emotion,
                            std::size_t side, const InferOptions& opts);

}  // namespace emostyle
