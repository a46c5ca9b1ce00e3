#pragma once

#include <cstdint>
#include <vector>

#include "emostyle/rng.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

// One dictionary per emotion. Entries stay pairwise distinct (L2 > 1e-8)
// from initialization on; usage counters record quantize() assignments.
// Counters are plain integers: concurrent readers are fine, concurrent
// writers must merge per-thread counts themselves.
template <class S>
struct StyleDict {
    Tensor<S> entries;                 // {K, d}
    std::vector<std::uint64_t> usage;  // K
};

template <class S>
struct StyleDicts {
    std::vector<StyleDict<S>> by_emotion;  // size 8, indexed by emotion

    std::size_t K() const { return by_emotion.empty() ? 0 : by_emotion[0].entries.shape[0]; }
    std::size_t dim() const { return by_emotion.empty() ? 0 : by_emotion[0].entries.shape[1]; }
};

// Threshold admission in seeded scan order, then farthest-point fill; an
// emotion whose features cannot fill K distinct entries gets jittered
// duplicates (magnitude 1e-3) and a warning on stderr.
template <class S>
StyleDicts<S> init_codebooks(const std::vector<std::vector<Tensor<S>>>& features_by_emotion, double tau,
                             std::size_t K, Rng rng);

template <class S>
struct QuantizeResult {
    Tensor<S> z;    // copy of the chosen entry
    std::size_t k;  // its index
};

// Nearest entry by L2, ties to the lowest index. Bumps the usage counter.
template <class S>
QuantizeResult<S> quantize(const Tensor<S>& q, int emotion, StyleDicts<S>& dicts);

// Same scan without the counter side effect.
template <class S>
std::size_t nearest_entry(const Tensor<S>& q, int emotion, const StyleDicts<S>& dicts);

template <class S>
struct StyleLossResult {
    double loss;
    std::size_t k;
    Tensor<S> grad_z;  // d(loss)/d(entries[k])
};

// Assigns feature to its nearest prototype (bumping usage), then returns
// weight * squared distance and the gradient 2*weight*(z - feature), which
// touches the chosen entry only.
template <class S>
StyleLossResult<S> style_loss(StyleDicts<S>& dicts, int emotion, const Tensor<S>& feature, double weight);

struct CodebookStats {
    std::vector<std::uint64_t> usage;
    double perplexity;  // exp(entropy); 0 when nothing was assigned
};

template <class S>
std::vector<CodebookStats> codebook_stats(const StyleDicts<S>& dicts);

}  // namespace emostyle
