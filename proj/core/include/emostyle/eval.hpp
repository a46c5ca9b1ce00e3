#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "emostyle/dataset.hpp"
#include "emostyle/image.hpp"
#include "emostyle/params.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

struct ProbeConfig {
    int epochs = 20;
    int batch_size = 32;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
    double held_out = 0.2;  // fraction carved off for the accuracy gate
    double stop_at = 0.97;  // early stop once held-out accuracy reaches this
};

// Two conv blocks (16 then 32 channels, 2x pool each) and an affine head to 8
// logits. Train it on dataset stylized images only; feeding generated outputs
// back in would let the generator grade itself.
template <class S>
struct Probe {
    ParamSet<S> params;
    double held_out_accuracy = 0.0;
};

// Deterministic in (images, labels, cfg). Needs >= 2 distinct labels and
// 32x32 inputs; the held-out slice always keeps at least one image.
template <class S>
Probe<S> train_probe(const std::vector<Image>& images, const std::vector<int>& labels,
                     const ProbeConfig& cfg);

template <class S>
Tensor<S> probe_logits(const Probe<S>& probe, const Image& img);

// Softmax in double; sums to 1 up to rounding.
template <class S>
std::array<double, 8> probe_probs(const Probe<S>& probe, const Image& img);

// Argmax, ties to the lowest index.
template <class S>
int probe_predict(const Probe<S>& probe, const Image& img);

// Fraction of images whose predicted emotion equals the target.
template <class S>
double emo_accuracy(const Probe<S>& probe, const std::vector<Image>& generated,
                    const std::vector<int>& targets);

// Mean |p(target | generated) - p(target | reference)| over matched pairs.
template <class S>
double sentiment_gap(const Probe<S>& probe, const std::vector<Image>& generated,
                     const std::vector<Image>& reference, const std::vector<int>& targets);

// Style-feature centroids per (emotion, style_id) group; style_id -1 pools a
// whole emotion into one group. intra_spread is the mean member distance to
// its own centroid, the natural scale for style_difference values.
template <class S>
struct StyleGroups {
    std::vector<std::pair<int, int>> keys;
    std::vector<Tensor<S>> centroids;
    double intra_spread = 0.0;
};

template <class S>
StyleGroups<S> build_style_groups(const std::vector<Tensor<S>>& features,
                                  const std::vector<int>& emotions, const std::vector<int>& style_ids);

// Groups from the train split's stylized images.
template <class S>
StyleGroups<S> build_style_groups(const Manifest& m);

// Mean distance from each feature to the nearest centroid among its target
// emotion's groups.
template <class S>
double style_difference(const std::vector<Tensor<S>>& features, const std::vector<int>& targets,
                        const StyleGroups<S>& groups);
template <class S>
double style_difference(const std::vector<Image>& generated, const std::vector<int>& targets,
                        const StyleGroups<S>& groups);

struct ContentPreservation {
    double edge_iou = 0.0;
    double ssim = 0.0;
};

// Pairwise means over matched (content, generated) lists.
ContentPreservation content_preservation(const std::vector<Image>& content,
                                         const std::vector<Image>& generated);

struct EvalReport {
    double emo_accuracy = 0.0;
    double sentiment_gap = 0.0;
    double style_difference = 0.0;
    double sd_baseline = 0.0;  // style_difference of held-out ground-truth stylized images
    double edge_iou = 0.0;
    double ssim = 0.0;
    double probe_accuracy = 0.0;  // the probe's held-out gate measurement
    std::array<double, 8> per_emotion_accuracy{};
    std::array<int, 8> per_emotion_count{};
    int n = 0;  // generated images evaluated
    std::uint64_t seed = 0;
    std::string config_hash;
};

// Writes <base>.jsonl (one summary line, one line per emotion) and <base>.txt.
// Rejects non-finite metrics and fractions outside [0,1].
void write_report(const EvalReport& r, const std::filesystem::path& base);

// Parses the .jsonl back; numeric fields round-trip exactly.
EvalReport read_report(const std::filesystem::path& jsonl);

}  // namespace emostyle
