#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "emostyle/checkpoint.hpp"
#include "emostyle/config.hpp"
#include "emostyle/dataset.hpp"
#include "emostyle/image.hpp"
#include "emostyle/params.hpp"
#include "emostyle/quantizer.hpp"
#include "emostyle/reasoner.hpp"

namespace emostyle {

// ---- stage 1: prototype learning --------------------------------------

template <class S>
struct Stage1Result {
    StyleDicts<S> dicts;  // usage counters hold the final assignment pass
    double final_loss = 0.0;
    double utilization = 0.0;  // used entries / all entries, final assignments
    // [0] is the post-init loss, then one entry per epoch (full-data, post-update)
    std::vector<double> epoch_losses;
};

// Dictionary-only descent on weighted squared distances. cfg.optimizer picks
// sgd/adam minibatch descent or "lloyd", an exact weighted k-means
// re-estimation per epoch whose loss is asserted non-increasing.
// features_by_emotion/weights are indexed [emotion][sample].
template <class S>
Stage1Result<S> train_stage1_features(const std::vector<std::vector<Tensor<S>>>& features_by_emotion,
                                      const std::vector<std::vector<double>>& weights,
                                      const TrainConfig& cfg);

// encode_style over the train split's stylized images, then the features path.
template <class S>
Stage1Result<S> train_stage1(const Manifest& m, const TrainConfig& cfg);

// ---- stage 2: emotion-style alignment ----------------------------------

template <class S>
struct Stage2Sample {
    Image content;
    Image stylized;
    int emotion = 0;
    double weight = 1.0;  // e_n; non-positive samples are dropped before batching
};

// Everything that evolves across epochs; the unit of checkpoint/resume.
template <class S>
struct Stage2State {
    ParamSet<S> params;                           // content.* reasoner.* vel.* text.*
    std::map<std::string, Tensor<S>> opt_state;   // optimizer export
    std::uint64_t next_epoch = 0;
};

template <class S>
struct Stage2Result {
    Stage2State<S> state;
    StyleDicts<S> dicts;  // pass-through, with training-time assignment counts
    // per-epoch weighted means over the train samples
    std::vector<double> epoch_total;
    std::vector<double> epoch_fm;
    std::vector<double> epoch_align;
    double final_loss = 0.0;
};

// Joint descent of e_n * (L_FM + lambda * L_align) over reasoner, content
// projection, and velocity params; dictionaries stay frozen (the align target
// z is a constant, so quantization never feeds gradient back). Every random
// draw is keyed by (seed, epoch, sample index), so resuming from an
// epoch-boundary checkpoint reproduces the uninterrupted run bit for bit.
// With save_path set, a checkpoint lands there after every epoch.
template <class S>
Stage2Result<S> train_stage2_samples(const std::vector<Stage2Sample<S>>& samples,
                                     const StyleDicts<S>& dicts, const TrainConfig& cfg,
                                     const Stage2State<S>* resume = nullptr,
                                     const std::filesystem::path& save_path = {},
                                     const ReasonerShape& rshape = {});

template <class S>
Stage2Result<S> train_stage2(const Manifest& m, const StyleDicts<S>& dicts, const TrainConfig& cfg,
                             const Stage2State<S>* resume = nullptr,
                             const std::filesystem::path& save_path = {},
                             const ReasonerShape& rshape = {});

// ---- checkpoint composition ---------------------------------------------

// "dict.<e>.entries" in the scalar map of S, "dict.<e>.usage" as exact f64.
template <class S>
void pack_dicts(CheckpointData& d, const StyleDicts<S>& dicts);
template <class S>
StyleDicts<S> unpack_dicts(const CheckpointData& d);

// The trainer's randomness is fully determined by (seed, epoch), so the
// stored RNG state is exactly that pair: rng_key = seed, rng_counter = next
// epoch. stage2 == nullptr writes a stage-1 checkpoint (dicts only).
template <class S>
CheckpointData make_checkpoint(const TrainConfig& cfg, const StyleDicts<S>& dicts,
                               const Stage2State<S>* stage2 = nullptr);

// Rebuilds params ("params." prefix stripped), optimizer state ("opt.*" kept
// verbatim), and the epoch cursor. Throws if the checkpoint has no stage-2
// params in the precision of S.
template <class S>
Stage2State<S> load_stage2_state(const CheckpointData& d);

}  // namespace emostyle
