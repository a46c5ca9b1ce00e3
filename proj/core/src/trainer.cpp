#include "emostyle/trainer.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>

#include "emostyle/encoders.hpp"
#include "emostyle/errors.hpp"
#include "emostyle/generator.hpp"
#include "emostyle/optimizer.hpp"
#include "emostyle/rng.hpp"
#include "emostyle/tape.hpp"

namespace emostyle {

namespace {

template <class S>
double sq_dist_to_entry(const Tensor<S>& entries, std::size_t k, const Tensor<S>& f) {
    double d = 0.0;
    for (std::size_t j = 0; j < f.numel(); ++j) {
        const double diff = double(entries.at(k, j)) - double(f.data[j]);
        d += diff * diff;
    }
    return d;
}

// (1/N) sum of w * squared distance to the nearest entry, no counter bumps.
template <class S>
double stage1_loss(const StyleDicts<S>& dicts,
                   const std::vector<std::vector<Tensor<S>>>& features,
                   const std::vector<std::vector<double>>& weights, std::size_t n_total) {
    double loss = 0.0;
    for (int e = 0; e < kNumEmotions; ++e)
        for (std::size_t i = 0; i < features[std::size_t(e)].size(); ++i) {
            const Tensor<S>& f = features[std::size_t(e)][i];
            const std::size_t k = nearest_entry(f, e, dicts);
            loss += weights[std::size_t(e)][i] *
                    sq_dist_to_entry(dicts.by_emotion[std::size_t(e)].entries, k, f);
        }
    return loss / double(n_total);
}

template <class S>
Optimizer<S> make_optimizer(const TrainConfig& cfg) {
    const double lr = cfg.effective_learning_rate();
    return cfg.optimizer == "sgd" ? Optimizer<S>::sgd(lr) : Optimizer<S>::adam(lr);
}

// Final assignment pass: reset counters, assign every sample once, report the
// fraction of entries that won at least one sample.
template <class S>
double assignment_utilization(StyleDicts<S>& dicts,
                              const std::vector<std::vector<Tensor<S>>>& features,
                              const std::vector<std::vector<double>>& weights) {
    for (auto& d : dicts.by_emotion) std::fill(d.usage.begin(), d.usage.end(), std::uint64_t(0));
    for (int e = 0; e < kNumEmotions; ++e)
        for (std::size_t i = 0; i < features[std::size_t(e)].size(); ++i)
            if (weights[std::size_t(e)][i] > 0.0) quantize(features[std::size_t(e)][i], e, dicts);
    std::size_t used = 0, total = 0;
    for (const auto& d : dicts.by_emotion) {
        total += d.usage.size();
        for (std::uint64_t u : d.usage) used += u > 0 ? 1 : 0;
    }
    return total == 0 ? 0.0 : double(used) / double(total);
}

}  // namespace

template <class S>
Stage1Result<S> train_stage1_features(const std::vector<std::vector<Tensor<S>>>& features_by_emotion,
                                      const std::vector<std::vector<double>>& weights,
                                      const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.stage != 1) throw ValidationError("train_stage1: config has stage != 1");
    if (features_by_emotion.size() != std::size_t(kNumEmotions) ||
        weights.size() != std::size_t(kNumEmotions))
        throw ValidationError("train_stage1: features and weights must have 8 emotion groups");

    std::size_t n_total = 0;
    for (int e = 0; e < kNumEmotions; ++e) {
        const auto& fs = features_by_emotion[std::size_t(e)];
        const auto& ws = weights[std::size_t(e)];
        if (fs.size() != ws.size())
            throw ValidationError("train_stage1: features/weights size mismatch for emotion '" +
                                  std::string(emotion_name(e)) + "'");
        for (double w : ws) {
            if (w < 0.0 || !std::isfinite(w))
                throw ValidationError("train_stage1: emotion scores must be finite and non-negative");
            n_total += w > 0.0 ? 1 : 0;
        }
    }
    if (n_total == 0) throw ValidationError("train_stage1: empty dataset");

    Rng base(cfg.seed);
    Stage1Result<S> out;
    out.dicts = init_codebooks(features_by_emotion, cfg.tau, std::size_t(cfg.K),
                               base.derive("codebook.init"));
    out.epoch_losses.push_back(stage1_loss(out.dicts, features_by_emotion, weights, n_total));

    const std::size_t K = out.dicts.K();
    const std::size_t dim = out.dicts.dim();

    if (cfg.optimizer == "lloyd") {
        for (int ep = 0; ep < cfg.epochs; ++ep) {
            // exact weighted re-estimation; all accumulation in double
            std::vector<std::vector<double>> sums(std::size_t(kNumEmotions),
                                                  std::vector<double>(K * dim, 0.0));
            std::vector<std::vector<double>> wsum(std::size_t(kNumEmotions),
                                                  std::vector<double>(K, 0.0));
            for (int e = 0; e < kNumEmotions; ++e)
                for (std::size_t i = 0; i < features_by_emotion[std::size_t(e)].size(); ++i) {
                    const double w = weights[std::size_t(e)][i];
                    if (w <= 0.0) continue;
                    const Tensor<S>& f = features_by_emotion[std::size_t(e)][i];
                    const std::size_t k = nearest_entry(f, e, out.dicts);
                    wsum[std::size_t(e)][k] += w;
                    for (std::size_t j = 0; j < dim; ++j)
                        sums[std::size_t(e)][k * dim + j] += w * double(f.data[j]);
                }
            for (int e = 0; e < kNumEmotions; ++e) {
                Tensor<S>& entries = out.dicts.by_emotion[std::size_t(e)].entries;
                for (std::size_t k = 0; k < K; ++k) {
                    if (wsum[std::size_t(e)][k] <= 0.0) continue;  // empty cluster keeps its entry
                    for (std::size_t j = 0; j < dim; ++j)
                        entries.at(k, j) =
                            S(sums[std::size_t(e)][k * dim + j] / wsum[std::size_t(e)][k]);
                }
            }
            const double loss = stage1_loss(out.dicts, features_by_emotion, weights, n_total);
            const double prev = out.epoch_losses.back();
            if (loss > prev + 1e-9 * (1.0 + std::abs(prev)))
                throw NumericError("lloyd step increased the loss: " + std::to_string(prev) +
                                   " -> " + std::to_string(loss));
            out.epoch_losses.push_back(loss);
        }
    } else {
        ParamSet<S> ps;
        for (int e = 0; e < kNumEmotions; ++e)
            ps.add("dict." + std::to_string(e) + ".entries",
                   out.dicts.by_emotion[std::size_t(e)].entries);
        auto opt = make_optimizer<S>(cfg);

        std::vector<std::pair<int, std::size_t>> order;  // zero weights out before shuffling
        for (int e = 0; e < kNumEmotions; ++e)
            for (std::size_t i = 0; i < features_by_emotion[std::size_t(e)].size(); ++i)
                if (weights[std::size_t(e)][i] > 0.0) order.emplace_back(e, i);

        for (int ep = 0; ep < cfg.epochs; ++ep) {
            Rng ep_rng = Rng(cfg.seed).derive("stage1.epoch", std::uint64_t(ep));
            shuffle(order, ep_rng.derive("shuffle"));
            for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(cfg.batch_size)) {
                const std::size_t bsz =
                    std::min(std::size_t(cfg.batch_size), order.size() - b0);
                ps.zero_grads();
                for (std::size_t i = b0; i < b0 + bsz; ++i) {
                    const auto [e, idx] = order[i];
                    auto r = style_loss(out.dicts, e, features_by_emotion[std::size_t(e)][idx],
                                        weights[std::size_t(e)][idx]);
                    Tensor<S>& g = ps.grad("dict." + std::to_string(e) + ".entries");
                    for (std::size_t j = 0; j < dim; ++j)
                        g.at(r.k, j) += S(double(r.grad_z.data[j]) / double(bsz));
                }
                opt.step(ps);
                for (int e = 0; e < kNumEmotions; ++e)
                    out.dicts.by_emotion[std::size_t(e)].entries =
                        ps.param("dict." + std::to_string(e) + ".entries");
            }
            out.epoch_losses.push_back(
                stage1_loss(out.dicts, features_by_emotion, weights, n_total));
        }
    }

    out.final_loss = out.epoch_losses.back();
    out.utilization = assignment_utilization(out.dicts, features_by_emotion, weights);
    if (!std::isfinite(out.final_loss)) throw NumericError("stage 1 diverged to a non-finite loss");
    return out;
}

template <class S>
Stage1Result<S> train_stage1(const Manifest& m, const TrainConfig& cfg) {
    std::vector<std::vector<Tensor<S>>> features(static_cast<std::size_t>(kNumEmotions));
    std::vector<std::vector<double>> weights(static_cast<std::size_t>(kNumEmotions));
    for (const auto& t : m.triplets) {
        if (t.split != Split::train) continue;
        auto [content, stylized] = load_triplet_images(m, t);
        (void)content;
        features[std::size_t(t.emotion)].push_back(encode_style<S>(stylized));
        weights[std::size_t(t.emotion)].push_back(t.emotion_score);
    }
    return train_stage1_features(features, weights, cfg);
}

// ---- stage 2 --------------------------------------------------------------

namespace {

template <class S>
struct PreparedSample {
    Tensor<S> content;   // {3,side,side}
    Tensor<S> stylized;  // {3,side,side}
    Tensor<S> raw;       // {16,8} patch stats
    Tensor<S> onehot;    // {8}
    int emotion;
    double weight;
};

template <class S>
void accumulate_scaled(ParamSet<S>& ps, const Grads<S>& g, double w) {
    for (const auto& [name, t] : g) {
        Tensor<S>& dst = ps.grad(name);
        for (std::size_t i = 0; i < t.data.size(); ++i)
            dst.data[i] += S(w * double(t.data[i]));
    }
}

}  // namespace

template <class S>
Stage2Result<S> train_stage2_samples(const std::vector<Stage2Sample<S>>& samples,
                                     const StyleDicts<S>& dicts, const TrainConfig& cfg,
                                     const Stage2State<S>* resume,
                                     const std::filesystem::path& save_path,
                                     const ReasonerShape& rshape) {
    cfg.validate();
    if (cfg.stage != 2) throw ValidationError("train_stage2: config has stage != 2");
    if (dicts.by_emotion.size() != std::size_t(kNumEmotions))
        throw ValidationError("train_stage2: dictionary set must cover all " +
                              std::to_string(kNumEmotions) + " emotions");
    if (dicts.dim() != rshape.d_s)
        throw ShapeError("train_stage2: dictionary dim " + std::to_string(dicts.dim()) +
                         " vs reasoner d_s " + std::to_string(rshape.d_s));

    std::vector<PreparedSample<S>> prep;
    prep.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.weight < 0.0 || !std::isfinite(s.weight))
            throw ValidationError("train_stage2: emotion scores must be finite and non-negative");
        if (s.weight == 0.0) continue;  // zero weight drops out before any ordering
        if (s.emotion < 0 || s.emotion >= kNumEmotions)
            throw ValidationError("train_stage2: emotion index out of range");
        if (s.content.w != s.content.h || s.content.w != s.stylized.w || s.stylized.w != s.stylized.h)
            throw ValidationError("train_stage2: images must be square and equally sized");
        if (!content_side_supported(std::size_t(s.content.w)))
            throw ValidationError("train_stage2: unsupported image side " +
                                  std::to_string(s.content.w));
        PreparedSample<S> p{to_tensor<S>(s.content), to_tensor<S>(s.stylized),
                            content_raw_features<S>(s.content), encode_emotion<S>(s.emotion),
                            s.emotion, s.weight};
        prep.push_back(std::move(p));
    }
    if (prep.empty()) throw ValidationError("train_stage2: no samples with positive weight");

    Stage2Result<S> out;
    out.dicts = dicts;  // entries stay frozen; usage tracks training assignments
    for (auto& d : out.dicts.by_emotion) std::fill(d.usage.begin(), d.usage.end(), std::uint64_t(0));

    std::uint64_t start_epoch = 0;
    auto opt = make_optimizer<S>(cfg);
    if (resume) {
        if (resume->params.size() == 0)
            throw ValidationError("train_stage2: resume state has no parameters");
        if (resume->next_epoch > std::uint64_t(cfg.epochs))
            throw ValidationError("train_stage2: checkpoint is ahead of config epochs (" +
                                  std::to_string(resume->next_epoch) + " > " +
                                  std::to_string(cfg.epochs) + ")");
        out.state.params = resume->params;
        opt.import_state(resume->opt_state);
        start_epoch = resume->next_epoch;
    } else {
        Rng base(cfg.seed);
        add_content_params(out.state.params, base.derive("init.content"));
        add_reasoner_params(out.state.params, rshape, base.derive("init.reasoner"));
        add_velocity_params(out.state.params, base.derive("init.vel"));
        add_text_params(out.state.params, base.derive("init.text"));
    }
    ParamSet<S>& ps = out.state.params;

    const double lambda = cfg.align_weight;
    std::vector<std::size_t> order(prep.size());
    std::iota(order.begin(), order.end(), std::size_t(0));

    for (std::uint64_t ep = start_epoch; ep < std::uint64_t(cfg.epochs); ++ep) {
        Rng ep_rng = Rng(cfg.seed).derive("stage2.epoch", ep);
        std::iota(order.begin(), order.end(), std::size_t(0));
        shuffle(order, ep_rng.derive("shuffle"));

        double sum_fm = 0.0, sum_align = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(cfg.batch_size)) {
            const std::size_t bsz = std::min(std::size_t(cfg.batch_size), order.size() - b0);
            ps.zero_grads();
            for (std::size_t i = b0; i < b0 + bsz; ++i) {
                const PreparedSample<S>& p = prep[order[i]];
                Rng srng = ep_rng.derive("sample", std::uint64_t(order[i]));

                // fixed draw order: t, noise, dropout coins
                double t;
                do {
                    t = srng.uniform();
                } while (t <= 0.0);
                Tensor<S> eps(p.stylized.shape);
                for (auto& x : eps.data) x = S(srng.gaussian());
                const GuidanceDrop drop =
                    apply_guidance_dropout(cfg.drop_style, cfg.drop_content, srng);

                Tape<S> tape;
                const NodeId tokens = content_tokens_node(tape, p.raw, ps);
                const NodeId q = reason_node(tape, p.onehot, tokens, ps, rshape);
                auto [z, k] = quantize(tape.value(q), p.emotion, out.dicts);
                (void)k;
                const NodeId align = tape.sum_sq_diff(q, tape.constant(z));

                const NodeId ci = drop.content ? kNoNode : tape.constant(p.content);
                const NodeId ct = drop.content ? kNoNode : tokens;
                const NodeId st = drop.style ? kNoNode : tape.constant(z);
                const NodeId fm = fm_loss_node(tape, p.stylized, ci, ct, st, t, eps, ps);

                const NodeId total = tape.add(fm, tape.scale(align, lambda));
                const double fm_v = tape.scalar(fm);
                const double align_v = tape.scalar(align);
                if (!std::isfinite(fm_v) || !std::isfinite(align_v))
                    throw NumericError("stage 2 produced a non-finite loss at epoch " +
                                       std::to_string(ep));
                sum_fm += p.weight * fm_v;
                sum_align += p.weight * lambda * align_v;

                Grads<S> g;
                tape.backward(total, g);
                accumulate_scaled(ps, g, p.weight / double(bsz));
            }
            opt.step(ps);
        }

        out.epoch_fm.push_back(sum_fm / double(prep.size()));
        out.epoch_align.push_back(sum_align / double(prep.size()));
        out.epoch_total.push_back(out.epoch_fm.back() + out.epoch_align.back());
        if (!ps.all_finite())
            throw NumericError("stage 2 parameters went non-finite at epoch " + std::to_string(ep));

        out.state.next_epoch = ep + 1;
        if (!save_path.empty()) {
            out.state.opt_state = opt.export_state();
            save_checkpoint(save_path, make_checkpoint(cfg, out.dicts, &out.state));
        }
    }

    out.state.next_epoch = std::uint64_t(cfg.epochs);
    out.state.opt_state = opt.export_state();
    out.final_loss = out.epoch_total.empty() ? 0.0 : out.epoch_total.back();
    return out;
}

template <class S>
Stage2Result<S> train_stage2(const Manifest& m, const StyleDicts<S>& dicts, const TrainConfig& cfg,
                             const Stage2State<S>* resume, const std::filesystem::path& save_path,
                             const ReasonerShape& rshape) {
    std::vector<Stage2Sample<S>> samples;
    for (const auto& t : m.triplets) {
        if (t.split != Split::train) continue;
        auto [content, stylized] = load_triplet_images(m, t);
        samples.push_back({std::move(content), std::move(stylized), t.emotion, t.emotion_score});
    }
    return train_stage2_samples(samples, dicts, cfg, resume, save_path, rshape);
}

// ---- checkpoint composition -------------------------------------------

template <class S>
void pack_dicts(CheckpointData& d, const StyleDicts<S>& dicts) {
    auto& tm = tensor_map<S>(d);
    for (std::size_t e = 0; e < dicts.by_emotion.size(); ++e) {
        const auto& dict = dicts.by_emotion[e];
        tm.insert_or_assign("dict." + std::to_string(e) + ".entries", dict.entries);
        Tensor<double> usage(Shape{dict.usage.size()});
        for (std::size_t k = 0; k < dict.usage.size(); ++k)
            usage.data[k] = double(dict.usage[k]);  // exact below 2^53
        d.f64.insert_or_assign("dict." + std::to_string(e) + ".usage", std::move(usage));
    }
}

template <class S>
StyleDicts<S> unpack_dicts(const CheckpointData& d) {
    StyleDicts<S> out;
    const auto& tm = tensor_map<S>(d);
    for (int e = 0; e < kNumEmotions; ++e) {
        const std::string base = "dict." + std::to_string(e);
        auto eit = tm.find(base + ".entries");
        if (eit == tm.end())
            throw ValidationError("checkpoint has no dictionary for emotion '" +
                                  std::string(emotion_name(e)) + "' in this precision");
        if (eit->second.rank() != 2)
            throw ShapeError("checkpoint: " + base + ".entries must be rank 2, got " +
                             shape_str(eit->second.shape));
        StyleDict<S> dict;
        dict.entries = eit->second;
        auto uit = d.f64.find(base + ".usage");
        if (uit == d.f64.end())
            throw ValidationError("checkpoint: missing " + base + ".usage");
        if (uit->second.numel() != dict.entries.shape[0])
            throw ShapeError("checkpoint: " + base + ".usage has " +
                             std::to_string(uit->second.numel()) + " counts for K=" +
                             std::to_string(dict.entries.shape[0]));
        dict.usage.resize(uit->second.numel());
        for (std::size_t k = 0; k < dict.usage.size(); ++k)
            dict.usage[k] = std::uint64_t(std::llround(uit->second.data[k]));
        out.by_emotion.push_back(std::move(dict));
    }
    return out;
}

template <class S>
CheckpointData make_checkpoint(const TrainConfig& cfg, const StyleDicts<S>& dicts,
                               const Stage2State<S>* stage2) {
    CheckpointData d;
    d.config_text = dump_config(cfg);
    d.rng_key = cfg.seed;
    d.rng_counter = stage2 ? stage2->next_epoch : std::uint64_t(cfg.epochs);
    pack_dicts(d, dicts);
    if (stage2) {
        pack_params(d, "params.", stage2->params);
        auto& tm = tensor_map<S>(d);
        for (const auto& [name, t] : stage2->opt_state) tm.insert_or_assign(name, t);
    }
    return d;
}

template <class S>
Stage2State<S> load_stage2_state(const CheckpointData& d) {
    Stage2State<S> out;
    out.params = unpack_params<S>(d, "params.");
    if (out.params.size() == 0)
        throw ValidationError("checkpoint holds no stage-2 parameters in this precision");
    for (const auto& [name, t] : tensor_map<S>(d))
        if (name == "opt.step" || name.rfind("opt.", 0) == 0) out.opt_state.emplace(name, t);
    out.next_epoch = d.rng_counter;
    return out;
}

template Stage1Result<float> train_stage1_features<float>(const std::vector<std::vector<Tensor<float>>>&,
                                                          const std::vector<std::vector<double>>&,
                                                          const TrainConfig&);
template Stage1Result<double> train_stage1_features<double>(
    const std::vector<std::vector<Tensor<double>>>&, const std::vector<std::vector<double>>&,
    const TrainConfig&);
template Stage1Result<float> train_stage1<float>(const Manifest&, const TrainConfig&);
template Stage1Result<double> train_stage1<double>(const Manifest&, const TrainConfig&);
template Stage2Result<float> train_stage2_samples<float>(const std::vector<Stage2Sample<float>>&,
                                                         const StyleDicts<float>&, const TrainConfig&,
                                                         const Stage2State<float>*,
                                                         const std::filesystem::path&,
                                                         const ReasonerShape&);
template Stage2Result<double> train_stage2_samples<double>(const std::vector<Stage2Sample<double>>&,
                                                           const StyleDicts<double>&,
                                                           const TrainConfig&,
                                                           const Stage2State<double>*,
                                                           const std::filesystem::path&,
                                                           const ReasonerShape&);
template Stage2Result<float> train_stage2<float>(const Manifest&, const StyleDicts<float>&,
                                                 const TrainConfig&, const Stage2State<float>*,
                                                 const std::filesystem::path&, const ReasonerShape&);
template Stage2Result<double> train_stage2<double>(const Manifest&, const StyleDicts<double>&,
                                                   const TrainConfig&, const Stage2State<double>*,
                                                   const std::filesystem::path&, const ReasonerShape&);
template void pack_dicts<float>(CheckpointData&, const StyleDicts<float>&);
template void pack_dicts<double>(CheckpointData&, const StyleDicts<double>&);
template StyleDicts<float> unpack_dicts<float>(const CheckpointData&);
template StyleDicts<double> unpack_dicts<double>(const CheckpointData&);
template CheckpointData make_checkpoint<float>(const TrainConfig&, const StyleDicts<float>&,
                                               const Stage2State<float>*);
template CheckpointData make_checkpoint<double>(const TrainConfig&, const StyleDicts<double>&,
                                                const Stage2State<double>*);
template Stage2State<float> load_stage2_state<float>(const CheckpointData&);
template Stage2State<double> load_stage2_state<double>(const CheckpointData&);

}  // namespace emostyle
