#include "emostyle/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "emostyle/encoders.hpp"
#include "emostyle/errors.hpp"
#include "emostyle/optimizer.hpp"
#include "emostyle/tape.hpp"
#include "json.hpp"

namespace emostyle {

namespace {

constexpr std::size_t kProbeSide = 32;
constexpr std::size_t kProbeFlat = 32 * 8 * 8;

template <class S>
void add_probe_params(ParamSet<S>& ps, Rng rng) {
    ps.add("probe.conv1.w", Tensor<S>::random_normal(Shape{16, 3, 3, 3}, rng.derive("c1w"),
                                                     std::sqrt(2.0 / (3 * 9))));
    ps.add("probe.conv1.b", Tensor<S>::zeros(Shape{16}));
    ps.add("probe.conv2.w", Tensor<S>::random_normal(Shape{32, 16, 3, 3}, rng.derive("c2w"),
                                                     std::sqrt(2.0 / (16 * 9))));
    ps.add("probe.conv2.b", Tensor<S>::zeros(Shape{32}));
    ps.add("probe.head.w", Tensor<S>::random_normal(Shape{kProbeFlat, 8}, rng.derive("hw"),
                                                    std::sqrt(2.0 / double(kProbeFlat))));
    ps.add("probe.head.b", Tensor<S>::zeros(Shape{8}));
}

template <class S>
struct ProbeNodes {
    NodeId w1, b1, w2, b2, hw, hb;
};

template <class S>
ProbeNodes<S> probe_param_nodes(Tape<S>& tape, const ParamSet<S>& ps) {
    return {tape.param(ps, "probe.conv1.w"), tape.param(ps, "probe.conv1.b"),
            tape.param(ps, "probe.conv2.w"), tape.param(ps, "probe.conv2.b"),
            tape.param(ps, "probe.head.w"),  tape.param(ps, "probe.head.b")};
}

template <class S>
NodeId probe_forward(Tape<S>& tape, const ProbeNodes<S>& pn, const Image& img) {
    const NodeId x = tape.constant(to_tensor<S>(img));
    const NodeId h1 = tape.avg_pool2(tape.gelu(tape.conv3x3(x, pn.w1, pn.b1)));
    const NodeId h2 = tape.avg_pool2(tape.gelu(tape.conv3x3(h1, pn.w2, pn.b2)));
    const NodeId flat = tape.reshape(h2, Shape{1, kProbeFlat});
    return tape.add_bias(tape.matmul(flat, pn.hw), pn.hb);  // {1,8}
}

template <class S>
int predict_impl(const ParamSet<S>& ps, const Image& img) {
    Tape<S> tape;
    const NodeId logits = probe_forward(tape, probe_param_nodes(tape, ps), img);
    const Tensor<S>& v = tape.value(logits);
    int best = 0;
    for (int c = 1; c < kNumEmotions; ++c)
        if (double(v.data[std::size_t(c)]) > double(v.data[std::size_t(best)])) best = c;
    return best;
}

template <class S>
double accuracy_on(const ParamSet<S>& ps, const std::vector<Image>& images,
                   const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i : idx)
        if (predict_impl(ps, images[i]) == labels[i]) ++hit;
    return double(hit) / double(idx.size());
}

void check_fraction(double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw ValidationError(std::string("report: ") + name + " must be a fraction in [0,1]");
}

void check_nonneg(double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0)
        throw ValidationError(std::string("report: ") + name + " must be finite and non-negative");
}

}  // namespace

template <class S>
Probe<S> train_probe(const std::vector<Image>& images, const std::vector<int>& labels,
                     const ProbeConfig& cfg) {
    if (images.empty()) throw ValidationError("train_probe: no images");
    if (images.size() != labels.size())
        throw ValidationError("train_probe: " + std::to_string(images.size()) + " images vs " +
                              std::to_string(labels.size()) + " labels");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0) || !(cfg.held_out > 0.0) ||
        !(cfg.held_out < 1.0) || !(cfg.stop_at > 0.0) || cfg.stop_at > 1.0)
        throw ValidationError("train_probe: bad config");
    std::array<bool, 8> seen{};
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= kNumEmotions)
            throw ValidationError("train_probe: label " + std::to_string(labels[i]) + " out of range");
        if (images[i].h != kProbeSide || images[i].w != kProbeSide)
            throw ValidationError("train_probe: images must be 32x32");
        seen[std::size_t(labels[i])] = true;
    }
    int classes = 0;
    for (bool s : seen) classes += s ? 1 : 0;
    if (classes < 2) throw ValidationError("train_probe: needs at least 2 emotion classes");

    std::vector<std::size_t> idx(images.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    shuffle(idx, Rng(cfg.seed).derive("probe.split"));
    std::size_t n_held = std::size_t(std::llround(cfg.held_out * double(images.size())));
    n_held = std::min(std::max<std::size_t>(n_held, 1), images.size() - 1);
    const std::vector<std::size_t> held(idx.end() - std::ptrdiff_t(n_held), idx.end());
    std::vector<std::size_t> train(idx.begin(), idx.end() - std::ptrdiff_t(n_held));

    Probe<S> probe;
    add_probe_params(probe.params, Rng(cfg.seed).derive("probe.init"));
    Optimizer<S> opt = Optimizer<S>::adam(cfg.learning_rate);

    for (int ep = 0; ep < cfg.epochs; ++ep) {
        shuffle(train, Rng(cfg.seed).derive("probe.epoch", std::uint64_t(ep)));
        for (std::size_t start = 0; start < train.size(); start += std::size_t(cfg.batch_size)) {
            const std::size_t end = std::min(train.size(), start + std::size_t(cfg.batch_size));
            Tape<S> tape;
            const ProbeNodes<S> pn = probe_param_nodes(tape, probe.params);
            NodeId block = -1;
            std::vector<int> targets;
            for (std::size_t i = start; i < end; ++i) {
                const NodeId logits = probe_forward(tape, pn, images[train[i]]);
                block = (block == -1) ? logits : tape.concat_rows(block, logits);
                targets.push_back(labels[train[i]]);
            }
            const NodeId loss = tape.softmax_cross_entropy(block, targets);
            if (!std::isfinite(tape.scalar(loss)))
                throw NumericError("train_probe: non-finite loss at epoch " + std::to_string(ep));
            Grads<S> g;
            tape.backward(loss, g);
            probe.params.zero_grads();
            probe.params.set_grads(g);
            opt.step(probe.params);
        }
        probe.held_out_accuracy = accuracy_on(probe.params, images, labels, held);
        if (probe.held_out_accuracy >= cfg.stop_at) break;
    }
    return probe;
}

template <class S>
Tensor<S> probe_logits(const Probe<S>& probe, const Image& img) {
    Tape<S> tape;
    const NodeId logits = probe_forward(tape, probe_param_nodes(tape, probe.params), img);
    Tensor<S> out(Shape{8});
    out.data = tape.value(logits).data;
    return out;
}

template <class S>
std::array<double, 8> probe_probs(const Probe<S>& probe, const Image& img) {
    const Tensor<S> logits = probe_logits(probe, img);
    std::array<double, 8> p{};
    double mx = -1e300;
    for (std::size_t c = 0; c < 8; ++c) mx = std::max(mx, double(logits.data[c]));
    double sum = 0.0;
    for (std::size_t c = 0; c < 8; ++c) {
        p[c] = std::exp(double(logits.data[c]) - mx);
        sum += p[c];
    }
    for (double& v : p) v /= sum;
    return p;
}

template <class S>
int probe_predict(const Probe<S>& probe, const Image& img) {
    return predict_impl(probe.params, img);
}

template <class S>
double emo_accuracy(const Probe<S>& probe, const std::vector<Image>& generated,
                    const std::vector<int>& targets) {
    if (generated.empty()) throw ValidationError("emo_accuracy: empty image set");
    if (generated.size() != targets.size())
        throw ValidationError("emo_accuracy: image/target count mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= kNumEmotions)
            throw ValidationError("emo_accuracy: target out of range");
        if (probe_predict(probe, generated[i]) == targets[i]) ++hit;
    }
    return double(hit) / double(generated.size());
}

template <class S>
double sentiment_gap(const Probe<S>& probe, const std::vector<Image>& generated,
                     const std::vector<Image>& reference, const std::vector<int>& targets) {
    if (generated.empty()) throw ValidationError("sentiment_gap: empty image set");
    if (generated.size() != reference.size() || generated.size() != targets.size())
        throw ValidationError("sentiment_gap: generated/reference/target count mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= kNumEmotions)
            throw ValidationError("sentiment_gap: target out of range");
        const std::size_t t = std::size_t(targets[i]);
        sum += std::abs(probe_probs(probe, generated[i])[t] - probe_probs(probe, reference[i])[t]);
    }
    return sum / double(generated.size());
}

template <class S>
StyleGroups<S> build_style_groups(const std::vector<Tensor<S>>& features,
                                  const std::vector<int>& emotions, const std::vector<int>& style_ids) {
    if (features.empty()) throw ValidationError("build_style_groups: empty feature set");
    if (features.size() != emotions.size() || features.size() != style_ids.size())
        throw ValidationError("build_style_groups: feature/emotion/style count mismatch");
    const Shape dim = features[0].shape;
    std::map<std::pair<int, int>, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (emotions[i] < 0 || emotions[i] >= kNumEmotions)
            throw ValidationError("build_style_groups: emotion out of range");
        if (features[i].shape != dim)
            throw ShapeError("build_style_groups: feature " + std::to_string(i) + " has shape " +
                             shape_str(features[i].shape) + ", expected " + shape_str(dim));
        members[{emotions[i], style_ids[i]}].push_back(i);
    }

    StyleGroups<S> g;
    for (const auto& [key, rows] : members) {
        std::vector<double> acc(features[0].numel(), 0.0);
        for (std::size_t r : rows)
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += double(features[r].data[j]);
        Tensor<S> centroid(dim);
        for (std::size_t j = 0; j < acc.size(); ++j) centroid.data[j] = S(acc[j] / double(rows.size()));
        g.keys.push_back(key);
        g.centroids.push_back(std::move(centroid));
    }
    double spread = 0.0;
    for (const auto& [key, rows] : members) {
        const std::size_t gi =
            std::size_t(std::find(g.keys.begin(), g.keys.end(), key) - g.keys.begin());
        for (std::size_t r : rows) spread += l2_distance(features[r], g.centroids[gi]);
    }
    g.intra_spread = spread / double(features.size());
    return g;
}

template <class S>
StyleGroups<S> build_style_groups(const Manifest& m) {
    std::vector<Tensor<S>> features;
    std::vector<int> emotions, styles;
    for (const Triplet& t : m.triplets) {
        if (t.split != Split::train) continue;
        auto [content, stylized] = load_triplet_images(m, t);
        (void)content;
        features.push_back(encode_style<S>(stylized));
        emotions.push_back(t.emotion);
        styles.push_back(t.style_id.value_or(-1));
    }
    if (features.empty()) throw ValidationError("build_style_groups: manifest has no train triplets");
    return build_style_groups(features, emotions, styles);
}

template <class S>
double style_difference(const std::vector<Tensor<S>>& features, const std::vector<int>& targets,
                        const StyleGroups<S>& groups) {
    if (features.empty()) throw ValidationError("style_difference: empty feature set");
    if (features.size() != targets.size())
        throw ValidationError("style_difference: feature/target count mismatch");
    if (groups.keys.empty()) throw ValidationError("style_difference: no style groups");
    double sum = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        double best = -1.0;
        for (std::size_t gi = 0; gi < groups.keys.size(); ++gi) {
            if (groups.keys[gi].first != targets[i]) continue;
            const double d = l2_distance(features[i], groups.centroids[gi]);
            if (best < 0.0 || d < best) best = d;
        }
        if (best < 0.0)
            throw ValidationError("style_difference: no style group for emotion '" +
                                  std::string(emotion_name(targets[i])) + "'");
        sum += best;
    }
    return sum / double(features.size());
}

template <class S>
double style_difference(const std::vector<Image>& generated, const std::vector<int>& targets,
                        const StyleGroups<S>& groups) {
    std::vector<Tensor<S>> features;
    features.reserve(generated.size());
    for (const Image& img : generated) features.push_back(encode_style<S>(img));
    return style_difference(features, targets, groups);
}

ContentPreservation content_preservation(const std::vector<Image>& content,
                                         const std::vector<Image>& generated) {
    if (content.empty()) throw ValidationError("content_preservation: empty image set");
    if (content.size() != generated.size())
        throw ValidationError("content_preservation: content/generated count mismatch");
    ContentPreservation out;
    for (std::size_t i = 0; i < content.size(); ++i) {
        out.edge_iou += edge_iou(content[i], generated[i]);
        out.ssim += ssim(content[i], generated[i]);
    }
    out.edge_iou /= double(content.size());
    out.ssim /= double(content.size());
    return out;
}

void write_report(const EvalReport& r, const std::filesystem::path& base) {
    check_fraction(r.emo_accuracy, "emo_accuracy");
    check_fraction(r.edge_iou, "edge_iou");
    check_fraction(r.ssim, "ssim");
    check_fraction(r.probe_accuracy, "probe_accuracy");
    check_nonneg(r.sentiment_gap, "sentiment_gap");
    check_nonneg(r.style_difference, "style_difference");
    check_nonneg(r.sd_baseline, "sd_baseline");
    if (r.n < 0) throw ValidationError("report: n must be non-negative");
    for (int e = 0; e < kNumEmotions; ++e) {
        check_fraction(r.per_emotion_accuracy[std::size_t(e)], "per_emotion_accuracy");
        if (r.per_emotion_count[std::size_t(e)] < 0)
            throw ValidationError("report: per_emotion_count must be non-negative");
    }

    nlohmann::ordered_json summary;
    summary["kind"] = "summary";
    summary["emo_accuracy"] = r.emo_accuracy;
    summary["sentiment_gap"] = r.sentiment_gap;
    summary["style_difference"] = r.style_difference;
    summary["sd_baseline"] = r.sd_baseline;
    summary["edge_iou"] = r.edge_iou;
    summary["ssim"] = r.ssim;
    summary["probe_accuracy"] = r.probe_accuracy;
    summary["n"] = r.n;
    summary["seed"] = r.seed;
    summary["config_hash"] = r.config_hash;

    std::filesystem::path jsonl = base;
    jsonl += ".jsonl";
    std::ofstream jf(jsonl, std::ios::binary | std::ios::trunc);
    if (!jf) throw IoError("write_report: cannot open " + jsonl.string());
    jf << summary.dump() << "\n";
    for (int e = 0; e < kNumEmotions; ++e) {
        nlohmann::ordered_json line;
        line["kind"] = "per_emotion";
        line["emotion"] = emotion_name(e);
        line["index"] = e;
        line["count"] = r.per_emotion_count[std::size_t(e)];
        line["emo_accuracy"] = r.per_emotion_accuracy[std::size_t(e)];
        jf << line.dump() << "\n";
    }
    jf.flush();
    if (!jf) throw IoError("write_report: failed writing " + jsonl.string());

    std::filesystem::path txt = base;
    txt += ".txt";
    std::ofstream tf(txt, std::ios::binary | std::ios::trunc);
    if (!tf) throw IoError("write_report: cannot open " + txt.string());
    char buf[160];
    tf << "emotion stylization evaluation\n";
    tf << "==============================\n";
    tf << "config hash        : " << r.config_hash << "\n";
    tf << "seed               : " << r.seed << "\n";
    tf << "images evaluated   : " << r.n << "\n";
    std::snprintf(buf, sizeof buf, "probe held-out acc : %.4f\n", r.probe_accuracy);
    tf << buf;
    std::snprintf(buf, sizeof buf, "emo accuracy       : %.4f\n", r.emo_accuracy);
    tf << buf;
    std::snprintf(buf, sizeof buf, "sentiment gap      : %.4f\n", r.sentiment_gap);
    tf << buf;
    std::snprintf(buf, sizeof buf, "style difference   : %.4f  (held-out baseline %.4f)\n",
                  r.style_difference, r.sd_baseline);
    tf << buf;
    std::snprintf(buf, sizeof buf, "edge IoU           : %.4f\n", r.edge_iou);
    tf << buf;
    std::snprintf(buf, sizeof buf, "SSIM               : %.4f\n", r.ssim);
    tf << buf;
    tf << "per-emotion accuracy:\n";
    for (int e = 0; e < kNumEmotions; ++e) {
        std::snprintf(buf, sizeof buf, "  %-12s n=%-5d %.4f\n", std::string(emotion_name(e)).c_str(),
                      r.per_emotion_count[std::size_t(e)], r.per_emotion_accuracy[std::size_t(e)]);
        tf << buf;
    }
    tf.flush();
    if (!tf) throw IoError("write_report: failed writing " + txt.string());
}

EvalReport read_report(const std::filesystem::path& jsonl) {
    std::ifstream in(jsonl, std::ios::binary);
    if (!in) throw IoError("read_report: cannot open " + jsonl.string());
    EvalReport r;
    bool have_summary = false;
    std::array<bool, 8> have_emotion{};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            const std::string kind = j.at("kind").get<std::string>();
            if (kind == "summary") {
                r.emo_accuracy = j.at("emo_accuracy").get<double>();
                r.sentiment_gap = j.at("sentiment_gap").get<double>();
                r.style_difference = j.at("style_difference").get<double>();
                r.sd_baseline = j.at("sd_baseline").get<double>();
                r.edge_iou = j.at("edge_iou").get<double>();
                r.ssim = j.at("ssim").get<double>();
                r.probe_accuracy = j.at("probe_accuracy").get<double>();
                r.n = j.at("n").get<int>();
                r.seed = j.at("seed").get<std::uint64_t>();
                r.config_hash = j.at("config_hash").get<std::string>();
                have_summary = true;
            } else if (kind == "per_emotion") {
                const int e = j.at("index").get<int>();
                if (e < 0 || e >= kNumEmotions)
                    throw ValidationError("emotion index out of range");
                r.per_emotion_count[std::size_t(e)] = j.at("count").get<int>();
                r.per_emotion_accuracy[std::size_t(e)] = j.at("emo_accuracy").get<double>();
                have_emotion[std::size_t(e)] = true;
            } else {
                throw ValidationError("unknown record kind '" + kind + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("read_report: " + jsonl.string() + " line " + std::to_string(lineno) +
                                  ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("read_report: " + jsonl.string() + " line " + std::to_string(lineno) +
                                  ": " + e.what());
        }
    }
    if (!have_summary) throw ValidationError("read_report: no summary record in " + jsonl.string());
    for (int e = 0; e < kNumEmotions; ++e)
        if (!have_emotion[std::size_t(e)])
            throw ValidationError("read_report: missing per-emotion record for '" +
                                  std::string(emotion_name(e)) + "'");
    return r;
}

template struct Probe<float>;
template struct Probe<double>;
template Probe<float> train_probe<float>(const std::vector<Image>&, const std::vector<int>&,
                                         const ProbeConfig&);
template Probe<double> train_probe<double>(const std::vector<Image>&, const std::vector<int>&,
                                           const ProbeConfig&);
template Tensor<float> probe_logits<float>(const Probe<float>&, const Image&);
template Tensor<double> probe_logits<double>(const Probe<double>&, const Image&);
template std::array<double, 8> probe_probs<float>(const Probe<float>&, const Image&);
template std::array<double, 8> probe_probs<double>(const Probe<double>&, const Image&);
template int probe_predict<float>(const Probe<float>&, const Image&);
template int probe_predict<double>(const Probe<double>&, const Image&);
template double emo_accuracy<float>(const Probe<float>&, const std::vector<Image>&,
                                    const std::vector<int>&);
template double emo_accuracy<double>(const Probe<double>&, const std::vector<Image>&,
                                     const std::vector<int>&);
template double sentiment_gap<float>(const Probe<float>&, const std::vector<Image>&,
                                     const std::vector<Image>&, const std::vector<int>&);
template double sentiment_gap<double>(const Probe<double>&, const std::vector<Image>&,
                                      const std::vector<Image>&, const std::vector<int>&);
template struct StyleGroups<float>;
template struct StyleGroups<double>;
template StyleGroups<float> build_style_groups<float>(const std::vector<Tensor<float>>&,
                                                      const std::vector<int>&, const std::vector<int>&);
template StyleGroups<double> build_style_groups<double>(const std::vector<Tensor<double>>&,
                                                        const std::vector<int>&,
                                                        const std::vector<int>&);
template StyleGroups<float> build_style_groups<float>(const Manifest&);
template StyleGroups<double> build_style_groups<double>(const Manifest&);
template double style_difference<float>(const std::vector<Tensor<float>>&, const std::vector<int>&,
                                        const StyleGroups<float>&);
template double style_difference<double>(const std::vector<Tensor<double>>&, const std::vector<int>&,
                                         const StyleGroups<double>&);
template double style_difference<float>(const std::vector<Image>&, const std::vector<int>&,
                                        const StyleGroups<float>&);
template double style_difference<double>(const std::vector<Image>&, const std::vector<int>&,
                                         const StyleGroups<double>&);

}  // namespace emostyle
