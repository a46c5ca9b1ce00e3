#include "emostyle/quantizer.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>

#include "emostyle/encoders.hpp"
#include "emostyle/errors.hpp"

namespace emostyle {

namespace {

constexpr double kDistinctness = 1e-8;

template <class S>
double sq_l2(const Tensor<S>& a, const S* b, std::size_t d) {
    double acc = 0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = static_cast<double>(a.data[i]) - static_cast<double>(b[i]);
        acc += diff * diff;
    }
    return acc;
}

// Cosine with the degenerate cases pinned: exact duplicates always read as
// similarity 1 (so they are never admitted twice), lone zero vectors as 0.
template <class S>
double cosine(const Tensor<S>& a, const S* b, std::size_t d) {
    if (sq_l2(a, b, d) <= kDistinctness * kDistinctness) return 1.0;
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < d; ++i) {
        const double x = a.data[i], y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

}  // namespace

template <class S>
StyleDicts<S> init_codebooks(const std::vector<std::vector<Tensor<S>>>& features_by_emotion, double tau,
                             std::size_t K, Rng rng) {
    if (features_by_emotion.size() != static_cast<std::size_t>(kNumEmotions))
        throw ValidationError("init_codebooks: want features for all 8 emotions, got " +
                              std::to_string(features_by_emotion.size()));
    if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("init_codebooks: tau must be in (0,1)");
    if (K < 1 || K > 64) throw ValidationError("init_codebooks: K must be in 1..64");

    std::size_t d = 0;
    for (const auto& group : features_by_emotion)
        for (const auto& f : group) {
            if (f.rank() != 1) throw ShapeError("init_codebooks: feature must be rank 1, got " + shape_str(f.shape));
            if (d == 0) d = f.shape[0];
            if (f.shape[0] != d) throw ShapeError("init_codebooks: mixed feature dims");
        }

    StyleDicts<S> dicts;
    for (int e = 0; e < kNumEmotions; ++e) {
        const auto& group = features_by_emotion[static_cast<std::size_t>(e)];
        if (group.empty())
            throw ValidationError("init_codebooks: emotion '" + std::string(emotion_name(e)) + "' has no features");

        std::vector<std::size_t> order(group.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng scan = rng.derive("codebook.scan", static_cast<std::uint64_t>(e));
        shuffle(order, scan);

        std::vector<std::size_t> admitted;  // sample indices
        for (std::size_t idx : order) {
            if (admitted.size() >= K) break;
            double max_sim = -1.0;
            for (std::size_t a : admitted)
                max_sim = std::max(max_sim, cosine(group[idx], group[a].data.data(), d));
            if (admitted.empty() || max_sim < tau) admitted.push_back(idx);
        }

        // farthest-point fill in original-index tie order
        bool degenerate = false;
        while (admitted.size() < K && !degenerate) {
            double best = -1.0;
            std::size_t best_idx = 0;
            for (std::size_t idx = 0; idx < group.size(); ++idx) {
                double min_d = std::numeric_limits<double>::infinity();
                for (std::size_t a : admitted) min_d = std::min(min_d, sq_l2(group[idx], group[a].data.data(), d));
                if (min_d > best) {
                    best = min_d;
                    best_idx = idx;
                }
            }
            if (best <= kDistinctness * kDistinctness)
                degenerate = true;
            else
                admitted.push_back(best_idx);
        }

        StyleDict<S> dict;
        dict.entries = Tensor<S>::zeros({K, d});
        dict.usage.assign(K, 0);
        for (std::size_t k = 0; k < admitted.size(); ++k)
            for (std::size_t j = 0; j < d; ++j) dict.entries.at(k, j) = group[admitted[k]].data[j];

        if (admitted.size() < K) {
            std::cerr << "warning: codebook for emotion '" << emotion_name(e) << "' has only " << admitted.size()
                      << " distinct features; padding " << (K - admitted.size()) << " entries with jittered copies\n";
            Rng jrng = rng.derive("codebook.jitter", static_cast<std::uint64_t>(e));
            for (std::size_t k = admitted.size(); k < K; ++k) {
                const std::size_t base = k % admitted.size();
                std::vector<double> jitter(d);
                double norm = 0;
                for (double& v : jitter) {
                    v = jrng.gaussian();
                    norm += v * v;
                }
                norm = std::sqrt(norm);
                for (std::size_t j = 0; j < d; ++j)
                    dict.entries.at(k, j) =
                        dict.entries.at(base, j) + static_cast<S>(jitter[j] / norm * 1e-3);
            }
        }

        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t b = a + 1; b < K; ++b) {
                double dist = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = dict.entries.at(a, j) - dict.entries.at(b, j);
                    dist += diff * diff;
                }
                if (dist <= kDistinctness * kDistinctness)
                    throw NumericError("init_codebooks: entries " + std::to_string(a) + " and " + std::to_string(b) +
                                       " for emotion '" + std::string(emotion_name(e)) + "' coincide");
            }
        dicts.by_emotion.push_back(std::move(dict));
    }
    return dicts;
}

template <class S>
std::size_t nearest_entry(const Tensor<S>& q, int emotion, const StyleDicts<S>& dicts) {
    (void)emotion_name(emotion);
    const auto& dict = dicts.by_emotion.at(static_cast<std::size_t>(emotion));
    const std::size_t K = dict.entries.shape[0], d = dict.entries.shape[1];
    if (q.shape != Shape{d})
        throw ShapeError("quantize: query " + shape_str(q.shape) + " vs entries dim " + std::to_string(d));
    std::size_t best_k = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
        const double dist = sq_l2(q, dict.entries.data.data() + k * d, d);
        if (dist < best) {  // strict: ties stay on the lowest index
            best = dist;
            best_k = k;
        }
    }
    return best_k;
}

template <class S>
QuantizeResult<S> quantize(const Tensor<S>& q, int emotion, StyleDicts<S>& dicts) {
    const std::size_t k = nearest_entry(q, emotion, dicts);
    auto& dict = dicts.by_emotion[static_cast<std::size_t>(emotion)];
    const std::size_t d = dict.entries.shape[1];
    ++dict.usage[k];
    Tensor<S> z = Tensor<S>::zeros({d});
    for (std::size_t j = 0; j < d; ++j) z.data[j] = dict.entries.at(k, j);
    return {std::move(z), k};
}

template <class S>
StyleLossResult<S> style_loss(StyleDicts<S>& dicts, int emotion, const Tensor<S>& feature, double weight) {
    if (!(weight > 0.0 && weight <= 1.0))
        throw ValidationError("style_loss: weight " + std::to_string(weight) + " outside (0,1]");
    auto [z, k] = quantize(feature, emotion, dicts);
    const std::size_t d = z.shape[0];
    StyleLossResult<S> out;
    out.k = k;
    out.grad_z = Tensor<S>::zeros({d});
    double loss = 0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(z.data[j]) - static_cast<double>(feature.data[j]);
        loss += diff * diff;
        out.grad_z.data[j] = static_cast<S>(2.0 * weight * diff);
    }
    out.loss = weight * loss;
    return out;
}

template <class S>
std::vector<CodebookStats> codebook_stats(const StyleDicts<S>& dicts) {
    std::vector<CodebookStats> out;
    for (const auto& dict : dicts.by_emotion) {
        CodebookStats st;
        st.usage = dict.usage;
        double total = 0;
        for (auto u : dict.usage) total += static_cast<double>(u);
        if (total == 0.0) {
            st.perplexity = 0.0;
        } else {
            double entropy = 0;
            for (auto u : dict.usage)
                if (u > 0) {
                    const double p = static_cast<double>(u) / total;
                    entropy -= p * std::log(p);
                }
            st.perplexity = std::exp(entropy);
        }
        out.push_back(std::move(st));
    }
    return out;
}

template StyleDicts<float> init_codebooks<float>(const std::vector<std::vector<Tensor<float>>>&, double,
                                                 std::size_t, Rng);
template StyleDicts<double> init_codebooks<double>(const std::vector<std::vector<Tensor<double>>>&, double,
                                                   std::size_t, Rng);
template std::size_t nearest_entry<float>(const Tensor<float>&, int, const StyleDicts<float>&);
template std::size_t nearest_entry<double>(const Tensor<double>&, int, const StyleDicts<double>&);
template QuantizeResult<float> quantize<float>(const Tensor<float>&, int, StyleDicts<float>&);
template QuantizeResult<double> quantize<double>(const Tensor<double>&, int, StyleDicts<double>&);
template StyleLossResult<float> style_loss<float>(StyleDicts<float>&, int, const Tensor<float>&, double);
template StyleLossResult<double> style_loss<double>(StyleDicts<double>&, int, const Tensor<double>&, double);
template std::vector<CodebookStats> codebook_stats<float>(const StyleDicts<float>&);
template std::vector<CodebookStats> codebook_stats<double>(const StyleDicts<double>&);

}  // namespace emostyle
