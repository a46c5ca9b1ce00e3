#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "emostyle/errors.hpp"
#include "emostyle/params.hpp"
#include "emostyle/rng.hpp"

namespace emostyle {

// Loss under test: returns the scalar loss at the current params and, when
// `grads` is non-null, must also fill analytic per-parameter gradients.
// Must be deterministic; fix any randomness inside the closure.
template <class S>
using CheckedLoss = std::function<double(const ParamSet<S>&, Grads<S>*)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

// Central finite differences against the analytic gradient, reported as
// max |analytic - fd| / max(1, |fd|) over the checked coordinates.
// coords_per_param = 0 checks every coordinate; a positive value checks a
// seeded random subset of that size per tensor, for losses too large to
// sweep exhaustively.
template <class S>
GradCheckReport grad_check(const CheckedLoss<S>& fn, ParamSet<S>& params, double step = 1e-5,
                           std::size_t coords_per_param = 0, std::uint64_t coord_seed = 0) {
    if (!(step > 0)) throw ValidationError("grad_check: step must be positive");
    Grads<S> analytic;
    const double base = fn(params, &analytic);
    if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss before any perturbation");

    GradCheckReport report;
    std::uint64_t tensor_idx = 0;
    for (const std::string& name : params.names()) {
        Tensor<S>& p = params.param(name);
        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords_per_param > 0 && coords.size() > coords_per_param) {
            shuffle(coords, Rng(coord_seed).derive("grad_check.coords", tensor_idx));
            coords.resize(coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        ++tensor_idx;

        const auto git = analytic.find(name);
        for (std::size_t i : coords) {
            const S orig = p.data[i];
            p.data[i] = orig + static_cast<S>(step);
            const double lp = fn(params, nullptr);
            p.data[i] = orig - static_cast<S>(step);
            const double lm = fn(params, nullptr);
            p.data[i] = orig;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw NumericError("grad_check: non-finite loss perturbing '" + name + "' coord " +
                                   std::to_string(i));
            const double fd = (lp - lm) / (2.0 * step);
            const double an = git == analytic.end() ? 0.0 : static_cast<double>(git->second.data[i]);
            const double rel = std::abs(an - fd) / std::max(1.0, std::abs(fd));
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_coord = i;
                report.analytic = an;
                report.numeric = fd;
            }
        }
    }
    return report;
}

}  // namespace emostyle
