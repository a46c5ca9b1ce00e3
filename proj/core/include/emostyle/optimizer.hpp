#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "emostyle/params.hpp"

namespace emostyle {

// First-order parameter updates driven by a ParamSet's accumulated grads.
// Adam keeps per-parameter moment tensors keyed by name; they are created
// lazily on first use so parameters added between steps just work. The full
// mutable state round-trips through export_state/import_state so a resumed
// run is bit-identical to an uninterrupted one.
template <class S>
class Optimizer {
  public:
    static Optimizer sgd(double lr);
    static Optimizer adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // One update over every parameter in the set, reading its current grads.
    // Does not zero the grads; callers own that.
    void step(ParamSet<S>& params);

    std::uint64_t steps_taken() const { return step_; }
    bool is_adam() const { return kind_ == Kind::adam; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr);

    // "opt.step" [1] always; "opt.m.<param>" / "opt.v.<param>" for Adam.
    // The step count is stored as a scalar of S, exact while it fits the
    // mantissa; toy-scale runs stay far below that.
    std::map<std::string, Tensor<S>> export_state() const;
    void import_state(const std::map<std::string, Tensor<S>>& state);

  private:
    enum class Kind { sgd, adam };
    Optimizer(Kind kind, double lr, double beta1, double beta2, double eps);

    Kind kind_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::uint64_t step_ = 0;
    std::map<std::string, Tensor<S>> m_;
    std::map<std::string, Tensor<S>> v_;
};

extern template class Optimizer<float>;
extern template class Optimizer<double>;

}  // namespace emostyle
