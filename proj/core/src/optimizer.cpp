#include "emostyle/optimizer.hpp"

#include <cmath>
#include <cstdint>

#include "emostyle/errors.hpp"

namespace emostyle {

template <class S>
Optimizer<S>::Optimizer(Kind kind, double lr, double beta1, double beta2, double eps)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ValidationError("optimizer: learning rate must be positive");
    if (kind == Kind::adam) {
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ValidationError("optimizer: betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw ValidationError("optimizer: eps must be positive");
    }
}

template <class S>
Optimizer<S> Optimizer<S>::sgd(double lr) {
    return Optimizer(Kind::sgd, lr, 0.0, 0.0, 0.0);
}

template <class S>
Optimizer<S> Optimizer<S>::adam(double lr, double beta1, double beta2, double eps) {
    return Optimizer(Kind::adam, lr, beta1, beta2, eps);
}

template <class S>
void Optimizer<S>::set_learning_rate(double lr) {
    if (!(lr > 0.0)) throw ValidationError("optimizer: learning rate must be positive");
    lr_ = lr;
}

template <class S>
void Optimizer<S>::step(ParamSet<S>& params) {
    ++step_;
    // All element math in double regardless of S; cast once on store.
    const double c1 = 1.0 - std::pow(beta1_, double(step_));
    const double c2 = 1.0 - std::pow(beta2_, double(step_));
    for (const auto& name : params.names()) {
        Tensor<S>& p = params.param(name);
        const Tensor<S>& g = params.grad(name);
        if (kind_ == Kind::sgd) {
            for (std::size_t i = 0; i < p.data.size(); ++i)
                p.data[i] = S(double(p.data[i]) - lr_ * double(g.data[i]));
            continue;
        }
        auto mit = m_.find(name);
        if (mit == m_.end()) mit = m_.emplace(name, Tensor<S>::zeros(p.shape)).first;
        auto vit = v_.find(name);
        if (vit == v_.end()) vit = v_.emplace(name, Tensor<S>::zeros(p.shape)).first;
        Tensor<S>& m = mit->second;
        Tensor<S>& v = vit->second;
        if (!m.same_shape(p) || !v.same_shape(p))
            throw ShapeError("optimizer state for '" + name + "': " + shape_str(m.shape) +
                             " vs param " + shape_str(p.shape));
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gi = double(g.data[i]);
            const double mi = beta1_ * double(m.data[i]) + (1.0 - beta1_) * gi;
            const double vi = beta2_ * double(v.data[i]) + (1.0 - beta2_) * gi * gi;
            m.data[i] = S(mi);
            v.data[i] = S(vi);
            p.data[i] = S(double(p.data[i]) - lr_ * (mi / c1) / (std::sqrt(vi / c2) + eps_));
        }
    }
}

template <class S>
std::map<std::string, Tensor<S>> Optimizer<S>::export_state() const {
    std::map<std::string, Tensor<S>> out;
    Tensor<S> step(Shape{1});
    step.data[0] = S(step_);
    out.emplace("opt.step", std::move(step));
    for (const auto& [name, t] : m_) out.emplace("opt.m." + name, t);
    for (const auto& [name, t] : v_) out.emplace("opt.v." + name, t);
    return out;
}

template <class S>
void Optimizer<S>::import_state(const std::map<std::string, Tensor<S>>& state) {
    auto it = state.find("opt.step");
    if (it == state.end()) throw ValidationError("optimizer state: missing opt.step");
    if (it->second.numel() != 1) throw ValidationError("optimizer state: opt.step must hold one scalar");
    std::map<std::string, Tensor<S>> m, v;
    for (const auto& [name, t] : state) {
        if (name == "opt.step") continue;
        if (name.rfind("opt.m.", 0) == 0)
            m.emplace(name.substr(6), t);
        else if (name.rfind("opt.v.", 0) == 0)
            v.emplace(name.substr(6), t);
        else
            throw ValidationError("optimizer state: unexpected entry '" + name + "'");
    }
    if (kind_ == Kind::sgd && (!m.empty() || !v.empty()))
        throw ValidationError("optimizer state: moment tensors given to plain SGD");
    step_ = std::uint64_t(std::llround(double(it->second.data[0])));
    m_ = std::move(m);
    v_ = std::move(v);
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace emostyle
