#pragma once

#include <map>
#include <string>
#include <vector>

#include "emostyle/tensor.hpp"

namespace emostyle {

// Per-parameter gradients, keyed by dotted parameter name. std::map keeps
// iteration order stable so accumulation is deterministic.
template <class S>
using Grads = std::map<std::string, Tensor<S>>;

template <class S>
void accumulate_grads(Grads<S>& into, const Grads<S>& from) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, g);
        } else {
            if (!it->second.same_shape(g))
                throw ShapeError("grad accumulate '" + name + "': " + shape_str(it->second.shape) +
                                 " vs " + shape_str(g.shape));
            for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
        }
    }
}

// Named parameters plus a parallel gradient map. Names are dotted, unique,
// and stable across save/load.
template <class S>
class ParamSet {
  public:
    void add(const std::string& name, Tensor<S> value) {
        if (params_.count(name)) throw ValidationError("duplicate parameter name '" + name + "'");
        params_.emplace(name, std::move(value));
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor<S>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor<S>& param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
        return it->second;
    }

    Tensor<S>& grad(const std::string& name) {
        auto it = grads_.find(name);
        if (it == grads_.end()) it = grads_.emplace(name, Tensor<S>::zeros(param(name).shape)).first;
        if (!it->second.same_shape(param(name)))
            throw ShapeError("grad '" + name + "': " + shape_str(it->second.shape) + " vs param " +
                             shape_str(param(name).shape));
        return it->second;
    }

    void zero_grads() {
        for (auto& [name, g] : grads_) std::fill(g.data.begin(), g.data.end(), S(0));
    }

    void set_grads(const Grads<S>& g) {
        grads_.clear();
        for (const auto& [name, t] : g) {
            if (!params_.count(name)) throw ValidationError("gradient for unknown parameter '" + name + "'");
            if (!t.same_shape(params_.at(name)))
                throw ShapeError("grad '" + name + "': " + shape_str(t.shape) + " vs param " +
                                 shape_str(params_.at(name).shape));
            grads_.emplace(name, t);
        }
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [name, _] : params_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return params_.size(); }
    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }

    const std::map<std::string, Tensor<S>>& entries() const { return params_; }
    std::map<std::string, Tensor<S>>& entries() { return params_; }
    const std::map<std::string, Tensor<S>>& grad_entries() const { return grads_; }

    void merge(const ParamSet& other) {
        for (const auto& [name, t] : other.params_) add(name, t);
    }

    bool all_finite() const {
        for (const auto& [_, t] : params_)
            if (!t.all_finite()) return false;
        return true;
    }

  private:
    std::map<std::string, Tensor<S>> params_;
    std::map<std::string, Tensor<S>> grads_;
};

}  // namespace emostyle
