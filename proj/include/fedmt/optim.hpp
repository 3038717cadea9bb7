#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedmt/param_set.hpp"

namespace fedmt {

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& text);

// Client-local optimizer. State (Adam moments) is never transferred.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, Real learning_rate, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8);

    // params[name] -= update(grads[name]) for every tensor in `grads`.
    // Frozen tensors in `params` must not appear in `grads`.
    void step(NamedParamSet& params, const NamedParamSet& grads);

    std::int64_t steps() const { return t_; }
    Real learning_rate() const { return lr_; }

private:
    OptimizerKind kind_;
    Real lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<Real>, std::less<>> m_, v_;
};

}  // namespace fedmt
