#include "fedmt/optim.hpp"

#include <cmath>

#include "fedmt/errors.hpp"

namespace fedmt {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& text) {
    if (text == "sgd") return OptimizerKind::Sgd;
    if (text == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + text + "'");
}

Optimizer::Optimizer(OptimizerKind kind, Real learning_rate, Real beta1, Real beta2, Real eps)
    : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (learning_rate < 0) throw ConfigError("learning rate must be non-negative");
}

void Optimizer::step(NamedParamSet& params, const NamedParamSet& grads) {
    ++t_;
    const Real bc1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
    for (const auto& [name, g] : grads) {
        auto& p = params.at(name);
        if (!p.trainable) throw StructuralMismatch("optimizer asked to update frozen tensor " + name);
        if (p.values.size() != g.values.size()) throw StructuralMismatch("gradient shape mismatch for " + name);
        if (kind_ == OptimizerKind::Sgd) {
            for (std::size_t i = 0; i < g.values.size(); ++i) p.values[i] -= lr_ * g.values[i];
            continue;
        }
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(g.values.size(), 0.0);
            v.assign(g.values.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            const Real gi = g.values[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            p.values[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
}

}  // namespace fedmt
