#include "fedmt/param_set.hpp"

#include <cmath>

#include "fedmt/errors.hpp"

namespace fedmt {

std::string_view to_string(Side side) {
    switch (side) {
        case Side::Encoder: return "encoder";
        case Side::Decoder: return "decoder";
        case Side::Shared: return "shared";
    }
    return "shared";
}

Side side_from_string(std::string_view text) {
    if (text == "encoder") return Side::Encoder;
    if (text == "decoder") return Side::Decoder;
    if (text == "shared") return Side::Shared;
    throw FormatError("unknown side tag: " + std::string(text));
}

std::int64_t ParamTensor::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

bool operator==(const ParamTensor& a, const ParamTensor& b) {
    return a.name == b.name && a.shape == b.shape && a.values == b.values && a.trainable == b.trainable &&
           a.side == b.side;
}

void NamedParamSet::insert(ParamTensor tensor) {
    if (tensor.name.empty()) throw StructuralMismatch("tensor with empty name");
    for (auto d : tensor.shape) {
        if (d <= 0) throw StructuralMismatch("non-positive dimension in " + tensor.name);
    }
    if (tensor.numel() != static_cast<std::int64_t>(tensor.values.size())) {
        throw StructuralMismatch("shape/value length mismatch for " + tensor.name);
    }
    auto name = tensor.name;
    auto [it, inserted] = tensors_.emplace(std::move(name), std::move(tensor));
    if (!inserted) throw StructuralMismatch("duplicate tensor name " + it->first);
}

const ParamTensor& NamedParamSet::at(std::string_view name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StructuralMismatch("no tensor named " + std::string(name));
    return it->second;
}

ParamTensor& NamedParamSet::at(std::string_view name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StructuralMismatch("no tensor named " + std::string(name));
    return it->second;
}

bool NamedParamSet::compatible_with(const NamedParamSet& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
        if (a->first != b->first || a->second.shape != b->second.shape || a->second.side != b->second.side) {
            return false;
        }
    }
    return true;
}

bool operator==(const NamedParamSet& a, const NamedParamSet& b) { return a.tensors_ == b.tensors_; }

std::int64_t count_params(const NamedParamSet& set, const ParamFilter& filter) {
    std::int64_t total = 0;
    for (const auto& [_, t] : set) {
        if (filter.accepts(t)) total += t.numel();
    }
    return total;
}

CommPayloadSpec payload(std::int64_t param_count, std::int64_t bytes_per_param) {
    if (bytes_per_param <= 0) throw ConfigError("bytes_per_param must be positive");
    return {param_count, bytes_per_param, param_count * bytes_per_param};
}

CommPayloadSpec payload(const NamedParamSet& set, const ParamFilter& filter, std::int64_t bytes_per_param) {
    return payload(count_params(set, filter), bytes_per_param);
}

FlatVector flatten(const NamedParamSet& set, const ParamFilter& filter) {
    FlatVector out;
    out.values.reserve(static_cast<std::size_t>(count_params(set, filter)));
    for (const auto& [name, t] : set) {
        if (!filter.accepts(t)) continue;
        out.layout.entries.push_back({name, out.layout.total, t.numel()});
        out.values.insert(out.values.end(), t.values.begin(), t.values.end());
        out.layout.total += t.numel();
    }
    return out;
}

NamedParamSet unflatten(const NamedParamSet& base, const FlatVector& flat) {
    if (static_cast<std::int64_t>(flat.values.size()) != flat.layout.total) {
        throw StructuralMismatch("flat vector length does not match its layout");
    }
    NamedParamSet out = base;
    for (const auto& e : flat.layout.entries) {
        auto& t = out.at(e.name);
        if (t.numel() != e.length) throw StructuralMismatch("layout length mismatch for " + e.name);
        std::copy(flat.values.begin() + e.offset, flat.values.begin() + e.offset + e.length, t.values.begin());
    }
    return out;
}

NamedParamSet linear_combine(std::span<const NamedParamSet* const> sets, std::span<const Real> weights,
                             const ParamFilter& filter) {
    if (sets.empty()) throw StructuralMismatch("linear_combine over an empty list");
    if (sets.size() != weights.size()) throw StructuralMismatch("weights and sets differ in length");
    for (std::size_t i = 1; i < sets.size(); ++i) {
        if (!sets[0]->compatible_with(*sets[i])) {
            throw StructuralMismatch("parameter sets are not aggregation-compatible");
        }
    }

    NamedParamSet out = *sets[0];
    for (auto& [name, t] : out) {
        if (!filter.accepts(t)) continue;
        std::vector<const Real*> src(sets.size());
        for (std::size_t i = 0; i < sets.size(); ++i) src[i] = sets[i]->at(name).values.data();
        const auto n = static_cast<std::int64_t>(t.values.size());
        Real* dst = t.values.data();
        // Fixed summation order per element keeps the result thread-count independent.
#pragma omp parallel for schedule(static) if (n > 65536)
        for (std::int64_t k = 0; k < n; ++k) {
            Real acc = 0;
            for (std::size_t i = 0; i < src.size(); ++i) acc += weights[i] * src[i][k];
            dst[k] = acc;
        }
    }
    return out;
}

NamedParamSet linear_combine(const std::vector<NamedParamSet>& sets, const std::vector<Real>& weights,
                             const ParamFilter& filter) {
    std::vector<const NamedParamSet*> ptrs;
    ptrs.reserve(sets.size());
    for (const auto& s : sets) ptrs.push_back(&s);
    return linear_combine(std::span<const NamedParamSet* const>(ptrs), std::span<const Real>(weights), filter);
}

}  // namespace fedmt
