#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedmt {

using Real = double;

enum class Side : std::uint8_t { Encoder = 0, Decoder = 1, Shared = 2 };

std::string_view to_string(Side side);
Side side_from_string(std::string_view text);

struct ParamTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<Real> values;
    bool trainable = false;
    Side side = Side::Shared;

    std::int64_t numel() const;
};

// Which tensors an operation looks at. Empty optionals mean "don't care".
struct ParamFilter {
    bool trainable_only = false;
    std::optional<Side> side;

    static ParamFilter all() { return {}; }
    static ParamFilter trainable() { return {true, std::nullopt}; }
    static ParamFilter side_only(Side s) { return {false, s}; }
    static ParamFilter trainable_side(Side s) { return {true, s}; }

    bool accepts(const ParamTensor& t) const {
        if (trainable_only && !t.trainable) return false;
        if (side && t.side != *side) return false;
        return true;
    }
};

// Ordered (lexicographic by name) collection of tensors. Copies are deep;
// every client in a simulation owns its own set.
class NamedParamSet {
public:
    using Map = std::map<std::string, ParamTensor, std::less<>>;

    NamedParamSet() = default;

    // Validates shape/values agreement and name uniqueness.
    void insert(ParamTensor tensor);

    bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
    const ParamTensor& at(std::string_view name) const;
    ParamTensor& at(std::string_view name);

    std::size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }

    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }
    Map::iterator begin() { return tensors_.begin(); }
    Map::iterator end() { return tensors_.end(); }

    // Same names, shapes and side tags.
    bool compatible_with(const NamedParamSet& other) const;

    void set_trainable(std::string_view name, bool trainable) { at(name).trainable = trainable; }

    friend bool operator==(const NamedParamSet& a, const NamedParamSet& b);

private:
    Map tensors_;
};

bool operator==(const ParamTensor& a, const ParamTensor& b);

std::int64_t count_params(const NamedParamSet& set, const ParamFilter& filter = ParamFilter::all());

struct CommPayloadSpec {
    std::int64_t param_count = 0;
    std::int64_t bytes_per_param = 4;
    std::int64_t total_bytes = 0;

    // Decimal units: 1 GB = 1e9 bytes.
    double gigabytes() const { return static_cast<double>(total_bytes) / 1e9; }
};

CommPayloadSpec payload(std::int64_t param_count, std::int64_t bytes_per_param = 4);
CommPayloadSpec payload(const NamedParamSet& set, const ParamFilter& filter,
                        std::int64_t bytes_per_param = 4);

struct FlatLayout {
    struct Entry {
        std::string name;
        std::int64_t offset = 0;
        std::int64_t length = 0;
    };
    std::vector<Entry> entries;
    std::int64_t total = 0;
};

struct FlatVector {
    std::vector<Real> values;
    FlatLayout layout;
};

FlatVector flatten(const NamedParamSet& set, const ParamFilter& filter = ParamFilter::all());

// Writes `flat` back into a copy of `base` at the positions named by the layout.
NamedParamSet unflatten(const NamedParamSet& base, const FlatVector& flat);

// Elementwise sum_i w_i * sets[i] over tensors accepted by `filter`; all other
// tensors are copied from sets[0]. Throws StructuralMismatch on incompatible input.
NamedParamSet linear_combine(std::span<const NamedParamSet* const> sets, std::span<const Real> weights,
                             const ParamFilter& filter = ParamFilter::trainable());
NamedParamSet linear_combine(const std::vector<NamedParamSet>& sets, const std::vector<Real>& weights,
                             const ParamFilter& filter = ParamFilter::trainable());

// Binary checkpoint: name table + shapes + flags, then a little-endian FP32 payload.
void write_param_set(std::ostream& out, const NamedParamSet& set);
NamedParamSet read_param_set(std::istream& in);
void save_param_set(const std::string& path, const NamedParamSet& set);
NamedParamSet load_param_set(const std::string& path);

}  // namespace fedmt
