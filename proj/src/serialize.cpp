#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "fedmt/errors.hpp"
#include "fedmt/param_set.hpp"

// Layout (all integers little-endian):
//   "FMNPSET1"                     8-byte magic
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u8 side, u8 trainable, u32 ndim, u64 dims[ndim]
//   payload: FP32 values of every tensor, in header order

namespace fedmt {
namespace {

constexpr std::array<char, 8> kMagic{'F', 'M', 'N', 'P', 'S', 'E', 'T', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
    static_assert(std::is_integral_v<T>);
    std::array<char, sizeof(T)> buf{};
    auto u = static_cast<std::make_unsigned_t<T>>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    out.write(buf.data(), buf.size());
}

template <typename T>
T get_le(std::istream& in) {
    std::array<unsigned char, sizeof(T)> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (!in) throw FormatError("truncated parameter file");
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
    return static_cast<T>(u);
}

}  // namespace

void write_param_set(std::ostream& out, const NamedParamSet& set) {
    out.write(kMagic.data(), kMagic.size());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.size()));
    for (const auto& [name, t] : set) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.side));
        put_le<std::uint8_t>(out, t.trainable ? 1 : 0);
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    }
    for (const auto& [_, t] : set) {
        for (Real v : t.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    if (!out) throw FormatError("failed writing parameter set");
}

NamedParamSet read_param_set(std::istream& in) {
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw FormatError("not a parameter-set file (bad magic)");
    const auto count = get_le<std::uint32_t>(in);

    std::vector<ParamTensor> tensors(count);
    for (auto& t : tensors) {
        const auto name_len = get_le<std::uint32_t>(in);
        if (name_len > (1u << 16)) throw FormatError("implausible tensor name length");
        t.name.resize(name_len);
        in.read(t.name.data(), name_len);
        const auto side = get_le<std::uint8_t>(in);
        if (side > 2) throw FormatError("bad side tag in " + t.name);
        t.side = static_cast<Side>(side);
        t.trainable = get_le<std::uint8_t>(in) != 0;
        const auto ndim = get_le<std::uint32_t>(in);
        if (ndim > 8) throw FormatError("too many dimensions in " + t.name);
        t.shape.resize(ndim);
        for (auto& d : t.shape) d = static_cast<std::int64_t>(get_le<std::uint64_t>(in));
    }
    NamedParamSet set;
    for (auto& t : tensors) {
        std::int64_t n = 1;
        for (auto d : t.shape) {
            if (d <= 0 || d > (std::int64_t{1} << 32)) throw FormatError("bad dimension in " + t.name);
            n *= d;
        }
        t.values.resize(static_cast<std::size_t>(n));
        for (auto& v : t.values) v = static_cast<Real>(std::bit_cast<float>(get_le<std::uint32_t>(in)));
        set.insert(std::move(t));
    }
    return set;
}

void save_param_set(const std::string& path, const NamedParamSet& set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    write_param_set(out, set);
}

NamedParamSet load_param_set(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return read_param_set(in);
}

}  // namespace fedmt
