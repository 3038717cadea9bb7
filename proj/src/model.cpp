#include "fedmt/model.hpp"

#include <Eigen/Dense>
#include <omp.h>
#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <memory>
#include <random>

#include "fedmt/errors.hpp"

namespace fedmt {

// ---------------------------------------------------------------------------
// Configuration and naming
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (vocab_size < 5) throw ConfigError("model.vocab_size must be at least 5");
    if (model_dim < 1 || num_heads < 1 || model_dim % num_heads != 0) {
        throw ConfigError("model.model_dim must be a positive multiple of model.num_heads");
    }
    if (ffn_dim < 1) throw ConfigError("model.ffn_dim must be >= 1");
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model.enc_layers and model.dec_layers must be >= 1");
    if (adapter_bottleneck < 1) throw ConfigError("model.adapter_bottleneck must be >= 1");
    if (max_seq_len < 2) throw ConfigError("model.max_seq_len must be >= 2");
}

std::string to_string(Nonlinearity n) { return n == Nonlinearity::Relu ? "relu" : "gelu"; }

Nonlinearity nonlinearity_from_string(const std::string& text) {
    if (text == "relu") return Nonlinearity::Relu;
    if (text == "gelu") return Nonlinearity::Gelu;
    throw ConfigError("unknown adapter nonlinearity '" + text + "'");
}

std::string to_string(PruneStrategy p) {
    switch (p) {
        case PruneStrategy::All: return "all";
        case PruneStrategy::InputEnd: return "input_end";
        case PruneStrategy::Middle: return "middle";
        case PruneStrategy::OutputEnd: return "output_end";
    }
    return "all";
}

PruneStrategy prune_strategy_from_string(const std::string& text) {
    if (text == "all") return PruneStrategy::All;
    if (text == "input_end") return PruneStrategy::InputEnd;
    if (text == "middle") return PruneStrategy::Middle;
    if (text == "output_end") return PruneStrategy::OutputEnd;
    throw ConfigError("unknown pruning strategy '" + text + "'");
}

namespace {

std::string layer_prefix(Side side, int layer) {
    return std::string(side == Side::Encoder ? "enc" : "dec") + ".layer" + std::to_string(layer);
}

const char* site_name(AdapterSite site) {
    switch (site) {
        case AdapterSite::SelfAttn: return "sa_adapter";
        case AdapterSite::CrossAttn: return "ca_adapter";
        case AdapterSite::Ffn: return "ffn_adapter";
    }
    return "";
}

}  // namespace

std::string AdapterId::prefix() const { return layer_prefix(side, layer) + "." + site_name(site); }

std::vector<AdapterId> adapter_ids(const ModelConfig& config) {
    std::vector<AdapterId> ids;
    for (int l = 0; l < config.enc_layers; ++l) {
        ids.push_back({Side::Encoder, l, AdapterSite::SelfAttn});
        ids.push_back({Side::Encoder, l, AdapterSite::Ffn});
    }
    for (int l = 0; l < config.dec_layers; ++l) {
        ids.push_back({Side::Decoder, l, AdapterSite::SelfAttn});
        ids.push_back({Side::Decoder, l, AdapterSite::CrossAttn});
        ids.push_back({Side::Decoder, l, AdapterSite::Ffn});
    }
    return ids;
}

std::int64_t adapter_param_count(std::int64_t model_dim, std::int64_t bottleneck) {
    return 2 * model_dim * bottleneck + bottleneck + model_dim;
}

// ---------------------------------------------------------------------------
// Parameter layout and initialisation
// ---------------------------------------------------------------------------

namespace {

enum class Kind { Embedding, Weight, Bias, NormGain, NormBias, OutProj, AdapterDown, AdapterUp, AdapterBias };

struct TensorSpec {
    std::string name;
    std::vector<std::int64_t> shape;
    Side side;
    Kind kind;
    bool adapter;
};

void add_linear(std::vector<TensorSpec>& out, const std::string& p, Side side, int n_out, int n_in) {
    out.push_back({p + ".weight", {n_out, n_in}, side, Kind::Weight, false});
    out.push_back({p + ".bias", {n_out}, side, Kind::Bias, false});
}

void add_norm(std::vector<TensorSpec>& out, const std::string& p, Side side, int d) {
    out.push_back({p + ".weight", {d}, side, Kind::NormGain, false});
    out.push_back({p + ".bias", {d}, side, Kind::NormBias, false});
}

void add_attention(std::vector<TensorSpec>& out, const std::string& p, Side side, int d) {
    for (const char* proj : {"q_proj", "k_proj", "v_proj", "o_proj"}) add_linear(out, p + "." + proj, side, d, d);
}

void add_ffn(std::vector<TensorSpec>& out, const std::string& p, Side side, int d, int f) {
    add_linear(out, p + ".fc1", side, f, d);
    add_linear(out, p + ".fc2", side, d, f);
}

void add_adapter(std::vector<TensorSpec>& out, const std::string& p, Side side, int d, int b) {
    out.push_back({p + ".down.weight", {b, d}, side, Kind::AdapterDown, true});
    out.push_back({p + ".down.bias", {b}, side, Kind::AdapterBias, true});
    out.push_back({p + ".up.weight", {d, b}, side, Kind::AdapterUp, true});
    out.push_back({p + ".up.bias", {d}, side, Kind::AdapterBias, true});
}

// Backbone tensors first, then adapters, so the two can use independent RNG streams.
std::vector<TensorSpec> backbone_layout(const ModelConfig& c) {
    std::vector<TensorSpec> out;
    const int d = c.model_dim;
    out.push_back({"embed.tokens.weight", {c.vocab_size, d}, Side::Shared, Kind::Embedding, false});
    for (int l = 0; l < c.enc_layers; ++l) {
        const auto p = layer_prefix(Side::Encoder, l);
        add_norm(out, p + ".self_attn_ln", Side::Encoder, d);
        add_attention(out, p + ".self_attn", Side::Encoder, d);
        add_norm(out, p + ".ffn_ln", Side::Encoder, d);
        add_ffn(out, p + ".ffn", Side::Encoder, d, c.ffn_dim);
    }
    add_norm(out, "enc.final_ln", Side::Encoder, d);
    for (int l = 0; l < c.dec_layers; ++l) {
        const auto p = layer_prefix(Side::Decoder, l);
        add_norm(out, p + ".self_attn_ln", Side::Decoder, d);
        add_attention(out, p + ".self_attn", Side::Decoder, d);
        add_norm(out, p + ".cross_attn_ln", Side::Decoder, d);
        add_attention(out, p + ".cross_attn", Side::Decoder, d);
        add_norm(out, p + ".ffn_ln", Side::Decoder, d);
        add_ffn(out, p + ".ffn", Side::Decoder, d, c.ffn_dim);
    }
    add_norm(out, "dec.final_ln", Side::Decoder, d);
    out.push_back({"dec.out_proj.weight", {c.vocab_size, d}, Side::Decoder, Kind::OutProj, false});
    return out;
}

std::vector<TensorSpec> adapter_layout(const ModelConfig& c) {
    std::vector<TensorSpec> out;
    for (const auto& id : adapter_ids(c)) add_adapter(out, id.prefix(), id.side, c.model_dim, c.adapter_bottleneck);
    return out;
}

bool is_norm(Kind k) { return k == Kind::NormGain || k == Kind::NormBias; }

bool initially_trainable(const TensorSpec& s, const ModelConfig& c) {
    if (s.adapter) return true;
    if (c.train_backbone) return true;
    return is_norm(s.kind) && c.use_adapters;
}

std::vector<Real> init_values(const TensorSpec& s, std::mt19937_64& rng) {
    std::int64_t n = 1;
    for (auto d : s.shape) n *= d;
    std::vector<Real> v(static_cast<std::size_t>(n), 0.0);
    switch (s.kind) {
        case Kind::Embedding: {
            std::normal_distribution<Real> dist(0.0, 1.0);
            for (auto& x : v) x = dist(rng);
            break;
        }
        case Kind::OutProj: {
            std::normal_distribution<Real> dist(0.0, 1.0 / std::sqrt(static_cast<Real>(s.shape[1])));
            for (auto& x : v) x = dist(rng);
            break;
        }
        case Kind::Weight:
        case Kind::AdapterDown: {
            const Real a = std::sqrt(6.0 / static_cast<Real>(s.shape[0] + s.shape[1]));
            std::uniform_real_distribution<Real> dist(-a, a);
            for (auto& x : v) x = dist(rng);
            break;
        }
        case Kind::NormGain: std::fill(v.begin(), v.end(), 1.0); break;
        case Kind::Bias:
        case Kind::NormBias:
        case Kind::AdapterUp:
        case Kind::AdapterBias: break;
    }
    return v;
}

constexpr std::uint64_t kAdapterStream = 0x9E3779B97F4A7C15ULL;

void insert_adapters(NamedParamSet& params, const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ kAdapterStream);
    for (const auto& s : adapter_layout(config)) {
        params.insert({s.name, s.shape, init_values(s, rng), true, s.side});
    }
}

}  // namespace

ToyModel build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ToyModel m;
    m.config = config;
    std::mt19937_64 rng(seed);
    for (const auto& s : backbone_layout(config)) {
        m.params.insert({s.name, s.shape, init_values(s, rng), initially_trainable(s, config), s.side});
    }
    if (config.use_adapters) {
        insert_adapters(m.params, config, seed);
        m.adapter_active.assign(adapter_ids(config).size(), true);
    }
    return m;
}

ToyModel strip_adapters(const ToyModel& model) {
    ToyModel m;
    m.config = model.config;
    m.config.use_adapters = false;
    for (const auto& [name, t] : model.params) {
        if (name.find("_adapter.") == std::string::npos) m.params.insert(t);
    }
    return m;
}

ToyModel attach_adapters(const NamedParamSet& backbone, const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ToyModel m;
    m.config = config;
    for (const auto& s : backbone_layout(config)) {
        auto t = backbone.at(s.name);
        if (t.shape != s.shape) throw StructuralMismatch("backbone tensor " + s.name + " has the wrong shape");
        t.trainable = initially_trainable(s, config);
        m.params.insert(std::move(t));
    }
    if (config.use_adapters) {
        insert_adapters(m.params, config, seed);
        m.adapter_active.assign(adapter_ids(config).size(), true);
    }
    return m;
}

std::int64_t count_adapter_params(const ToyModel& model, bool trainable_only) {
    std::int64_t n = 0;
    for (const auto& [name, t] : model.params) {
        if (name.find("_adapter.") == std::string::npos) continue;
        if (trainable_only && !t.trainable) continue;
        n += t.numel();
    }
    return n;
}

ToyModel apply_pruning(const ToyModel& model, PruneStrategy strategy) {
    if (!model.config.use_adapters) throw ConfigError("pruning requires a model with adapters");
    const int E = model.config.enc_layers;
    const int D = model.config.dec_layers;
    if (E % 3 != 0 || D % 3 != 0) {
        throw ConfigError("adapter pruning needs encoder and decoder layer counts divisible by 3");
    }
    auto keep = [&](const AdapterId& id) {
        const int n = id.side == Side::Encoder ? E : D;
        const int third = n / 3;
        switch (strategy) {
            case PruneStrategy::All: return true;
            case PruneStrategy::InputEnd: return id.layer < third;
            case PruneStrategy::Middle: return id.layer >= third && id.layer < 2 * third;
            case PruneStrategy::OutputEnd: return id.layer >= 2 * third;
        }
        return true;
    };
    ToyModel out = model;
    const auto ids = adapter_ids(model.config);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const bool active = keep(ids[i]);
        out.adapter_active[i] = active;
        const auto p = ids[i].prefix();
        for (const char* suffix : {".down.weight", ".down.bias", ".up.weight", ".up.bias"}) {
            out.params.set_trainable(p + suffix, active);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

Batch make_batch(std::span<const EncodedPair> pairs) {
    Batch b;
    b.rows = static_cast<int>(pairs.size());
    for (const auto& p : pairs) {
        b.src_len = std::max(b.src_len, static_cast<int>(p.source.size()));
        b.tgt_len = std::max(b.tgt_len, static_cast<int>(p.target.size()) + 1);
    }
    const auto rows = static_cast<std::size_t>(b.rows);
    b.source.assign(rows * static_cast<std::size_t>(b.src_len), kPadId);
    b.target_in.assign(rows * static_cast<std::size_t>(b.tgt_len), kPadId);
    b.target_gold.assign(rows * static_cast<std::size_t>(b.tgt_len), kPadId);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto& p = pairs[r];
        std::copy(p.source.begin(), p.source.end(), b.source.begin() + static_cast<std::ptrdiff_t>(r * b.src_len));
        auto in = b.target_in.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_len);
        auto gold = b.target_gold.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_len);
        in[0] = p.target_tag;
        std::copy(p.target.begin(), p.target.end(), in + 1);
        std::copy(p.target.begin(), p.target.end(), gold);
        gold[static_cast<std::ptrdiff_t>(p.target.size())] = kEosId;
        b.src_lengths.push_back(static_cast<int>(p.source.size()));
        b.tgt_lengths.push_back(static_cast<int>(p.target.size()) + 1);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

namespace {

using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
using CMat = Eigen::Map<const Mat>;
using MMat = Eigen::Map<Mat>;
using CRow = Eigen::Map<const RowVec>;
using MRow = Eigen::Map<RowVec>;

constexpr Real kNormEps = 1e-5;

struct Slot {
    const Real* v = nullptr;
    Real* g = nullptr;  // null when frozen or when gradients are not wanted
    std::int64_t grad_offset = -1;
};

struct Linear {
    Slot w, b;
    int out = 0, in = 0;
};

struct Norm {
    Slot gain, bias;
    int dim = 0;
};

struct Attention {
    Linear q, k, v, o;
};

struct Ffn {
    Linear fc1, fc2;
};

struct Adapter {
    Linear down, up;
    bool active = false;
};

struct EncLayer {
    Norm ln_sa, ln_ffn;
    Attention sa;
    Ffn ffn;
    Adapter ad_sa, ad_ffn;
};

struct DecLayer {
    Norm ln_sa, ln_ca, ln_ffn;
    Attention sa, ca;
    Ffn ffn;
    Adapter ad_sa, ad_ca, ad_ffn;
};

using AlignedVec = std::vector<Real, Eigen::aligned_allocator<Real>>;

// Every tensor starts on a 64-byte boundary. Eigen's vectorised reductions
// pick their peeling point from the data address, so fixed alignment keeps
// results independent of where the heap put a buffer.
constexpr std::int64_t kAlignReals = 8;

std::int64_t padded(std::int64_t n) { return (n + kAlignReals - 1) / kAlignReals * kAlignReals; }

// Name -> offset into a padded flat buffer, in set order.
struct FlatIndex {
    std::vector<std::pair<std::string, std::int64_t>> offsets;
    std::int64_t total = 0;

    FlatIndex(const NamedParamSet& params, bool trainable_only) {
        for (const auto& [name, t] : params) {
            if (trainable_only && !t.trainable) continue;
            offsets.emplace_back(name, total);
            total += padded(t.numel());
        }
    }

    std::int64_t offset_of(const std::string& name) const {
        auto it = std::lower_bound(offsets.begin(), offsets.end(), name,
                                   [](const auto& e, const std::string& n) { return e.first < n; });
        return (it != offsets.end() && it->first == name) ? it->second : -1;
    }
};

using GradLayout = FlatIndex;

class Net {
public:
    Net(const ToyModel& model, const GradLayout* layout) : cfg_(model.config) {
        const FlatIndex index(model.params, false);
        auto values = std::make_shared<AlignedVec>(static_cast<std::size_t>(index.total), 0.0);
        for (const auto& [name, offset] : index.offsets) {
            const auto& v = model.params.at(name).values;
            std::copy(v.begin(), v.end(), values->begin() + offset);
        }
        auto slot = [&](const std::string& name) {
            const auto offset = index.offset_of(name);
            if (offset < 0) throw StructuralMismatch("model is missing tensor " + name);
            Slot s;
            s.v = values->data() + offset;
            if (layout) s.grad_offset = layout->offset_of(name);
            return s;
        };
        auto linear = [&](const std::string& p, int out, int in, bool bias = true) {
            Linear L;
            L.w = slot(p + ".weight");
            if (bias) L.b = slot(p + ".bias");
            L.out = out;
            L.in = in;
            return L;
        };
        auto norm = [&](const std::string& p) { return Norm{slot(p + ".weight"), slot(p + ".bias"), cfg_.model_dim}; };
        auto attention = [&](const std::string& p) {
            const int d = cfg_.model_dim;
            return Attention{linear(p + ".q_proj", d, d), linear(p + ".k_proj", d, d), linear(p + ".v_proj", d, d),
                             linear(p + ".o_proj", d, d)};
        };
        auto ffn = [&](const std::string& p) {
            return Ffn{linear(p + ".fc1", cfg_.ffn_dim, cfg_.model_dim), linear(p + ".fc2", cfg_.model_dim, cfg_.ffn_dim)};
        };
        const auto ids = adapter_ids(cfg_);
        std::size_t adapter_index = 0;
        auto adapter = [&]() {
            Adapter a;
            if (!cfg_.use_adapters) {
                ++adapter_index;
                return a;
            }
            const auto p = ids[adapter_index].prefix();
            a.down = linear(p + ".down", cfg_.adapter_bottleneck, cfg_.model_dim);
            a.up = linear(p + ".up", cfg_.model_dim, cfg_.adapter_bottleneck);
            a.active = model.adapter_active.at(adapter_index);
            ++adapter_index;
            return a;
        };

        embed_ = slot("embed.tokens.weight");
        for (int l = 0; l < cfg_.enc_layers; ++l) {
            const auto p = layer_prefix(Side::Encoder, l);
            EncLayer L;
            L.ln_sa = norm(p + ".self_attn_ln");
            L.sa = attention(p + ".self_attn");
            L.ln_ffn = norm(p + ".ffn_ln");
            L.ffn = ffn(p + ".ffn");
            L.ad_sa = adapter();
            L.ad_ffn = adapter();
            enc_.push_back(std::move(L));
        }
        enc_ln_ = norm("enc.final_ln");
        for (int l = 0; l < cfg_.dec_layers; ++l) {
            const auto p = layer_prefix(Side::Decoder, l);
            DecLayer L;
            L.ln_sa = norm(p + ".self_attn_ln");
            L.sa = attention(p + ".self_attn");
            L.ln_ca = norm(p + ".cross_attn_ln");
            L.ca = attention(p + ".cross_attn");
            L.ln_ffn = norm(p + ".ffn_ln");
            L.ffn = ffn(p + ".ffn");
            L.ad_sa = adapter();
            L.ad_ca = adapter();
            L.ad_ffn = adapter();
            dec_.push_back(std::move(L));
        }
        dec_ln_ = norm("dec.final_ln");
        out_ = linear("dec.out_proj", cfg_.vocab_size, cfg_.model_dim, false);

        positions_ = Mat(cfg_.max_seq_len, cfg_.model_dim);
        for (int pos = 0; pos < cfg_.max_seq_len; ++pos) {
            for (int i = 0; i < cfg_.model_dim; ++i) {
                const Real rate = std::pow(10000.0, -static_cast<Real>(2 * (i / 2)) / cfg_.model_dim);
                positions_(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
            }
        }
        values_ = std::move(values);
    }

    // Points every trainable slot at `base` + its offset (or detaches when null).
    void bind_grads(Real* base) {
        auto bind = [base](Slot& s) { s.g = (base && s.grad_offset >= 0) ? base + s.grad_offset : nullptr; };
        auto lin = [&](Linear& L) {
            bind(L.w);
            bind(L.b);
        };
        auto nrm = [&](Norm& N) {
            bind(N.gain);
            bind(N.bias);
        };
        auto att = [&](Attention& A) {
            lin(A.q);
            lin(A.k);
            lin(A.v);
            lin(A.o);
        };
        auto ad = [&](Adapter& A) {
            lin(A.down);
            lin(A.up);
        };
        bind(embed_);
        for (auto& L : enc_) {
            nrm(L.ln_sa);
            nrm(L.ln_ffn);
            att(L.sa);
            lin(L.ffn.fc1);
            lin(L.ffn.fc2);
            ad(L.ad_sa);
            ad(L.ad_ffn);
        }
        nrm(enc_ln_);
        for (auto& L : dec_) {
            nrm(L.ln_sa);
            nrm(L.ln_ca);
            nrm(L.ln_ffn);
            att(L.sa);
            att(L.ca);
            lin(L.ffn.fc1);
            lin(L.ffn.fc2);
            ad(L.ad_sa);
            ad(L.ad_ca);
            ad(L.ad_ffn);
        }
        nrm(dec_ln_);
        lin(out_);
    }

    // Summed cross-entropy for one sentence; accumulates scale * dL/dtheta into
    // the bound gradient buffer when `backward` is set.
    Real row_loss(std::span<const int> src, std::span<const int> tgt_in, std::span<const int> gold, bool backward,
                  Real scale) const;

    Mat encode_only(std::span<const int> src) const {
        EncCache c;
        return encode(src, c);
    }

    Mat decode_logits(const Mat& memory, std::span<const int> tgt_in) const {
        DecCache c;
        return decode(memory, tgt_in, c);
    }

private:
    struct NormCache {
        Mat xhat;
        RowVec rstd;
    };
    struct AttnCache {
        Mat q, k, v, ctx;
        std::vector<Mat> probs;
    };
    struct FfnCache {
        Mat pre, act;
    };
    struct AdapterCache {
        Mat pre, act;
    };
    struct EncLayerCache {
        Mat x0, a, s, x1, f, m;
        NormCache n_sa, n_ffn;
        AttnCache att;
        FfnCache ffn;
        AdapterCache ad_sa, ad_ffn;
    };
    struct DecLayerCache {
        Mat y0, a, s, y1, c_in, c, y2, f, m;
        NormCache n_sa, n_ca, n_ffn;
        AttnCache self_att, cross_att;
        FfnCache ffn;
        AdapterCache ad_sa, ad_ca, ad_ffn;
    };
    struct EncCache {
        std::vector<EncLayerCache> layers;
        Mat pre_final;
        NormCache n_final;
    };
    struct DecCache {
        std::vector<DecLayerCache> layers;
        Mat pre_final, hidden;
        NormCache n_final;
    };

    static Mat linear_fwd(const Linear& L, const Mat& X) {
        Mat Y = X * CMat(L.w.v, L.out, L.in).transpose();
        if (L.b.v) Y.rowwise() += CRow(L.b.v, L.out);
        return Y;
    }

    static Mat linear_bwd(const Linear& L, const Mat& X, const Mat& dY) {
        if (L.w.g) MMat(L.w.g, L.out, L.in).noalias() += dY.transpose() * X;
        if (L.b.g) MRow(L.b.g, L.out) += dY.colwise().sum();
        return dY * CMat(L.w.v, L.out, L.in);
    }

    static Mat norm_fwd(const Norm& N, const Mat& X, NormCache& c) {
        const auto rows = X.rows();
        c.xhat.resize(rows, N.dim);
        c.rstd.resize(rows);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const Real mu = X.row(r).mean();
            const Real var = (X.row(r).array() - mu).square().mean();
            c.rstd(r) = 1.0 / std::sqrt(var + kNormEps);
            c.xhat.row(r) = (X.row(r).array() - mu) * c.rstd(r);
        }
        Mat Y = c.xhat.array().rowwise() * CRow(N.gain.v, N.dim).array();
        Y.rowwise() += CRow(N.bias.v, N.dim);
        return Y;
    }

    static Mat norm_bwd(const Norm& N, const NormCache& c, const Mat& dY) {
        if (N.gain.g) MRow(N.gain.g, N.dim) += (dY.array() * c.xhat.array()).colwise().sum().matrix();
        if (N.bias.g) MRow(N.bias.g, N.dim) += dY.colwise().sum();
        Mat dxhat = dY.array().rowwise() * CRow(N.gain.v, N.dim).array();
        Mat dX(dY.rows(), N.dim);
        for (Eigen::Index r = 0; r < dY.rows(); ++r) {
            const Real m1 = dxhat.row(r).mean();
            const Real m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
            dX.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
        }
        return dX;
    }

    Mat attn_fwd(const Attention& A, const Mat& xq, const Mat& xkv, bool causal, AttnCache& c) const {
        const int H = cfg_.num_heads;
        const int dh = cfg_.model_dim / H;
        const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
        c.q = linear_fwd(A.q, xq);
        c.k = linear_fwd(A.k, xkv);
        c.v = linear_fwd(A.v, xkv);
        const auto Tq = xq.rows();
        const auto Tk = xkv.rows();
        c.ctx.resize(Tq, cfg_.model_dim);
        c.probs.resize(static_cast<std::size_t>(H));
        for (int h = 0; h < H; ++h) {
            Mat S = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose() * scale;
            Mat& P = c.probs[static_cast<std::size_t>(h)];
            P.resize(Tq, Tk);
            for (Eigen::Index i = 0; i < Tq; ++i) {
                const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, Tk) : Tk;
                const Real mx = S.row(i).head(visible).maxCoeff();
                Real z = 0;
                for (Eigen::Index j = 0; j < Tk; ++j) {
                    const Real e = j < visible ? std::exp(S(i, j) - mx) : 0.0;
                    P(i, j) = e;
                    z += e;
                }
                P.row(i) /= z;
            }
            c.ctx.middleCols(h * dh, dh) = P * c.v.middleCols(h * dh, dh);
        }
        return linear_fwd(A.o, c.ctx);
    }

    // Returns (d xq, d xkv).
    std::pair<Mat, Mat> attn_bwd(const Attention& A, const Mat& xq, const Mat& xkv, const AttnCache& c,
                                 const Mat& dout) const {
        const int H = cfg_.num_heads;
        const int dh = cfg_.model_dim / H;
        const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
        const Mat dctx = linear_bwd(A.o, c.ctx, dout);
        Mat dq = Mat::Zero(c.q.rows(), c.q.cols());
        Mat dk = Mat::Zero(c.k.rows(), c.k.cols());
        Mat dv = Mat::Zero(c.v.rows(), c.v.cols());
        for (int h = 0; h < H; ++h) {
            const Mat& P = c.probs[static_cast<std::size_t>(h)];
            const auto dctx_h = dctx.middleCols(h * dh, dh);
            Mat dP = dctx_h * c.v.middleCols(h * dh, dh).transpose();
            dv.middleCols(h * dh, dh).noalias() += P.transpose() * dctx_h;
            const RowVec inner = (dP.array() * P.array()).rowwise().sum().transpose();
            Mat dS = P.array() * (dP.array().colwise() - inner.transpose().array());
            dq.middleCols(h * dh, dh).noalias() += dS * c.k.middleCols(h * dh, dh) * scale;
            dk.middleCols(h * dh, dh).noalias() += dS.transpose() * c.q.middleCols(h * dh, dh) * scale;
        }
        Mat dxq = linear_bwd(A.q, xq, dq);
        Mat dxkv = linear_bwd(A.k, xkv, dk);
        dxkv += linear_bwd(A.v, xkv, dv);
        return {std::move(dxq), std::move(dxkv)};
    }

    static Mat ffn_fwd(const Ffn& F, const Mat& x, FfnCache& c) {
        c.pre = linear_fwd(F.fc1, x);
        c.act = c.pre.cwiseMax(0.0);
        return linear_fwd(F.fc2, c.act);
    }

    static Mat ffn_bwd(const Ffn& F, const Mat& x, const FfnCache& c, const Mat& dout) {
        Mat dact = linear_bwd(F.fc2, c.act, dout);
        Mat dpre = (c.pre.array() > 0.0).select(dact, 0.0);
        return linear_bwd(F.fc1, x, dpre);
    }

    static Real gelu(Real x) {
        constexpr Real k = 0.7978845608028654;  // sqrt(2/pi)
        return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
    }

    static Real gelu_grad(Real x) {
        constexpr Real k = 0.7978845608028654;
        const Real u = k * (x + 0.044715 * x * x * x);
        const Real t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3 * 0.044715 * x * x);
    }

    Mat adapter_fwd(const Adapter& A, const Mat& x, AdapterCache& c) const {
        if (!A.active) return x;
        c.pre = linear_fwd(A.down, x);
        if (cfg_.adapter_nonlinearity == Nonlinearity::Relu) {
            c.act = c.pre.cwiseMax(0.0);
        } else {
            c.act = c.pre.unaryExpr([](Real v) { return gelu(v); });
        }
        return x + linear_fwd(A.up, c.act);
    }

    Mat adapter_bwd(const Adapter& A, const Mat& x, const AdapterCache& c, const Mat& dout) const {
        if (!A.active) return dout;
        Mat dact = linear_bwd(A.up, c.act, dout);
        Mat dpre;
        if (cfg_.adapter_nonlinearity == Nonlinearity::Relu) {
            dpre = (c.pre.array() > 0.0).select(dact, 0.0);
        } else {
            dpre = dact.array() * c.pre.unaryExpr([](Real v) { return gelu_grad(v); }).array();
        }
        return dout + linear_bwd(A.down, x, dpre);
    }

    Mat embed(std::span<const int> tokens) const {
        const auto T = static_cast<Eigen::Index>(tokens.size());
        if (T > cfg_.max_seq_len) throw ConfigError("sequence longer than model.max_seq_len");
        Mat x(T, cfg_.model_dim);
        const CMat E(embed_.v, cfg_.vocab_size, cfg_.model_dim);
        for (Eigen::Index t = 0; t < T; ++t) {
            const int id = tokens[static_cast<std::size_t>(t)];
            if (id < 0 || id >= cfg_.vocab_size) throw ConfigError("token id outside the vocabulary");
            x.row(t) = E.row(id) + positions_.row(t);
        }
        return x;
    }

    void embed_bwd(std::span<const int> tokens, const Mat& dx) const {
        if (!embed_.g) return;
        MMat gE(embed_.g, cfg_.vocab_size, cfg_.model_dim);
        for (std::size_t t = 0; t < tokens.size(); ++t) gE.row(tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
    }

    Mat encode(std::span<const int> src, EncCache& c) const {
        Mat x = embed(src);
        c.layers.resize(enc_.size());
        for (std::size_t l = 0; l < enc_.size(); ++l) {
            const auto& L = enc_[l];
            auto& k = c.layers[l];
            k.x0 = x;
            k.a = norm_fwd(L.ln_sa, x, k.n_sa);
            k.s = attn_fwd(L.sa, k.a, k.a, false, k.att);
            x += adapter_fwd(L.ad_sa, k.s, k.ad_sa);
            k.x1 = x;
            k.f = norm_fwd(L.ln_ffn, x, k.n_ffn);
            k.m = ffn_fwd(L.ffn, k.f, k.ffn);
            x += adapter_fwd(L.ad_ffn, k.m, k.ad_ffn);
        }
        c.pre_final = x;
        return norm_fwd(enc_ln_, x, c.n_final);
    }

    void encode_bwd(std::span<const int> src, const EncCache& c, const Mat& dmem) const {
        Mat dx = norm_bwd(enc_ln_, c.n_final, dmem);
        for (std::size_t l = enc_.size(); l-- > 0;) {
            const auto& L = enc_[l];
            const auto& k = c.layers[l];
            // x2 = x1 + ad_ffn(ffn(ln(x1)))
            Mat dm = adapter_bwd(L.ad_ffn, k.m, k.ad_ffn, dx);
            Mat df = ffn_bwd(L.ffn, k.f, k.ffn, dm);
            dx += norm_bwd(L.ln_ffn, k.n_ffn, df);
            // x1 = x0 + ad_sa(attn(ln(x0)))
            Mat ds = adapter_bwd(L.ad_sa, k.s, k.ad_sa, dx);
            auto [dq, dkv] = attn_bwd(L.sa, k.a, k.a, k.att, ds);
            dx += norm_bwd(L.ln_sa, k.n_sa, dq + dkv);
        }
        embed_bwd(src, dx);
    }

    Mat decode(const Mat& memory, std::span<const int> tgt_in, DecCache& c) const {
        Mat y = embed(tgt_in);
        c.layers.resize(dec_.size());
        for (std::size_t l = 0; l < dec_.size(); ++l) {
            const auto& L = dec_[l];
            auto& k = c.layers[l];
            k.y0 = y;
            k.a = norm_fwd(L.ln_sa, y, k.n_sa);
            k.s = attn_fwd(L.sa, k.a, k.a, true, k.self_att);
            y += adapter_fwd(L.ad_sa, k.s, k.ad_sa);
            k.y1 = y;
            k.c_in = norm_fwd(L.ln_ca, y, k.n_ca);
            k.c = attn_fwd(L.ca, k.c_in, memory, false, k.cross_att);
            y += adapter_fwd(L.ad_ca, k.c, k.ad_ca);
            k.y2 = y;
            k.f = norm_fwd(L.ln_ffn, y, k.n_ffn);
            k.m = ffn_fwd(L.ffn, k.f, k.ffn);
            y += adapter_fwd(L.ad_ffn, k.m, k.ad_ffn);
        }
        c.pre_final = y;
        c.hidden = norm_fwd(dec_ln_, y, c.n_final);
        return linear_fwd(out_, c.hidden);
    }

    // Returns d memory.
    Mat decode_bwd(const Mat& memory, std::span<const int> tgt_in, const DecCache& c, const Mat& dlogits) const {
        Mat dmem = Mat::Zero(memory.rows(), memory.cols());
        Mat dh = linear_bwd(out_, c.hidden, dlogits);
        Mat dy = norm_bwd(dec_ln_, c.n_final, dh);
        for (std::size_t l = dec_.size(); l-- > 0;) {
            const auto& L = dec_[l];
            const auto& k = c.layers[l];
            Mat dm = adapter_bwd(L.ad_ffn, k.m, k.ad_ffn, dy);
            Mat df = ffn_bwd(L.ffn, k.f, k.ffn, dm);
            dy += norm_bwd(L.ln_ffn, k.n_ffn, df);

            Mat dc = adapter_bwd(L.ad_ca, k.c, k.ad_ca, dy);
            auto [dcq, dckv] = attn_bwd(L.ca, k.c_in, memory, k.cross_att, dc);
            dmem += dckv;
            dy += norm_bwd(L.ln_ca, k.n_ca, dcq);

            Mat ds = adapter_bwd(L.ad_sa, k.s, k.ad_sa, dy);
            auto [dq, dkv] = attn_bwd(L.sa, k.a, k.a, k.self_att, ds);
            dy += norm_bwd(L.ln_sa, k.n_sa, dq + dkv);
        }
        embed_bwd(tgt_in, dy);
        return dmem;
    }

    ModelConfig cfg_;
    std::shared_ptr<const AlignedVec> values_;
    Slot embed_;
    std::vector<EncLayer> enc_;
    Norm enc_ln_;
    std::vector<DecLayer> dec_;
    Norm dec_ln_;
    Linear out_;
    Mat positions_;
};

Real Net::row_loss(std::span<const int> src, std::span<const int> tgt_in, std::span<const int> gold, bool backward,
                   Real scale) const {
    EncCache ec;
    DecCache dc;
    const Mat memory = encode(src, ec);
    const Mat logits = decode(memory, tgt_in, dc);

    const auto T = logits.rows();
    Real total = 0;
    Mat dlogits(T, logits.cols());
    for (Eigen::Index t = 0; t < T; ++t) {
        const Real mx = logits.row(t).maxCoeff();
        const RowVec e = (logits.row(t).array() - mx).exp().matrix();
        const Real z = e.sum();
        const int y = gold[static_cast<std::size_t>(t)];
        total -= (logits(t, y) - mx) - std::log(z);
        dlogits.row(t) = e / z * scale;
        dlogits(t, y) -= scale;
    }
    if (!std::isfinite(total)) throw NumericError("non-finite loss in forward pass");
    if (backward) {
        const Mat dmem = decode_bwd(memory, tgt_in, dc, dlogits);
        encode_bwd(src, ec, dmem);
    }
    return total;
}

template <typename T>
std::span<const T> row_span(const std::vector<T>& v, int row, int stride, int len) {
    return std::span<const T>(v).subspan(static_cast<std::size_t>(row) * static_cast<std::size_t>(stride),
                                         static_cast<std::size_t>(len));
}

// Runs every row of the batch, in parallel when asked. Each row writes its
// own zeroed gradient buffer and buffers are added to the total in row order,
// so the result does not depend on the thread count. Rows go in chunks of
// the thread count so a handful of buffers are reused across the batch.
GradResult run_rows(const ToyModel& model, const Batch& batch, bool backward, Real scale, Exec exec) {
    if (batch.rows <= 0) throw ConfigError("empty batch");
    const GradLayout layout(model.params, true);
    const auto rows = static_cast<std::size_t>(batch.rows);
    std::vector<Real> row_loss(rows, 0.0);
    std::vector<std::exception_ptr> errors(rows);

    const Net shared_net(model, backward ? &layout : nullptr);
    const bool parallel = exec == Exec::Parallel && batch.rows > 1;
    const int chunk = parallel ? std::max(1, std::min(batch.rows, omp_get_max_threads())) : 1;

    thread_local std::vector<AlignedVec> pool;
    const auto width = static_cast<std::size_t>(layout.total);
    if (backward) {
        if (pool.size() < static_cast<std::size_t>(chunk)) pool.resize(static_cast<std::size_t>(chunk));
        for (int i = 0; i < chunk; ++i) pool[static_cast<std::size_t>(i)].resize(width);
    }
    AlignedVec total(backward ? width : 0, 0.0);
    std::vector<AlignedVec>& buffers = pool;

    for (int start = 0; start < batch.rows; start += chunk) {
        const int stop = std::min(batch.rows, start + chunk);
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
        for (int r = start; r < stop; ++r) {
            const auto ri = static_cast<std::size_t>(r);
            try {
                Net net = shared_net;
                if (backward) {
                    auto& buf = buffers[static_cast<std::size_t>(r - start)];
                    std::fill(buf.begin(), buf.end(), 0.0);
                    net.bind_grads(buf.data());
                }
                row_loss[ri] = net.row_loss(row_span(batch.source, r, batch.src_len, batch.src_lengths[ri]),
                                            row_span(batch.target_in, r, batch.tgt_len, batch.tgt_lengths[ri]),
                                            row_span(batch.target_gold, r, batch.tgt_len, batch.tgt_lengths[ri]),
                                            backward, scale);
            } catch (...) {
                errors[ri] = std::current_exception();
            }
        }
        if (backward) {
            for (int r = start; r < stop; ++r) {
                const auto& g = buffers[static_cast<std::size_t>(r - start)];
                for (std::size_t i = 0; i < width; ++i) total[i] += g[i];
            }
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    GradResult result;
    for (std::size_t r = 0; r < rows; ++r) {
        result.loss.sum += row_loss[r];
        result.loss.tokens += batch.tgt_lengths[r];
    }
    if (!backward) return result;

    for (std::size_t i = 0; i < total.size(); ++i) {
        if (!std::isfinite(total[i])) throw NumericError("non-finite gradient");
    }
    for (const auto& [name, offset] : layout.offsets) {
        const auto& t = model.params.at(name);
        ParamTensor g{name, t.shape, {}, true, t.side};
        g.values.assign(total.begin() + offset, total.begin() + offset + t.numel());
        result.grads.insert(std::move(g));
    }
    return result;
}

}  // namespace

LossValue loss(const ToyModel& model, const Batch& batch, Exec exec) {
    return run_rows(model, batch, false, 1.0, exec).loss;
}

GradResult grad(const ToyModel& model, const Batch& batch, Real scale, Exec exec) {
    return run_rows(model, batch, true, scale, exec);
}

std::vector<std::vector<Real>> forward_logits(const ToyModel& model, const Batch& batch) {
    const Net net(model, nullptr);
    std::vector<std::vector<Real>> out;
    for (int r = 0; r < batch.rows; ++r) {
        const auto ri = static_cast<std::size_t>(r);
        const Mat mem = net.encode_only(row_span(batch.source, r, batch.src_len, batch.src_lengths[ri]));
        const Mat logits = net.decode_logits(mem, row_span(batch.target_in, r, batch.tgt_len, batch.tgt_lengths[ri]));
        out.emplace_back(logits.data(), logits.data() + logits.size());
    }
    return out;
}

std::vector<int> greedy_decode(const ToyModel& model, std::span<const int> source, int target_tag, int max_len) {
    const Net net(model, nullptr);
    const Mat memory = net.encode_only(source);
    std::vector<int> prefix{target_tag};
    std::vector<int> out;
    const int limit = std::min(max_len, model.config.max_seq_len - 1);
    while (static_cast<int>(out.size()) < limit) {
        const Mat logits = net.decode_logits(memory, prefix);
        Eigen::Index best = 0;
        logits.row(logits.rows() - 1).maxCoeff(&best);
        const int tok = static_cast<int>(best);
        if (tok == kEosId) break;
        out.push_back(tok);
        prefix.push_back(tok);
    }
    return out;
}

std::vector<Real> adapter_apply(std::span<const Real> h, std::span<const Real> down_w, std::span<const Real> down_b,
                                std::span<const Real> up_w, std::span<const Real> up_b, int bottleneck,
                                Nonlinearity act, bool active) {
    const auto d = h.size();
    std::vector<Real> out(h.begin(), h.end());
    if (!active) return out;
    const auto b = static_cast<std::size_t>(bottleneck);
    if (down_w.size() != b * d || down_b.size() != b || up_w.size() != d * b || up_b.size() != d) {
        throw StructuralMismatch("adapter parameter shapes do not match the input width");
    }
    std::vector<Real> z(b);
    for (std::size_t j = 0; j < b; ++j) {
        Real acc = down_b[j];
        for (std::size_t i = 0; i < d; ++i) acc += down_w[j * d + i] * h[i];
        if (act == Nonlinearity::Relu) {
            z[j] = std::max<Real>(acc, 0.0);
        } else {
            constexpr Real k = 0.7978845608028654;
            z[j] = 0.5 * acc * (1.0 + std::tanh(k * (acc + 0.044715 * acc * acc * acc)));
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        Real acc = up_b[i];
        for (std::size_t j = 0; j < b; ++j) acc += up_w[i * b + j] * z[j];
        out[i] += acc;
    }
    return out;
}

}  // namespace fedmt
