#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedmt/param_set.hpp"

namespace fedmt {

enum class Nonlinearity { Relu, Gelu };

struct ModelConfig {
    int vocab_size = 0;
    int model_dim = 64;
    int num_heads = 4;
    int ffn_dim = 128;
    int enc_layers = 2;
    int dec_layers = 2;
    int adapter_bottleneck = 16;
    int max_seq_len = 32;
    Nonlinearity adapter_nonlinearity = Nonlinearity::Relu;
    // false: plain backbone, no adapter tensors at all (model-fed baselines)
    bool use_adapters = true;
    // true: every backbone tensor is trainable
    bool train_backbone = false;

    void validate() const;
};

std::string to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(const std::string& text);

enum class AdapterSite { SelfAttn, CrossAttn, Ffn };

struct AdapterId {
    Side side = Side::Encoder;
    int layer = 0;
    AdapterSite site = AdapterSite::SelfAttn;

    // e.g. "enc.layer0.sa_adapter"
    std::string prefix() const;
};

// Encoder layers get two adapters (after self-attention and after the FFN),
// decoder layers three (self-attention, cross-attention, FFN).
std::vector<AdapterId> adapter_ids(const ModelConfig& config);

// Parameters in one bottleneck adapter: down (b x d + b) and up (d x b + d).
std::int64_t adapter_param_count(std::int64_t model_dim, std::int64_t bottleneck);

enum class PruneStrategy { All, InputEnd, Middle, OutputEnd };

std::string to_string(PruneStrategy p);
PruneStrategy prune_strategy_from_string(const std::string& text);

struct ToyModel {
    ModelConfig config;
    NamedParamSet params;
    // Parallel to adapter_ids(config); false means pruned (identity, frozen).
    std::vector<bool> adapter_active;
};

// Token-id views of one sentence pair. `source` already carries the source
// language tag and EOS; `target` is the bare target sentence. The decoder input
// is [target tag, target...], the gold output is [target..., EOS].
struct EncodedPair {
    std::vector<int> source;
    int target_tag = 0;
    std::vector<int> target;
};

struct Batch {
    int rows = 0;
    int src_len = 0;
    int tgt_len = 0;
    std::vector<int> source;       // rows x src_len, PAD-filled
    std::vector<int> target_in;    // rows x tgt_len
    std::vector<int> target_gold;  // rows x tgt_len
    std::vector<int> src_lengths;
    std::vector<int> tgt_lengths;

    bool is_pad_target(int row, int pos) const { return pos >= tgt_lengths[static_cast<std::size_t>(row)]; }
};

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

Batch make_batch(std::span<const EncodedPair> pairs);

ToyModel build_model(const ModelConfig& config, std::uint64_t seed);

// Same backbone, no adapter tensors.
ToyModel strip_adapters(const ToyModel& model);

// Fresh zero-initialised-up adapters on top of an existing backbone. Backbone
// tensors keep their values; trainability follows `config`.
ToyModel attach_adapters(const NamedParamSet& backbone, const ModelConfig& config, std::uint64_t seed);

// Residual bottleneck adapter on a single vector:
//   h + up_w * act(down_w * h + down_b) + up_b
std::vector<Real> adapter_apply(std::span<const Real> h, std::span<const Real> down_w, std::span<const Real> down_b,
                                std::span<const Real> up_w, std::span<const Real> up_b, int bottleneck,
                                Nonlinearity act = Nonlinearity::Relu, bool active = true);

struct LossValue {
    Real sum = 0;
    std::int64_t tokens = 0;
    Real mean() const { return tokens > 0 ? sum / static_cast<Real>(tokens) : 0; }
};

enum class Exec { Serial, Parallel };

LossValue loss(const ToyModel& model, const Batch& batch, Exec exec = Exec::Parallel);

struct GradResult {
    LossValue loss;
    NamedParamSet grads;  // trainable tensors only
};

// Gradient of scale * (summed cross-entropy over non-pad target tokens).
GradResult grad(const ToyModel& model, const Batch& batch, Real scale = 1.0, Exec exec = Exec::Parallel);

// Row-major [tgt_len x vocab] logits for each row of the batch (unpadded length).
std::vector<std::vector<Real>> forward_logits(const ToyModel& model, const Batch& batch);

std::vector<int> greedy_decode(const ToyModel& model, std::span<const int> source, int target_tag, int max_len);

ToyModel apply_pruning(const ToyModel& model, PruneStrategy strategy);

// Trainable parameters that sit inside adapters (layer norms excluded).
std::int64_t count_adapter_params(const ToyModel& model, bool trainable_only = true);

}  // namespace fedmt
