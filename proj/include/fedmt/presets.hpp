#pragma once

#include <cstdint>
#include <string>

#include "fedmt/model.hpp"

namespace fedmt {

// mBART-50 large: shared embedding tied with the LM head, learned positions
// (1024 + 2 offset rows) on both sides, biased projections, pre-LN layers with
// embedding and final layer norms.
struct Mbart50Shape {
    std::int64_t vocab = 250054;
    std::int64_t model_dim = 1024;
    std::int64_t ffn_dim = 4096;
    std::int64_t enc_layers = 12;
    std::int64_t dec_layers = 12;
    std::int64_t positions = 1026;
    std::int64_t bottleneck = 64;
};

struct ParamCounts {
    std::string label;
    std::int64_t backbone = 0;
    std::int64_t layer_norm = 0;  // part of backbone, trainable alongside adapters
    std::int64_t one_adapter = 0;
    int n_adapters = 0;
    std::int64_t adapters = 0;
    std::int64_t pruned_third = 0;  // adapters kept by one pruning third; 0 if not applicable
    int total_layers = 0;
};

ParamCounts mbart50_counts(const Mbart50Shape& shape = {});

// Counts read off an actually built toy model.
ParamCounts toy_counts(const ModelConfig& config);

struct CountTableOptions {
    int n_clients = 12;
    double bandwidth_bps = 1e9;
    int bytes_per_param = 4;
    // Layers transmitted by a layer-subset baseline (Controller-style); 0 hides the row.
    int shared_layers = 0;
};

std::string format_count_table(const ParamCounts& c, const CountTableOptions& opt);

}  // namespace fedmt
