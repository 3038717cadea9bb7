#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedmt/data.hpp"
#include "fedmt/model.hpp"

namespace fedmt {

using Cluster = std::vector<int>;  // sorted client ids

enum class ClusterStrategy { Global, Families, Gradients, Random, Singletons };
enum class Ablation { Both, EncoderOnly, DecoderOnly, None };

std::string to_string(ClusterStrategy s);
std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& text);

struct ClusterAssignment {
    std::string strategy;
    std::vector<Cluster> encoder;  // G_e
    std::vector<Cluster> decoder;  // G_d

    std::size_t m_e() const { return encoder.size(); }
    std::size_t m_d() const { return decoder.size(); }

    // Disjoint cover of `client_ids` with no empty cluster, on both sides.
    // Throws PartitionError.
    void validate(std::span<const int> client_ids) const;

    // Human-readable table for clusters.txt.
    std::string to_table(std::span<const Client> clients) const;
};

// Clusters sorted by smallest member, members sorted ascending.
void canonicalize(std::vector<Cluster>& clusters);

// Encoder side keys on source family, decoder side on target family; in m2en
// the decoder side is a single all-client cluster.
std::vector<Cluster> cluster_by_family(std::span<const Client> clients, Side side, Mode mode);

struct GradientFeature {
    int client_id = 0;
    std::vector<Real> values;  // unit L2 norm
};

// Mean per-sentence loss gradient over `train`, restricted to tensors whose
// name starts with `slice_prefix`, flattened in name order and L2-normalised.
GradientFeature compute_gradient_feature(int client_id, std::span<const EncodedPair> train, const ToyModel& probe,
                                         const std::string& slice_prefix, int batch_size = 8);

// Default probe slices: the first encoder / first decoder adapter.
std::string encoder_probe_slice();
std::string decoder_probe_slice();

// Spherical k-means: cosine distance on unit vectors, k-means++ seeding,
// at most 100 Lloyd iterations, `restarts` seeded restarts keeping the lowest
// cost. Deterministic per seed.
std::vector<Cluster> cluster_by_gradient(std::span<const GradientFeature> features, int k, std::uint64_t seed,
                                         int restarts = 8);

// Sum over points of (1 - cos(point, cluster mean)).
double cosine_cost(std::span<const GradientFeature> features, const std::vector<Cluster>& clusters);

// Seeded shuffle then round-robin into k clusters.
std::vector<Cluster> cluster_random(std::span<const int> client_ids, int k, std::uint64_t seed);

struct ClusteringInputs {
    std::span<const Client> clients;
    Mode mode = Mode::M2en;
    std::uint64_t seed = 0;
    std::span<const GradientFeature> encoder_features;
    std::span<const GradientFeature> decoder_features;
    int restarts = 8;
};

// Applies the strategy to the sides selected by `ablation`; unselected sides
// get one global cluster.
ClusterAssignment assemble(ClusterStrategy strategy, Ablation ablation, const ClusteringInputs& inputs);

}  // namespace fedmt
