#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedmt/clustering.hpp"
#include "fedmt/data.hpp"
#include "fedmt/eval.hpp"
#include "fedmt/model.hpp"
#include "fedmt/optim.hpp"
#include "fedmt/param_set.hpp"

namespace fedmt {

enum class Aggregation { FedAvg, FedMean };

std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& text);

struct FedConfig {
    int rounds = 5;
    Aggregation aggregation = Aggregation::FedMean;
    int local_epochs = 1;
    // > 0: exactly this many optimizer steps per round instead of whole epochs.
    int fixed_steps = 0;
    int batch_size = 8;
    int grad_accumulation = 16;
    Real learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::uint64_t seed = 1;
    double bandwidth_bps = 1e9;
    int bytes_per_param = 4;
    Exec exec = Exec::Parallel;

    void validate() const;
};

struct LocalUpdateResult {
    NamedParamSet params;
    LossValue train_loss;
    int steps = 0;
};

// One round of local training: shuffled micro-batches of cfg.batch_size, an
// optimizer step every cfg.grad_accumulation micro-batches (and once more for a
// trailing partial window), gradients token-averaged over the window.
LocalUpdateResult local_update(const ToyModel& model, Optimizer& optimizer, std::span<const EncodedPair> train,
                               const FedConfig& cfg, std::uint64_t shuffle_seed);

std::vector<Real> fedavg_weights(std::span<const std::int64_t> sizes);

NamedParamSet aggregate_fedavg(std::span<const NamedParamSet* const> sets, std::span<const std::int64_t> sizes,
                               const ParamFilter& filter = ParamFilter::trainable());
NamedParamSet aggregate_fedmean(std::span<const NamedParamSet* const> sets,
                                const ParamFilter& filter = ParamFilter::trainable());

struct RoundState {
    int round = 0;
    std::vector<NamedParamSet> params;  // indexed by client id
};

// Inner-cluster aggregation: encoder-side trainable tensors are averaged
// within each encoder cluster and broadcast back to its members, decoder-side
// tensors likewise within decoder clusters. Shared-side tensors follow the
// decoder clusters in m2m and one global cluster in m2en.
RoundState inner_cluster_aggregate(const RoundState& state, const ClusterAssignment& assignment,
                                   Aggregation rule, std::span<const std::int64_t> sizes, Mode mode);

struct TransferEstimate {
    double per_client_seconds = 0;
    double serialized_seconds = 0;  // all clients share the server's bandwidth
};

TransferEstimate estimate_transfer(std::int64_t payload_bytes, int n_clients, double bandwidth_bps);

class CommLedger {
public:
    struct Entry {
        int round = 0;
        int client = 0;
        std::int64_t uplink_bytes = 0;
        std::int64_t downlink_bytes = 0;
    };

    explicit CommLedger(double bandwidth_bps = 1e9) : bandwidth_bps_(bandwidth_bps) {}

    void record(int round, int client, std::int64_t uplink_bytes, std::int64_t downlink_bytes);

    const std::vector<Entry>& entries() const { return entries_; }
    double bandwidth_bps() const { return bandwidth_bps_; }
    std::int64_t total_uplink() const;
    std::int64_t total_downlink() const;
    std::int64_t total_bytes() const { return total_uplink() + total_downlink(); }
    // bytes * 8 / bandwidth
    double seconds(std::int64_t bytes) const;
    // Every transfer serialized through the server link.
    double serialized_seconds() const { return seconds(total_bytes()); }

    // Rows sorted by (round, client): round,client,uplink_bytes,downlink_bytes,uplink_s,downlink_s
    std::string to_csv() const;

private:
    double bandwidth_bps_;
    std::vector<Entry> entries_;
};

struct TrainingClient {
    int id = 0;
    std::vector<EncodedPair> train;
};

struct EvalClient {
    int id = 0;
    std::string pair;
    std::vector<EncodedPair> dev;
    std::vector<EncodedPair> test;
    int trainer = 0;  // index of the TrainingClient whose model this client uses
};

struct FederationSetup {
    Mode mode = Mode::M2en;
    ToyModel initial;
    std::vector<TrainingClient> trainers;
    std::vector<EvalClient> evals;
    ClusterAssignment assignment;  // over trainer ids 0..N-1
    bool aggregate = true;         // false: no server, no transfers
    FedConfig cfg;
    const Vocab* vocab = nullptr;  // for rendering BLEU tokens
    bool decode_test = true;
};

struct RoundRecord {
    int round = 0;
    int client = 0;  // eval client id
    Real train_loss = 0;  // of the client's trainer; NaN for round 0
    Real dev_loss = 0;
};

struct ExperimentReport {
    std::vector<RoundRecord> records;
    std::vector<int> best_round;  // per eval client
    std::vector<Real> best_dev_loss;
    MacroMicro bleu;
    CommLedger ledger;
    std::vector<NamedParamSet> best_params;  // per eval client
    std::int64_t payload_bytes = 0;  // per client per direction per round
    std::vector<double> local_seconds;  // wall time per trainer, summed over rounds
};

Real dev_loss(const ToyModel& model, std::span<const EncodedPair> split, Exec exec = Exec::Parallel);

// Round 0 is the untrained initial model; rounds 1..T follow
// local update -> aggregation -> dev evaluation. Each eval client keeps the
// round with its lowest dev loss and is decoded on its test split with it.
ExperimentReport run_experiment(const FederationSetup& setup);

struct PretrainConfig {
    int epochs = 4;
    int batch_size = 16;
    Real learning_rate = 3e-3;
    std::uint64_t seed = 1234;
};

// Centralized warm-up of a full backbone (no adapters) on a mixed corpus.
// Returns the trained backbone parameters.
NamedParamSet pretrain_backbone(const ModelConfig& config, std::span<const EncodedPair> corpus,
                                const PretrainConfig& pc);

}  // namespace fedmt
