#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedmt/clustering.hpp"
#include "fedmt/data.hpp"
#include "fedmt/federation.hpp"
#include "fedmt/model.hpp"

namespace fedmt {

enum class Method {
    ModelFed,
    AdapterFed,
    AdapterLocal,
    AdapterRandom,
    AdapterGradients,
    AdapterFamilies,
    CentralizedModel,
    CentralizedAdapter,
};

std::string to_string(Method m);
Method method_from_string(const std::string& text);
bool uses_adapters(Method m);
bool is_clustered(Method m);
bool is_centralized(Method m);

// Desk-scale model: d=64, 4 heads, ffn 256, 2+2 layers, bottleneck 2.
ModelConfig desk_model();

struct DataConfig {
    double scale = 1.0 / 16.0;
    // Language tables come from this seed, so every run seed shares one set of
    // languages (and one warm-up backbone); corpora follow the run seed.
    std::uint64_t language_seed = 1;
    LanguageOptions languages = desk_languages();
    LengthRange lengths;

    static LanguageOptions desk_languages() {
        LanguageOptions o;
        o.disjoint_families = true;
        o.family_drift = 4;
        return o;
    }
};

// Centralized warm-up of the backbone on translation between the family
// proto-languages.
struct PretrainSettings {
    bool enabled = true;
    int sentences_per_pair = 300;
    PretrainConfig train;
};

struct ExperimentConfig {
    Mode mode = Mode::M2en;
    Method method = Method::AdapterFamilies;
    Ablation ablation = Ablation::Both;
    PruneStrategy pruning = PruneStrategy::All;
    std::vector<std::uint64_t> seeds{1};
    DataConfig data;
    ModelConfig model = desk_model();  // vocab_size is filled in from the generated languages
    PretrainSettings pretrain;
    FedConfig fed = desk_fed();
    // Used instead of fed.learning_rate when the whole backbone trains.
    Real backbone_learning_rate = 1e-3;
    int cluster_restarts = 8;

    void validate() const;

    static FedConfig desk_fed() {
        FedConfig f;
        f.grad_accumulation = 1;
        f.learning_rate = 3e-3;
        return f;
    }
};

// JSON with the layout of to_json(); unknown keys and bad values throw
// ConfigError naming the key path. Missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string to_json(const ExperimentConfig& config);

// Everything a seed needs before training starts.
struct Workspace {
    std::vector<LanguageSpec> languages;
    std::vector<LanguageSpec> protos;
    std::vector<Client> clients;
    Vocab vocab;
    ModelConfig model;  // with vocab_size set
};

Workspace prepare_workspace(const ExperimentConfig& config, std::uint64_t seed);

// Warm-up backbone shared by every method and seed with the same language,
// model and pretrain settings; cached in-process.
NamedParamSet shared_backbone(const ExperimentConfig& config, const Workspace& ws);

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<Client> clients;
    ClusterAssignment assignment;
    ExperimentReport report;
    ModelConfig model;
    std::vector<bool> adapter_active;
    std::int64_t total_params = 0;
    std::int64_t trainable_params = 0;
    Real round0_dev_loss = 0;  // mean over eval clients
    Real final_dev_loss = 0;   // mean over eval clients, last round
};

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed);

std::string metrics_csv(const SeedResult& r);
std::string summary_text(const ExperimentConfig& config, const std::vector<SeedResult>& results);
std::string summary_csv(const std::vector<SeedResult>& results);

// Writes seed_<s>/{metrics.csv, comm.csv, clusters.txt, config.json, checkpoints/}
// for every seed plus summary.txt and summary.csv under out_dir.
std::vector<SeedResult> run(const ExperimentConfig& config, const std::string& out_dir);

// Writes languages.tsv, clients.tsv and per-client train/dev/test text files for each seed.
void generate_data(const ExperimentConfig& config, const std::string& out_dir);

}  // namespace fedmt
