#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fedmt/errors.hpp"
#include "fedmt/experiment.hpp"
#include "fedmt/presets.hpp"

using namespace fedmt;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string error_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

// Small enough to run a few times inside the unit suite.
ExperimentConfig tiny(const std::string& method) {
    return parse_config(R"({"mode":"m2en","method":")" + method + R"(","seeds":[3],
        "data":{"scale":0.004},
        "model":{"model_dim":16,"num_heads":2,"ffn_dim":32,"adapter_bottleneck":2},
        "pretrain":{"sentences_per_pair":20,"epochs":1},
        "fed":{"rounds":2}})");
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("fedmt_test_" + name);
    fs::remove_all(p);
    return p;
}

int line_count(const std::string& s) {
    int n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

}  // namespace

TEST_CASE("config defaults and key-path errors") {
    const auto c = parse_config(R"({"mode":"m2m","method":"adapter-fed"})");
    CHECK(c.mode == Mode::M2m);
    CHECK(c.method == Method::AdapterFed);
    CHECK(c.fed.rounds == 5);
    CHECK(c.fed.batch_size == 8);
    CHECK(c.fed.aggregation == Aggregation::FedMean);
    CHECK(c.model.model_dim == 64);
    CHECK(c.model.adapter_bottleneck == 2);
    CHECK(c.seeds == std::vector<std::uint64_t>{1});

    CHECK(error_of(R"({"fed":{"roundz":3}})").find("fed.roundz") != std::string::npos);
    CHECK(error_of(R"({"model":{"model_dim":"x"}})").find("model.model_dim") != std::string::npos);
    CHECK(error_of(R"({"seeds":[1,-2]})").find("seeds[1]") != std::string::npos);
    CHECK(error_of(R"({"method":"nope"})").find("method") != std::string::npos);
    CHECK(error_of("{not json").find("not valid JSON") != std::string::npos);
    CHECK(error_of(R"({"method":"model-fed","pruning":"input_end"})").find("pruning") != std::string::npos);
    CHECK(!error_of(R"({"method":"adapter-fed","ablation":"encoder_only"})").empty());
    CHECK(!error_of(R"({"model":{"model_dim":30,"num_heads":4}})").empty());
    CHECK(error_of(R"({"method":"adapter-families","ablation":"encoder_only"})").empty());
}

TEST_CASE("config round-trips through JSON") {
    auto c = parse_config(R"({"mode":"m2m","method":"adapter-gradients","ablation":"decoder_only","seeds":[4,5],
        "aggregation":"fedavg","fed":{"rounds":3,"learning_rate":0.01},"data":{"scale":0.125}})");
    const auto text = to_json(c);
    const auto back = parse_config(text);
    CHECK(to_json(back) == text);
    CHECK(back.seeds == std::vector<std::uint64_t>{4, 5});
    CHECK(back.fed.aggregation == Aggregation::FedAvg);
    CHECK(back.ablation == Ablation::DecoderOnly);
    CHECK(back.data.scale == 0.125);
}

TEST_CASE("parameter counts") {
    const auto m = mbart50_counts();
    CHECK(m.backbone == 610879488);
    CHECK(m.adapters == 7929600);
    CHECK(m.n_adapters == 60);
    CHECK(m.layer_norm == 131072);
    CHECK(m.pruned_third == 2643200);
    const auto table = format_count_table(m, {});
    CHECK(table.find("98.70%") != std::string::npos);
    CHECK(table.find("7929600") != std::string::npos);

    auto cfg = desk_model();
    cfg.vocab_size = 50;
    const auto t = toy_counts(cfg);
    const ToyModel full = build_model(cfg, 1);
    CHECK(t.backbone + t.adapters == count_params(full.params));
    CHECK(t.adapters == count_adapter_params(full));
    CHECK(t.n_adapters == 2 * cfg.enc_layers + 3 * cfg.dec_layers);
}

TEST_CASE("run writes reports; adapter-local has no transfers") {
    const auto dir = scratch("local");
    const auto results = run(tiny("adapter-local"), dir.string());
    REQUIRE(results.size() == 1);
    const auto comm = read_file(dir / "seed_3" / "comm.csv");
    CHECK(line_count(comm) == 1);
    CHECK(fs::exists(dir / "summary.txt"));
    CHECK(fs::exists(dir / "summary.csv"));
    CHECK(fs::exists(dir / "seed_3" / "metrics.csv"));
    CHECK(!fs::exists(dir / "seed_3.tmp"));
    CHECK(results[0].report.ledger.total_bytes() == 0);
    fs::remove_all(dir);
}

TEST_CASE("federated run: ledger rows and cluster table") {
    const auto dir = scratch("families");
    const auto cfg = tiny("adapter-families");
    const auto results = run(cfg, dir.string());
    REQUIRE(results.size() == 1);
    const auto& r = results[0];
    CHECK(line_count(read_file(dir / "seed_3" / "comm.csv")) == 1 + cfg.fed.rounds * 8);
    CHECK(r.assignment.m_e() == 4);
    CHECK(r.assignment.m_d() == 1);
    const auto clusters = read_file(dir / "seed_3" / "clusters.txt");
    CHECK(clusters.find("zh-en") != std::string::npos);
    // only adapters and layer norms travel
    CHECK(r.report.payload_bytes == r.trainable_params * cfg.fed.bytes_per_param);
    CHECK(r.trainable_params < r.total_params / 10);
    fs::remove_all(dir);
}

TEST_CASE("identical config and seed give byte-identical metrics") {
    const auto a = scratch("det_a"), b = scratch("det_b");
    const auto cfg = tiny("adapter-fed");
    run(cfg, a.string());
    run(cfg, b.string());
    const auto ma = read_file(a / "seed_3" / "metrics.csv");
    CHECK(!ma.empty());
    CHECK(ma == read_file(b / "seed_3" / "metrics.csv"));
    CHECK(read_file(a / "seed_3" / "comm.csv") == read_file(b / "seed_3" / "comm.csv"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("centralized methods train one model for every pair") {
    const auto r = run_seed(tiny("centralized-adapter"), 3);
    CHECK(r.report.ledger.entries().empty());
    CHECK(r.report.best_round.size() == 8);
    CHECK(r.final_dev_loss < r.round0_dev_loss);
}

TEST_CASE("gen-data writes corpora") {
    const auto dir = scratch("gen");
    generate_data(tiny("adapter-fed"), dir.string());
    CHECK(fs::exists(dir / "seed_3" / "languages.tsv"));
    CHECK(fs::exists(dir / "seed_3" / "clients.tsv"));
    fs::remove_all(dir);
}
