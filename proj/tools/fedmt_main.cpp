// fedmt: run federated adapter experiments, count parameters, emit synthetic data.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedmt/errors.hpp"
#include "fedmt/experiment.hpp"
#include "fedmt/presets.hpp"

using namespace fedmt;

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw ConfigError("--seeds: empty entry in '" + text + "'");
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
        }
        if (used != item.size() || item[0] == '-') throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("--seeds: no seeds given");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated multilingual NMT simulator with clustered adapter aggregation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds_text, preset;
    int n_clients = 12;
    double bandwidth_mbps = 1000;

    auto* run_cmd = app.add_subcommand("run", "Run an experiment for every configured seed");
    run_cmd->add_option("--config", config_path, "JSON experiment config")->required();
    run_cmd->add_option("--out", out_dir, "Report directory")->required();
    run_cmd->add_option("--seeds", seeds_text, "Comma-separated seeds overriding the config, e.g. 1,2,3");

    auto* count_cmd = app.add_subcommand("count-params", "Print parameter counts, payloads and transfer times");
    auto* preset_opt = count_cmd->add_option("--preset", preset, "Named preset")->check(CLI::IsMember({"mbart50"}));
    auto* config_opt = count_cmd->add_option("--config", config_path, "Toy experiment config");
    preset_opt->excludes(config_opt);
    count_cmd->add_option("--clients", n_clients, "Clients sharing the server link")->check(CLI::PositiveNumber);
    count_cmd->add_option("--bandwidth-mbps", bandwidth_mbps, "Server bandwidth")->check(CLI::PositiveNumber);

    auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic languages and client corpora");
    gen_cmd->add_option("--config", config_path, "JSON experiment config")->required();
    gen_cmd->add_option("--out", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (run_cmd->parsed()) {
            auto config = load_config(config_path);
            if (!seeds_text.empty()) {
                config.seeds = parse_seed_list(seeds_text);
                config.validate();
            }
            const auto results = run(config, out_dir);
            std::cout << summary_text(config, results);
        } else if (count_cmd->parsed()) {
            CountTableOptions opt;
            opt.n_clients = n_clients;
            opt.bandwidth_bps = bandwidth_mbps * 1e6;
            if (!config_path.empty()) {
                const auto config = load_config(config_path);
                const auto ws = prepare_workspace(config, config.seeds.front());
                opt.bytes_per_param = config.fed.bytes_per_param;
                std::cout << format_count_table(toy_counts(ws.model), opt);
            } else {
                opt.shared_layers = 8;
                std::cout << format_count_table(mbart50_counts(), opt);
            }
        } else if (gen_cmd->parsed()) {
            generate_data(load_config(config_path), out_dir);
            std::cout << "wrote " << out_dir << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
