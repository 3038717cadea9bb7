// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: fedmt_acceptance [path to the fedmt CLI]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fedmt/errors.hpp"
#include "fedmt/eval.hpp"
#include "fedmt/experiment.hpp"
#include "fedmt/presets.hpp"
#include "fedmt/seed.hpp"
#include "oracles.hpp"

using namespace fedmt;
namespace ft = fedmt::testing;
namespace fs = std::filesystem;

namespace {

struct Check {
    std::vector<std::string> failures;
    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// 1: parameter and cost arithmetic for the mbart50 preset
std::string cost_arithmetic(Check& c) {
    const auto m = mbart50_counts();
    c.expect(m.adapters == 7929600, "adapter count " + std::to_string(m.adapters));
    c.expect(std::abs(m.adapters - 8e6) / 8e6 <= 0.01, "adapters not within 1% of 8M");
    c.expect(std::abs(m.one_adapter - 131e3) / 131e3 <= 0.01, "single adapter " + std::to_string(m.one_adapter));
    c.expect(std::abs(m.pruned_third - 2.7e6) / 2.7e6 <= 0.05, "pruned third " + std::to_string(m.pruned_third));
    c.expect(near(m.backbone / 1e6, 610.9, 0.05), "backbone " + std::to_string(m.backbone));

    const auto full = payload(m.backbone);
    c.expect(near(full.total_bytes / 1e9, 2.44, 0.005), "payload " + std::to_string(full.total_bytes));
    const auto t_full = estimate_transfer(full.total_bytes, 12, 1e9);
    c.expect(near(t_full.per_client_seconds, 19.5, 0.05), "full transfer " + fmt("%.3f", t_full.per_client_seconds));
    c.expect(near(t_full.serialized_seconds, 234, 0.6), "12-client transfer " + fmt("%.2f", t_full.serialized_seconds));
    const auto t_ad = estimate_transfer(payload(m.adapters + m.layer_norm).total_bytes, 12, 1e9);
    c.expect(near(t_ad.per_client_seconds, 0.26, 0.005), "adapter transfer " + fmt("%.4f", t_ad.per_client_seconds));
    const double saving = 1.0 - static_cast<double>(m.adapters) / static_cast<double>(m.backbone);
    c.expect(saving >= 0.985, "saving " + fmt("%.4f", saving));
    return "adapters=" + std::to_string(m.adapters) + " saving=" + fmt("%.2f%%", 100 * saving) +
           " transfer=" + fmt("%.2fs", t_full.per_client_seconds) + "/" + fmt("%.2fs", t_full.serialized_seconds) +
           "/" + fmt("%.2fs", t_ad.per_client_seconds);
}

bool equal_on_side(const NamedParamSet& a, const NamedParamSet& b, Side side) {
    for (const auto& [name, t] : a) {
        if (t.trainable && t.side == side && !(t.values == b.at(name).values)) return false;
    }
    return true;
}

// 2: aggregation oracles
std::string aggregation(Check& c) {
    std::mt19937_64 rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto base = ft::random_param_set(rng, 1 + trial % 6);
        const int n = 2 + trial % 5;
        std::vector<NamedParamSet> sets{base};
        for (int i = 1; i < n; ++i) sets.push_back(ft::random_like(rng, base));
        std::vector<const NamedParamSet*> ptrs;
        for (const auto& s : sets) ptrs.push_back(&s);
        std::vector<std::int64_t> sizes;
        std::int64_t total = 0;
        for (int i = 0; i < n; ++i) {
            sizes.push_back(1 + static_cast<std::int64_t>(rng() % 50));
            total += sizes.back();
        }
        std::vector<double> mean_w(static_cast<std::size_t>(n), 1.0 / n), avg_w;
        for (auto s : sizes) avg_w.push_back(static_cast<double>(s) / static_cast<double>(total));
        worst = std::max(worst, ft::max_abs_diff(aggregate_fedmean(ptrs), ft::brute_weighted(sets, mean_w)));
        worst = std::max(worst, ft::max_abs_diff(aggregate_fedavg(ptrs, sizes), ft::brute_weighted(sets, avg_w)));
    }
    c.expect(worst <= 1e-12, "brute-force mismatch " + fmt("%.3g", worst));

    // global cluster and singletons, in both modes
    const auto cfg = ft::tiny_config(8, 1, 2);
    RoundState st{1, {}};
    for (std::uint64_t i = 0; i < 4; ++i) {
        ToyModel m = build_model(cfg, 1);
        ft::randomize_trainable(m, 100 + i);
        st.params.push_back(m.params);
    }
    std::vector<const NamedParamSet*> ptrs;
    for (const auto& p : st.params) ptrs.push_back(&p);
    const std::vector<std::int64_t> sizes{3, 5, 7, 9};
    const auto mean = aggregate_fedmean(ptrs);
    for (Mode mode : {Mode::M2en, Mode::M2m}) {
        const auto g = inner_cluster_aggregate(st, {"global", {{0, 1, 2, 3}}, {{0, 1, 2, 3}}}, Aggregation::FedMean,
                                               sizes, mode);
        for (const auto& p : g.params) c.expect(ft::max_abs_diff(p, mean) <= 1e-12, "global cluster is not FedMean");
        const auto s = inner_cluster_aggregate(st, {"single", {{0}, {1}, {2}, {3}}, {{0}, {1}, {2}, {3}}},
                                               Aggregation::FedAvg, sizes, mode);
        c.expect(s.params == st.params, "singletons changed parameters");
    }

    // intra-cluster equality after every round of a real local-update loop
    std::mt19937_64 drng(7);
    std::vector<std::vector<EncodedPair>> data;
    for (int i = 0; i < 4; ++i) data.push_back(ft::random_pairs(drng, 10 + 3 * i, cfg.vocab_size));
    const ClusterAssignment asg{"x", {{0, 2}, {1, 3}}, {{0, 1}, {2, 3}}};
    FedConfig f;
    f.grad_accumulation = 1;
    f.batch_size = 4;
    f.learning_rate = 1e-2;
    int rounds_checked = 0;
    for (Mode mode : {Mode::M2en, Mode::M2m}) {
        const ToyModel init = build_model(cfg, 9);
        std::vector<Optimizer> opts(4, Optimizer(f.optimizer, f.learning_rate));
        RoundState state{0, std::vector<NamedParamSet>(4, init.params)};
        for (int r = 1; r <= 4; ++r) {
            RoundState next{r, {}};
            for (int i = 0; i < 4; ++i) {
                ToyModel m = init;
                m.params = state.params[static_cast<std::size_t>(i)];
                next.params.push_back(local_update(m, opts[static_cast<std::size_t>(i)], data[static_cast<std::size_t>(i)],
                                                   f, derive_seed(5, "local", static_cast<std::uint64_t>(r * 10 + i)))
                                          .params);
            }
            state = inner_cluster_aggregate(next, asg, Aggregation::FedAvg, sizes, mode);
            const auto& p = state.params;
            for (const auto& cl : asg.encoder) c.expect(equal_on_side(p[cl[0]], p[cl[1]], Side::Encoder), "encoder cluster differs");
            for (const auto& cl : asg.decoder) {
                c.expect(equal_on_side(p[cl[0]], p[cl[1]], Side::Decoder), "decoder cluster differs");
                if (mode == Mode::M2m) c.expect(equal_on_side(p[cl[0]], p[cl[1]], Side::Shared), "shared tensors differ");
            }
            if (mode == Mode::M2en) {
                for (int i = 1; i < 4; ++i) c.expect(equal_on_side(p[0], p[static_cast<std::size_t>(i)], Side::Shared), "shared tensors differ");
            }
            c.expect(!equal_on_side(p[0], p[1], Side::Encoder), "different encoder clusters collapsed");
            ++rounds_checked;
        }
    }
    return "max brute-force diff " + fmt("%.2g", worst) + ", " + std::to_string(rounds_checked) + " rounds bitwise-checked";
}

// 3: gradients against central finite differences
ToyModel fd_model(int b, bool backbone) {
    auto cfg = ft::tiny_config(16, 1 + b % 2, 2);
    cfg.adapter_nonlinearity = b % 3 == 0 ? Nonlinearity::Gelu : Nonlinearity::Relu;
    cfg.train_backbone = backbone;
    ToyModel m = build_model(cfg, static_cast<std::uint64_t>(30 + b));
    ft::randomize_trainable(m, static_cast<std::uint64_t>(60 + b), 0.3);
    return m;
}

Batch fd_batch(int b, int vocab) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(90 + b));
    return make_batch(ft::random_pairs(rng, 3, vocab));
}

std::string gradients(Check& c) {
    double worst = 0;
    std::int64_t entries = 0;
    for (int b = 0; b < 10; ++b) {
        const ToyModel m = fd_model(b, false);
        const auto rep = ft::finite_difference_check(m, fd_batch(b, m.config.vocab_size));
        worst = std::max(worst, rep.max_rel_error);
        entries += rep.checked;
        if (rep.max_rel_error >= 1e-3) c.expect(false, "batch " + std::to_string(b) + ": " + rep.worst);
    }
    c.expect(worst < 1e-3, "max relative error " + fmt("%.3g", worst));

    // Not gated: with the whole backbone trainable, a 1e-4 step on weights
    // feeding the ReLU FFN can cross a kink.
    double wide = 0, narrow = 0;
    for (int b : {1, 5, 9}) {
        const ToyModel m = fd_model(b, true);
        const auto batch = fd_batch(b, m.config.vocab_size);
        wide = std::max(wide, ft::finite_difference_check(m, batch, 1e-4).max_rel_error);
        narrow = std::max(narrow, ft::finite_difference_check(m, batch, 1e-5).max_rel_error);
    }
    return "max rel error " + fmt("%.2e", worst) + " over " + std::to_string(entries) +
           " adapter+ln entries; full backbone eps 1e-4 " + fmt("%.2e", wide) + ", eps 1e-5 " + fmt("%.2e", narrow);
}

std::vector<TrainingClient> trainers_of(const Workspace& ws, int n) {
    std::vector<TrainingClient> t;
    for (int i = 0; i < n; ++i) {
        const auto& cl = ws.clients[static_cast<std::size_t>(i)];
        t.push_back({i, encode_split(ws.vocab, cl.pair, cl.data.train)});
    }
    return t;
}

// 4: frozen backbone after a 2-round, 4-client federated run
std::string frozen_backbone(Check& c) {
    auto cfg = parse_config(R"({"mode":"m2en","method":"adapter-families","fed":{"rounds":2}})");
    const auto ws = prepare_workspace(cfg, 1);
    const auto backbone = shared_backbone(cfg, ws);
    const auto ckpt = (fs::temp_directory_path() / "fedmt_acceptance_backbone.bin").string();
    save_param_set(ckpt, backbone);
    const auto initial = load_param_set(ckpt);
    fs::remove(ckpt);

    FederationSetup s;
    s.mode = Mode::M2en;
    s.initial = attach_adapters(initial, ws.model, derive_seed(1, "adapters"));
    s.trainers = trainers_of(ws, 4);
    for (int i = 0; i < 4; ++i) {
        const auto& cl = ws.clients[static_cast<std::size_t>(i)];
        s.evals.push_back({i, cl.pair.name(), encode_split(ws.vocab, cl.pair, cl.data.dev),
                           encode_split(ws.vocab, cl.pair, cl.data.test), i});
    }
    s.assignment = {"families", {{0, 1}, {2, 3}}, {{0, 1, 2, 3}}};
    s.cfg = cfg.fed;
    s.vocab = &ws.vocab;
    s.decode_test = false;
    const auto rep = run_experiment(s);

    std::int64_t frozen = 0;
    bool trained = false;
    for (const auto& p : rep.best_params) {
        for (const auto& [name, t] : initial) {
            if (p.at(name).trainable) {
                trained = trained || !(p.at(name).values == t.values);
                continue;
            }
            ++frozen;
            c.expect(p.at(name).values == t.values, "frozen tensor changed: " + name);
        }
    }
    c.expect(frozen > 0, "no frozen tensors checked");
    c.expect(trained, "nothing trained");
    c.expect(rep.ledger.entries().size() == 8, "ledger rows " + std::to_string(rep.ledger.entries().size()));
    return std::to_string(frozen) + " frozen tensor copies bit-identical";
}

// 5: clustering recovery
std::string clustering(Check& c) {
    int recovered = 0;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        auto cfg = parse_config(R"({"mode":"m2en","method":"adapter-gradients","fed":{"rounds":1},
            "data":{"intra_family_overlap":1.0,"disjoint_families":true}})");
        const auto r = run_seed(cfg, seed);
        const auto family = cluster_by_family(r.clients, Side::Encoder, Mode::M2en);
        const bool ok = r.assignment.encoder == family;
        recovered += ok;
        detail += ok ? "y" : "n";

        ClusteringInputs in;
        in.clients = r.clients;
        in.mode = Mode::M2en;
        in.seed = seed;
        const auto rnd = assemble(ClusterStrategy::Random, Ablation::Both, in);
        for (const auto& cl : rnd.encoder) c.expect(cl.size() == 2, "random cluster size " + std::to_string(cl.size()));
        c.expect(rnd.m_e() == 4, "random cluster count");
        c.expect(family == std::vector<Cluster>{{0, 1}, {2, 3}, {4, 5}, {6, 7}}, "family clusters differ from the table");
        c.expect(cluster_by_family(r.clients, Side::Decoder, Mode::M2en) == std::vector<Cluster>{{0, 1, 2, 3, 4, 5, 6, 7}},
                 "m2en decoder is not one cluster");
    }
    c.expect(recovered >= 2, "gradient clustering recovered families in " + std::to_string(recovered) + "/3 seeds");
    return "gradient recovery " + std::to_string(recovered) + "/3 (" + detail + ")";
}

// 6: end-to-end learning signal
std::string learning_signal(Check& c) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> methods{"model-fed",       "adapter-fed",      "adapter-local",     "adapter-random",
                                           "adapter-gradients", "adapter-families", "centralized-model", "centralized-adapter"};
    std::map<std::string, std::vector<SeedResult>> res;
    for (const auto& m : methods) {
        auto cfg = parse_config(R"({"mode":"m2en","method":")" + m + R"(","seeds":[1,2,3]})");
        for (auto seed : cfg.seeds) {
            auto r = run_seed(cfg, seed);
            const double red = 1.0 - r.final_dev_loss / r.round0_dev_loss;
            std::cout << "  " << m << " seed " << seed << ": dev loss " << fmt("%.3f", r.round0_dev_loss) << " -> "
                      << fmt("%.3f", r.final_dev_loss) << " (" << fmt("%.1f%%", 100 * red) << "), bleu "
                      << fmt("%.2f", r.report.bleu.macro) << "\n";
            c.expect(red >= 0.5, m + " seed " + std::to_string(seed) + " reduction " + fmt("%.3f", red));
            res[m].push_back(std::move(r));
        }
    }
    int wins = 0;
    double worst_ratio = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        wins += res["adapter-families"][i].final_dev_loss < res["adapter-fed"][i].final_dev_loss;
        const double ratio = static_cast<double>(res["adapter-fed"][i].report.ledger.total_bytes()) /
                             static_cast<double>(res["model-fed"][i].report.ledger.total_bytes());
        worst_ratio = std::max(worst_ratio, ratio);
    }
    c.expect(wins >= 2, "adapter-families beat adapter-fed in " + std::to_string(wins) + "/3 seeds");
    c.expect(worst_ratio < 0.02, "ledger ratio " + fmt("%.4f", worst_ratio));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.expect(secs < 20 * 60, "runtime " + fmt("%.0fs", secs));
    return "families<fed in " + std::to_string(wins) + "/3, ledger ratio " + fmt("%.2f%%", 100 * worst_ratio) +
           ", " + fmt("%.0fs", secs);
}

// 7: BLEU
std::string bleu(Check& c) {
    const std::vector<Tokens> ref{tokenize("the cat sat on the mat"), tokenize("a b c d e f")};
    const double ident = corpus_bleu(ref, ref);
    c.expect(ident == 100.0, "identity " + fmt("%.6f", ident));
    const double bp = corpus_bleu({tokenize("a b c d")}, {tokenize("a b c d e")});
    c.expect(near(bp, 77.88, 0.01), "brevity case " + fmt("%.4f", bp));

    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> len(1, 12), tok(0, 7);
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<PairResult> pairs;
        for (int p = 0; p < 1 + trial % 6; ++p) {
            PairResult pr{"p" + std::to_string(p), {}, {}};
            for (int s = 0; s < 1 + (trial + p) % 7; ++s) {
                Tokens h, r;
                for (int i = len(rng); i > 0; --i) h.push_back("w" + std::to_string(tok(rng)));
                for (int i = len(rng); i > 0; --i) r.push_back("w" + std::to_string(tok(rng)));
                pr.hypotheses.push_back(h);
                pr.references.push_back(r);
            }
            pairs.push_back(pr);
        }
        worst = std::max(worst, std::abs(macro_micro(pairs).micro - ft::pooled_bleu_oracle(pairs)));
    }
    c.expect(worst <= 1e-9, "micro oracle diff " + fmt("%.3g", worst));
    return "identity " + fmt("%.1f", ident) + ", brevity " + fmt("%.2f", bp) + ", micro diff " + fmt("%.1g", worst);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// 8: determinism across two independent runs
std::string determinism(Check& c, const std::string& cli) {
    const auto dir = fs::temp_directory_path() / "fedmt_acceptance_det";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto config = dir / "config.json";
    std::ofstream(config) << R"({"mode":"m2en","method":"adapter-families","seeds":[5],"data":{"scale":0.03125},"fed":{"rounds":2}})";

    std::vector<std::string> metrics;
    for (const char* tag : {"a", "b"}) {
        const auto out = dir / tag;
        if (!cli.empty()) {
            // separate processes, so the cached backbone is rebuilt too
            const auto cmd = "\"" + cli + "\" run --config \"" + config.string() + "\" --out \"" + out.string() +
                             "\" > \"" + (dir / (std::string(tag) + ".log")).string() + "\" 2>&1";
            c.expect(std::system(cmd.c_str()) == 0, std::string("cli run ") + tag + " failed");
        } else {
            fedmt::run(load_config(config.string()), out.string());
        }
        metrics.push_back(read_file(out / "seed_5" / "metrics.csv"));
    }
    c.expect(!metrics[0].empty(), "metrics.csv empty");
    c.expect(metrics[0] == metrics[1], "metrics.csv differs between runs");
    const auto bytes = metrics[0].size();
    fs::remove_all(dir);
    return std::to_string(bytes) + " bytes identical (" + (cli.empty() ? "in-process" : "two processes") + ")";
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    struct Criterion {
        const char* name;
        std::function<std::string(Check&)> run;
    };
    const std::vector<Criterion> criteria{
        {"1 cost arithmetic", cost_arithmetic},
        {"2 aggregation oracles", aggregation},
        {"3 gradient check", gradients},
        {"4 frozen backbone", frozen_backbone},
        {"5 clustering recovery", clustering},
        {"6 learning signal", learning_signal},
        {"7 bleu", bleu},
        {"8 determinism", [&](Check& c) { return determinism(c, cli); }},
    };
    int failed = 0;
    for (const auto& cr : criteria) {
        Check c;
        std::string detail;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            detail = cr.run(c);
        } catch (const std::exception& e) {
            c.failures.push_back(std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool ok = c.failures.empty();
        failed += !ok;
        std::cout << (ok ? "PASS " : "FAIL ") << cr.name << ": " << detail << " [" << fmt("%.1fs", secs) << "]";
        for (const auto& f : c.failures) std::cout << " | " << f;
        std::cout << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
