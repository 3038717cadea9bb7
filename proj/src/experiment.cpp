#include "fedmt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>

#include "fedmt/errors.hpp"
#include "fedmt/seed.hpp"
#include "json.hpp"

namespace fedmt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::pair<Method, const char*> kMethodNames[] = {
    {Method::ModelFed, "model-fed"},
    {Method::AdapterFed, "adapter-fed"},
    {Method::AdapterLocal, "adapter-local"},
    {Method::AdapterRandom, "adapter-random"},
    {Method::AdapterGradients, "adapter-gradients"},
    {Method::AdapterFamilies, "adapter-families"},
    {Method::CentralizedModel, "centralized-model"},
    {Method::CentralizedAdapter, "centralized-adapter"},
};

}  // namespace

std::string to_string(Method m) {
    for (const auto& [k, v] : kMethodNames) {
        if (k == m) return v;
    }
    return "?";
}

Method method_from_string(const std::string& text) {
    for (const auto& [k, v] : kMethodNames) {
        if (text == v) return k;
    }
    throw ConfigError("unknown method '" + text + "'");
}

ModelConfig desk_model() {
    ModelConfig m;
    m.model_dim = 64;
    m.num_heads = 4;
    m.ffn_dim = 256;
    m.enc_layers = 2;
    m.dec_layers = 2;
    m.adapter_bottleneck = 2;
    m.max_seq_len = 32;
    return m;
}

bool uses_adapters(Method m) { return m != Method::ModelFed && m != Method::CentralizedModel; }

bool is_clustered(Method m) {
    return m == Method::AdapterRandom || m == Method::AdapterGradients || m == Method::AdapterFamilies;
}

bool is_centralized(Method m) { return m == Method::CentralizedModel || m == Method::CentralizedAdapter; }

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("seeds: duplicate seed");
    }
    if (pruning != PruneStrategy::All && !uses_adapters(method)) {
        throw ConfigError("pruning: method " + to_string(method) + " has no adapters to prune");
    }
    if (pruning != PruneStrategy::All && (model.enc_layers % 3 != 0 || model.dec_layers % 3 != 0)) {
        throw ConfigError("pruning: model.enc_layers and model.dec_layers must be divisible by 3");
    }
    if (ablation != Ablation::Both && !is_clustered(method)) {
        throw ConfigError("ablation: only clustering methods take an ablation, not " + to_string(method));
    }
    if (ablation == Ablation::None) throw ConfigError("ablation: expected both, encoder_only or decoder_only");
    if (!(data.scale > 0)) throw ConfigError("data.scale must be > 0");
    const auto& lo = data.languages;
    if (lo.alphabet_size < 2) throw ConfigError("data.alphabet_size must be >= 2");
    if (lo.intra_family_overlap < 0 || lo.intra_family_overlap > 1) {
        throw ConfigError("data.intra_family_overlap must be in [0, 1]");
    }
    if (lo.affix_length < 0) throw ConfigError("data.affix_length must be >= 0");
    if (lo.family_drift < 0 || lo.family_drift > lo.alphabet_size) {
        throw ConfigError("data.family_drift must be in [0, data.alphabet_size]");
    }
    if (data.lengths.min_len < 1 || data.lengths.max_len < data.lengths.min_len) {
        throw ConfigError("data.min_len/max_len: need 1 <= min_len <= max_len");
    }
    if (data.lengths.max_len + lo.affix_length + 2 > model.max_seq_len) {
        throw ConfigError("model.max_seq_len is shorter than data.max_len + data.affix_length + 2");
    }
    ModelConfig probe = model;
    probe.vocab_size = std::max(probe.vocab_size, 5);
    probe.validate();
    if (pretrain.enabled) {
        if (pretrain.sentences_per_pair < 1) throw ConfigError("pretrain.sentences_per_pair must be >= 1");
        if (pretrain.train.epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
        if (pretrain.train.batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    }
    fed.validate();
    if (!(backbone_learning_rate >= 0)) throw ConfigError("fed.backbone_learning_rate must be >= 0");
    if (cluster_restarts < 1) throw ConfigError("clustering.restarts must be >= 1");
}

// ---------------------------------------------------------------------------
// JSON config

namespace {

class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    Section child(const std::string& key) { return Section(j_.at(key), key_path(key)); }

    void read(const std::string& key, int& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_integer()) throw ConfigError(key_path(key) + ": expected an integer");
        out = v.get<int>();
    }
    void read(const std::string& key, double& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(key_path(key) + ": expected a number");
        out = v.get<double>();
    }
    void read(const std::string& key, bool& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_boolean()) throw ConfigError(key_path(key) + ": expected true or false");
        out = v.get<bool>();
    }
    void read(const std::string& key, std::uint64_t& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_unsigned()) throw ConfigError(key_path(key) + ": expected a non-negative integer");
        out = v.get<std::uint64_t>();
    }

    template <class T, class Conv>
    void read_enum(const std::string& key, T& out, Conv conv) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(key_path(key) + ": expected a string");
        try {
            out = conv(v.get<std::string>());
        } catch (const ConfigError& e) {
            throw ConfigError(key_path(key) + ": " + e.what());
        }
    }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(key_path(k) + ": unknown key");
        }
    }

    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string label() const { return path_.empty() ? "config" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void parse_data(Section s, DataConfig& d) {
    s.read("scale", d.scale);
    s.read("alphabet_size", d.languages.alphabet_size);
    s.read("intra_family_overlap", d.languages.intra_family_overlap);
    s.read("disjoint_families", d.languages.disjoint_families);
    s.read("affix_length", d.languages.affix_length);
    s.read("family_drift", d.languages.family_drift);
    s.read("language_seed", d.language_seed);
    s.read("min_len", d.lengths.min_len);
    s.read("max_len", d.lengths.max_len);
    s.finish();
}

void parse_model(Section s, ModelConfig& m) {
    s.read("model_dim", m.model_dim);
    s.read("num_heads", m.num_heads);
    s.read("ffn_dim", m.ffn_dim);
    s.read("enc_layers", m.enc_layers);
    s.read("dec_layers", m.dec_layers);
    s.read("adapter_bottleneck", m.adapter_bottleneck);
    s.read("max_seq_len", m.max_seq_len);
    s.read_enum("adapter_nonlinearity", m.adapter_nonlinearity, nonlinearity_from_string);
    s.finish();
}

void parse_pretrain(Section s, PretrainSettings& p) {
    s.read("enabled", p.enabled);
    s.read("sentences_per_pair", p.sentences_per_pair);
    s.read("epochs", p.train.epochs);
    s.read("batch_size", p.train.batch_size);
    s.read("learning_rate", p.train.learning_rate);
    s.read("seed", p.train.seed);
    s.finish();
}

void parse_fed(Section s, FedConfig& f, Real& backbone_lr) {
    s.read("rounds", f.rounds);
    s.read("local_epochs", f.local_epochs);
    s.read("fixed_steps", f.fixed_steps);
    s.read("batch_size", f.batch_size);
    s.read("grad_accumulation", f.grad_accumulation);
    s.read("learning_rate", f.learning_rate);
    s.read("backbone_learning_rate", backbone_lr);
    s.read_enum("optimizer", f.optimizer, optimizer_from_string);
    double mbps = f.bandwidth_bps / 1e6;
    s.read("bandwidth_mbps", mbps);
    f.bandwidth_bps = mbps * 1e6;
    s.read("bytes_per_param", f.bytes_per_param);
    bool parallel = f.exec == Exec::Parallel;
    s.read("parallel", parallel);
    f.exec = parallel ? Exec::Parallel : Exec::Serial;
    s.finish();
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig c;
    Section root(j, "");
    root.read_enum("mode", c.mode, mode_from_string);
    root.read_enum("method", c.method, method_from_string);
    root.read_enum("ablation", c.ablation, ablation_from_string);
    root.read_enum("pruning", c.pruning, prune_strategy_from_string);
    root.read_enum("aggregation", c.fed.aggregation, aggregation_from_string);
    if (root.has("seeds")) {
        const auto& v = j.at("seeds");
        if (!v.is_array()) throw ConfigError("seeds: expected an array of non-negative integers");
        c.seeds.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number_unsigned()) {
                throw ConfigError("seeds[" + std::to_string(i) + "]: expected a non-negative integer");
            }
            c.seeds.push_back(v[i].get<std::uint64_t>());
        }
    }
    if (root.has("data")) parse_data(root.child("data"), c.data);
    if (root.has("model")) parse_model(root.child("model"), c.model);
    if (root.has("pretrain")) parse_pretrain(root.child("pretrain"), c.pretrain);
    if (root.has("fed")) parse_fed(root.child("fed"), c.fed, c.backbone_learning_rate);
    if (root.has("clustering")) {
        Section s = root.child("clustering");
        s.read("restarts", c.cluster_restarts);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& c) {
    json j;
    j["mode"] = to_string(c.mode);
    j["method"] = to_string(c.method);
    j["ablation"] = to_string(c.ablation);
    j["pruning"] = to_string(c.pruning);
    j["aggregation"] = to_string(c.fed.aggregation);
    j["seeds"] = c.seeds;
    j["data"] = {
        {"scale", c.data.scale},
        {"alphabet_size", c.data.languages.alphabet_size},
        {"intra_family_overlap", c.data.languages.intra_family_overlap},
        {"disjoint_families", c.data.languages.disjoint_families},
        {"affix_length", c.data.languages.affix_length},
        {"family_drift", c.data.languages.family_drift},
        {"language_seed", c.data.language_seed},
        {"min_len", c.data.lengths.min_len},
        {"max_len", c.data.lengths.max_len},
    };
    j["model"] = {
        {"model_dim", c.model.model_dim},
        {"num_heads", c.model.num_heads},
        {"ffn_dim", c.model.ffn_dim},
        {"enc_layers", c.model.enc_layers},
        {"dec_layers", c.model.dec_layers},
        {"adapter_bottleneck", c.model.adapter_bottleneck},
        {"max_seq_len", c.model.max_seq_len},
        {"adapter_nonlinearity", to_string(c.model.adapter_nonlinearity)},
    };
    j["pretrain"] = {
        {"enabled", c.pretrain.enabled},
        {"sentences_per_pair", c.pretrain.sentences_per_pair},
        {"epochs", c.pretrain.train.epochs},
        {"batch_size", c.pretrain.train.batch_size},
        {"learning_rate", c.pretrain.train.learning_rate},
        {"seed", c.pretrain.train.seed},
    };
    j["fed"] = {
        {"rounds", c.fed.rounds},
        {"local_epochs", c.fed.local_epochs},
        {"fixed_steps", c.fed.fixed_steps},
        {"batch_size", c.fed.batch_size},
        {"grad_accumulation", c.fed.grad_accumulation},
        {"learning_rate", c.fed.learning_rate},
        {"backbone_learning_rate", c.backbone_learning_rate},
        {"optimizer", to_string(c.fed.optimizer)},
        {"bandwidth_mbps", c.fed.bandwidth_bps / 1e6},
        {"bytes_per_param", c.fed.bytes_per_param},
        {"parallel", c.fed.exec == Exec::Parallel},
    };
    j["clustering"] = {{"restarts", c.cluster_restarts}};
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Running

namespace {

std::string probe_slice(const ToyModel& m, Side side) {
    const auto ids = adapter_ids(m.config);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i].side == side && m.adapter_active[i]) return ids[i].prefix() + ".";
    }
    throw ConfigError(std::string("no active ") + std::string(to_string(side)) + " adapter for gradient features");
}

Real mean_dev_loss(const ExperimentReport& rep, int round) {
    Real sum = 0;
    int n = 0;
    for (const auto& r : rep.records) {
        if (r.round == round) {
            sum += r.dev_loss;
            ++n;
        }
    }
    return n > 0 ? sum / n : 0;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + p.string());
}

}  // namespace

Workspace prepare_workspace(const ExperimentConfig& config, std::uint64_t seed) {
    config.validate();
    Workspace ws;
    const auto plan = plan_for(config.mode);
    ws.languages = generate_languages(plan.families, config.data.languages, config.data.language_seed);
    ws.protos = generate_protolanguages(plan.families, config.data.languages, config.data.language_seed);
    ws.clients = build_clients(plan, ws.languages, config.data.scale, config.data.lengths,
                               config.data.languages.alphabet_size, derive_seed(seed, "corpus"));
    std::vector<std::string> codes;
    for (const auto& l : ws.languages) codes.push_back(l.code);
    for (const auto& l : ws.protos) codes.push_back(l.code);
    std::vector<int> symbols(static_cast<std::size_t>(config.data.languages.alphabet_size));
    std::iota(symbols.begin(), symbols.end(), 0);
    ws.vocab = Vocab(codes, symbols);
    ws.model = config.model;
    ws.model.vocab_size = ws.vocab.size();
    return ws;
}

NamedParamSet shared_backbone(const ExperimentConfig& config, const Workspace& ws) {
    static std::mutex mu;
    static std::map<std::string, NamedParamSet> cache;

    ModelConfig mc = ws.model;
    mc.use_adapters = false;
    mc.train_backbone = true;
    auto key = json::parse(to_json(config));
    for (const char* k : {"method", "ablation", "pruning", "aggregation", "seeds", "fed", "clustering"}) key.erase(k);
    key["data"].erase("scale");
    key["vocab"] = ws.vocab.tokens();
    const auto k = key.dump();

    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(k); it != cache.end()) return it->second;

    NamedParamSet backbone;
    if (!config.pretrain.enabled) {
        backbone = build_model(mc, config.pretrain.train.seed).params;
        for (auto& [_, t] : backbone) t.trainable = false;
    } else {
        const auto datasets =
            generate_pretraining_corpus(ws.protos, config.pretrain.sentences_per_pair, config.data.lengths,
                                        config.data.languages.alphabet_size, config.pretrain.train.seed);
        std::vector<EncodedPair> corpus;
        for (const auto& d : datasets) {
            const auto e = encode_split(ws.vocab, d.pair, d.train);
            corpus.insert(corpus.end(), e.begin(), e.end());
        }
        backbone = pretrain_backbone(mc, corpus, config.pretrain.train);
    }
    cache.emplace(k, backbone);
    return backbone;
}

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed) {
    const Workspace ws = prepare_workspace(config, seed);
    const NamedParamSet backbone = shared_backbone(config, ws);

    ModelConfig mc = ws.model;
    mc.use_adapters = uses_adapters(config.method);
    mc.train_backbone = !mc.use_adapters;
    ToyModel init = attach_adapters(backbone, mc, derive_seed(seed, "adapters"));
    if (mc.use_adapters && config.pruning != PruneStrategy::All) init = apply_pruning(init, config.pruning);

    SeedResult res;
    res.seed = seed;
    res.clients = ws.clients;
    res.model = mc;
    res.adapter_active = init.adapter_active;
    res.total_params = count_params(init.params);
    res.trainable_params = count_params(init.params, ParamFilter::trainable());

    FederationSetup setup;
    setup.mode = config.mode;
    setup.cfg = config.fed;
    setup.cfg.seed = derive_seed(seed, "fed");
    if (!mc.use_adapters) setup.cfg.learning_rate = config.backbone_learning_rate;
    setup.vocab = &ws.vocab;

    std::vector<std::vector<EncodedPair>> train(ws.clients.size());
    for (std::size_t i = 0; i < ws.clients.size(); ++i) {
        const auto& c = ws.clients[i];
        train[i] = encode_split(ws.vocab, c.pair, c.data.train);
        EvalClient e;
        e.id = c.id;
        e.pair = c.pair.name();
        e.dev = encode_split(ws.vocab, c.pair, c.data.dev);
        e.test = encode_split(ws.vocab, c.pair, c.data.test);
        e.trainer = is_centralized(config.method) ? 0 : static_cast<int>(i);
        setup.evals.push_back(std::move(e));
    }

    if (is_centralized(config.method)) {
        TrainingClient t;
        t.id = 0;
        for (const auto& s : train) t.train.insert(t.train.end(), s.begin(), s.end());
        setup.trainers.push_back(std::move(t));
        setup.aggregate = false;
        res.assignment.strategy = "centralized";
        res.assignment.encoder = {{0}};
        res.assignment.decoder = {{0}};
    } else {
        for (std::size_t i = 0; i < train.size(); ++i) setup.trainers.push_back({static_cast<int>(i), train[i]});
        ClusterStrategy strategy = ClusterStrategy::Global;
        switch (config.method) {
            case Method::AdapterLocal: strategy = ClusterStrategy::Singletons; break;
            case Method::AdapterRandom: strategy = ClusterStrategy::Random; break;
            case Method::AdapterGradients: strategy = ClusterStrategy::Gradients; break;
            case Method::AdapterFamilies: strategy = ClusterStrategy::Families; break;
            default: break;
        }
        std::vector<GradientFeature> enc_f, dec_f;
        if (strategy == ClusterStrategy::Gradients) {
            const auto es = probe_slice(init, Side::Encoder);
            const auto ds = probe_slice(init, Side::Decoder);
            for (std::size_t i = 0; i < train.size(); ++i) {
                enc_f.push_back(compute_gradient_feature(ws.clients[i].id, train[i], init, es));
                dec_f.push_back(compute_gradient_feature(ws.clients[i].id, train[i], init, ds));
            }
        }
        ClusteringInputs in;
        in.clients = ws.clients;
        in.mode = config.mode;
        in.seed = derive_seed(seed, "clustering");
        in.encoder_features = enc_f;
        in.decoder_features = dec_f;
        in.restarts = config.cluster_restarts;
        res.assignment = assemble(strategy, config.ablation, in);
        setup.aggregate = config.method != Method::AdapterLocal;
    }
    setup.assignment = res.assignment;
    setup.initial = std::move(init);

    res.report = run_experiment(setup);
    res.round0_dev_loss = mean_dev_loss(res.report, 0);
    res.final_dev_loss = mean_dev_loss(res.report, config.fed.rounds);
    return res;
}

std::string metrics_csv(const SeedResult& r) {
    std::ostringstream os;
    os << "kind,round,client,pair,train_loss,dev_loss,best_round,bleu\n";
    std::map<int, std::string> names;
    for (const auto& c : r.clients) names[c.id] = c.pair.name();
    for (const auto& rec : r.report.records) {
        os << "round," << rec.round << ',' << rec.client << ',' << names[rec.client] << ','
           << (std::isnan(rec.train_loss) ? std::string() : fixed(rec.train_loss, 6)) << ','
           << fixed(rec.dev_loss, 6) << ",,\n";
    }
    const auto& per_pair = r.report.bleu.per_pair;
    for (std::size_t e = 0; e < per_pair.size() && e < r.clients.size(); ++e) {
        os << "test,," << r.clients[e].id << ',' << per_pair[e].pair << ",," << fixed(r.report.best_dev_loss[e], 6)
           << ',' << r.report.best_round[e] << ',' << fixed(per_pair[e].bleu, 2) << '\n';
    }
    os << "macro,,,,,,," << fixed(r.report.bleu.macro, 2) << '\n';
    os << "micro,,,,,,," << fixed(r.report.bleu.micro, 2) << '\n';
    return os.str();
}

std::string summary_csv(const std::vector<SeedResult>& results) {
    std::ostringstream os;
    if (results.empty()) return os.str();
    os << "seed";
    for (const auto& p : results[0].report.bleu.per_pair) os << ',' << p.pair;
    os << ",macro,micro,round0_dev_loss,final_dev_loss,total_bytes\n";
    std::vector<double> sums(results[0].report.bleu.per_pair.size() + 4, 0.0);
    for (const auto& r : results) {
        os << r.seed;
        std::size_t k = 0;
        for (const auto& p : r.report.bleu.per_pair) {
            os << ',' << fixed(p.bleu, 2);
            sums[k++] += p.bleu;
        }
        const double extra[] = {r.report.bleu.macro, r.report.bleu.micro, r.round0_dev_loss, r.final_dev_loss};
        for (int i = 0; i < 4; ++i) {
            os << ',' << fixed(extra[i], i < 2 ? 2 : 6);
            sums[k++] += extra[i];
        }
        os << ',' << r.report.ledger.total_bytes() << '\n';
    }
    const double n = static_cast<double>(results.size());
    os << "mean";
    for (std::size_t k = 0; k < sums.size(); ++k) os << ',' << fixed(sums[k] / n, k + 2 < sums.size() ? 2 : 6);
    os << ',' << fixed(static_cast<double>(results[0].report.ledger.total_bytes()), 0) << '\n';
    return os.str();
}

std::string summary_text(const ExperimentConfig& config, const std::vector<SeedResult>& results) {
    std::ostringstream os;
    if (results.empty()) return os.str();
    os << "method: " << to_string(config.method) << "  mode: " << to_string(config.mode)
       << "  aggregation: " << to_string(config.fed.aggregation) << "  ablation: " << to_string(config.ablation)
       << "  pruning: " << to_string(config.pruning) << "\n";
    os << "seeds:";
    for (auto s : config.seeds) os << ' ' << s;
    os << "\n\nTest BLEU (per-client best dev-loss checkpoint)\n";

    const auto& pairs = results[0].report.bleu.per_pair;
    std::size_t w = 8;
    for (const auto& p : pairs) w = std::max(w, p.pair.size() + 2);
    auto cell = [&](const std::string& s) {
        os << s;
        for (std::size_t i = s.size(); i < w; ++i) os << ' ';
    };
    cell("seed");
    for (const auto& p : pairs) cell(p.pair);
    cell("Macro");
    cell("Micro");
    os << '\n';
    std::vector<double> sum(pairs.size() + 2, 0.0);
    for (const auto& r : results) {
        cell(std::to_string(r.seed));
        for (std::size_t k = 0; k < r.report.bleu.per_pair.size(); ++k) {
            cell(fixed(r.report.bleu.per_pair[k].bleu, 2));
            sum[k] += r.report.bleu.per_pair[k].bleu;
        }
        cell(fixed(r.report.bleu.macro, 2));
        cell(fixed(r.report.bleu.micro, 2));
        sum[pairs.size()] += r.report.bleu.macro;
        sum[pairs.size() + 1] += r.report.bleu.micro;
        os << '\n';
    }
    const double n = static_cast<double>(results.size());
    cell("Avg.");
    for (double s : sum) cell(fixed(s / n, 2));
    os << "\n\nMean dev loss (token-level cross-entropy)\n";
    for (const auto& r : results) {
        os << "  seed " << r.seed << ": round 0 " << fixed(r.round0_dev_loss, 4) << " -> round " << config.fed.rounds
           << ' ' << fixed(r.final_dev_loss, 4) << '\n';
    }

    const auto& r0 = results[0];
    const int n_clients = static_cast<int>(r0.clients.size());
    const auto bpp = config.fed.bytes_per_param;
    os << "\nCommunication\n";
    os << "  trainable params per client: " << r0.trainable_params << " of " << r0.total_params << " ("
       << fixed(100.0 * static_cast<double>(r0.trainable_params) / static_cast<double>(r0.total_params), 2) << "%)\n";
    os << "  payload per client per direction per round: " << r0.report.payload_bytes << " bytes\n";
    os << "  ledger total (per seed): " << r0.report.ledger.total_bytes() << " bytes, "
       << r0.report.ledger.entries().size() << " client transfers\n";

    os << "\nTransfer time at " << fixed(config.fed.bandwidth_bps / 1e6, 0) << " Mbps, " << n_clients
       << " clients sharing the server link\n";
    const auto full = estimate_transfer(r0.total_params * bpp, n_clients, config.fed.bandwidth_bps);
    const auto part = estimate_transfer(r0.trainable_params * bpp, n_clients, config.fed.bandwidth_bps);
    double local = 0;
    for (const auto& r : results) {
        for (double s : r.report.local_seconds) local += s;
    }
    local /= n * static_cast<double>(std::max<std::size_t>(1, r0.report.local_seconds.size())) * config.fed.rounds;
    os << "  payload          per client (s)   all clients (s)\n";
    os << "  full model       " << fixed(full.per_client_seconds, 6) << "         " << fixed(full.serialized_seconds, 6)
       << '\n';
    os << "  trainable set    " << fixed(part.per_client_seconds, 6) << "         " << fixed(part.serialized_seconds, 6)
       << '\n';
    os << "  local training per client per round (wall clock): " << fixed(local, 3) << " s\n";

    if (is_clustered(config.method)) {
        os << "\nClusters (seed " << r0.seed << ")\n" << r0.assignment.to_table(r0.clients);
    }
    return os.str();
}

namespace {

std::string meta_text(const SeedResult& r, std::size_t e) {
    std::ostringstream os;
    const auto& m = r.model;
    os << "client=" << r.clients[e].id << '\n'
       << "pair=" << r.clients[e].pair.name() << '\n'
       << "best_round=" << r.report.best_round[e] << '\n'
       << "best_dev_loss=" << fixed(r.report.best_dev_loss[e], 6) << '\n'
       << "vocab_size=" << m.vocab_size << '\n'
       << "model_dim=" << m.model_dim << '\n'
       << "num_heads=" << m.num_heads << '\n'
       << "ffn_dim=" << m.ffn_dim << '\n'
       << "enc_layers=" << m.enc_layers << '\n'
       << "dec_layers=" << m.dec_layers << '\n'
       << "adapter_bottleneck=" << m.adapter_bottleneck << '\n'
       << "max_seq_len=" << m.max_seq_len << '\n'
       << "adapter_nonlinearity=" << to_string(m.adapter_nonlinearity) << '\n'
       << "use_adapters=" << (m.use_adapters ? 1 : 0) << '\n'
       << "train_backbone=" << (m.train_backbone ? 1 : 0) << '\n'
       << "adapter_mask=";
    for (bool b : r.adapter_active) os << (b ? '1' : '0');
    os << '\n';
    return os.str();
}

}  // namespace

std::vector<SeedResult> run(const ExperimentConfig& config, const std::string& out_dir) {
    config.validate();
    fs::create_directories(out_dir);
    std::vector<SeedResult> results;
    for (auto seed : config.seeds) {
        auto r = run_seed(config, seed);

        const fs::path final_dir = fs::path(out_dir) / ("seed_" + std::to_string(seed));
        const fs::path tmp = fs::path(out_dir) / ("seed_" + std::to_string(seed) + ".tmp");
        fs::remove_all(tmp);
        fs::create_directories(tmp / "checkpoints");
        ExperimentConfig snapshot = config;
        snapshot.seeds = {seed};
        write_file(tmp / "config.json", to_json(snapshot));
        write_file(tmp / "metrics.csv", metrics_csv(r));
        write_file(tmp / "comm.csv", r.report.ledger.to_csv());
        write_file(tmp / "clusters.txt", r.assignment.to_table(r.clients));
        for (std::size_t e = 0; e < r.clients.size(); ++e) {
            const auto stem = "client" + std::to_string(r.clients[e].id) + "_" + r.clients[e].pair.name();
            save_param_set((tmp / "checkpoints" / (stem + ".bin")).string(), r.report.best_params[e]);
            write_file(tmp / "checkpoints" / (stem + ".meta"), meta_text(r, e));
        }
        fs::remove_all(final_dir);
        fs::rename(tmp, final_dir);
        results.push_back(std::move(r));
    }
    write_file(fs::path(out_dir) / "summary.txt", summary_text(config, results));
    write_file(fs::path(out_dir) / "summary.csv", summary_csv(results));
    return results;
}

void generate_data(const ExperimentConfig& config, const std::string& out_dir) {
    config.validate();
    for (auto seed : config.seeds) {
        const auto ws = prepare_workspace(config, seed);
        const fs::path dir = fs::path(out_dir) / ("seed_" + std::to_string(seed));
        fs::create_directories(dir);
        std::ostringstream langs;
        langs << "code\tfamily\taffix\ttable\n";
        std::vector<LanguageSpec> all = ws.languages;
        all.insert(all.end(), ws.protos.begin(), ws.protos.end());
        for (const auto& l : all) {
            langs << l.code << '\t' << l.family << '\t';
            for (std::size_t i = 0; i < l.affix.size(); ++i) langs << (i ? " " : "") << symbol_token(l.affix[i]);
            langs << '\t';
            for (std::size_t i = 0; i < l.table.size(); ++i) langs << (i ? " " : "") << symbol_token(l.table[i]);
            langs << '\n';
        }
        write_file(dir / "languages.tsv", langs.str());
        std::ostringstream clients;
        clients << "id\tpair\tsrc_family\ttgt_family\ttrain\tdev\ttest\n";
        for (const auto& c : ws.clients) {
            clients << c.id << '\t' << c.pair.name() << '\t' << c.src_family << '\t' << c.tgt_family << '\t'
                    << c.data.train.size() << '\t' << c.data.dev.size() << '\t' << c.data.test.size() << '\n';
            const auto stem = (dir / c.pair.name()).string();
            write_parallel_text(stem + ".train.txt", c.data.train);
            write_parallel_text(stem + ".dev.txt", c.data.dev);
            write_parallel_text(stem + ".test.txt", c.data.test);
        }
        write_file(dir / "clients.tsv", clients.str());
    }
}

}  // namespace fedmt
