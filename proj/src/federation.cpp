#include "fedmt/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <sstream>

#include "fedmt/errors.hpp"
#include "fedmt/seed.hpp"

namespace fedmt {

std::string to_string(Aggregation a) { return a == Aggregation::FedAvg ? "fedavg" : "fedmean"; }

Aggregation aggregation_from_string(const std::string& text) {
    if (text == "fedavg") return Aggregation::FedAvg;
    if (text == "fedmean") return Aggregation::FedMean;
    throw ConfigError("unknown aggregation '" + text + "'");
}

void FedConfig::validate() const {
    if (rounds < 1) throw ConfigError("fed.rounds must be >= 1");
    if (local_epochs < 1) throw ConfigError("fed.local_epochs must be >= 1");
    if (fixed_steps < 0) throw ConfigError("fed.fixed_steps must be >= 0");
    if (batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
    if (grad_accumulation < 1) throw ConfigError("fed.grad_accumulation must be >= 1");
    if (!(learning_rate >= 0)) throw ConfigError("fed.learning_rate must be >= 0");
    if (!(bandwidth_bps > 0)) throw ConfigError("fed.bandwidth_mbps must be > 0");
    if (bytes_per_param < 1) throw ConfigError("fed.bytes_per_param must be >= 1");
}

namespace {

void accumulate(NamedParamSet& acc, const NamedParamSet& g) {
    if (acc.empty()) {
        acc = g;
        return;
    }
    auto a = acc.begin();
    for (auto it = g.begin(); it != g.end(); ++it, ++a) {
        auto& dst = a->second.values;
        const auto& src = it->second.values;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
}

void scale_in_place(NamedParamSet& set, Real s) {
    for (auto& [_, t] : set) {
        for (auto& v : t.values) v *= s;
    }
}

}  // namespace

LocalUpdateResult local_update(const ToyModel& model, Optimizer& optimizer, std::span<const EncodedPair> train,
                               const FedConfig& cfg, std::uint64_t shuffle_seed) {
    if (train.empty()) throw ConfigError("local_update on an empty training set");
    ToyModel work = model;
    LocalUpdateResult res;
    NamedParamSet acc;
    std::int64_t window_tokens = 0;
    int micro = 0;

    auto flush = [&] {
        if (micro == 0) return;
        scale_in_place(acc, 1.0 / static_cast<Real>(window_tokens));
        optimizer.step(work.params, acc);
        acc = NamedParamSet{};
        window_tokens = 0;
        micro = 0;
        ++res.steps;
    };

    const bool by_steps = cfg.fixed_steps > 0;
    for (int epoch = 0;; ++epoch) {
        if (!by_steps && epoch >= cfg.local_epochs) break;
        const auto groups =
            batch_indices(train.size(), cfg.batch_size, derive_seed(shuffle_seed, "epoch", static_cast<std::uint64_t>(epoch)));
        for (const auto& idx : groups) {
            std::vector<EncodedPair> rows;
            rows.reserve(idx.size());
            for (auto i : idx) rows.push_back(train[i]);
            const auto g = grad(work, make_batch(rows), 1.0, cfg.exec);
            res.train_loss.sum += g.loss.sum;
            res.train_loss.tokens += g.loss.tokens;
            accumulate(acc, g.grads);
            window_tokens += g.loss.tokens;
            if (++micro == cfg.grad_accumulation) flush();
            if (by_steps && res.steps >= cfg.fixed_steps) break;
        }
        if (by_steps) {
            if (res.steps >= cfg.fixed_steps) break;
        } else {
            flush();
        }
    }
    if (!std::isfinite(res.train_loss.sum)) throw NumericError("training loss diverged");
    res.params = std::move(work.params);
    return res;
}

std::vector<Real> fedavg_weights(std::span<const std::int64_t> sizes) {
    std::int64_t total = 0;
    for (auto n : sizes) {
        if (n <= 0) throw ConfigError("FedAvg needs positive client data sizes");
        total += n;
    }
    std::vector<Real> w;
    w.reserve(sizes.size());
    for (auto n : sizes) w.push_back(static_cast<Real>(n) / static_cast<Real>(total));
    return w;
}

NamedParamSet aggregate_fedavg(std::span<const NamedParamSet* const> sets, std::span<const std::int64_t> sizes,
                               const ParamFilter& filter) {
    if (sets.size() != sizes.size()) throw StructuralMismatch("FedAvg: one data size per parameter set required");
    const auto w = fedavg_weights(sizes);
    return linear_combine(sets, w, filter);
}

NamedParamSet aggregate_fedmean(std::span<const NamedParamSet* const> sets, const ParamFilter& filter) {
    if (sets.empty()) throw StructuralMismatch("FedMean over an empty list");
    const std::vector<Real> w(sets.size(), 1.0 / static_cast<Real>(sets.size()));
    return linear_combine(sets, w, filter);
}

RoundState inner_cluster_aggregate(const RoundState& state, const ClusterAssignment& assignment, Aggregation rule,
                                   std::span<const std::int64_t> sizes, Mode mode) {
    const auto n = state.params.size();
    if (rule == Aggregation::FedAvg && sizes.size() != n) throw ConfigError("FedAvg needs one data size per client");
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    assignment.validate(ids);
    for (std::size_t i = 1; i < n; ++i) {
        if (!state.params[0].compatible_with(state.params[i])) {
            throw StructuralMismatch("client parameter sets are not aggregation-compatible");
        }
    }

    RoundState next = state;
    auto run_side = [&](const std::vector<Cluster>& clusters, Side side) {
        const auto filter = ParamFilter::trainable_side(side);
        for (const auto& g : clusters) {
            std::vector<const NamedParamSet*> members;
            std::vector<std::int64_t> member_sizes;
            for (int id : g) {
                members.push_back(&state.params[static_cast<std::size_t>(id)]);
                if (rule == Aggregation::FedAvg) member_sizes.push_back(sizes[static_cast<std::size_t>(id)]);
            }
            const NamedParamSet merged = rule == Aggregation::FedAvg ? aggregate_fedavg(members, member_sizes, filter)
                                                                     : aggregate_fedmean(members, filter);
            for (int id : g) {
                auto& dst = next.params[static_cast<std::size_t>(id)];
                for (const auto& [name, t] : merged) {
                    if (filter.accepts(t)) dst.at(name).values = t.values;
                }
            }
        }
    };
    run_side(assignment.encoder, Side::Encoder);
    run_side(assignment.decoder, Side::Decoder);
    if (mode == Mode::M2m) {
        run_side(assignment.decoder, Side::Shared);
    } else {
        run_side({Cluster(ids.begin(), ids.end())}, Side::Shared);
    }
    return next;
}

TransferEstimate estimate_transfer(std::int64_t payload_bytes, int n_clients, double bandwidth_bps) {
    if (!(bandwidth_bps > 0)) throw ConfigError("bandwidth must be positive");
    TransferEstimate t;
    t.per_client_seconds = static_cast<double>(payload_bytes) * 8.0 / bandwidth_bps;
    t.serialized_seconds = t.per_client_seconds * n_clients;
    return t;
}

void CommLedger::record(int round, int client, std::int64_t uplink_bytes, std::int64_t downlink_bytes) {
    entries_.push_back({round, client, uplink_bytes, downlink_bytes});
}

std::int64_t CommLedger::total_uplink() const {
    std::int64_t s = 0;
    for (const auto& e : entries_) s += e.uplink_bytes;
    return s;
}

std::int64_t CommLedger::total_downlink() const {
    std::int64_t s = 0;
    for (const auto& e : entries_) s += e.downlink_bytes;
    return s;
}

double CommLedger::seconds(std::int64_t bytes) const { return static_cast<double>(bytes) * 8.0 / bandwidth_bps_; }

std::string CommLedger::to_csv() const {
    auto rows = entries_;
    std::sort(rows.begin(), rows.end(),
              [](const Entry& a, const Entry& b) { return std::tie(a.round, a.client) < std::tie(b.round, b.client); });
    std::ostringstream os;
    os << "round,client,uplink_bytes,downlink_bytes,uplink_s,downlink_s\n";
    char buf[64];
    for (const auto& e : rows) {
        os << e.round << ',' << e.client << ',' << e.uplink_bytes << ',' << e.downlink_bytes << ',';
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", seconds(e.uplink_bytes), seconds(e.downlink_bytes));
        os << buf << '\n';
    }
    return os.str();
}

Real dev_loss(const ToyModel& model, std::span<const EncodedPair> split, Exec exec) {
    if (split.empty()) throw ConfigError("dev split is empty");
    LossValue total;
    constexpr std::size_t kEvalBatch = 32;
    for (std::size_t start = 0; start < split.size(); start += kEvalBatch) {
        const auto len = std::min(kEvalBatch, split.size() - start);
        const auto l = loss(model, make_batch(split.subspan(start, len)), exec);
        total.sum += l.sum;
        total.tokens += l.tokens;
    }
    return total.mean();
}

namespace {

Tokens render(const Vocab* vocab, const std::vector<int>& ids) {
    Tokens t;
    for (int id : ids) t.push_back(vocab ? vocab->token(id) : std::to_string(id));
    return t;
}

}  // namespace

ExperimentReport run_experiment(const FederationSetup& s) {
    s.cfg.validate();
    const auto n_trainers = s.trainers.size();
    if (n_trainers == 0) throw ConfigError("experiment has no training clients");
    for (std::size_t i = 0; i < n_trainers; ++i) {
        if (s.trainers[i].id != static_cast<int>(i)) throw ConfigError("trainer ids must be 0..N-1 in order");
        if (s.trainers[i].train.empty()) throw ConfigError("trainer " + std::to_string(i) + " has no training data");
    }
    for (const auto& e : s.evals) {
        if (e.trainer < 0 || e.trainer >= static_cast<int>(n_trainers)) throw ConfigError("eval client maps to unknown trainer");
    }
    std::vector<std::int64_t> sizes;
    for (const auto& t : s.trainers) sizes.push_back(static_cast<std::int64_t>(t.train.size()));
    if (s.aggregate) {
        std::vector<int> ids(n_trainers);
        std::iota(ids.begin(), ids.end(), 0);
        s.assignment.validate(ids);
    }

    ExperimentReport rep;
    rep.ledger = CommLedger(s.cfg.bandwidth_bps);
    rep.payload_bytes = payload(s.initial.params, ParamFilter::trainable(), s.cfg.bytes_per_param).total_bytes;
    rep.local_seconds.assign(n_trainers, 0.0);

    RoundState state;
    state.params.assign(n_trainers, s.initial.params);
    std::vector<Optimizer> optimizers;
    for (std::size_t i = 0; i < n_trainers; ++i) optimizers.emplace_back(s.cfg.optimizer, s.cfg.learning_rate);

    const auto n_eval = s.evals.size();
    rep.best_round.assign(n_eval, 0);
    rep.best_dev_loss.assign(n_eval, std::numeric_limits<Real>::infinity());
    rep.best_params.assign(n_eval, s.initial.params);

    auto model_of = [&](std::size_t trainer) {
        ToyModel m = s.initial;
        m.params = state.params[trainer];
        return m;
    };
    auto evaluate = [&](int round, const std::vector<Real>& train_loss) {
        for (std::size_t e = 0; e < n_eval; ++e) {
            const auto tr = static_cast<std::size_t>(s.evals[e].trainer);
            const Real dl = dev_loss(model_of(tr), s.evals[e].dev, s.cfg.exec);
            rep.records.push_back({round, s.evals[e].id, train_loss[tr], dl});
            if (round > 0 && dl < rep.best_dev_loss[e]) {
                rep.best_dev_loss[e] = dl;
                rep.best_round[e] = round;
                rep.best_params[e] = state.params[tr];
            }
        }
    };

    evaluate(0, std::vector<Real>(n_trainers, std::numeric_limits<Real>::quiet_NaN()));

    for (int round = 1; round <= s.cfg.rounds; ++round) {
        std::vector<LocalUpdateResult> results(n_trainers);
        std::vector<std::exception_ptr> errors(n_trainers);
        const int n = static_cast<int>(n_trainers);
        const bool parallel = s.cfg.exec == Exec::Parallel;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
        for (int i = 0; i < n; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            try {
                const auto t0 = std::chrono::steady_clock::now();
                results[ui] = local_update(model_of(ui), optimizers[ui], s.trainers[ui].train, s.cfg,
                                           derive_seed(s.cfg.seed, "local", static_cast<std::uint64_t>(round * 1000 + i)));
                rep.local_seconds[ui] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            } catch (const std::exception& ex) {
                errors[ui] = std::make_exception_ptr(NumericError("round " + std::to_string(round) + ", client " +
                                                                  std::to_string(i) + ": " + ex.what()));
            }
        }
        for (const auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }

        std::vector<Real> train_loss(n_trainers);
        for (std::size_t i = 0; i < n_trainers; ++i) {
            state.params[i] = std::move(results[i].params);
            train_loss[i] = results[i].train_loss.mean();
        }
        state.round = round;
        if (s.aggregate) {
            state = inner_cluster_aggregate(state, s.assignment, s.cfg.aggregation, sizes, s.mode);
            for (std::size_t i = 0; i < n_trainers; ++i) {
                rep.ledger.record(round, static_cast<int>(i), rep.payload_bytes, rep.payload_bytes);
            }
        }
        evaluate(round, train_loss);
    }

    if (s.decode_test) {
        std::vector<PairResult> results;
        for (std::size_t e = 0; e < n_eval; ++e) {
            ToyModel m = s.initial;
            m.params = rep.best_params[e];
            PairResult pr;
            pr.pair = s.evals[e].pair;
            for (const auto& ex : s.evals[e].test) {
                const int max_len = static_cast<int>(ex.source.size()) + 4;
                pr.hypotheses.push_back(render(s.vocab, greedy_decode(m, ex.source, ex.target_tag, max_len)));
                pr.references.push_back(render(s.vocab, ex.target));
            }
            results.push_back(std::move(pr));
        }
        rep.bleu = macro_micro(results);
    }
    return rep;
}

NamedParamSet pretrain_backbone(const ModelConfig& config, std::span<const EncodedPair> corpus,
                                const PretrainConfig& pc) {
    ModelConfig c = config;
    c.use_adapters = false;
    c.train_backbone = true;
    ToyModel m = build_model(c, pc.seed);
    Optimizer opt(OptimizerKind::Adam, pc.learning_rate);
    FedConfig fc;
    fc.batch_size = pc.batch_size;
    fc.grad_accumulation = 1;
    fc.local_epochs = 1;
    fc.learning_rate = pc.learning_rate;
    for (int e = 0; e < pc.epochs; ++e) {
        auto r = local_update(m, opt, corpus, fc, derive_seed(pc.seed, "pretrain-epoch", static_cast<std::uint64_t>(e)));
        m.params = std::move(r.params);
    }
    for (auto& [_, t] : m.params) t.trainable = false;
    return m.params;
}

}  // namespace fedmt
