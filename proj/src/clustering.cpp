#include "fedmt/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "fedmt/errors.hpp"
#include "fedmt/seed.hpp"

namespace fedmt {

std::string to_string(ClusterStrategy s) {
    switch (s) {
        case ClusterStrategy::Global: return "global";
        case ClusterStrategy::Families: return "families";
        case ClusterStrategy::Gradients: return "gradients";
        case ClusterStrategy::Random: return "random";
        case ClusterStrategy::Singletons: return "singletons";
    }
    return "global";
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::Both: return "both";
        case Ablation::EncoderOnly: return "encoder_only";
        case Ablation::DecoderOnly: return "decoder_only";
        case Ablation::None: return "none";
    }
    return "both";
}

Ablation ablation_from_string(const std::string& text) {
    if (text == "both") return Ablation::Both;
    if (text == "encoder_only") return Ablation::EncoderOnly;
    if (text == "decoder_only") return Ablation::DecoderOnly;
    if (text == "none") return Ablation::None;
    throw ConfigError("unknown ablation '" + text + "'");
}

void canonicalize(std::vector<Cluster>& clusters) {
    for (auto& c : clusters) std::sort(c.begin(), c.end());
    std::sort(clusters.begin(), clusters.end(), [](const Cluster& a, const Cluster& b) {
        if (a.empty() || b.empty()) return a.size() > b.size();
        return a.front() < b.front();
    });
}

void ClusterAssignment::validate(std::span<const int> client_ids) const {
    const std::set<int> ids(client_ids.begin(), client_ids.end());
    auto check = [&](const std::vector<Cluster>& side, const char* which) {
        std::set<int> covered;
        for (const auto& c : side) {
            if (c.empty()) throw PartitionError(std::string(which) + " side has an empty cluster");
            for (int id : c) {
                if (!ids.count(id)) throw PartitionError(std::string(which) + " cluster names unknown client " + std::to_string(id));
                if (!covered.insert(id).second) {
                    throw PartitionError(std::string(which) + " clusters overlap on client " + std::to_string(id));
                }
            }
        }
        if (covered.size() != ids.size()) throw PartitionError(std::string(which) + " clusters do not cover every client");
    };
    check(encoder, "encoder");
    check(decoder, "decoder");
}

std::string ClusterAssignment::to_table(std::span<const Client> clients) const {
    std::map<int, std::string> names;
    for (const auto& c : clients) names[c.id] = c.pair.name();
    std::ostringstream os;
    os << "strategy: " << strategy << "\n";
    auto side = [&](const char* label, const std::vector<Cluster>& cs) {
        os << label << " clusters (" << cs.size() << "):\n";
        for (std::size_t g = 0; g < cs.size(); ++g) {
            os << "  g" << g << ":";
            for (int id : cs[g]) os << " " << id << ":" << (names.count(id) ? names[id] : "?");
            os << "\n";
        }
    };
    side("encoder", encoder);
    side("decoder", decoder);
    return os.str();
}

std::vector<Cluster> cluster_by_family(std::span<const Client> clients, Side side, Mode mode) {
    if (side == Side::Decoder && mode == Mode::M2en) {
        Cluster all;
        for (const auto& c : clients) all.push_back(c.id);
        std::vector<Cluster> out{all};
        canonicalize(out);
        return out;
    }
    std::map<std::string, Cluster> by_family;
    for (const auto& c : clients) {
        const auto& fam = side == Side::Encoder ? c.src_family : c.tgt_family;
        if (fam.empty()) throw ConfigError("client " + std::to_string(c.id) + " has no language family tag");
        by_family[fam].push_back(c.id);
    }
    std::vector<Cluster> out;
    for (auto& [_, members] : by_family) out.push_back(std::move(members));
    canonicalize(out);
    return out;
}

std::string encoder_probe_slice() { return "enc.layer0.sa_adapter."; }
std::string decoder_probe_slice() { return "dec.layer0.sa_adapter."; }

GradientFeature compute_gradient_feature(int client_id, std::span<const EncodedPair> train, const ToyModel& probe,
                                         const std::string& slice_prefix, int batch_size) {
    if (train.empty()) throw ConfigError("gradient feature needs a non-empty training set");
    std::vector<Real> sum;
    bool found = false;
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto len = std::min(train.size() - start, static_cast<std::size_t>(batch_size));
        const auto g = grad(probe, make_batch(train.subspan(start, len)));
        std::size_t k = 0;
        for (const auto& [name, t] : g.grads) {
            if (name.rfind(slice_prefix, 0) != 0) continue;
            found = true;
            if (sum.size() < k + t.values.size()) sum.resize(k + t.values.size(), 0.0);
            for (Real v : t.values) sum[k++] += v;
        }
    }
    if (!found) throw ConfigError("probe slice '" + slice_prefix + "' matches no trainable tensor");
    Real norm = 0;
    for (auto& v : sum) {
        v /= static_cast<Real>(train.size());
        norm += v * v;
    }
    norm = std::sqrt(norm);
    if (!(norm > 0)) throw DegenerateFeature("zero gradient feature for client " + std::to_string(client_id));
    for (auto& v : sum) v /= norm;
    return {client_id, std::move(sum)};
}

namespace {

Real dot(const std::vector<Real>& a, const std::vector<Real>& b) {
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<Real> normalized_mean(std::span<const GradientFeature> f, const std::vector<int>& members) {
    std::vector<Real> c(f[0].values.size(), 0.0);
    for (int i : members) {
        for (std::size_t d = 0; d < c.size(); ++d) c[d] += f[static_cast<std::size_t>(i)].values[d];
    }
    const Real n = std::sqrt(dot(c, c));
    if (n > 0) {
        for (auto& v : c) v /= n;
    }
    return c;
}

struct KMeansRun {
    std::vector<int> label;  // per point index
    double cost = 0;
};

KMeansRun kmeans_once(std::span<const GradientFeature> f, int k, std::uint64_t seed) {
    const int n = static_cast<int>(f.size());
    std::mt19937_64 rng(seed);

    // k-means++ seeding on cosine distance.
    std::vector<std::vector<Real>> centers;
    std::vector<char> chosen(static_cast<std::size_t>(n), 0);
    {
        std::uniform_int_distribution<int> first(0, n - 1);
        const int c0 = first(rng);
        centers.push_back(f[static_cast<std::size_t>(c0)].values);
        chosen[static_cast<std::size_t>(c0)] = 1;
    }
    while (static_cast<int>(centers.size()) < k) {
        std::vector<double> d2(static_cast<std::size_t>(n), 0.0);
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double best = 2.0;
            for (const auto& c : centers) best = std::min(best, 1.0 - dot(f[static_cast<std::size_t>(i)].values, c));
            best = std::max(best, 0.0);
            d2[static_cast<std::size_t>(i)] = chosen[static_cast<std::size_t>(i)] ? 0.0 : best * best;
            total += d2[static_cast<std::size_t>(i)];
        }
        int pick = -1;
        if (total > 0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng);
            for (int i = 0; i < n; ++i) {
                r -= d2[static_cast<std::size_t>(i)];
                if (d2[static_cast<std::size_t>(i)] > 0 && r <= 0) {
                    pick = i;
                    break;
                }
            }
            if (pick < 0) {
                for (int i = n - 1; i >= 0; --i) {
                    if (d2[static_cast<std::size_t>(i)] > 0) {
                        pick = i;
                        break;
                    }
                }
            }
        } else {
            for (int i = 0; i < n && pick < 0; ++i) {
                if (!chosen[static_cast<std::size_t>(i)]) pick = i;
            }
        }
        chosen[static_cast<std::size_t>(pick)] = 1;
        centers.push_back(f[static_cast<std::size_t>(pick)].values);
    }

    std::vector<int> label(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            Real best_sim = -2;
            for (int g = 0; g < k; ++g) {
                const Real s = dot(f[static_cast<std::size_t>(i)].values, centers[static_cast<std::size_t>(g)]);
                if (s > best_sim) {  // strict: ties keep the lowest cluster index
                    best_sim = s;
                    best = g;
                }
            }
            if (label[static_cast<std::size_t>(i)] != best) {
                label[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
        }
        std::vector<std::vector<int>> members(static_cast<std::size_t>(k));
        for (int i = 0; i < n; ++i) members[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])].push_back(i);
        // Repair empty clusters: take the point farthest from its centroid in the largest cluster.
        for (int g = 0; g < k; ++g) {
            if (!members[static_cast<std::size_t>(g)].empty()) continue;
            std::size_t largest = 0;
            for (std::size_t h = 1; h < members.size(); ++h) {
                if (members[h].size() > members[largest].size()) largest = h;
            }
            const auto centroid = normalized_mean(f, members[largest]);
            int far = members[largest].front();
            Real worst = 2;
            for (int i : members[largest]) {
                const Real s = dot(f[static_cast<std::size_t>(i)].values, centroid);
                if (s < worst) {
                    worst = s;
                    far = i;
                }
            }
            std::erase(members[largest], far);
            members[static_cast<std::size_t>(g)].push_back(far);
            label[static_cast<std::size_t>(far)] = g;
            changed = true;
        }
        for (int g = 0; g < k; ++g) centers[static_cast<std::size_t>(g)] = normalized_mean(f, members[static_cast<std::size_t>(g)]);
        if (!changed) break;
    }

    std::vector<Cluster> clusters(static_cast<std::size_t>(k));
    for (int i = 0; i < n; ++i) {
        clusters[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])].push_back(f[static_cast<std::size_t>(i)].client_id);
    }
    const double cost = cosine_cost(f, clusters);
    return {std::move(label), cost};
}

}  // namespace

double cosine_cost(std::span<const GradientFeature> features, const std::vector<Cluster>& clusters) {
    std::map<int, std::size_t> index;
    for (std::size_t i = 0; i < features.size(); ++i) index[features[i].client_id] = i;
    double cost = 0;
    for (const auto& c : clusters) {
        std::vector<int> members;
        for (int id : c) members.push_back(static_cast<int>(index.at(id)));
        const auto centroid = normalized_mean(features, members);
        for (int i : members) cost += 1.0 - dot(features[static_cast<std::size_t>(i)].values, centroid);
    }
    return cost;
}

std::vector<Cluster> cluster_by_gradient(std::span<const GradientFeature> features, int k, std::uint64_t seed,
                                         int restarts) {
    const int n = static_cast<int>(features.size());
    if (k < 1) throw ConfigError("number of gradient clusters must be >= 1");
    if (k > n) throw ConfigError("more gradient clusters requested than there are clients");
    for (const auto& f : features) {
        if (f.values.size() != features[0].values.size()) throw StructuralMismatch("gradient features differ in dimension");
    }
    std::vector<Cluster> out;
    if (k == n) {
        for (const auto& f : features) out.push_back({f.client_id});
    } else {
        KMeansRun best;
        bool have = false;
        for (int r = 0; r < std::max(1, restarts); ++r) {
            auto run = kmeans_once(features, k, derive_seed(seed, "kmeans", static_cast<std::uint64_t>(r)));
            if (!have || run.cost < best.cost - 1e-12) {
                best = std::move(run);
                have = true;
            }
        }
        out.assign(static_cast<std::size_t>(k), {});
        for (int i = 0; i < n; ++i) {
            out[static_cast<std::size_t>(best.label[static_cast<std::size_t>(i)])].push_back(features[static_cast<std::size_t>(i)].client_id);
        }
    }
    canonicalize(out);
    return out;
}

std::vector<Cluster> cluster_random(std::span<const int> client_ids, int k, std::uint64_t seed) {
    if (k < 1) throw ConfigError("number of random clusters must be >= 1");
    if (k > static_cast<int>(client_ids.size())) throw ConfigError("more random clusters requested than there are clients");
    std::vector<int> ids(client_ids.begin(), client_ids.end());
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(derive_seed(seed, "random-clusters"));
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<Cluster> out(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < ids.size(); ++i) out[i % static_cast<std::size_t>(k)].push_back(ids[i]);
    canonicalize(out);
    return out;
}

ClusterAssignment assemble(ClusterStrategy strategy, Ablation ablation, const ClusteringInputs& in) {
    std::vector<int> ids;
    for (const auto& c : in.clients) ids.push_back(c.id);
    std::sort(ids.begin(), ids.end());
    const std::vector<Cluster> global{ids};

    ClusterAssignment a;
    a.strategy = to_string(strategy);
    const int k = static_cast<int>(cluster_by_family(in.clients, Side::Encoder, in.mode).size());
    switch (strategy) {
        case ClusterStrategy::Global:
            a.encoder = global;
            a.decoder = global;
            break;
        case ClusterStrategy::Singletons:
            for (int id : ids) {
                a.encoder.push_back({id});
                a.decoder.push_back({id});
            }
            break;
        case ClusterStrategy::Families:
            a.encoder = cluster_by_family(in.clients, Side::Encoder, in.mode);
            a.decoder = cluster_by_family(in.clients, Side::Decoder, in.mode);
            break;
        case ClusterStrategy::Random:
            a.encoder = cluster_random(ids, k, derive_seed(in.seed, "encoder"));
            a.decoder = in.mode == Mode::M2en ? global : cluster_random(ids, k, derive_seed(in.seed, "decoder"));
            break;
        case ClusterStrategy::Gradients:
            if (in.encoder_features.size() != ids.size() || in.decoder_features.size() != ids.size()) {
                throw ConfigError("gradient clustering needs one encoder and one decoder feature per client");
            }
            // Both sides are clustered in both modes, with the encoder's cluster count.
            a.encoder = cluster_by_gradient(in.encoder_features, k, derive_seed(in.seed, "encoder"), in.restarts);
            a.decoder = cluster_by_gradient(in.decoder_features, k, derive_seed(in.seed, "decoder"), in.restarts);
            break;
    }
    if (ablation == Ablation::EncoderOnly || ablation == Ablation::None) a.decoder = global;
    if (ablation == Ablation::DecoderOnly || ablation == Ablation::None) a.encoder = global;
    if (ablation != Ablation::Both) a.strategy += "/" + to_string(ablation);
    a.validate(ids);
    return a;
}

}  // namespace fedmt
