#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "doctest.h"
#include "fedmt/errors.hpp"
#include "fedmt/model.hpp"
#include "oracles.hpp"

using namespace fedmt;
namespace ft = fedmt::testing;

TEST_CASE("independent re-implementation agrees on the loss") {
    std::mt19937_64 rng(17);
    struct Variant {
        bool adapters, backbone;
        Nonlinearity act;
        int layers;
    };
    for (const auto& v : {Variant{true, false, Nonlinearity::Relu, 1}, Variant{true, false, Nonlinearity::Gelu, 2},
                          Variant{false, true, Nonlinearity::Relu, 2}, Variant{true, false, Nonlinearity::Relu, 3}}) {
        auto c = ft::tiny_config(8, v.layers);
        c.use_adapters = v.adapters;
        c.train_backbone = v.backbone;
        c.adapter_nonlinearity = v.act;
        ToyModel m = build_model(c, 21);
        ft::randomize_trainable(m, 22);
        if (v.layers == 3) m = apply_pruning(m, PruneStrategy::Middle);
        const auto pairs = ft::random_pairs(rng, 5, c.vocab_size);
        double expect = 0;
        for (const auto& p : pairs) expect += ft::naive_loss(m, p);
        const auto got = loss(m, make_batch(pairs));
        CHECK(got.sum == doctest::Approx(expect).epsilon(1e-9));
        CHECK(std::abs(got.sum - expect) < 1e-6);
    }
}

TEST_CASE("analytic gradients match central differences") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 3; ++trial) {
        auto c = ft::tiny_config(8, 2);
        c.train_backbone = trial == 2;
        if (trial == 1) c.adapter_nonlinearity = Nonlinearity::Gelu;
        ToyModel m = build_model(c, 40 + static_cast<std::uint64_t>(trial));
        ft::randomize_trainable(m, 50 + static_cast<std::uint64_t>(trial));
        const auto rep = ft::finite_difference_check(m, make_batch(ft::random_pairs(rng, 2, c.vocab_size)));
        CHECK(rep.checked == count_params(m.params, ParamFilter::trainable()));
        CHECK_MESSAGE(rep.max_rel_error < 1e-3, rep.worst);
    }
}

TEST_CASE("adapter_apply hand example") {
    const std::vector<Real> h{2, 3};
    const auto out = adapter_apply(h, std::vector<Real>{1, 0}, std::vector<Real>{0}, std::vector<Real>{1, 1},
                                   std::vector<Real>{0, 0}, 1);
    CHECK(out == std::vector<Real>{4, 5});
    CHECK(adapter_apply(h, std::vector<Real>{1, 0}, std::vector<Real>{0}, std::vector<Real>{0, 0},
                        std::vector<Real>{0, 0}, 1) == h);
    CHECK(adapter_apply(h, std::vector<Real>{9, 9}, std::vector<Real>{9}, std::vector<Real>{9, 9},
                        std::vector<Real>{9, 9}, 1, Nonlinearity::Relu, false) == h);
    CHECK_THROWS_AS(adapter_apply(h, std::vector<Real>{1}, std::vector<Real>{0}, std::vector<Real>{1, 1},
                                  std::vector<Real>{0, 0}, 1),
                    StructuralMismatch);
}

TEST_CASE("adapter placement and counts") {
    auto c = ft::tiny_config(32, 2, 8);
    CHECK(adapter_ids(c).size() == 10);
    const ToyModel m = build_model(c, 1);
    CHECK(count_adapter_params(m) == 10 * adapter_param_count(32, 8));
    CHECK(adapter_param_count(1024, 64) == 132'160);
    CHECK(60 * adapter_param_count(1024, 64) == 7'929'600);
    std::set<std::string> sites;
    for (const auto& id : adapter_ids(c)) sites.insert(id.prefix());
    CHECK(sites.count("enc.layer1.sa_adapter"));
    CHECK(sites.count("enc.layer1.ffn_adapter"));
    CHECK(!sites.count("enc.layer1.ca_adapter"));
    CHECK(sites.count("dec.layer1.ca_adapter"));
}

TEST_CASE("build_model: determinism and trainable split") {
    const auto c = ft::tiny_config();
    const ToyModel a = build_model(c, 5);
    CHECK(a.params == build_model(c, 5).params);
    CHECK(!(a.params == build_model(c, 6).params));
    for (const auto& [name, t] : a.params) {
        const bool adapter = name.find("_adapter.") != std::string::npos;
        const bool norm = name.find("_ln.") != std::string::npos;
        CHECK_MESSAGE(t.trainable == (adapter || norm), name);
        if (adapter && name.find(".up.") != std::string::npos) {
            for (Real v : t.values) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("fresh adapters leave the backbone output unchanged") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const auto c = ft::tiny_config(16, 2, 4);
        const ToyModel m = build_model(c, static_cast<std::uint64_t>(trial));
        const Batch b = make_batch(ft::random_pairs(rng, 3, c.vocab_size));
        CHECK(forward_logits(m, b) == forward_logits(strip_adapters(m), b));
        const ToyModel re = attach_adapters(strip_adapters(m).params, c, 99);
        CHECK(forward_logits(re, b) == forward_logits(m, b));
    }
}

TEST_CASE("loss limits") {
    auto c = ft::tiny_config();
    ToyModel m = build_model(c, 3);
    std::mt19937_64 rng(1);
    const Batch b = make_batch(ft::random_pairs(rng, 4, c.vocab_size));

    auto& out = m.params.at("dec.out_proj.weight").values;
    std::fill(out.begin(), out.end(), 0.0);
    CHECK(loss(m, b).mean() == doctest::Approx(std::log(static_cast<double>(c.vocab_size))).epsilon(1e-12));

    // constant decoder state, one row of the output projection far ahead
    auto& g = m.params.at("dec.final_ln.weight").values;
    std::fill(g.begin(), g.end(), 0.0);
    auto& bias = m.params.at("dec.final_ln.bias").values;
    std::fill(bias.begin(), bias.end(), 0.0);
    bias[0] = 1.0;
    out[static_cast<std::size_t>(kEosId * c.model_dim)] = 100.0;
    EncodedPair only_eos{{4, 7, kEosId}, 5, {}};
    CHECK(loss(m, make_batch(std::vector<EncodedPair>{only_eos})).sum < 1e-30);
    CHECK(loss(m, make_batch(std::vector<EncodedPair>{only_eos})).tokens == 1);

    CHECK_THROWS_AS(loss(m, make_batch(std::vector<EncodedPair>{})), ConfigError);
}

TEST_CASE("pad positions do not contribute") {
    const auto c = ft::tiny_config();
    const ToyModel m = build_model(c, 12);
    std::mt19937_64 rng(12);
    const auto pairs = ft::random_pairs(rng, 4, c.vocab_size, 1, 6);
    double separate = 0;
    std::int64_t tokens = 0;
    for (const auto& p : pairs) {
        const auto l = loss(m, make_batch(std::vector<EncodedPair>{p}));
        separate += l.sum;
        tokens += l.tokens;
    }
    const auto joint = loss(m, make_batch(pairs));
    CHECK(joint.sum == doctest::Approx(separate).epsilon(1e-12));
    CHECK(joint.tokens == tokens);
}

TEST_CASE("gradients: trainable only, linear in scale, serial equals parallel") {
    auto c = ft::tiny_config(16, 2, 4);
    ToyModel m = build_model(c, 2);
    ft::randomize_trainable(m, 3);
    std::mt19937_64 rng(4);
    const Batch b = make_batch(ft::random_pairs(rng, 6, c.vocab_size));
    const auto g1 = grad(m, b, 1.0, Exec::Serial);
    const auto g2 = grad(m, b, 2.0, Exec::Serial);
    const auto gp = grad(m, b, 1.0, Exec::Parallel);
    CHECK(count_params(g1.grads) == count_params(m.params, ParamFilter::trainable()));
    CHECK(!g1.grads.contains("embed.tokens.weight"));
    CHECK(!g1.grads.contains("enc.layer0.self_attn.q_proj.weight"));
    for (const auto& [name, t] : g1.grads) {
        const auto& d = g2.grads.at(name).values;
        for (std::size_t i = 0; i < t.values.size(); ++i) CHECK(d[i] == doctest::Approx(2 * t.values[i]).epsilon(1e-12));
        CHECK(gp.grads.at(name).values == t.values);
    }
    CHECK(g1.loss.sum == gp.loss.sum);
}

TEST_CASE("non-finite parameters raise a numeric error") {
    const auto c = ft::tiny_config();
    ToyModel m = build_model(c, 2);
    m.params.at("dec.out_proj.weight").values[0] = std::numeric_limits<Real>::quiet_NaN();
    std::mt19937_64 rng(4);
    const Batch b = make_batch(ft::random_pairs(rng, 2, c.vocab_size));
    CHECK_THROWS_AS(loss(m, b), NumericError);
    CHECK_THROWS_AS(grad(m, b), NumericError);
}

TEST_CASE("pruning keeps one third per stack") {
    auto c = ft::tiny_config(8, 12, 2);
    c.max_seq_len = 8;
    const ToyModel m = build_model(c, 1);
    const auto ids = adapter_ids(c);

    const ToyModel in = apply_pruning(m, PruneStrategy::InputEnd);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        CHECK(in.adapter_active[i] == (ids[i].layer < 4));
        CHECK(in.params.at(ids[i].prefix() + ".down.weight").trainable == (ids[i].layer < 4));
    }
    CHECK(apply_pruning(m, PruneStrategy::All).adapter_active == m.adapter_active);

    std::vector<int> hits(ids.size(), 0);
    std::int64_t kept = 0;
    for (auto s : {PruneStrategy::InputEnd, PruneStrategy::Middle, PruneStrategy::OutputEnd}) {
        const ToyModel p = apply_pruning(m, s);
        kept += count_adapter_params(p);
        for (std::size_t i = 0; i < ids.size(); ++i) hits[i] += p.adapter_active[i] ? 1 : 0;
    }
    for (int h : hits) CHECK(h == 1);
    CHECK(kept == count_adapter_params(m));
}

TEST_CASE("pruning errors") {
    CHECK_THROWS_AS(apply_pruning(build_model(ft::tiny_config(8, 2), 1), PruneStrategy::Middle), ConfigError);
    auto c = ft::tiny_config(8, 3);
    c.use_adapters = false;
    c.train_backbone = true;
    CHECK_THROWS_AS(apply_pruning(build_model(c, 1), PruneStrategy::InputEnd), ConfigError);
}

TEST_CASE("pruned adapters are identity even with nonzero weights") {
    auto c = ft::tiny_config(8, 3);
    ToyModel m = build_model(c, 1);
    ft::randomize_trainable(m, 2);
    std::mt19937_64 rng(6);
    const Batch b = make_batch(ft::random_pairs(rng, 2, c.vocab_size));
    const ToyModel p = apply_pruning(m, PruneStrategy::OutputEnd);
    ToyModel zeroed = p;
    const auto ids = adapter_ids(c);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (p.adapter_active[i]) continue;
        for (const char* s : {".up.weight", ".up.bias"}) {
            auto& v = zeroed.params.at(ids[i].prefix() + s).values;
            std::fill(v.begin(), v.end(), 0.0);
        }
    }
    CHECK(forward_logits(p, b) == forward_logits(zeroed, b));
    CHECK(!grad(p, b).grads.contains("enc.layer0.sa_adapter.down.weight"));
}

TEST_CASE("greedy decoding respects the length limit") {
    const auto c = ft::tiny_config();
    const ToyModel m = build_model(c, 2);
    const std::vector<int> src{4, 7, 8, kEosId};
    const auto out = greedy_decode(m, src, 5, 6);
    CHECK(out.size() <= 6);
    for (int t : out) CHECK(t != kEosId);
    CHECK(out == greedy_decode(m, src, 5, 6));
}

TEST_CASE("config validation") {
    auto c = ft::tiny_config();
    c.num_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ft::tiny_config();
    c.adapter_bottleneck = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ft::tiny_config();
    c.enc_layers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
