#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "fedmt/errors.hpp"
#include "fedmt/eval.hpp"
#include "oracles.hpp"

using namespace fedmt;

namespace {

Tokens random_sentence(std::mt19937_64& rng, int vocab) {
    std::uniform_int_distribution<int> len(1, 10), tok(0, vocab - 1);
    Tokens t;
    for (int i = len(rng); i > 0; --i) t.push_back("w" + std::to_string(tok(rng)));
    return t;
}

PairResult random_pair(std::mt19937_64& rng, const std::string& name, int n) {
    PairResult p{name, {}, {}};
    for (int i = 0; i < n; ++i) {
        p.references.push_back(random_sentence(rng, 6));
        p.hypotheses.push_back(random_sentence(rng, 6));
    }
    return p;
}

}  // namespace

TEST_CASE("BLEU hand-derived values") {
    const std::vector<Tokens> ref{tokenize("a b c d e"), tokenize("x y z w")};
    CHECK(corpus_bleu(ref, ref) == doctest::Approx(100.0).epsilon(1e-12));

    // p1..p4 = 1, brevity penalty e^(1 - 5/4)
    const double short_hyp = corpus_bleu({tokenize("a b c d")}, {tokenize("a b c d e")});
    CHECK(std::abs(short_hyp - 77.88) < 0.01);
    CHECK(short_hyp == doctest::Approx(100 * std::exp(-0.25)).epsilon(1e-12));

    CHECK(corpus_bleu({tokenize("p q r")}, {tokenize("a b c")}) == 0.0);
    CHECK(corpus_bleu({Tokens{}}, {tokenize("a b")}) == 0.0);
}

TEST_CASE("BLEU properties") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = random_pair(rng, "x", 8);
        const double b = corpus_bleu(p.hypotheses, p.references);
        CHECK(b >= 0.0);
        CHECK(b <= 100.0);

        // sentence order does not matter
        std::vector<std::size_t> idx(p.hypotheses.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<Tokens> h, r;
        for (auto i : idx) {
            h.push_back(p.hypotheses[i]);
            r.push_back(p.references[i]);
        }
        CHECK(corpus_bleu(h, r) == doctest::Approx(b).epsilon(1e-12));

        // duplicating the corpus: exact without smoothing
        const BleuOptions raw{false};
        auto h2 = p.hypotheses, r2 = p.references;
        h2.insert(h2.end(), p.hypotheses.begin(), p.hypotheses.end());
        r2.insert(r2.end(), p.references.begin(), p.references.end());
        CHECK(corpus_bleu(h2, r2, raw) == doctest::Approx(corpus_bleu(p.hypotheses, p.references, raw)).epsilon(1e-12));
    }
}

TEST_CASE("BLEU input errors") {
    CHECK_THROWS_AS(corpus_bleu({}, {}), ConfigError);
    CHECK_THROWS_AS(corpus_bleu({tokenize("a")}, {}), ConfigError);
    CHECK_THROWS_AS(macro_micro({}), ConfigError);
}

TEST_CASE("macro and micro averages") {
    std::mt19937_64 rng(6);
    const auto single = random_pair(rng, "a-b", 10);
    const auto s = macro_micro({single});
    CHECK(s.macro == doctest::Approx(s.micro).epsilon(1e-12));
    CHECK(s.per_pair[0].bleu == doctest::Approx(s.macro).epsilon(1e-12));
    CHECK(s.per_pair[0].sentences == 10);

    // one perfect pair and one with no overlap: 100 and 0 average to 50
    PairResult perfect{"p", {tokenize("a b c d")}, {tokenize("a b c d")}};
    PairResult none{"q", {tokenize("x y")}, {tokenize("a b")}};
    CHECK(macro_micro({perfect, none}).macro == doctest::Approx(50.0));

    for (int trial = 0; trial < 30; ++trial) {
        std::vector<PairResult> pairs;
        for (int k = 0; k < 4; ++k) pairs.push_back(random_pair(rng, "p" + std::to_string(k), 3 + k));
        const auto mm = macro_micro(pairs);
        double mean = 0;
        for (const auto& p : pairs) mean += corpus_bleu(p.hypotheses, p.references);
        CHECK(mm.macro == doctest::Approx(mean / 4).epsilon(1e-12));
        CHECK(std::abs(mm.micro - fedmt::testing::pooled_bleu_oracle(pairs)) < 1e-9);
        std::reverse(pairs.begin(), pairs.end());
        CHECK(macro_micro(pairs).macro == doctest::Approx(mm.macro).epsilon(1e-12));
    }
}

TEST_CASE("tokenize splits on whitespace") {
    CHECK(tokenize("  a  b\tc\n") == Tokens{"a", "b", "c"});
    CHECK(tokenize("").empty());
}
