#include "fedmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "fedmt/errors.hpp"

namespace fedmt {

Tokens tokenize(std::string_view sentence) {
    Tokens out;
    std::istringstream is{std::string(sentence)};
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, long>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
    NgramCounts counts;
    if (t.size() < n) return counts;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return counts;
}

}  // namespace

double corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                   const BleuOptions& options) {
    if (hypotheses.empty()) throw ConfigError("corpus_bleu: empty hypothesis list");
    if (hypotheses.size() != references.size()) throw ConfigError("corpus_bleu: hypothesis/reference count mismatch");

    long matches[4] = {0, 0, 0, 0};
    long totals[4] = {0, 0, 0, 0};
    long hyp_len = 0, ref_len = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto& h = hypotheses[s];
        const auto& r = references[s];
        hyp_len += static_cast<long>(h.size());
        ref_len += static_cast<long>(r.size());
        for (std::size_t n = 1; n <= 4; ++n) {
            const auto hc = ngrams(h, n);
            const auto rc = ngrams(r, n);
            for (const auto& [g, c] : hc) {
                auto it = rc.find(g);
                if (it != rc.end()) matches[n - 1] += std::min(c, it->second);
                totals[n - 1] += c;
            }
        }
    }
    if (hyp_len == 0 || matches[0] == 0) return 0.0;

    double log_p = 0;
    for (int n = 0; n < 4; ++n) {
        double m = static_cast<double>(matches[n]);
        double t = static_cast<double>(totals[n]);
        if (n > 0 && options.add_one_smoothing) {
            m += 1;
            t += 1;
        }
        if (m == 0 || t == 0) return 0.0;
        log_p += std::log(m / t) / 4.0;
    }
    const double bp =
        hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * std::exp(log_p);
}

MacroMicro macro_micro(const std::vector<PairResult>& results, const BleuOptions& options) {
    if (results.empty()) throw ConfigError("macro_micro needs at least one language pair");
    MacroMicro out;
    std::vector<Tokens> all_h, all_r;
    double sum = 0;
    for (const auto& r : results) {
        PairScore s{r.pair, corpus_bleu(r.hypotheses, r.references, options), r.hypotheses.size()};
        sum += s.bleu;
        out.per_pair.push_back(s);
        all_h.insert(all_h.end(), r.hypotheses.begin(), r.hypotheses.end());
        all_r.insert(all_r.end(), r.references.begin(), r.references.end());
    }
    out.macro = sum / static_cast<double>(results.size());
    out.micro = corpus_bleu(all_h, all_r, options);
    return out;
}

}  // namespace fedmt
