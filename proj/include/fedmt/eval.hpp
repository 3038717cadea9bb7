#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fedmt {

using Tokens = std::vector<std::string>;

Tokens tokenize(std::string_view sentence);

struct BleuOptions {
    // Add-one smoothing on the 2..4-gram precisions.
    bool add_one_smoothing = true;
};

// Corpus BLEU-4 on a 0..100 scale: geometric mean of clipped n-gram
// precisions times the brevity penalty.
double corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                   const BleuOptions& options = {});

struct PairResult {
    std::string pair;
    std::vector<Tokens> hypotheses;
    std::vector<Tokens> references;
};

struct PairScore {
    std::string pair;
    double bleu = 0;
    std::size_t sentences = 0;
};

struct MacroMicro {
    std::vector<PairScore> per_pair;
    double macro = 0;  // unweighted mean of per-pair BLEU
    double micro = 0;  // BLEU of all pairs pooled into one corpus
};

MacroMicro macro_micro(const std::vector<PairResult>& results, const BleuOptions& options = {});

}  // namespace fedmt
