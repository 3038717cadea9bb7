#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmt/model.hpp"

namespace fedmt {

enum class Mode { M2en, M2m };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& text);

// A synthetic language: a bijective substitution of the shared latent
// alphabet plus a sentence-final affix.
struct LanguageSpec {
    std::string code;
    std::string family;
    std::vector<int> table;    // latent symbol -> surface symbol
    std::vector<int> inverse;  // surface symbol -> latent symbol
    std::vector<int> affix;    // surface symbols appended to every sentence

    std::vector<int> encode(std::span<const int> latent) const;
    // Strips the affix and maps back to latent symbols. Throws FormatError if the
    // affix is missing.
    std::vector<int> decode(std::span<const int> surface) const;
};

// Ordered list of (family, member codes).
using FamilyPlan = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct LanguageOptions {
    int alphabet_size = 24;
    // Fraction of substitution entries a language keeps from its family base table.
    double intra_family_overlap = 1.0;
    // true: family base tables disagree on every entry (cross-family overlap 0);
    // false: independent random tables (overlap at chance level).
    bool disjoint_families = false;
    int affix_length = 1;
    // Table entries on which every language of a family differs from the
    // family's proto-language.
    int family_drift = 0;
};

std::vector<LanguageSpec> generate_languages(const FamilyPlan& plan, const LanguageOptions& options,
                                             std::uint64_t seed);

// One ancestor per family (code proto_code(f)), sharing the family's affix and
// base table up to `family_drift` rotated entries. Same seed as generate_languages.
std::vector<LanguageSpec> generate_protolanguages(const FamilyPlan& plan, const LanguageOptions& options,
                                                  std::uint64_t seed);
std::string proto_code(int family_index);

// Fraction of latent symbols the two tables map to the same surface symbol.
double table_overlap(const LanguageSpec& a, const LanguageSpec& b);

struct LanguagePair {
    std::string src;
    std::string tgt;
    std::string name() const { return src + "-" + tgt; }
    friend bool operator==(const LanguagePair&, const LanguagePair&) = default;
};

struct SentencePair {
    std::vector<int> source;  // surface symbols
    std::vector<int> target;
    friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct LengthRange {
    int min_len = 4;
    int max_len = 12;
};

struct ClientDataset {
    LanguagePair pair;
    std::vector<SentencePair> train, dev, test;
    std::int64_t n() const { return static_cast<std::int64_t>(train.size()); }
};

// `train_size` training pairs plus dev/test splits of train_size/3 each (6:2:2).
// Latent sentences are unique across all three splits.
ClientDataset generate_corpus(const LanguageSpec& src, const LanguageSpec& tgt, int train_size,
                              const LengthRange& lengths, int alphabet_size, std::uint64_t seed);

struct Client {
    int id = 0;
    LanguagePair pair;
    std::string src_family;
    std::string tgt_family;
    ClientDataset data;
};

struct CorpusPlan {
    Mode mode = Mode::M2en;
    FamilyPlan families;
    std::vector<std::pair<LanguagePair, int>> pairs;  // full-scale training sizes
};

// TED2020-style many-to-English plan: 8 source languages in 4 families.
CorpusPlan m2en_plan();
// Europarl-style many-to-many plan: 12 pairs over 4 Indo-European groups.
CorpusPlan m2m_plan();
CorpusPlan plan_for(Mode mode);

std::string family_of(const std::vector<LanguageSpec>& languages, const std::string& code);
const LanguageSpec& find_language(const std::vector<LanguageSpec>& languages, const std::string& code);

// Training size per pair is max(1, round(size * scale)).
std::vector<Client> build_clients(const CorpusPlan& plan, const std::vector<LanguageSpec>& languages, double scale,
                                  const LengthRange& lengths, int alphabet_size, std::uint64_t seed);

// Warm-up corpus: one dataset per ordered pair of `languages`.
std::vector<ClientDataset> generate_pretraining_corpus(const std::vector<LanguageSpec>& languages,
                                                      int sentences_per_pair, const LengthRange& lengths,
                                                      int alphabet_size, std::uint64_t seed);

class Vocab {
public:
    Vocab() = default;
    Vocab(std::vector<std::string> codes, std::vector<int> symbols);

    int size() const { return static_cast<int>(tokens_.size()); }
    int tag(const std::string& code) const;
    int symbol(int s) const;
    // Inverse of symbol(); -1 for specials and tags.
    int symbol_of(int id) const;
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> tag_ids_;
    std::map<int, int> symbol_ids_;
    std::map<int, int> symbol_of_;
};

// Ids 0..3 are PAD/BOS/EOS/UNK, then one "<2xx>" tag per language (sorted by
// code), then surface symbols "w00", "w01", ... Independent of corpus order.
Vocab build_vocab(std::span<const ClientDataset> corpora);

std::string symbol_token(int s);

EncodedPair encode_pair(const Vocab& vocab, const LanguagePair& pair, const SentencePair& sentence);
std::vector<EncodedPair> encode_split(const Vocab& vocab, const LanguagePair& pair,
                                      const std::vector<SentencePair>& split);

// Shuffled (by seed) index groups; the final partial group is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, int batch_size, std::uint64_t seed);
std::vector<Batch> batches(std::span<const EncodedPair> split, int batch_size, std::uint64_t seed);

// One line per pair: space-separated source tokens, TAB, target tokens.
void write_parallel_text(const std::string& path, const std::vector<SentencePair>& split);

}  // namespace fedmt
