#include "fedmt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "fedmt/errors.hpp"
#include "fedmt/seed.hpp"

namespace fedmt {

std::string to_string(Mode m) { return m == Mode::M2en ? "m2en" : "m2m"; }

Mode mode_from_string(const std::string& text) {
    if (text == "m2en") return Mode::M2en;
    if (text == "m2m") return Mode::M2m;
    throw ConfigError("unknown mode '" + text + "'");
}

std::vector<int> LanguageSpec::encode(std::span<const int> latent) const {
    std::vector<int> out;
    out.reserve(latent.size() + affix.size());
    for (int s : latent) out.push_back(table.at(static_cast<std::size_t>(s)));
    out.insert(out.end(), affix.begin(), affix.end());
    return out;
}

std::vector<int> LanguageSpec::decode(std::span<const int> surface) const {
    if (surface.size() < affix.size() ||
        !std::equal(affix.begin(), affix.end(), surface.end() - static_cast<std::ptrdiff_t>(affix.size()))) {
        throw FormatError("sentence does not carry the " + code + " affix");
    }
    std::vector<int> out;
    for (std::size_t i = 0; i + affix.size() < surface.size(); ++i) {
        out.push_back(inverse.at(static_cast<std::size_t>(surface[i])));
    }
    return out;
}

namespace {

struct FamilyBase {
    std::string family;
    std::vector<int> table;
    std::vector<int> affix;
};

void check_options(const FamilyPlan& plan, const LanguageOptions& options) {
    const int K = options.alphabet_size;
    if (K < 2) throw ConfigError("data.alphabet_size must be >= 2");
    if (options.intra_family_overlap < 0 || options.intra_family_overlap > 1) {
        throw ConfigError("data.intra_family_overlap must lie in [0, 1]");
    }
    if (options.family_drift < 0 || options.family_drift > K) {
        throw ConfigError("data.family_drift must lie in [0, alphabet_size]");
    }
    std::set<std::string> seen;
    for (const auto& [_, codes] : plan) {
        for (const auto& c : codes) {
            if (!seen.insert(c).second) throw ConfigError("language code '" + c + "' appears twice in the plan");
        }
    }
    if (options.disjoint_families && static_cast<int>(plan.size()) > K) {
        throw ConfigError("disjoint family tables need alphabet_size >= number of families");
    }
}

std::vector<FamilyBase> family_bases(const FamilyPlan& plan, const LanguageOptions& options, std::uint64_t seed) {
    const int K = options.alphabet_size;
    const auto F = static_cast<int>(plan.size());
    std::mt19937_64 rng(derive_seed(seed, "languages"));
    std::vector<int> base(static_cast<std::size_t>(K));
    std::iota(base.begin(), base.end(), 0);
    std::shuffle(base.begin(), base.end(), rng);

    std::vector<FamilyBase> out;
    const int step = F > 0 ? std::max(1, K / std::max(F, 1)) : 1;
    for (int f = 0; f < F; ++f) {
        const auto& family = plan[static_cast<std::size_t>(f)].first;
        std::mt19937_64 frng(derive_seed(seed, "family:" + family));
        FamilyBase fb;
        fb.family = family;
        fb.table.resize(static_cast<std::size_t>(K));
        if (options.disjoint_families) {
            // Shifted copies of one base permutation never agree on any entry.
            for (int a = 0; a < K; ++a) fb.table[static_cast<std::size_t>(a)] = (base[static_cast<std::size_t>(a)] + f * step) % K;
        } else {
            std::iota(fb.table.begin(), fb.table.end(), 0);
            std::shuffle(fb.table.begin(), fb.table.end(), frng);
        }
        fb.affix.resize(static_cast<std::size_t>(std::max(0, options.affix_length)));
        std::uniform_int_distribution<int> sym(0, K - 1);
        for (auto& a : fb.affix) a = sym(frng);
        out.push_back(std::move(fb));
    }
    return out;
}

// Cyclically rotates the values at `changed` random positions (1 is bumped to
// 2), so exactly those positions move off `table`.
std::vector<int> rotate_entries(const std::vector<int>& table, int changed, std::uint64_t seed) {
    std::vector<int> out = table;
    if (changed == 1) changed = 2;
    if (changed < 2) return out;
    std::mt19937_64 rng(seed);
    std::vector<int> pos(table.size());
    std::iota(pos.begin(), pos.end(), 0);
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(static_cast<std::size_t>(changed));
    for (int i = 0; i < changed; ++i) {
        const auto from = static_cast<std::size_t>(pos[static_cast<std::size_t>((i + 1) % changed)]);
        out[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] = table[from];
    }
    return out;
}

LanguageSpec make_language(std::string code, std::string family, std::vector<int> table, std::vector<int> affix) {
    LanguageSpec L;
    L.code = std::move(code);
    L.family = std::move(family);
    L.table = std::move(table);
    L.inverse.assign(L.table.size(), -1);
    for (std::size_t a = 0; a < L.table.size(); ++a) L.inverse[static_cast<std::size_t>(L.table[a])] = static_cast<int>(a);
    L.affix = std::move(affix);
    return L;
}

}  // namespace

std::vector<LanguageSpec> generate_languages(const FamilyPlan& plan, const LanguageOptions& options,
                                             std::uint64_t seed) {
    check_options(plan, options);
    const int K = options.alphabet_size;
    const auto bases = family_bases(plan, options, seed);
    const int changed = static_cast<int>(std::lround((1.0 - options.intra_family_overlap) * K));
    std::vector<LanguageSpec> out;
    for (std::size_t f = 0; f < plan.size(); ++f) {
        for (const auto& code : plan[f].second) {
            out.push_back(make_language(code, bases[f].family,
                                        rotate_entries(bases[f].table, changed, derive_seed(seed, "language:" + code)),
                                        bases[f].affix));
        }
    }
    return out;
}

std::vector<LanguageSpec> generate_protolanguages(const FamilyPlan& plan, const LanguageOptions& options,
                                                  std::uint64_t seed) {
    check_options(plan, options);
    const auto bases = family_bases(plan, options, seed);
    std::vector<LanguageSpec> out;
    for (std::size_t f = 0; f < plan.size(); ++f) {
        out.push_back(make_language(
            proto_code(static_cast<int>(f)), bases[f].family,
            rotate_entries(bases[f].table, options.family_drift, derive_seed(seed, "drift:" + bases[f].family)),
            bases[f].affix));
    }
    return out;
}

std::string proto_code(int family_index) { return "p" + std::to_string(family_index); }

double table_overlap(const LanguageSpec& a, const LanguageSpec& b) {
    if (a.table.size() != b.table.size() || a.table.empty()) return 0.0;
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.table.size(); ++i) same += a.table[i] == b.table[i];
    return static_cast<double>(same) / static_cast<double>(a.table.size());
}

ClientDataset generate_corpus(const LanguageSpec& src, const LanguageSpec& tgt, int train_size,
                              const LengthRange& lengths, int alphabet_size, std::uint64_t seed) {
    if (train_size <= 0) throw ConfigError("corpus size must be positive");
    if (lengths.min_len < 1 || lengths.max_len < lengths.min_len) throw ConfigError("bad sentence length range");
    const int held = static_cast<int>(std::lround(train_size / 3.0));
    const int total = train_size + 2 * held;

    std::mt19937_64 rng(derive_seed(seed, "corpus:" + src.code + "-" + tgt.code));
    std::uniform_int_distribution<int> len_dist(lengths.min_len, lengths.max_len);
    std::uniform_int_distribution<int> sym(0, alphabet_size - 1);
    std::set<std::vector<int>> seen;
    std::vector<SentencePair> all;
    all.reserve(static_cast<std::size_t>(total));
    int attempts = 0;
    while (static_cast<int>(all.size()) < total) {
        if (++attempts > 100 * total + 1000) throw ConfigError("cannot draw enough distinct sentences");
        std::vector<int> latent(static_cast<std::size_t>(len_dist(rng)));
        for (auto& s : latent) s = sym(rng);
        if (!seen.insert(latent).second) continue;
        all.push_back({src.encode(latent), tgt.encode(latent)});
    }
    ClientDataset d;
    d.pair = {src.code, tgt.code};
    d.train.assign(all.begin(), all.begin() + train_size);
    d.dev.assign(all.begin() + train_size, all.begin() + train_size + held);
    d.test.assign(all.begin() + train_size + held, all.end());
    return d;
}

CorpusPlan m2en_plan() {
    CorpusPlan p;
    p.mode = Mode::M2en;
    p.families = {{"Sino-Tibetan", {"zh", "th"}},
                  {"Afro-Asiatic", {"ar", "he"}},
                  {"Uralic", {"fi", "et"}},
                  {"Indo-European", {"ru", "sl"}},
                  {"Germanic", {"en"}}};
    p.pairs = {{{"zh", "en"}, 9984}, {{"th", "en"}, 4992}, {{"ar", "en"}, 9984}, {{"he", "en"}, 1920},
               {{"fi", "en"}, 1920}, {{"et", "en"}, 1920}, {{"ru", "en"}, 9984}, {{"sl", "en"}, 1920}};
    return p;
}

CorpusPlan m2m_plan() {
    CorpusPlan p;
    p.mode = Mode::M2m;
    p.families = {{"Germanic", {"de", "nl", "en"}},
                  {"Romance", {"fr", "it", "es"}},
                  {"Slavic", {"pl", "sl"}},
                  {"Baltic", {"lt", "lv"}}};
    p.pairs = {{{"de", "fr"}, 11648}, {{"nl", "pl"}, 3584}, {{"en", "lt"}, 3712}, {{"fr", "nl"}, 12160},
               {{"it", "sl"}, 3456},  {{"es", "lv"}, 3584}, {{"pl", "en"}, 3712}, {{"sl", "es"}, 3584},
               {{"sl", "lt"}, 3584},  {{"lt", "de"}, 3328}, {{"lv", "it"}, 3584}, {{"lv", "pl"}, 3712}};
    return p;
}

CorpusPlan plan_for(Mode mode) { return mode == Mode::M2en ? m2en_plan() : m2m_plan(); }

const LanguageSpec& find_language(const std::vector<LanguageSpec>& languages, const std::string& code) {
    for (const auto& l : languages) {
        if (l.code == code) return l;
    }
    throw ConfigError("language '" + code + "' is not in the family plan");
}

std::string family_of(const std::vector<LanguageSpec>& languages, const std::string& code) {
    return find_language(languages, code).family;
}

std::vector<Client> build_clients(const CorpusPlan& plan, const std::vector<LanguageSpec>& languages, double scale,
                                  const LengthRange& lengths, int alphabet_size, std::uint64_t seed) {
    if (scale <= 0) throw ConfigError("data.scale must be positive");
    std::vector<Client> clients;
    int id = 0;
    for (const auto& [pair, size] : plan.pairs) {
        Client c;
        c.id = id++;
        c.pair = pair;
        const auto& s = find_language(languages, pair.src);
        const auto& t = find_language(languages, pair.tgt);
        c.src_family = s.family;
        c.tgt_family = t.family;
        const int n = std::max(1, static_cast<int>(std::lround(size * scale)));
        c.data = generate_corpus(s, t, n, lengths, alphabet_size, seed);
        clients.push_back(std::move(c));
    }
    return clients;
}

std::vector<ClientDataset> generate_pretraining_corpus(const std::vector<LanguageSpec>& languages,
                                                      int sentences_per_pair, const LengthRange& lengths,
                                                      int alphabet_size, std::uint64_t seed) {
    std::vector<ClientDataset> out;
    std::uint64_t index = 0;
    for (const auto& a : languages) {
        for (const auto& b : languages) {
            if (a.code == b.code) continue;
            out.push_back(generate_corpus(a, b, sentences_per_pair, lengths, alphabet_size,
                                          derive_seed(seed, "pretrain-pair", index++)));
        }
    }
    return out;
}

std::string symbol_token(int s) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%02d", s);
    return buf;
}

Vocab::Vocab(std::vector<std::string> codes, std::vector<int> symbols) {
    std::sort(codes.begin(), codes.end());
    codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
    std::sort(symbols.begin(), symbols.end());
    symbols.erase(std::unique(symbols.begin(), symbols.end()), symbols.end());
    tokens_ = {"<pad>", "<s>", "</s>", "<unk>"};
    for (const auto& c : codes) {
        tag_ids_[c] = size();
        tokens_.push_back("<2" + c + ">");
    }
    for (int s : symbols) {
        symbol_ids_[s] = size();
        symbol_of_[size()] = s;
        tokens_.push_back(symbol_token(s));
    }
}

int Vocab::tag(const std::string& code) const {
    auto it = tag_ids_.find(code);
    if (it == tag_ids_.end()) throw ConfigError("no language tag for '" + code + "'");
    return it->second;
}

int Vocab::symbol(int s) const {
    auto it = symbol_ids_.find(s);
    return it == symbol_ids_.end() ? kUnkId : it->second;
}

int Vocab::symbol_of(int id) const {
    auto it = symbol_of_.find(id);
    return it == symbol_of_.end() ? -1 : it->second;
}

Vocab build_vocab(std::span<const ClientDataset> corpora) {
    if (corpora.empty()) throw ConfigError("cannot build a vocabulary from no corpora");
    std::vector<std::string> codes;
    std::set<int> symbols;
    for (const auto& d : corpora) {
        codes.push_back(d.pair.src);
        codes.push_back(d.pair.tgt);
        for (const auto* split : {&d.train, &d.dev, &d.test}) {
            for (const auto& sp : *split) {
                symbols.insert(sp.source.begin(), sp.source.end());
                symbols.insert(sp.target.begin(), sp.target.end());
            }
        }
    }
    return Vocab(std::move(codes), std::vector<int>(symbols.begin(), symbols.end()));
}

EncodedPair encode_pair(const Vocab& vocab, const LanguagePair& pair, const SentencePair& sentence) {
    EncodedPair e;
    e.source.reserve(sentence.source.size() + 2);
    e.source.push_back(vocab.tag(pair.src));
    for (int s : sentence.source) e.source.push_back(vocab.symbol(s));
    e.source.push_back(kEosId);
    e.target_tag = vocab.tag(pair.tgt);
    for (int s : sentence.target) e.target.push_back(vocab.symbol(s));
    return e;
}

std::vector<EncodedPair> encode_split(const Vocab& vocab, const LanguagePair& pair,
                                      const std::vector<SentencePair>& split) {
    std::vector<EncodedPair> out;
    out.reserve(split.size());
    for (const auto& s : split) out.push_back(encode_pair(vocab, pair, s));
    return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, int batch_size, std::uint64_t seed) {
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(seed, "batches"));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    const auto bs = static_cast<std::size_t>(batch_size);
    for (std::size_t i = 0; i < n; i += bs) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + bs)));
    }
    return out;
}

std::vector<Batch> batches(std::span<const EncodedPair> split, int batch_size, std::uint64_t seed) {
    if (split.empty()) throw ConfigError("cannot batch an empty split");
    std::vector<Batch> out;
    for (const auto& idx : batch_indices(split.size(), batch_size, seed)) {
        std::vector<EncodedPair> rows;
        rows.reserve(idx.size());
        for (auto i : idx) rows.push_back(split[i]);
        out.push_back(make_batch(rows));
    }
    return out;
}

void write_parallel_text(const std::string& path, const std::vector<SentencePair>& split) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    auto join = [](const std::vector<int>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s += ' ';
            s += symbol_token(v[i]);
        }
        return s;
    };
    for (const auto& p : split) out << join(p.source) << '\t' << join(p.target) << '\n';
}

}  // namespace fedmt
