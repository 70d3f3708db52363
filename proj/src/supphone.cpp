#include "apa/supphone.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace apa {

using nlohmann::json;

int SupPhoneVocab::id_of(const std::string& token) const {
    auto it = token_table.find(token);
    if (it == token_table.end()) throw VocabError("unknown token '" + token + "'");
    return it->second;
}

std::vector<std::string> SupPhoneVocab::expand(const std::string& token) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t plus = token.find('+', start);
        if (plus == std::string::npos) {
            out.push_back(token.substr(start));
            return out;
        }
        out.push_back(token.substr(start, plus - start));
        start = plus + 1;
    }
}

namespace {

void rebuild_table(SupPhoneVocab& v) {
    v.token_table.clear();
    int id = 0;
    for (const std::string& s : v.base_symbols) v.token_table[s] = id++;
    for (const auto& [l, r] : v.merges) v.token_table[SupPhoneVocab::merged_token(l, r)] = id++;
}

// One left-to-right pass replacing non-overlapping (left, right) occurrences.
void apply_merge(std::vector<std::string>& word, const std::string& left, const std::string& right,
                 const std::string& merged) {
    std::size_t w = 0;
    for (std::size_t i = 0; i < word.size(); ++i) {
        if (i + 1 < word.size() && word[i] == left && word[i + 1] == right) {
            word[w++] = merged;
            ++i;
        } else {
            if (w != i) word[w] = std::move(word[i]);
            ++w;
        }
    }
    word.resize(w);
}

}  // namespace

SupPhoneVocab train_bpe(const std::vector<std::vector<std::string>>& corpus, std::size_t target_size,
                        std::vector<std::string> base_symbols) {
    if (corpus.empty()) throw DegenerateInputError("train_bpe: empty corpus");
    SupPhoneVocab v;
    if (base_symbols.empty()) {
        std::set<std::string> seen;
        for (const auto& word : corpus) seen.insert(word.begin(), word.end());
        v.base_symbols.assign(seen.begin(), seen.end());
    } else {
        v.base_symbols = std::move(base_symbols);
    }
    if (target_size < v.base_symbols.size())
        throw ConfigError("train_bpe: target size " + std::to_string(target_size) + " below the " +
                          std::to_string(v.base_symbols.size()) + " base symbols");
    v.target_size = target_size;
    rebuild_table(v);
    for (const auto& word : corpus)
        for (const std::string& p : word)
            if (!v.token_table.count(p))
                throw VocabError("train_bpe: corpus phone '" + p + "' not in the base symbols");

    std::vector<std::vector<std::string>> words(corpus.begin(), corpus.end());
    while (v.size() < target_size) {
        // std::map iterates pairs in lexicographic order, so the first
        // maximal entry is the tie-break winner.
        std::map<std::pair<std::string, std::string>, std::size_t> counts;
        for (const auto& word : words)
            for (std::size_t i = 0; i + 1 < word.size(); ++i) ++counts[{word[i], word[i + 1]}];
        std::size_t best_count = 0;
        const std::pair<std::string, std::string>* best = nullptr;
        for (const auto& [pair, count] : counts)
            if (count > best_count) {
                best_count = count;
                best = &pair;
            }
        if (!best || best_count < 2) break;
        const std::string merged = SupPhoneVocab::merged_token(best->first, best->second);
        for (auto& word : words) apply_merge(word, best->first, best->second, merged);
        v.merges.push_back(*best);
        v.token_table[merged] = int(v.size()) - 1;
    }
    return v;
}

SupPhoneEncoding encode_word(const std::vector<std::string>& phones, const SupPhoneVocab& vocab) {
    if (phones.empty()) throw DegenerateInputError("encode_word: empty phone sequence");
    const int n_base = int(vocab.base_symbols.size());
    for (const std::string& p : phones) {
        auto it = vocab.token_table.find(p);
        if (it == vocab.token_table.end() || it->second >= n_base)
            throw VocabError("encode_word: phone '" + p + "' not in the vocabulary");
    }
    std::vector<std::string> seq = phones;
    std::vector<std::size_t> span(seq.size(), 1);
    for (const auto& [l, r] : vocab.merges) {
        const std::string merged = SupPhoneVocab::merged_token(l, r);
        std::size_t w = 0;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i + 1 < seq.size() && seq[i] == l && seq[i + 1] == r) {
                seq[w] = merged;
                span[w] = span[i] + span[i + 1];
                ++w;
                ++i;
            } else {
                if (w != i) {
                    seq[w] = std::move(seq[i]);
                    span[w] = span[i];
                }
                ++w;
            }
        }
        seq.resize(w);
        span.resize(w);
    }
    SupPhoneEncoding enc;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const int id = vocab.id_of(seq[t]);
        enc.tokens.push_back(id);
        for (std::size_t k = 0; k < span[t]; ++k) enc.phone_broadcast.push_back(id);
    }
    return enc;
}

void save_vocab(const SupPhoneVocab& v, const std::string& path) {
    json j;
    j["version"] = 1;
    j["base_symbols"] = v.base_symbols;
    json merges = json::array();
    for (const auto& [l, r] : v.merges) merges.push_back(json::array({l, r}));
    j["merges"] = std::move(merges);
    const std::string payload = j.dump();
    j["checksum"] = crc32(payload.data(), payload.size());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << j.dump(2) << '\n';
}

SupPhoneVocab load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    SupPhoneVocab v;
    try {
        json j = json::parse(in);
        const int version = j.at("version").get<int>();
        if (version != 1)
            throw VocabError("vocabulary file version " + std::to_string(version) + " unsupported (expected 1)");
        if (j.contains("checksum")) {
            const std::uint32_t stored = j.at("checksum").get<std::uint32_t>();
            j.erase("checksum");
            const std::string payload = j.dump();
            const std::uint32_t actual = crc32(payload.data(), payload.size());
            if (actual != stored)
                throw ChecksumError(path + ": vocabulary checksum mismatch (stored " + std::to_string(stored) +
                                    ", computed " + std::to_string(actual) + ")");
        }
        v.base_symbols = j.at("base_symbols").get<std::vector<std::string>>();
        for (const json& m : j.at("merges")) {
            if (!m.is_array() || m.size() != 2) throw VocabError("merge entry is not a pair");
            v.merges.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
        }
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    rebuild_table(v);
    v.target_size = v.size();
    // Structural audit: each merge must combine tokens that exist at its rank.
    std::set<std::string> known(v.base_symbols.begin(), v.base_symbols.end());
    for (const auto& [l, r] : v.merges) {
        if (!known.count(l) || !known.count(r))
            throw VocabError("merge (" + l + ", " + r + ") references an unknown token");
        known.insert(SupPhoneVocab::merged_token(l, r));
    }
    return v;
}

}  // namespace apa
