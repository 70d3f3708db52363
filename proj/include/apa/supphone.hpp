#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "apa/common.hpp"

namespace apa {

// BPE vocabulary whose atomic symbols are phones. Merged tokens join their
// parts with '+' (phone symbols never contain '+'), so every token spells out
// the exact phone sequence it covers. Ids are positional: base symbols first,
// then merges in learned order.
struct SupPhoneVocab {
    std::vector<std::string> base_symbols;
    std::vector<std::pair<std::string, std::string>> merges;
    std::unordered_map<std::string, int> token_table;
    std::size_t target_size = 0;

    static std::string merged_token(const std::string& left, const std::string& right) {
        return left + "+" + right;
    }
    std::size_t size() const { return base_symbols.size() + merges.size(); }
    int id_of(const std::string& token) const;
    // Phones covered by a token, in order.
    static std::vector<std::string> expand(const std::string& token);
};

struct SupPhoneEncoding {
    std::vector<int> tokens;
    std::vector<int> phone_broadcast;  // one id per phone
};

// Iterative most-frequent-pair merging within word boundaries. Stops when the
// vocabulary reaches target_size tokens or no adjacent pair occurs twice.
// Ties break on lexicographic (left, right). base_symbols, when given, fixes
// the atomic alphabet; otherwise it is the sorted set of corpus phones.
SupPhoneVocab train_bpe(const std::vector<std::vector<std::string>>& corpus, std::size_t target_size,
                        std::vector<std::string> base_symbols = {});

SupPhoneEncoding encode_word(const std::vector<std::string>& phones, const SupPhoneVocab& vocab);

void save_vocab(const SupPhoneVocab& v, const std::string& path);
SupPhoneVocab load_vocab(const std::string& path);

}  // namespace apa
