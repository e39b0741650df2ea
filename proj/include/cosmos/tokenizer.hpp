#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cosmos/error.hpp"

namespace cosmos {

// Word-level vocabulary with four reserved ids. Immutable once built.
class Vocab {
public:
    static constexpr std::int32_t pad_id = 0;
    static constexpr std::int32_t sot_id = 1;
    static constexpr std::int32_t eot_id = 2;
    static constexpr std::int32_t unk_id = 3;

    // Ranks corpus words by frequency (ties broken lexicographically) and
    // keeps the top max_size - 4, after the reserved tokens.
    static Vocab build(const std::vector<std::string>& corpus, std::size_t max_size);
    static Vocab from_tokens(std::vector<std::string> tokens);

    std::int32_t id_of(const std::string& token) const;  // unk_id when absent
    const std::string& token(std::int32_t id) const;
    std::size_t size() const { return tokens_.size(); }

    // JSON array of tokens in id order.
    std::string to_json() const;
    static Vocab from_json(const std::string& text);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

struct TokenizedText {
    std::vector<std::int32_t> ids;  // always max_len long, padded
    std::size_t eot_index = 0;
};

// Lowercases and splits on every non-alphanumeric character.
std::vector<std::string> normalize_words(const std::string& text);

// [sot] + body + [eot], body truncated to max_len - 2, padded to max_len.
// Out-of-vocabulary words map to unk. Text with no words is an error.
TokenizedText encode_caption(const std::string& text, const Vocab& vocab, std::size_t max_len);

// Body words joined by single spaces; reserved tokens skipped.
std::string decode_caption(const TokenizedText& t, const Vocab& vocab);

}  // namespace cosmos
