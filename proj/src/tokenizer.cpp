#include "cosmos/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include <json.hpp>

namespace cosmos {

namespace {
const char* kReserved[4] = {"<pad>", "<sot>", "<eot>", "<unk>"};
}

std::vector<std::string> normalize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (const unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

Vocab Vocab::build(const std::vector<std::string>& corpus, std::size_t max_size) {
    if (corpus.empty()) throw ValidationError("build_vocab: empty corpus");
    if (max_size < 4) throw ValidationError("build_vocab: max_size must cover reserved tokens");
    std::map<std::string, std::size_t> freq;  // ordered map gives the lexicographic tie-break
    for (const auto& caption : corpus)
        for (auto& w : normalize_words(caption)) ++freq[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens(std::begin(kReserved), std::end(kReserved));
    for (const auto& [word, count] : ranked) {
        (void)count;
        if (tokens.size() >= max_size) break;
        tokens.push_back(word);
    }
    return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 4) throw ValidationError("vocab: missing reserved tokens");
    for (int i = 0; i < 4; ++i)
        if (tokens[static_cast<std::size_t>(i)] != kReserved[i])
            throw ValidationError("vocab: reserved token " + std::to_string(i) + " must be " +
                                  kReserved[i]);
    Vocab v;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (v.index_.count(tokens[i]))
            throw ValidationError("vocab: duplicate token \"" + tokens[i] + "\"");
        v.index_[tokens[i]] = static_cast<std::int32_t>(i);
    }
    v.tokens_ = std::move(tokens);
    return v;
}

std::int32_t Vocab::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw ValidationError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::to_json() const {
    return nlohmann::json(tokens_).dump();
}

Vocab Vocab::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw FormatError(std::string("vocab: invalid JSON: ") + e.what());
    }
    if (!j.is_array()) throw FormatError("vocab: expected a JSON array of tokens");
    std::vector<std::string> tokens;
    for (const auto& t : j) {
        if (!t.is_string()) throw FormatError("vocab: tokens must be strings");
        tokens.push_back(t.get<std::string>());
    }
    return from_tokens(std::move(tokens));
}

TokenizedText encode_caption(const std::string& text, const Vocab& vocab, std::size_t max_len) {
    if (max_len < 3) throw ValidationError("encode_caption: max_len must be at least 3");
    auto words = normalize_words(text);
    if (words.empty())
        throw ValidationError("encode_caption: no words after normalization in \"" + text + "\"");
    if (words.size() > max_len - 2) words.resize(max_len - 2);
    TokenizedText out;
    out.ids.reserve(max_len);
    out.ids.push_back(Vocab::sot_id);
    for (const auto& w : words) out.ids.push_back(vocab.id_of(w));
    out.eot_index = out.ids.size();
    out.ids.push_back(Vocab::eot_id);
    out.ids.resize(max_len, Vocab::pad_id);
    return out;
}

std::string decode_caption(const TokenizedText& t, const Vocab& vocab) {
    std::string out;
    for (const std::int32_t id : t.ids) {
        if (id == Vocab::pad_id || id == Vocab::sot_id) continue;
        if (id == Vocab::eot_id) break;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

}  // namespace cosmos
