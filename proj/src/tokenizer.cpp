#include "ldp/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "ldp/errors.hpp"

namespace ldp {

std::vector<std::string> Tokenizer::normalize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::isalnum(c)) {
            word.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return out;
}

Tokenizer Tokenizer::train(const std::vector<std::string>& texts, size_t vocab_size) {
    if (vocab_size <= kWordBase) {
        throw ConfigError("tokenizer: vocab_size must exceed the fixed id range");
    }
    // std::map keeps candidate iteration deterministic.
    std::map<std::string, size_t> freq;
    for (const auto& t : texts) {
        for (auto& w : normalize(t)) ++freq[w];
    }
    std::vector<std::pair<std::string, size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    size_t budget = vocab_size - kWordBase;
    std::vector<std::string> words;
    for (const auto& [w, n] : ranked) {
        (void)n;
        if (words.size() == budget) break;
        words.push_back(w);
    }
    return from_words(words, vocab_size);
}

Tokenizer Tokenizer::from_words(const std::vector<std::string>& words, size_t vocab_size) {
    if (vocab_size <= kWordBase) {
        throw ConfigError("tokenizer: vocab_size must exceed the fixed id range");
    }
    if (words.size() > vocab_size - kWordBase) {
        throw ConfigError("tokenizer: word list exceeds vocab budget");
    }
    Tokenizer tk;
    tk.vocab_size_ = vocab_size;
    tk.words_ = words;
    for (size_t i = 0; i < words.size(); ++i) {
        if (!tk.word_to_id_.emplace(words[i], kWordBase + static_cast<int>(i)).second) {
            throw ConfigError("tokenizer: duplicate word in vocabulary");
        }
    }
    return tk;
}

std::vector<int> Tokenizer::encode(const std::string& text, bool add_bos, bool add_eos) const {
    std::vector<int> ids;
    if (add_bos) ids.push_back(kBos);
    bool prev_byte = false;
    for (const auto& w : normalize(text)) {
        auto it = word_to_id_.find(w);
        if (it != word_to_id_.end()) {
            ids.push_back(it->second);
            prev_byte = false;
        } else {
            // Adjacent byte-spelled words keep their boundary via a space byte.
            if (prev_byte) ids.push_back(kByteBase + ' ');
            for (unsigned char c : w) ids.push_back(kByteBase + static_cast<int>(c));
            prev_byte = true;
        }
    }
    if (add_eos) ids.push_back(kEos);
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    bool prev_byte = false;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) {
            prev_byte = false;
            continue;
        }
        if (id < 0 || static_cast<size_t>(id) >= vocab_size_) {
            throw DataError("tokenizer: id out of vocabulary range");
        }
        bool is_byte = id >= kByteBase && id < kWordBase;
        if (is_byte) {
            // Byte runs concatenate (they spell one unknown word).
            if (!out.empty() && !prev_byte) out.push_back(' ');
            out.push_back(static_cast<char>(id - kByteBase));
        } else {
            size_t wi = static_cast<size_t>(id - kWordBase);
            if (wi >= words_.size()) {
                throw DataError("tokenizer: id beyond learned vocabulary");
            }
            if (!out.empty()) out.push_back(' ');
            out += words_[wi];
        }
        prev_byte = is_byte;
    }
    return out;
}

}  // namespace ldp
