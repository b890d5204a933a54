#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ldp {

// Whitespace word tokenizer with byte fallback. Fixed id layout:
//   0 pad, 1 bos, 2 eos, 3..258 raw bytes, 259.. learned words.
// Normalization (lowercase, alphanumeric runs as words, any other non-space
// character as a single-char token) is shared with the metric tokenizer so
// generated and reference reports compare in the same token space.
class Tokenizer {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kByteBase = 3;
    static constexpr int kWordBase = 259;

    // Learns the most frequent normalized words until vocab_size is full
    // (ties broken lexicographically). vocab_size must cover the fixed ids.
    static Tokenizer train(const std::vector<std::string>& texts, size_t vocab_size);

    // Rebuilds a tokenizer from its learned word list (checkpoint path).
    static Tokenizer from_words(const std::vector<std::string>& words, size_t vocab_size);

    std::vector<int> encode(const std::string& text, bool add_bos = false,
                            bool add_eos = false) const;
    std::string decode(std::span<const int> ids) const;

    static std::vector<std::string> normalize(const std::string& text);

    size_t vocab_size() const { return vocab_size_; }
    const std::vector<std::string>& words() const { return words_; }

  private:
    size_t vocab_size_ = 0;
    std::vector<std::string> words_;                   // index i -> id kWordBase + i
    std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace ldp
