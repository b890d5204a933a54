#include <string>
#include <vector>

#include "doctest.h"
#include "ldp/errors.hpp"
#include "ldp/tokenizer.hpp"

using ldp::Tokenizer;

namespace {

const std::vector<std::string> kCorpus = {
    "A sessile polyp of 4 mm in the ascending colon.",
    "Pedunculated polyp, 7 mm, sigmoid colon.",
    "No polyp seen in the transverse colon.",
};

}  // namespace

TEST_CASE("normalization lowercases and splits punctuation") {
    auto toks = Tokenizer::normalize("Sessile polyp, 4mm.");
    std::vector<std::string> want = {"sessile", "polyp", ",", "4mm", "."};
    CHECK(toks == want);
}

TEST_CASE("encode decode round trip over the training corpus") {
    Tokenizer tk = Tokenizer::train(kCorpus, 320);
    for (const auto& text : kCorpus) {
        auto ids = tk.encode(text, true, true);
        CHECK(ids.front() == Tokenizer::kBos);
        CHECK(ids.back() == Tokenizer::kEos);
        for (int id : ids) {
            CHECK(id >= 0);
            CHECK(static_cast<size_t>(id) < tk.vocab_size());
        }
        std::string normalized;
        for (const auto& w : Tokenizer::normalize(text)) {
            if (!normalized.empty()) normalized.push_back(' ');
            normalized += w;
        }
        CHECK(tk.decode(ids) == normalized);
    }
}

TEST_CASE("unknown words fall back to bytes and round trip") {
    Tokenizer tk = Tokenizer::train(kCorpus, 320);
    auto ids = tk.encode("zq polyp xv zq");
    bool has_byte = false;
    for (int id : ids) {
        if (id >= Tokenizer::kByteBase && id < Tokenizer::kWordBase) has_byte = true;
    }
    CHECK(has_byte);
    CHECK(tk.decode(ids) == "zq polyp xv zq");
}

TEST_CASE("vocabulary budget keeps the most frequent words") {
    // ".", "colon", "polyp" appear three times each; budget of two keeps the
    // lexicographically first pair of that tie.
    Tokenizer tk = Tokenizer::train(kCorpus, Tokenizer::kWordBase + 2);
    const auto& words = tk.words();
    REQUIRE(words.size() == 2);
    CHECK(words[0] == ".");
    CHECK(words[1] == "colon");
    // Everything else byte-falls-back but still round-trips.
    CHECK(tk.decode(tk.encode("no polyp seen")) == "no polyp seen");
}

TEST_CASE("training is deterministic") {
    Tokenizer a = Tokenizer::train(kCorpus, 320);
    Tokenizer b = Tokenizer::train(kCorpus, 320);
    CHECK(a.words() == b.words());
    CHECK(a.encode(kCorpus[0]) == b.encode(kCorpus[0]));
}

TEST_CASE("word list reconstruction matches the trained tokenizer") {
    Tokenizer a = Tokenizer::train(kCorpus, 320);
    Tokenizer b = Tokenizer::from_words(a.words(), a.vocab_size());
    CHECK(a.encode(kCorpus[1], true, true) == b.encode(kCorpus[1], true, true));
}

TEST_CASE("tokenizer rejects bad configurations") {
    CHECK_THROWS_AS(Tokenizer::train(kCorpus, 10), ldp::ConfigError);
    CHECK_THROWS_AS(Tokenizer::from_words({"a", "b", "c"}, Tokenizer::kWordBase + 2),
                    ldp::ConfigError);
    CHECK_THROWS_AS(Tokenizer::from_words({"a", "a"}, 320), ldp::ConfigError);
    Tokenizer tk = Tokenizer::train(kCorpus, 320);
    std::vector<int> bad = {5000};
    CHECK_THROWS_AS(tk.decode(bad), ldp::DataError);
}
