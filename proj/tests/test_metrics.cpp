#include <cmath>
#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "doctest.h"
#include "ldp/errors.hpp"
#include "ldp/metrics.hpp"
#include "ldp/rng.hpp"

using namespace ldp;

namespace {

std::vector<std::string> toks(std::initializer_list<const char*> ws) {
    std::vector<std::string> out;
    for (auto w : ws) out.emplace_back(w);
    return out;
}

EvalEntry entry(std::vector<std::string> hyp, std::vector<std::vector<std::string>> refs,
                std::string id = "e") {
    return {std::move(id), std::move(hyp), std::move(refs)};
}

// ---- independent oracles, deliberately written with different containers
// ---- and traversal order than the implementation

std::string join_key(const std::vector<std::string>& toks, size_t i, size_t n) {
    std::string k;
    for (size_t t = i; t < i + n; ++t) {
        k += toks[t];
        k.push_back('\x1f');
    }
    return k;
}

std::unordered_map<std::string, size_t> oracle_ngrams(const std::vector<std::string>& t,
                                                      size_t n) {
    std::unordered_map<std::string, size_t> m;
    if (t.size() >= n)
        for (size_t i = 0; i + n <= t.size(); ++i) ++m[join_key(t, i, n)];
    return m;
}

double oracle_bleu(const EvalCorpus& corpus, int n) {
    double log_sum = 0.0;
    for (int order = 1; order <= n; ++order) {
        size_t matched = 0, total = 0;
        for (const auto& e : corpus) {
            auto hc = oracle_ngrams(e.hyp, static_cast<size_t>(order));
            std::unordered_map<std::string, size_t> best;
            for (const auto& r : e.refs)
                for (const auto& [g, c] : oracle_ngrams(r, static_cast<size_t>(order)))
                    if (c > best[g]) best[g] = c;
            for (const auto& [g, c] : hc) {
                total += c;
                auto it = best.find(g);
                if (it != best.end()) matched += std::min(c, it->second);
            }
        }
        double p = (total == 0 || matched == 0)
                       ? 1e-9
                       : static_cast<double>(matched) / static_cast<double>(total);
        log_sum += std::log(p);
    }
    size_t c = 0, r = 0;
    for (const auto& e : corpus) {
        c += e.hyp.size();
        size_t best_len = e.refs[0].size();
        auto gap = [&](size_t len) {
            return len > e.hyp.size() ? len - e.hyp.size() : e.hyp.size() - len;
        };
        for (const auto& ref : e.refs)
            if (gap(ref.size()) < gap(best_len) ||
                (gap(ref.size()) == gap(best_len) && ref.size() < best_len))
                best_len = ref.size();
        r += best_len;
    }
    if (c == 0) return 0.0;
    double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)));
    return bp * std::exp(log_sum / n);
}

// every subsequence of `a` (bitmask), checked for containment in `b`
size_t oracle_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    size_t best = 0;
    for (size_t mask = 0; mask < (size_t{1} << a.size()); ++mask) {
        std::vector<std::string> sub;
        for (size_t i = 0; i < a.size(); ++i)
            if (mask & (size_t{1} << i)) sub.push_back(a[i]);
        size_t j = 0;
        for (const auto& t : b) {
            if (j < sub.size() && t == sub[j]) ++j;
        }
        if (j == sub.size()) best = std::max(best, sub.size());
    }
    return best;
}

double oracle_rouge(const EvalCorpus& corpus) {
    double total = 0.0;
    for (const auto& e : corpus) {
        double best = 0.0;
        for (const auto& ref : e.refs) {
            if (e.hyp.empty() || ref.empty()) continue;
            double l = static_cast<double>(lcs_length(e.hyp, ref));
            if (l == 0.0) continue;
            double p = l / static_cast<double>(e.hyp.size());
            double r = l / static_cast<double>(ref.size());
            best = std::max(best, 2.0 * p * r / (p + r));
        }
        total += best;
    }
    return total / static_cast<double>(corpus.size());
}

double oracle_cider(const EvalCorpus& corpus) {
    double grand = 0.0;
    for (size_t n = 1; n <= 4; ++n) {
        std::unordered_map<std::string, size_t> df;
        for (const auto& e : corpus) {
            std::unordered_map<std::string, bool> seen;
            for (const auto& r : e.refs)
                for (const auto& [g, c] : oracle_ngrams(r, n)) seen[g] = true;
            for (const auto& [g, one] : seen) ++df[g];
        }
        const double N = static_cast<double>(corpus.size());
        auto idf = [&](const std::string& g) {
            auto it = df.find(g);
            double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
            return std::log(N / std::max(1.0, d));
        };
        double per_n = 0.0;
        for (const auto& e : corpus) {
            auto hv = oracle_ngrams(e.hyp, n);
            double acc = 0.0;
            for (const auto& ref : e.refs) {
                auto rv = oracle_ngrams(ref, n);
                double dot = 0.0, nh = 0.0, nr = 0.0;
                for (const auto& [g, c] : hv) {
                    double w = static_cast<double>(c) * idf(g);
                    nh += w * w;
                    auto it = rv.find(g);
                    if (it != rv.end()) dot += w * static_cast<double>(it->second) * idf(g);
                }
                for (const auto& [g, c] : rv) {
                    double w = static_cast<double>(c) * idf(g);
                    nr += w * w;
                }
                if (nh > 0.0 && nr > 0.0) acc += dot / (std::sqrt(nh) * std::sqrt(nr));
            }
            per_n += acc / static_cast<double>(e.refs.size());
        }
        grand += 10.0 * per_n / N;
    }
    return grand / 4.0;
}

EvalCorpus random_corpus(Rng& rng, size_t max_entries = 5, size_t max_len = 8) {
    static const std::vector<std::string> vocab = {"a", "b", "c", "d", "e", "f"};
    auto random_seq = [&] {
        size_t len = 1 + rng.below(max_len);
        std::vector<std::string> s;
        for (size_t i = 0; i < len; ++i) s.push_back(vocab[rng.below(vocab.size())]);
        return s;
    };
    EvalCorpus corpus;
    size_t n = 2 + rng.below(max_entries - 1);
    for (size_t i = 0; i < n; ++i) {
        EvalEntry e;
        e.id = "r" + std::to_string(i);
        e.hyp = random_seq();
        size_t nrefs = 1 + rng.below(3);
        for (size_t k = 0; k < nrefs; ++k) e.refs.push_back(random_seq());
        corpus.push_back(std::move(e));
    }
    return corpus;
}

}  // namespace

TEST_CASE("tokenization lowercases and splits punctuation") {
    auto t = metric_tokenize("The cat, sat!  POLYP at 12mm.");
    std::vector<std::string> want = {"the", "cat", ",", "sat", "!", "polyp", "at", "12mm", "."};
    CHECK(t == want);
    CHECK(metric_tokenize("").empty());
}

TEST_CASE("bleu fixtures") {
    SUBCASE("identical pair scores exactly 1") {
        EvalCorpus c = {entry(toks({"no", "polyp", "was", "found"}),
                              {toks({"no", "polyp", "was", "found"})})};
        for (int n = 1; n <= 4; ++n) CHECK(bleu(c, n) == 1.0);
    }

    SUBCASE("short hypothesis pays the brevity penalty") {
        EvalCorpus c = {entry(toks({"the", "cat", "sat"}),
                              {toks({"the", "cat", "sat", "on", "mat"})})};
        double got = bleu(c, 1);
        CHECK(got == doctest::Approx(0.51342).epsilon(1e-4));
        CHECK(got == doctest::Approx(std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-12));
    }

    SUBCASE("disjoint tokens collapse to the smoothing floor") {
        EvalCorpus c = {entry(toks({"x", "y"}), {toks({"p", "q"})})};
        CHECK(bleu(c, 1) < 1e-8);
    }

    SUBCASE("empty hypothesis is flagged, not fatal") {
        EvalCorpus c = {entry({}, {toks({"a", "b"})}),
                        entry(toks({"a", "b"}), {toks({"a", "b"})})};
        BleuStats stats;
        double s = bleu(c, 1, {}, &stats);
        CHECK(stats.empty_hypotheses == 1);
        CHECK(std::isfinite(s));
    }

    SUBCASE("padding the reference never raises the score") {
        EvalCorpus base = {entry(toks({"a", "b", "c"}), {toks({"a", "b", "c"})})};
        EvalCorpus padded = {entry(toks({"a", "b", "c"}), {toks({"a", "b", "c", "d", "e"})})};
        CHECK(bleu(padded, 1) <= bleu(base, 1));
        CHECK(bleu(padded, 2) <= bleu(base, 2));
    }

    SUBCASE("order bounds are enforced") {
        EvalCorpus c = {entry(toks({"a"}), {toks({"a"})})};
        CHECK_THROWS_AS(bleu(c, 0), ConfigError);
        CHECK_THROWS_AS(bleu(c, 5), ConfigError);
    }

    SUBCASE("sentence-averaged variant agrees on identical pairs") {
        EvalCorpus c = {entry(toks({"a", "b", "c", "d"}), {toks({"a", "b", "c", "d"})}),
                        entry(toks({"b", "c"}), {toks({"b", "c"})})};
        BleuOptions opt;
        opt.sentence_averaged = true;
        CHECK(bleu(c, 2, opt) == doctest::Approx(1.0));
    }
}

TEST_CASE("bleu matches an independent oracle on random corpora") {
    Rng rng(2024);
    for (int trial = 0; trial < 40; ++trial) {
        EvalCorpus c = random_corpus(rng);
        for (int n = 1; n <= 4; ++n) {
            double got = bleu(c, n);
            double want = oracle_bleu(c, n);
            CHECK(std::abs(got - want) <= 1e-10);
        }
    }
}

TEST_CASE("lcs matches the exhaustive subsequence oracle") {
    Rng rng(7);
    static const std::vector<std::string> vocab = {"a", "b", "c"};
    for (int trial = 0; trial < 200; ++trial) {
        auto seq = [&] {
            std::vector<std::string> s;
            size_t len = rng.below(9);
            for (size_t i = 0; i < len; ++i) s.push_back(vocab[rng.below(3)]);
            return s;
        };
        auto a = seq(), b = seq();
        CHECK(lcs_length(a, b) == oracle_lcs(a, b));
        CHECK(lcs_length(a, b) == lcs_length(b, a));
    }
}

TEST_CASE("rouge-l fixtures and oracle agreement") {
    SUBCASE("identical pair scores 1") {
        EvalCorpus c = {entry(toks({"a", "b", "c"}), {toks({"a", "b", "c"})})};
        CHECK(rouge_l(c) == 1.0);
    }
    SUBCASE("hand-computed lcs fixture") {
        EvalCorpus c = {entry(toks({"the", "cat", "sat"}),
                              {toks({"the", "cat", "on", "the", "mat"})})};
        CHECK(rouge_l(c) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("best reference wins") {
        EvalCorpus c = {entry(toks({"a", "b", "c"}),
                              {toks({"x", "y"}), toks({"a", "b", "c"})})};
        CHECK(rouge_l(c) == 1.0);
    }
    SUBCASE("random corpora agree with the direct formula") {
        Rng rng(31);
        for (int trial = 0; trial < 40; ++trial) {
            EvalCorpus c = random_corpus(rng);
            CHECK(std::abs(rouge_l(c) - oracle_rouge(c)) <= 1e-12);
        }
    }
}

TEST_CASE("meteor-lite behavior") {
    SUBCASE("identical pair of length 4") {
        EvalCorpus c = {entry(toks({"a", "b", "c", "d"}), {toks({"a", "b", "c", "d"})})};
        // F=1, chunks=1, matches=4: 1 - 0.5/64
        CHECK(meteor_lite(c) == doctest::Approx(0.9921875).epsilon(1e-12));
        CHECK(meteor_lite(c) > 0.99);
    }
    SUBCASE("zero overlap scores zero") {
        EvalCorpus c = {entry(toks({"x", "y"}), {toks({"p", "q"})})};
        CHECK(meteor_lite(c) == 0.0);
    }
    SUBCASE("scrambled order keeps F but pays the chunk penalty") {
        EvalCorpus in_order = {entry(toks({"a", "b", "c", "d"}), {toks({"a", "b", "c", "d"})})};
        EvalCorpus reversed = {entry(toks({"d", "c", "b", "a"}), {toks({"a", "b", "c", "d"})})};
        CHECK(meteor_lite(reversed) < meteor_lite(in_order));
        // all four still match, so the gap is purely fragmentation
        CHECK(meteor_lite(reversed) == doctest::Approx(1.0 * (1.0 - 0.5)).epsilon(1e-12));
    }
    SUBCASE("suffix stemming aligns inflected forms") {
        EvalCorpus stemmed = {entry(toks({"walked", "slowly"}), {toks({"walking", "slowly"})})};
        CHECK(meteor_lite(stemmed) > 0.5);
        EvalCorpus unrelated = {entry(toks({"walked"}), {toks({"jumping"})})};
        CHECK(meteor_lite(unrelated) == 0.0);
    }
}

TEST_CASE("cider fixtures") {
    EvalCorpus three = {
        entry(toks({"polyp", "seen", "in", "colon"}), {toks({"polyp", "seen", "in", "colon"})},
              "a"),
        entry(toks({"mucosa", "looks", "entirely", "normal"}),
              {toks({"mucosa", "looks", "entirely", "normal"})}, "b"),
        entry(toks({"small", "ulcer", "near", "pylorus"}),
              {toks({"small", "ulcer", "near", "pylorus"})}, "c"),
    };

    SUBCASE("self-match across distinct documents scores 10") {
        CHECK(cider(three) == doctest::Approx(10.0).epsilon(1e-9));
    }

    SUBCASE("zero overlap scores zero") {
        EvalCorpus c = three;
        c[0].hyp = toks({"totally", "different", "words", "here"});
        double s = cider(c);
        // entries b and c still self-match
        CHECK(s == doctest::Approx(10.0 * 2.0 / 3.0).epsilon(1e-9));
    }

    SUBCASE("an n-gram in every reference document carries zero idf") {
        EvalCorpus c = {entry(toks({"the"}), {toks({"the", "polyp"})}, "a"),
                        entry(toks({"x"}), {toks({"the", "ulcer"})}, "b")};
        // hypothesis "the" appears in both reference documents: idf 0,
        // so its vector is all-zero and similarity collapses
        CHECK(cider(c) == 0.0);
    }

    SUBCASE("corpus of one is rejected with guidance") {
        EvalCorpus one = {three[0]};
        CHECK_THROWS_WITH_AS(cider(one),
                             doctest::Contains("at least two"), DataError);
    }

    SUBCASE("length penalty only shrinks scores") {
        EvalCorpus c = three;
        c[0].hyp = toks({"polyp", "seen"});
        CiderOptions with;
        with.length_penalty = true;
        CHECK(cider(c, with) <= cider(c));
    }
}

TEST_CASE("cider matches an independent oracle on random corpora") {
    Rng rng(555);
    for (int trial = 0; trial < 40; ++trial) {
        EvalCorpus c = random_corpus(rng);
        CHECK(std::abs(cider(c) - oracle_cider(c)) <= 1e-10);
    }
}

TEST_CASE("metrics are invariant under bijective token relabeling") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        EvalCorpus c = random_corpus(rng);
        EvalCorpus relabeled = c;
        auto relabel = [](std::vector<std::string>& seq) {
            for (auto& t : seq) t = "tok_" + t + "_q";
        };
        for (auto& e : relabeled) {
            relabel(e.hyp);
            for (auto& r : e.refs) relabel(r);
        }
        for (int n = 1; n <= 4; ++n)
            CHECK(std::abs(bleu(c, n) - bleu(relabeled, n)) <= 1e-12);
        CHECK(std::abs(rouge_l(c) - rouge_l(relabeled)) <= 1e-12);
        CHECK(std::abs(cider(c) - cider(relabeled)) <= 1e-12);
        // relabeling must not create or destroy stem matches
        MeteorOptions no_stem;
        CHECK(std::abs(meteor_lite(c, no_stem) - meteor_lite(relabeled, no_stem)) <= 1e-12);
    }
}

TEST_CASE("evaluate_corpus bundles the individual metrics") {
    Rng rng(123);
    EvalCorpus c = random_corpus(rng);
    MetricReport r = evaluate_corpus(c);
    CHECK(r.bleu1 == bleu(c, 1));
    CHECK(r.bleu4 == bleu(c, 4));
    CHECK(r.rouge_l == rouge_l(c));
    CHECK(r.meteor == meteor_lite(c));
    CHECK(r.cider == cider(c));
}

TEST_CASE("eval corpus serialization round-trips") {
    EvalCorpus c = {entry(toks({"polyp", "found", "."}),
                          {toks({"one", "polyp", "found", "."}), toks({"polyp", "."})}, "v1"),
                    entry(toks({"normal", "mucosa"}), {toks({"normal", "mucosa"})}, "v2")};
    std::stringstream ss;
    save_eval_corpus(ss, c);
    EvalCorpus back = load_eval_corpus(ss, "mem");
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "v1");
    CHECK(back[0].hyp == c[0].hyp);
    CHECK(back[0].refs == c[0].refs);
    CHECK(back[1].hyp == c[1].hyp);

    SUBCASE("wrong schema line is rejected") {
        std::stringstream bad("#ldp-other v9\n{}\n");
        CHECK_THROWS_WITH_AS(load_eval_corpus(bad, "f"), doctest::Contains("schema"), DataError);
    }
    SUBCASE("malformed record reports its line number") {
        std::stringstream bad("#ldp-eval v1\n{\"id\": \"x\", \"hyp\": \"a\", \"refs\": [\"a\"]}\nnot json\n");
        CHECK_THROWS_WITH_AS(load_eval_corpus(bad, "f"), doctest::Contains(":3:"), DataError);
    }
    SUBCASE("record without references is rejected") {
        std::stringstream bad("#ldp-eval v1\n{\"id\": \"x\", \"hyp\": \"a\", \"refs\": []}\n");
        CHECK_THROWS_AS(load_eval_corpus(bad, "f"), DataError);
    }
}
