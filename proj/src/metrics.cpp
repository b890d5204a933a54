#include "ldp/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "ldp/errors.hpp"

namespace ldp {

namespace {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, size_t>;

void require_refs(const EvalCorpus& corpus, const char* metric) {
    if (corpus.empty()) throw DataError(std::string(metric) + ": empty corpus");
    for (const auto& e : corpus)
        if (e.refs.empty())
            throw DataError(std::string(metric) + ": entry '" + e.id + "' has no references");
}

NgramCounts count_ngrams(std::span<const std::string> toks, size_t n) {
    NgramCounts c;
    if (toks.size() < n) return c;
    for (size_t i = 0; i + n <= toks.size(); ++i)
        ++c[Ngram(toks.begin() + static_cast<ptrdiff_t>(i),
                  toks.begin() + static_cast<ptrdiff_t>(i + n))];
    return c;
}

// Reference length closest to the hypothesis length; ties go to the shorter.
size_t closest_ref_len(const EvalEntry& e) {
    size_t best = e.refs[0].size();
    for (const auto& r : e.refs) {
        auto dist = [&](size_t len) {
            return len > e.hyp.size() ? len - e.hyp.size() : e.hyp.size() - len;
        };
        if (dist(r.size()) < dist(best) || (dist(r.size()) == dist(best) && r.size() < best))
            best = r.size();
    }
    return best;
}

struct ClippedCounts {
    size_t matched = 0;
    size_t total = 0;
};

ClippedCounts clipped_ngram_counts(const EvalEntry& e, size_t n) {
    ClippedCounts out;
    auto hyp_counts = count_ngrams(e.hyp, n);
    NgramCounts max_ref;
    for (const auto& r : e.refs)
        for (const auto& [g, c] : count_ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : hyp_counts) {
        out.total += c;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) out.matched += std::min(c, it->second);
    }
    return out;
}

double geometric_mean_score(const std::vector<double>& precisions, double bp) {
    double log_sum = 0.0;
    for (double p : precisions) log_sum += std::log(p);
    return bp * std::exp(log_sum / static_cast<double>(precisions.size()));
}

std::string stem(const std::string& w, const std::vector<std::string>& suffixes) {
    for (const auto& s : suffixes) {
        if (w.size() >= s.size() + 3 && w.compare(w.size() - s.size(), s.size(), s) == 0)
            return w.substr(0, w.size() - s.size());
    }
    return w;
}

struct Alignment {
    size_t matches = 0;
    size_t chunks = 0;
};

// Greedy left-to-right unigram alignment: exact matches first, then stemmed
// matches over what remains. Chunks count maximal runs where both sides
// advance by one.
Alignment align_unigrams(std::span<const std::string> hyp, std::span<const std::string> ref,
                         const std::vector<std::string>& suffixes) {
    std::vector<ptrdiff_t> match_of(hyp.size(), -1);
    std::vector<bool> ref_used(ref.size(), false);
    for (size_t i = 0; i < hyp.size(); ++i)
        for (size_t j = 0; j < ref.size(); ++j)
            if (!ref_used[j] && hyp[i] == ref[j]) {
                match_of[i] = static_cast<ptrdiff_t>(j);
                ref_used[j] = true;
                break;
            }
    for (size_t i = 0; i < hyp.size(); ++i) {
        if (match_of[i] != -1) continue;
        std::string hs = stem(hyp[i], suffixes);
        for (size_t j = 0; j < ref.size(); ++j)
            if (!ref_used[j] && hs == stem(ref[j], suffixes)) {
                match_of[i] = static_cast<ptrdiff_t>(j);
                ref_used[j] = true;
                break;
            }
    }
    Alignment a;
    ptrdiff_t prev_j = -2;
    for (size_t i = 0; i < hyp.size(); ++i) {
        if (match_of[i] == -1) continue;
        ++a.matches;
        if (match_of[i] != prev_j + 1) ++a.chunks;
        prev_j = match_of[i];
    }
    return a;
}

double meteor_entry(const EvalEntry& e, const std::vector<std::string>& suffixes) {
    double best = 0.0;
    for (const auto& ref : e.refs) {
        if (e.hyp.empty() || ref.empty()) continue;
        Alignment a = align_unigrams(e.hyp, ref, suffixes);
        if (a.matches == 0) continue;
        double m = static_cast<double>(a.matches);
        double p = m / static_cast<double>(e.hyp.size());
        double r = m / static_cast<double>(ref.size());
        double f = 10.0 * p * r / (r + 9.0 * p);
        double frag = static_cast<double>(a.chunks) / m;
        double score = f * (1.0 - 0.5 * frag * frag * frag);
        best = std::max(best, score);
    }
    return best;
}

}  // namespace

std::vector<std::string> metric_tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            if (!std::isspace(ch)) out.push_back(std::string(1, static_cast<char>(ch)));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

double bleu(const EvalCorpus& corpus, int n, const BleuOptions& opt, BleuStats* stats) {
    require_refs(corpus, "bleu");
    if (n < 1 || n > 4) throw ConfigError("bleu order must be in [1,4]");
    if (opt.epsilon <= 0.0) throw ConfigError("bleu epsilon must be > 0");
    const size_t N = static_cast<size_t>(n);

    BleuStats local;
    local.precisions.assign(N, 0.0);
    for (const auto& e : corpus)
        if (e.hyp.empty()) ++local.empty_hypotheses;

    double score = 0.0;
    if (!opt.sentence_averaged) {
        std::vector<size_t> matched(N, 0), total(N, 0);
        size_t c = 0, r = 0;
        for (const auto& e : corpus) {
            c += e.hyp.size();
            r += closest_ref_len(e);
            for (size_t k = 0; k < N; ++k) {
                auto cc = clipped_ngram_counts(e, k + 1);
                matched[k] += cc.matched;
                total[k] += cc.total;
            }
        }
        if (c == 0) {
            if (stats) *stats = local;
            return 0.0;
        }
        double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)));
        local.brevity_penalty = bp;
        for (size_t k = 0; k < N; ++k) {
            double p = (total[k] == 0 || matched[k] == 0)
                           ? opt.epsilon
                           : static_cast<double>(matched[k]) / static_cast<double>(total[k]);
            local.precisions[k] = p;
        }
        score = geometric_mean_score(local.precisions, bp);
    } else {
        double sum = 0.0;
        for (const auto& e : corpus) {
            if (e.hyp.empty()) continue;
            std::vector<double> prec(N, 0.0);
            for (size_t k = 0; k < N; ++k) {
                auto cc = clipped_ngram_counts(e, k + 1);
                prec[k] = (cc.total == 0 || cc.matched == 0)
                              ? opt.epsilon
                              : static_cast<double>(cc.matched) / static_cast<double>(cc.total);
            }
            double r = static_cast<double>(closest_ref_len(e));
            double bp = std::min(1.0, std::exp(1.0 - r / static_cast<double>(e.hyp.size())));
            sum += geometric_mean_score(prec, bp);
        }
        score = sum / static_cast<double>(corpus.size());
    }
    if (stats) *stats = local;
    return score;
}

size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const EvalCorpus& corpus) {
    require_refs(corpus, "rouge_l");
    double sum = 0.0;
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
        sum += best;
    }
    return sum / static_cast<double>(corpus.size());
}

MeteorOptions default_meteor_options() {
    // Longest-first keeps "ies" from being shadowed by "s".
    return {{"ational", "ization", "fulness", "ousness", "tional", "ation", "ness", "ment",
             "ies", "ing", "ed", "ly", "es", "s"}};
}

double meteor_lite(const EvalCorpus& corpus, const MeteorOptions& opt) {
    require_refs(corpus, "meteor");
    double sum = 0.0;
    for (const auto& e : corpus) sum += meteor_entry(e, opt.suffixes);
    return sum / static_cast<double>(corpus.size());
}

double cider(const EvalCorpus& corpus, const CiderOptions& opt) {
    require_refs(corpus, "cider");
    if (corpus.size() < 2)
        throw DataError(
            "cider: IDF is degenerate on a single document; evaluate a corpus of at least two "
            "entries");
    const size_t N = corpus.size();
    double total = 0.0;
    for (size_t n = 1; n <= 4; ++n) {
        // document frequency over each entry's reference set
        NgramCounts df;
        for (const auto& e : corpus) {
            NgramCounts seen;
            for (const auto& ref : e.refs)
                for (const auto& [g, c] : count_ngrams(ref, n)) seen[g] = 1;
            for (const auto& [g, one] : seen) df[g] += 1;
        }
        auto idf = [&](const Ngram& g) {
            auto it = df.find(g);
            size_t d = it == df.end() ? 0 : it->second;
            return std::log(static_cast<double>(N) / static_cast<double>(std::max<size_t>(1, d)));
        };
        auto weighted = [&](const NgramCounts& counts) {
            std::map<Ngram, double> v;
            for (const auto& [g, c] : counts) v[g] = static_cast<double>(c) * idf(g);
            return v;
        };
        double order_sum = 0.0;
        for (const auto& e : corpus) {
            auto vh = weighted(count_ngrams(e.hyp, n));
            double nh = 0.0;
            for (const auto& [g, w] : vh) nh += w * w;
            nh = std::sqrt(nh);
            double ref_sum = 0.0;
            for (const auto& ref : e.refs) {
                auto vr = weighted(count_ngrams(ref, n));
                double nr = 0.0;
                for (const auto& [g, w] : vr) nr += w * w;
                nr = std::sqrt(nr);
                double dot = 0.0;
                for (const auto& [g, w] : vh) {
                    auto it = vr.find(g);
                    if (it != vr.end()) dot += w * it->second;
                }
                double sim = (nh > 0.0 && nr > 0.0) ? dot / (nh * nr) : 0.0;
                if (opt.length_penalty) {
                    double delta =
                        static_cast<double>(e.hyp.size()) - static_cast<double>(ref.size());
                    sim *= std::exp(-delta * delta / (2.0 * opt.sigma * opt.sigma));
                }
                ref_sum += sim;
            }
            order_sum += ref_sum / static_cast<double>(e.refs.size());
        }
        total += 10.0 * order_sum / static_cast<double>(N);
    }
    return total / 4.0;
}

MetricReport evaluate_corpus(const EvalCorpus& corpus) {
    MetricReport r;
    r.bleu1 = bleu(corpus, 1);
    r.bleu2 = bleu(corpus, 2);
    r.bleu3 = bleu(corpus, 3);
    r.bleu4 = bleu(corpus, 4);
    r.meteor = meteor_lite(corpus);
    r.rouge_l = rouge_l(corpus);
    r.cider = cider(corpus);
    return r;
}

EvalCorpus load_eval_corpus(std::istream& in, const std::string& source_name) {
    std::string line;
    size_t lineno = 0;
    if (!std::getline(in, line))
        throw DataError(source_name + ": empty input, expected '#ldp-eval v1' schema line");
    ++lineno;
    if (line != "#ldp-eval v1")
        throw DataError(source_name + ":1: unknown schema '" + line + "', expected '#ldp-eval v1'");
    EvalCorpus corpus;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw DataError(source_name + ":" + std::to_string(lineno) + ": malformed JSON record");
        EvalEntry e;
        try {
            e.id = j.at("id").get<std::string>();
            e.hyp = metric_tokenize(j.at("hyp").get<std::string>());
            for (const auto& ref : j.at("refs"))
                e.refs.push_back(metric_tokenize(ref.get<std::string>()));
        } catch (const nlohmann::json::exception& ex) {
            throw DataError(source_name + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        if (e.refs.empty())
            throw DataError(source_name + ":" + std::to_string(lineno) +
                            ": record needs at least one reference");
        corpus.push_back(std::move(e));
    }
    return corpus;
}

void save_eval_corpus(std::ostream& out, const EvalCorpus& corpus) {
    auto join = [](const std::vector<std::string>& toks) {
        std::string s;
        for (size_t i = 0; i < toks.size(); ++i) {
            if (i) s.push_back(' ');
            s += toks[i];
        }
        return s;
    };
    out << "#ldp-eval v1\n";
    for (const auto& e : corpus) {
        nlohmann::json j;
        j["id"] = e.id;
        j["hyp"] = join(e.hyp);
        auto refs = nlohmann::json::array();
        for (const auto& r : e.refs) refs.push_back(join(r));
        j["refs"] = refs;
        out << j.dump() << "\n";
    }
}

}  // namespace ldp
