#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace ldp {

// One evaluation record: a hypothesis against one or more references.
struct EvalEntry {
    std::string id;
    std::vector<std::string> hyp;
    std::vector<std::vector<std::string>> refs;  // at least one
};
using EvalCorpus = std::vector<EvalEntry>;

// Lowercase, split alphanumeric runs, keep punctuation as single tokens.
// This normalization is frozen; metric scores are only comparable within it.
std::vector<std::string> metric_tokenize(const std::string& text);

struct BleuStats {
    std::vector<double> precisions;  // per order 1..n
    double brevity_penalty = 0.0;
    size_t empty_hypotheses = 0;
};

struct BleuOptions {
    bool sentence_averaged = false;  // default: corpus-level counts
    double epsilon = 1e-9;           // substitute for zero precisions
};

// Modified n-gram precision, geometric mean over orders 1..n, times
// BP = min(1, exp(1 - r/c)) with r the closest-reference length total.
double bleu(const EvalCorpus& corpus, int n, const BleuOptions& opt = {},
            BleuStats* stats = nullptr);

// Longest common subsequence length; exposed so tests can pin it against an
// exhaustive oracle.
size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// LCS F-score (harmonic mean of LCS/|hyp| and LCS/|ref|), best reference per
// entry, mean over the corpus.
double rouge_l(const EvalCorpus& corpus);

struct MeteorOptions {
    // Suffixes tried longest-first when exact unigram matching fails; a
    // strip only applies if it leaves a stem of >= 3 characters.
    std::vector<std::string> suffixes;
};
MeteorOptions default_meteor_options();

// Unigram alignment (exact then stemmed), F = 10PR/(R+9P), fragmentation
// penalty 0.5*(chunks/matches)^3; best reference per entry, corpus mean.
double meteor_lite(const EvalCorpus& corpus, const MeteorOptions& opt = default_meteor_options());

struct CiderOptions {
    bool length_penalty = false;  // gaussian penalty on |hyp|-|ref| gaps
    double sigma = 6.0;
};

// TF-IDF n-gram cosine (n = 1..4, IDF over reference documents), averaged
// over references and orders, scaled by 10, mean over the corpus. Needs at
// least two entries for a meaningful IDF population.
double cider(const EvalCorpus& corpus, const CiderOptions& opt = {});

struct MetricReport {
    double bleu1 = 0.0;
    double bleu2 = 0.0;
    double bleu3 = 0.0;
    double bleu4 = 0.0;
    double meteor = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
};
MetricReport evaluate_corpus(const EvalCorpus& corpus);

// Line-delimited corpus: a "#ldp-eval v1" schema line, then one JSON object
// {"id", "hyp", "refs"} per line (text fields; tokenization happens on load).
EvalCorpus load_eval_corpus(std::istream& in, const std::string& source_name);
void save_eval_corpus(std::ostream& out, const EvalCorpus& corpus);

}  // namespace ldp
