#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ldp {

// Four-dimension rubric weights; must be nonnegative and sum to 1.
struct RubricWeights {
    double clinical_accuracy = 0.4;
    double factual_completeness = 0.3;
    double terminology = 0.2;
    double clinical_usability = 0.1;

    void validate() const;
};

// One rater's scores for one case. Each dimension is on 1..10. The group
// column carries an optional rater subgroup (e.g. a site) for pre-averaged
// reporting; "-" on disk means ungrouped.
struct ScoreSheet {
    std::string rater;
    std::string case_id;
    std::string group;
    double clinical_accuracy = 0.0;
    double factual_completeness = 0.0;
    double terminology = 0.0;
    double clinical_usability = 0.0;
};

// Weighted composite score, still on the 1..10 scale.
double weighted_ps(const ScoreSheet& sheet, const RubricWeights& weights);

enum class AggregateMode { mean, trimmed };

// mean: arithmetic mean. trimmed: drop exactly one highest and one lowest
// occurrence, then mean the rest (needs at least 3 scores).
double aggregate_ps(const std::vector<double>& scores, AggregateMode mode);

// Ordinal bin for a 1..10 composite: {1-2, 3-4, 5-6, 7-8, 9-10} -> 0..4.
int ps_bin(double ps);

// Cohen's kappa over two equal-length categorical sequences.
double cohen_kappa(const std::vector<int>& a, const std::vector<int>& b);

enum class KappaMethod { fleiss, mean_pairwise_cohen };

struct KappaResult {
    double kappa = 0.0;
    double ci_lo = 0.0;  // 95% case-bootstrap interval
    double ci_hi = 0.0;
    size_t resamples = 0;
    size_t degenerate_resamples = 0;  // skipped: single-category draw
};

// Agreement across >= 3 raters on a complete case grid. Composite scores
// are binned with ps_bin before kappa. The point estimate uses `method`
// (Fleiss' kappa is the multi-rater statistic; mean pairwise Cohen is the
// two-at-a-time alternative); the CI is a seeded bootstrap over cases.
KappaResult multi_rater_kappa(const std::vector<ScoreSheet>& sheets, const RubricWeights& weights,
                              KappaMethod method, uint64_t seed, size_t resamples = 2000);

// Tabular ingestion: "#ldp-scores v1" schema line, then one row per rating:
//   rater case group ca fc term use
// whitespace-separated; errors carry the offending line number.
std::vector<ScoreSheet> load_score_sheets(std::istream& in, const std::string& source_name);
void save_score_sheets(std::ostream& out, const std::vector<ScoreSheet>& sheets);

struct PsTableRow {
    std::string group;
    size_t ratings = 0;
    double mean_ps = 0.0;
};

// Per-group mean composite plus an overall row, mean and trimmed side by
// side (the two aggregation conventions are reported together, never
// silently reconciled).
struct PsTable {
    std::vector<PsTableRow> rows;
    double overall_mean = 0.0;
    double overall_trimmed = 0.0;  // NaN when fewer than 3 ratings
};
PsTable ps_table(const std::vector<ScoreSheet>& sheets, const RubricWeights& weights);

}  // namespace ldp
