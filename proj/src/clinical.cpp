#include "ldp/clinical.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "ldp/errors.hpp"
#include "ldp/rng.hpp"

namespace ldp {

namespace {

void check_dimension(double v, const char* name) {
    if (!(v >= 1.0 && v <= 10.0))
        throw DataError(std::string(name) + " score " + std::to_string(v) +
                        " out of range [1,10]");
}

// case -> rater -> ordinal category
using RatingGrid = std::map<std::string, std::map<std::string, int>>;

RatingGrid build_grid(const std::vector<ScoreSheet>& sheets, const RubricWeights& weights) {
    RatingGrid grid;
    for (const auto& s : sheets) {
        int cat = ps_bin(weighted_ps(s, weights));
        auto [it, inserted] = grid[s.case_id].emplace(s.rater, cat);
        if (!inserted)
            throw DataError("duplicate rating: rater '" + s.rater + "' scored case '" +
                            s.case_id + "' twice");
    }
    return grid;
}

// cases x categories count matrix for Fleiss' kappa; every case must carry
// the same rater count.
double fleiss_kappa(const std::vector<std::vector<int>>& cases, size_t n_raters) {
    std::set<int> cats;
    for (const auto& c : cases)
        for (int v : c) cats.insert(v);
    std::vector<int> cat_list(cats.begin(), cats.end());
    const size_t K = cat_list.size();
    const double n = static_cast<double>(n_raters);
    const double N = static_cast<double>(cases.size());

    std::vector<double> pj(K, 0.0);
    double pbar_sum = 0.0;
    for (const auto& c : cases) {
        std::vector<double> counts(K, 0.0);
        for (int v : c) {
            size_t k = static_cast<size_t>(
                std::find(cat_list.begin(), cat_list.end(), v) - cat_list.begin());
            counts[k] += 1.0;
        }
        double sq = 0.0;
        for (size_t k = 0; k < K; ++k) {
            sq += counts[k] * counts[k];
            pj[k] += counts[k];
        }
        pbar_sum += (sq - n) / (n * (n - 1.0));
    }
    double pbar = pbar_sum / N;
    double pe = 0.0;
    for (size_t k = 0; k < K; ++k) {
        double p = pj[k] / (N * n);
        pe += p * p;
    }
    if (pe >= 1.0)
        throw DataError("kappa undefined: every rating falls in a single category");
    return (pbar - pe) / (1.0 - pe);
}

double mean_pairwise_cohen(const std::vector<std::vector<int>>& cases, size_t n_raters) {
    double sum = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < n_raters; ++i)
        for (size_t j = i + 1; j < n_raters; ++j) {
            std::vector<int> a, b;
            a.reserve(cases.size());
            b.reserve(cases.size());
            for (const auto& c : cases) {
                a.push_back(c[i]);
                b.push_back(c[j]);
            }
            sum += cohen_kappa(a, b);
            ++pairs;
        }
    return sum / static_cast<double>(pairs);
}

double kappa_of(const std::vector<std::vector<int>>& cases, size_t n_raters, KappaMethod m) {
    return m == KappaMethod::fleiss ? fleiss_kappa(cases, n_raters)
                                    : mean_pairwise_cohen(cases, n_raters);
}

}  // namespace

void RubricWeights::validate() const {
    const double w[4] = {clinical_accuracy, factual_completeness, terminology,
                         clinical_usability};
    double sum = 0.0;
    for (double v : w) {
        if (v < 0.0) throw ConfigError("rubric weights must be nonnegative");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12)
        throw ConfigError("rubric weights must sum to 1, got " + std::to_string(sum));
}

double weighted_ps(const ScoreSheet& s, const RubricWeights& w) {
    w.validate();
    check_dimension(s.clinical_accuracy, "clinical_accuracy");
    check_dimension(s.factual_completeness, "factual_completeness");
    check_dimension(s.terminology, "terminology");
    check_dimension(s.clinical_usability, "clinical_usability");
    return s.clinical_accuracy * w.clinical_accuracy +
           s.factual_completeness * w.factual_completeness + s.terminology * w.terminology +
           s.clinical_usability * w.clinical_usability;
}

double aggregate_ps(const std::vector<double>& scores, AggregateMode mode) {
    if (scores.empty()) throw DataError("aggregate: no scores");
    if (mode == AggregateMode::mean) {
        double s = 0.0;
        for (double v : scores) s += v;
        return s / static_cast<double>(scores.size());
    }
    if (scores.size() < 3)
        throw DataError("trimmed aggregate needs at least 3 scores, got " +
                        std::to_string(scores.size()));
    // summing in sorted order makes the result independent of input order
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    double s = 0.0;
    for (size_t i = 1; i + 1 < sorted.size(); ++i) s += sorted[i];
    return s / static_cast<double>(sorted.size() - 2);
}

int ps_bin(double ps) {
    // weight dot products land ulps off the integer endpoints (0.4+0.3+0.2+0.1 != 1)
    constexpr double kSlop = 1e-9;
    if (!(ps >= 1.0 - kSlop && ps <= 10.0 + kSlop))
        throw DataError("composite score " + std::to_string(ps) + " out of range [1,10]");
    if (ps <= 2.0) return 0;
    if (ps <= 4.0) return 1;
    if (ps <= 6.0) return 2;
    if (ps <= 8.0) return 3;
    return 4;
}

double cohen_kappa(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw DataError("kappa: rating vectors differ in length");
    if (a.size() < 2) throw DataError("kappa: need at least 2 ratings");
    const double n = static_cast<double>(a.size());
    std::map<int, double> ca, cb;
    double agree = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ca[a[i]] += 1.0;
        cb[b[i]] += 1.0;
        if (a[i] == b[i]) agree += 1.0;
    }
    double po = agree / n;
    double pe = 0.0;
    for (const auto& [cat, cnt] : ca) {
        auto it = cb.find(cat);
        if (it != cb.end()) pe += (cnt / n) * (it->second / n);
    }
    if (pe >= 1.0)
        throw DataError("kappa undefined: both raters used a single identical category");
    return (po - pe) / (1.0 - pe);
}

KappaResult multi_rater_kappa(const std::vector<ScoreSheet>& sheets, const RubricWeights& weights,
                              KappaMethod method, uint64_t seed, size_t resamples) {
    RatingGrid grid = build_grid(sheets, weights);
    if (grid.size() < 2) throw DataError("kappa: need at least 2 cases");

    std::set<std::string> raters;
    for (const auto& [case_id, by_rater] : grid)
        for (const auto& [r, cat] : by_rater) raters.insert(r);
    if (raters.size() < 3) throw DataError("multi-rater kappa: need at least 3 raters");

    // complete grid, fixed rater order
    std::vector<std::string> rater_list(raters.begin(), raters.end());
    std::vector<std::vector<int>> cases;
    for (const auto& [case_id, by_rater] : grid) {
        std::vector<int> row;
        for (const auto& r : rater_list) {
            auto it = by_rater.find(r);
            if (it == by_rater.end())
                throw DataError("incomplete rating grid: rater '" + r + "' missing on case '" +
                                case_id + "'");
            row.push_back(it->second);
        }
        cases.push_back(std::move(row));
    }

    KappaResult res;
    res.kappa = kappa_of(cases, rater_list.size(), method);
    res.resamples = resamples;
    if (resamples == 0) {
        res.ci_lo = res.ci_hi = res.kappa;
        return res;
    }

    Rng rng(seed);
    std::vector<double> draws;
    draws.reserve(resamples);
    for (size_t b = 0; b < resamples; ++b) {
        std::vector<std::vector<int>> sample;
        sample.reserve(cases.size());
        for (size_t i = 0; i < cases.size(); ++i)
            sample.push_back(cases[rng.below(cases.size())]);
        try {
            draws.push_back(kappa_of(sample, rater_list.size(), method));
        } catch (const DataError&) {
            ++res.degenerate_resamples;
        }
    }
    if (draws.empty()) throw DataError("kappa bootstrap: every resample was single-category");
    std::sort(draws.begin(), draws.end());
    auto quantile = [&](double q) {
        double pos = q * static_cast<double>(draws.size() - 1);
        size_t lo = static_cast<size_t>(pos);
        size_t hi = std::min(lo + 1, draws.size() - 1);
        double frac = pos - static_cast<double>(lo);
        return draws[lo] * (1.0 - frac) + draws[hi] * frac;
    };
    res.ci_lo = quantile(0.025);
    res.ci_hi = quantile(0.975);
    return res;
}

std::vector<ScoreSheet> load_score_sheets(std::istream& in, const std::string& source_name) {
    std::string line;
    size_t lineno = 0;
    if (!std::getline(in, line))
        throw DataError(source_name + ": empty input, expected '#ldp-scores v1' schema line");
    ++lineno;
    if (line != "#ldp-scores v1")
        throw DataError(source_name + ":1: unknown schema '" + line +
                        "', expected '#ldp-scores v1'");
    std::vector<ScoreSheet> out;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        ScoreSheet s;
        if (!(ss >> s.rater >> s.case_id >> s.group >> s.clinical_accuracy >>
              s.factual_completeness >> s.terminology >> s.clinical_usability))
            throw DataError(source_name + ":" + std::to_string(lineno) +
                            ": expected 'rater case group ca fc term use'");
        std::string extra;
        if (ss >> extra)
            throw DataError(source_name + ":" + std::to_string(lineno) +
                            ": unexpected trailing field '" + extra + "'");
        if (s.group == "-") s.group.clear();
        try {
            check_dimension(s.clinical_accuracy, "clinical_accuracy");
            check_dimension(s.factual_completeness, "factual_completeness");
            check_dimension(s.terminology, "terminology");
            check_dimension(s.clinical_usability, "clinical_usability");
        } catch (const DataError& e) {
            throw DataError(source_name + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

void save_score_sheets(std::ostream& out, const std::vector<ScoreSheet>& sheets) {
    out << "#ldp-scores v1\n";
    for (const auto& s : sheets) {
        out << s.rater << " " << s.case_id << " " << (s.group.empty() ? "-" : s.group) << " "
            << s.clinical_accuracy << " " << s.factual_completeness << " " << s.terminology
            << " " << s.clinical_usability << "\n";
    }
}

PsTable ps_table(const std::vector<ScoreSheet>& sheets, const RubricWeights& weights) {
    if (sheets.empty()) throw DataError("ps table: no score sheets");
    std::map<std::string, std::vector<double>> by_group;
    std::vector<double> all;
    for (const auto& s : sheets) {
        double ps = weighted_ps(s, weights);
        by_group[s.group.empty() ? "(all)" : s.group].push_back(ps);
        all.push_back(ps);
    }
    PsTable table;
    for (const auto& [g, scores] : by_group) {
        PsTableRow row;
        row.group = g;
        row.ratings = scores.size();
        row.mean_ps = aggregate_ps(scores, AggregateMode::mean);
        table.rows.push_back(std::move(row));
    }
    table.overall_mean = aggregate_ps(all, AggregateMode::mean);
    table.overall_trimmed = all.size() >= 3 ? aggregate_ps(all, AggregateMode::trimmed)
                                            : std::numeric_limits<double>::quiet_NaN();
    return table;
}

}  // namespace ldp
