#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "ldp/clinical.hpp"
#include "ldp/errors.hpp"
#include "ldp/rng.hpp"

using namespace ldp;

namespace {

ScoreSheet sheet(const std::string& rater, const std::string& case_id, int ca, int fc, int term,
                 int use, const std::string& group = "") {
    ScoreSheet s;
    s.rater = rater;
    s.case_id = case_id;
    s.group = group;
    s.clinical_accuracy = ca;
    s.factual_completeness = fc;
    s.terminology = term;
    s.clinical_usability = use;
    return s;
}

}  // namespace

TEST_CASE("weighted physician score") {
    RubricWeights w;

    SUBCASE("perfect ratings hit the ceiling exactly") {
        CHECK(weighted_ps(sheet("r", "c", 10, 10, 10, 10), w) == 10.0);
    }
    SUBCASE("hand-computed mix") {
        // 0.4*10 + 0.3*1 + 0.2*1 + 0.1*1 = 4.6
        CHECK(weighted_ps(sheet("r", "c", 10, 1, 1, 1), w) ==
              doctest::Approx(4.6).epsilon(1e-12));
    }
    SUBCASE("raising any dimension never lowers the score") {
        auto base = sheet("r", "c", 5, 5, 5, 5);
        double b = weighted_ps(base, w);
        auto bump = base;
        bump.factual_completeness = 6;
        CHECK(weighted_ps(bump, w) > b);
    }
    SUBCASE("ratings outside 1..10 are data errors") {
        CHECK_THROWS_AS(weighted_ps(sheet("r", "c", 0, 5, 5, 5), w), DataError);
        CHECK_THROWS_AS(weighted_ps(sheet("r", "c", 5, 11, 5, 5), w), DataError);
    }
    SUBCASE("weights must be nonnegative and sum to one") {
        RubricWeights bad;
        bad.clinical_accuracy = 0.5;  // sum now 1.1
        CHECK_THROWS_AS(weighted_ps(sheet("r", "c", 5, 5, 5, 5), bad), ConfigError);
        RubricWeights neg;
        neg.clinical_accuracy = -0.1;
        neg.factual_completeness = 0.8;
        CHECK_THROWS_AS(neg.validate(), ConfigError);
    }
}

TEST_CASE("score aggregation") {
    std::vector<double> scores = {6.0, 8.5, 6.5, 7.0, 8.0};

    SUBCASE("mean fixture") {
        CHECK(aggregate_ps(scores, AggregateMode::mean) == doctest::Approx(7.2).epsilon(1e-12));
    }
    SUBCASE("trimmed mean drops one extreme from each end") {
        CHECK(aggregate_ps(scores, AggregateMode::trimmed) ==
              doctest::Approx(21.5 / 3.0).epsilon(1e-12));
    }
    SUBCASE("all-equal input gives the same value in both modes") {
        std::vector<double> same = {7.0, 7.0, 7.0, 7.0};
        CHECK(aggregate_ps(same, AggregateMode::mean) ==
              aggregate_ps(same, AggregateMode::trimmed));
    }
    SUBCASE("trimmed mean is bitwise invariant to input order") {
        std::vector<double> shuffled = scores;
        Rng rng(5);
        for (int t = 0; t < 8; ++t) {
            rng.shuffle(shuffled);
            double a = aggregate_ps(scores, AggregateMode::trimmed);
            double b = aggregate_ps(shuffled, AggregateMode::trimmed);
            CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
        }
    }
    SUBCASE("arity requirements") {
        CHECK_THROWS_AS(aggregate_ps({}, AggregateMode::mean), DataError);
        CHECK_THROWS_AS(aggregate_ps({1.0, 2.0}, AggregateMode::trimmed), DataError);
        CHECK_NOTHROW(aggregate_ps({1.0, 2.0, 3.0}, AggregateMode::trimmed));
    }
}

TEST_CASE("ps binning") {
    CHECK(ps_bin(1.0) == 0);
    CHECK(ps_bin(2.0) == 0);
    CHECK(ps_bin(2.5) == 1);
    CHECK(ps_bin(4.0) == 1);
    CHECK(ps_bin(4.6) == 2);
    CHECK(ps_bin(6.0) == 2);
    CHECK(ps_bin(7.9) == 3);
    CHECK(ps_bin(9.0) == 4);
    CHECK(ps_bin(10.0) == 4);
    CHECK_THROWS_AS(ps_bin(0.5), DataError);
    CHECK_THROWS_AS(ps_bin(10.5), DataError);
}

TEST_CASE("cohen kappa") {
    SUBCASE("perfect agreement is exactly one") {
        std::vector<int> a = {0, 1, 2, 1, 0, 2};
        CHECK(cohen_kappa(a, a) == 1.0);
    }
    SUBCASE("hand-computed fixtures") {
        // po = 0.5, pe = 0.5 -> 0
        std::vector<int> a = {0, 0, 1, 1};
        std::vector<int> b = {0, 1, 0, 1};
        CHECK(cohen_kappa(a, b) == doctest::Approx(0.0).epsilon(1e-12));
        // po = 0.75, pe = 0.5 -> 0.5
        std::vector<int> c = {0, 0, 1, 1};
        std::vector<int> d = {0, 0, 1, 0};
        CHECK(cohen_kappa(c, d) == 0.5);
    }
    SUBCASE("kappa is symmetric in its arguments") {
        Rng rng(11);
        for (int t = 0; t < 20; ++t) {
            std::vector<int> a, b;
            for (int i = 0; i < 30; ++i) {
                a.push_back(static_cast<int>(rng.below(3)));
                b.push_back(static_cast<int>(rng.below(3)));
            }
            double ab = cohen_kappa(a, b);
            double ba = cohen_kappa(b, a);
            if (std::isfinite(ab))
                CHECK(std::memcmp(&ab, &ba, sizeof(double)) == 0);
        }
    }
    SUBCASE("degenerate marginals are rejected, not divided through") {
        std::vector<int> a = {1, 1, 1};
        CHECK_THROWS_WITH_AS(cohen_kappa(a, a), doctest::Contains("single"), DataError);
    }
    SUBCASE("shape errors") {
        CHECK_THROWS_AS(cohen_kappa({0, 1}, {0}), DataError);
        CHECK_THROWS_AS(cohen_kappa({}, {}), DataError);
    }
}

TEST_CASE("multi-rater kappa with bootstrap interval") {
    RubricWeights w;

    auto perfect = [&] {
        std::vector<ScoreSheet> sheets;
        // 12 cases, 3 raters, identical ratings per case, spread across bins
        for (int c = 0; c < 12; ++c) {
            int score = 1 + (c % 5) * 2;  // 1,3,5,7,9
            for (const char* r : {"r1", "r2", "r3"})
                sheets.push_back(sheet(r, "case" + std::to_string(c), score, score, score, score));
        }
        return sheets;
    }();

    SUBCASE("perfect agreement pins kappa and its interval at one") {
        KappaResult k = multi_rater_kappa(perfect, w, KappaMethod::fleiss, 42);
        CHECK(k.kappa == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(k.ci_lo == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(k.ci_hi == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(k.resamples > 0);

        KappaResult mp = multi_rater_kappa(perfect, w, KappaMethod::mean_pairwise_cohen, 42);
        CHECK(mp.kappa == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("independently shuffled ratings land near zero") {
        Rng rng(2718);
        std::vector<ScoreSheet> sheets;
        for (int c = 0; c < 200; ++c)
            for (const char* r : {"r1", "r2", "r3"}) {
                int score = 1 + static_cast<int>(rng.below(10));
                sheets.push_back(sheet(r, "case" + std::to_string(c), score, score, score, score));
            }
        KappaResult k = multi_rater_kappa(sheets, w, KappaMethod::fleiss, 1);
        CHECK(std::abs(k.kappa) < 0.15);
        CHECK(k.ci_lo <= k.kappa);
        CHECK(k.kappa <= k.ci_hi);
    }

    SUBCASE("bootstrap is bitwise reproducible for a fixed seed") {
        KappaResult a = multi_rater_kappa(perfect, w, KappaMethod::fleiss, 7, 500);
        KappaResult b = multi_rater_kappa(perfect, w, KappaMethod::fleiss, 7, 500);
        CHECK(std::memcmp(&a.kappa, &b.kappa, sizeof(double)) == 0);
        CHECK(std::memcmp(&a.ci_lo, &b.ci_lo, sizeof(double)) == 0);
        CHECK(std::memcmp(&a.ci_hi, &b.ci_hi, sizeof(double)) == 0);
        CHECK(a.degenerate_resamples == b.degenerate_resamples);
    }

    SUBCASE("zero resamples collapses the interval to the point estimate") {
        KappaResult k = multi_rater_kappa(perfect, w, KappaMethod::fleiss, 3, 0);
        CHECK(k.ci_lo == k.kappa);
        CHECK(k.ci_hi == k.kappa);
        CHECK(k.resamples == 0);
    }

    SUBCASE("grid completeness is enforced with a named gap") {
        auto sheets = perfect;
        sheets.pop_back();  // drop r3 on the last case
        CHECK_THROWS_WITH_AS(multi_rater_kappa(sheets, w, KappaMethod::fleiss, 1),
                             doctest::Contains("r3"), DataError);
    }

    SUBCASE("duplicate rating for the same rater and case is rejected") {
        auto sheets = perfect;
        sheets.push_back(sheets.front());
        CHECK_THROWS_AS(multi_rater_kappa(sheets, w, KappaMethod::fleiss, 1), DataError);
    }

    SUBCASE("fewer than three raters is a data error") {
        std::vector<ScoreSheet> sheets;
        for (int c = 0; c < 5; ++c)
            for (const char* r : {"r1", "r2"})
                sheets.push_back(sheet(r, "case" + std::to_string(c), 5, 5, 5, 5));
        CHECK_THROWS_AS(multi_rater_kappa(sheets, w, KappaMethod::fleiss, 1), DataError);
    }
}

TEST_CASE("score sheet ingestion") {
    SUBCASE("well-formed file parses") {
        std::stringstream ss(
            "#ldp-scores v1\n"
            "# comment line\n"
            "r1 case1 lora 8 7 9 8\n"
            "r2 case1 - 7 7 8 8\n"
            "\n"
            "r1 case2 baseline 3 4 5 2\n");
        auto sheets = load_score_sheets(ss, "mem");
        REQUIRE(sheets.size() == 3);
        CHECK(sheets[0].rater == "r1");
        CHECK(sheets[0].group == "lora");
        CHECK(sheets[1].group.empty());
        CHECK(sheets[2].clinical_usability == 2);
    }
    SUBCASE("round trip") {
        std::vector<ScoreSheet> sheets = {sheet("a", "c1", 9, 8, 7, 6, "g"),
                                          sheet("b", "c1", 5, 5, 5, 5)};
        std::stringstream ss;
        save_score_sheets(ss, sheets);
        auto back = load_score_sheets(ss, "mem");
        REQUIRE(back.size() == 2);
        CHECK(back[0].rater == "a");
        CHECK(back[0].group == "g");
        CHECK(back[1].group.empty());
        CHECK(back[0].clinical_accuracy == 9);
    }
    SUBCASE("schema line is mandatory") {
        std::stringstream ss("r1 case1 g 8 7 9 8\n");
        CHECK_THROWS_WITH_AS(load_score_sheets(ss, "f"), doctest::Contains("schema"), DataError);
    }
    SUBCASE("short row reports its line number") {
        std::stringstream ss("#ldp-scores v1\nr1 case1 g 8 7\n");
        CHECK_THROWS_WITH_AS(load_score_sheets(ss, "f"), doctest::Contains(":2:"), DataError);
    }
    SUBCASE("out-of-range rating reports its line number") {
        std::stringstream ss("#ldp-scores v1\nr1 case1 g 8 7 9 8\nr1 case2 g 8 0 9 8\n");
        CHECK_THROWS_WITH_AS(load_score_sheets(ss, "f"), doctest::Contains(":3:"), DataError);
    }
    SUBCASE("trailing junk on a row is rejected") {
        std::stringstream ss("#ldp-scores v1\nr1 case1 g 8 7 9 8 extra\n");
        CHECK_THROWS_AS(load_score_sheets(ss, "f"), DataError);
    }
}

TEST_CASE("ps table") {
    RubricWeights w;
    std::vector<ScoreSheet> sheets = {
        sheet("r1", "c1", 8, 8, 8, 8, "lora"),   sheet("r2", "c1", 6, 6, 6, 6, "lora"),
        sheet("r1", "c2", 4, 4, 4, 4, "base"),   sheet("r2", "c2", 2, 2, 2, 2, "base"),
        sheet("r1", "c3", 10, 10, 10, 10, "lora"),
    };
    PsTable t = ps_table(sheets, w);
    REQUIRE(t.rows.size() == 2);
    auto find_group = [&](const std::string& g) {
        auto it = std::find_if(t.rows.begin(), t.rows.end(),
                               [&](const PsTableRow& r) { return r.group == g; });
        REQUIRE(it != t.rows.end());
        return *it;
    };
    auto lora = find_group("lora");
    CHECK(lora.ratings == 3);
    CHECK(lora.mean_ps == doctest::Approx(8.0).epsilon(1e-12));
    auto base = find_group("base");
    CHECK(base.ratings == 2);
    CHECK(base.mean_ps == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(t.overall_mean == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(t.overall_trimmed == doctest::Approx(6.0).epsilon(1e-12));

    SUBCASE("ungrouped sheets fall into a catch-all row") {
        std::vector<ScoreSheet> plain = {sheet("r1", "c1", 5, 5, 5, 5),
                                         sheet("r2", "c1", 7, 7, 7, 7)};
        PsTable p = ps_table(plain, w);
        REQUIRE(p.rows.size() == 1);
        CHECK(p.rows[0].group == "(all)");
        CHECK(std::isnan(p.overall_trimmed));
    }
}
