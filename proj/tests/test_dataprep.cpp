#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ldp/dataprep.hpp"
#include "ldp/errors.hpp"
#include "ldp/rng.hpp"

using namespace ldp;

namespace {

FrameSequence uniform_seq(const std::string& id, double duration, size_t n,
                          double quality = 1.0, bool polyp = true) {
    FrameSequence s;
    s.video_id = id;
    s.duration = duration;
    s.patch_dim = 1;
    for (size_t i = 0; i < n; ++i) {
        Frame f;
        f.timestamp = (static_cast<double>(i) + 0.5) * duration / static_cast<double>(n);
        f.quality = quality;
        f.polyp_present = polyp;
        f.patches = {static_cast<double>(i)};
        s.frames.push_back(f);
    }
    return s;
}

SentenceSpan span(double start, double end, std::vector<std::string> toks,
                  std::string stratum = "s") {
    SentenceSpan sp;
    sp.start = start;
    sp.end = end;
    sp.tokens = std::move(toks);
    sp.stratum = std::move(stratum);
    return sp;
}

}  // namespace

TEST_CASE("sampling rate formula") {
    SamplingOptions opt;
    SUBCASE("unclamped rate is target over duration") {
        opt.target_frames = 24;
        CHECK(sampling_rate(120.0, opt) == doctest::Approx(0.2).epsilon(1e-12));
        auto picks = sample_keyframe_indices(uniform_seq("v", 120.0, 240), opt);
        CHECK(picks.size() == 24);
    }
    SUBCASE("rate clamps to the configured band") {
        opt.target_frames = 1000;
        CHECK(sampling_rate(10.0, opt) == 2.0);
        opt.target_frames = 1;
        CHECK(sampling_rate(1000.0, opt) == 0.1);
    }
    SUBCASE("very short video still yields one frame") {
        opt.target_frames = 24;
        auto picks = sample_keyframe_indices(uniform_seq("v", 0.4, 5), opt);
        CHECK(picks.size() == 1);
    }
    SUBCASE("selection is deterministic and duplicate-free") {
        FrameSequence s = uniform_seq("v", 30.0, 17);
        auto a = sample_keyframe_indices(s);
        auto b = sample_keyframe_indices(s);
        CHECK(a == b);
        CHECK(std::set<size_t>(a.begin(), a.end()).size() == a.size());
        CHECK(std::is_sorted(a.begin(), a.end()));
    }
    SUBCASE("input validation") {
        FrameSequence empty;
        empty.video_id = "e";
        empty.duration = 1.0;
        CHECK_THROWS_AS(sample_keyframe_indices(empty), DataError);
        SamplingOptions bad;
        bad.target_frames = 0;
        CHECK_THROWS_AS(sampling_rate(10.0, bad), ConfigError);
        FrameSequence rev = uniform_seq("r", 10.0, 3);
        std::swap(rev.frames[0].timestamp, rev.frames[2].timestamp);
        CHECK_THROWS_AS(rev.validate(), DataError);
    }
}

TEST_CASE("quality filter partitions with reasons") {
    std::vector<Frame> frames;
    for (int i = 0; i < 6; ++i) {
        Frame f;
        f.timestamp = i;
        f.quality = 0.2 * i;  // 0.0 .. 1.0
        f.polyp_present = i % 2 == 0;
        frames.push_back(f);
    }
    FilterResult r = quality_filter(frames, "v", 0.4, true);
    CHECK(r.retained.size() + r.rejected.size() == frames.size());

    SUBCASE("threshold is inclusive") {
        // quality exactly 0.4 (i=2, polyp) must be retained
        bool found = false;
        for (const auto& f : r.retained)
            if (f.timestamp == 2.0) found = true;
        CHECK(found);
    }
    SUBCASE("reasons are coded") {
        size_t low = 0, nopolyp = 0;
        for (const auto& rej : r.rejected) {
            if (rej.reason == "low-quality") ++low;
            if (rej.reason == "no-polyp") ++nopolyp;
        }
        CHECK(low == 2);      // i=0 (0.0), i=1 (0.2)
        CHECK(nopolyp == 2);  // i=3, i=5 pass quality but lack a polyp
        CHECK(low + nopolyp == r.rejected.size());
    }
    SUBCASE("require_polyp off keeps clear frames regardless") {
        FilterResult loose = quality_filter(frames, "v", 0.4, false);
        CHECK(loose.retained.size() == 4);
    }
    SUBCASE("threshold outside [0,1] is rejected") {
        CHECK_THROWS_AS(quality_filter(frames, "v", 1.5, true), ConfigError);
    }
}

TEST_CASE("frame-to-sentence alignment") {
    auto mk_frame = [](double t) {
        Frame f;
        f.timestamp = t;
        f.patches = {1.0, 2.0};
        return f;
    };

    SUBCASE("containment picks the covering span") {
        std::vector<SentenceSpan> spans = {span(0, 5, {"first"}), span(5, 15, {"second"})};
        AlignResult r = align_frames_to_sentences({mk_frame(10.0)}, spans, "v", 20.0, 2);
        REQUIRE(r.pairs.size() == 1);
        CHECK(r.pairs[0].report == std::vector<std::string>{"second"});
        CHECK(r.pairs[0].patch_dim == 2);
    }
    SUBCASE("touching spans resolve to the nearer midpoint") {
        // t=5 sits in both [0,5] (mid 2.5) and [5,15] (mid 10); 2.5 is nearer
        std::vector<SentenceSpan> spans = {span(0, 5, {"first"}), span(5, 15, {"second"})};
        AlignResult r = align_frames_to_sentences({mk_frame(5.0)}, spans, "v", 20.0, 2);
        REQUIRE(r.pairs.size() == 1);
        CHECK(r.pairs[0].report == std::vector<std::string>{"first"});
    }
    SUBCASE("identical midpoints fall back to the earlier start") {
        // spans [0,10] and [4,6] share midpoint 5
        std::vector<SentenceSpan> spans = {span(4, 6, {"inner"}), span(0, 10, {"outer"})};
        AlignResult r = align_frames_to_sentences({mk_frame(5.0)}, spans, "v", 20.0, 2);
        REQUIRE(r.pairs.size() == 1);
        CHECK(r.pairs[0].report == std::vector<std::string>{"outer"});
        CHECK(r.midpoint_ties == 1);
    }
    SUBCASE("whole-video span captures every frame") {
        std::vector<SentenceSpan> spans = {span(0, 20, {"all"})};
        std::vector<Frame> fs = {mk_frame(1), mk_frame(7), mk_frame(19)};
        AlignResult r = align_frames_to_sentences(fs, spans, "v", 20.0, 2);
        CHECK(r.pairs.size() == 3);
        CHECK(r.unaligned.empty());
    }
    SUBCASE("uncovered frames land in the unaligned ledger") {
        std::vector<SentenceSpan> spans = {span(0, 5, {"x"})};
        AlignResult r = align_frames_to_sentences({mk_frame(9.0)}, spans, "v", 20.0, 2);
        CHECK(r.pairs.empty());
        REQUIRE(r.unaligned.size() == 1);
        CHECK(r.unaligned[0].reason == "unaligned");
    }
    SUBCASE("span validation") {
        CHECK_THROWS_AS(
            align_frames_to_sentences({mk_frame(1)}, {span(0, 30, {"x"})}, "v", 20.0, 2),
            DataError);
        CHECK_THROWS_AS(
            align_frames_to_sentences({mk_frame(1)}, {span(5, 2, {"x"})}, "v", 20.0, 2),
            DataError);
        CHECK_THROWS_AS(align_frames_to_sentences({mk_frame(1)}, {span(0, 5, {})}, "v", 20.0, 2),
                        DataError);
    }
}

TEST_CASE("stratified split") {
    auto mk_pairs = [](const std::map<std::string, size_t>& strata) {
        std::vector<ImageTextPair> ps;
        size_t k = 0;
        for (const auto& [stratum, n] : strata)
            for (size_t i = 0; i < n; ++i) {
                ImageTextPair p;
                p.pair_id = stratum + std::to_string(i);
                p.video_id = "p" + std::to_string(k / 3) + "-v" + std::to_string(k);
                p.stratum = stratum;
                p.report = {"r"};
                ++k;
                ps.push_back(p);
            }
        return ps;
    };

    SUBCASE("per-stratum 8:2 with floor") {
        auto ps = mk_pairs({{"a", 5}, {"b", 10}});
        SplitResult r = stratified_split(ps, 0.8, 3);
        CHECK(r.train.size() == 4 + 8);
        CHECK(r.test.size() == 1 + 2);
        CHECK(r.warnings.empty());
    }
    SUBCASE("published corpus arithmetic") {
        auto [tr, te] = split_counts(2314, 0.8);
        CHECK(tr == 1851);
        CHECK(te == 463);
    }
    SUBCASE("partition: union is input, intersection empty") {
        auto ps = mk_pairs({{"a", 7}, {"b", 4}, {"c", 9}});
        SplitResult r = stratified_split(ps, 0.8, 9);
        CHECK(r.train.size() + r.test.size() == ps.size());
        std::set<std::string> ids;
        for (const auto& p : r.train) ids.insert(p.pair_id);
        for (const auto& p : r.test) ids.insert(p.pair_id);
        CHECK(ids.size() == ps.size());
    }
    SUBCASE("tiny stratum routes to train with a warning") {
        auto ps = mk_pairs({{"a", 1}, {"b", 5}});
        SplitResult r = stratified_split(ps, 0.8, 1);
        REQUIRE(r.warnings.size() == 1);
        CHECK(r.warnings[0].find("'a'") != std::string::npos);
        bool in_train = false;
        for (const auto& p : r.train)
            if (p.stratum == "a") in_train = true;
        CHECK(in_train);
        for (const auto& p : r.test) CHECK(p.stratum != "a");
    }
    SUBCASE("seeded shuffle is deterministic") {
        auto ps = mk_pairs({{"a", 20}});
        SplitResult r1 = stratified_split(ps, 0.8, 5);
        SplitResult r2 = stratified_split(ps, 0.8, 5);
        REQUIRE(r1.train.size() == r2.train.size());
        for (size_t i = 0; i < r1.train.size(); ++i)
            CHECK(r1.train[i].pair_id == r2.train[i].pair_id);
        SplitResult r3 = stratified_split(ps, 0.8, 6);
        bool same = r1.train.size() == r3.train.size();
        if (same)
            for (size_t i = 0; i < r1.train.size(); ++i)
                same = same && r1.train[i].pair_id == r3.train[i].pair_id;
        CHECK_FALSE(same);
    }
    SUBCASE("patient-level mode never splits a patient") {
        auto ps = mk_pairs({{"a", 12}});
        SplitResult r = stratified_split(ps, 0.8, 2, SplitMode::patient_level);
        std::set<std::string> train_patients, test_patients;
        for (const auto& p : r.train) train_patients.insert(patient_of(p.video_id));
        for (const auto& p : r.test) test_patients.insert(patient_of(p.video_id));
        for (const auto& pt : test_patients) CHECK(train_patients.count(pt) == 0);
        CHECK(r.train.size() + r.test.size() == ps.size());
    }
    SUBCASE("empty input is a data error") {
        CHECK_THROWS_AS(stratified_split({}, 0.8, 1), DataError);
    }
    SUBCASE("fraction bounds") {
        auto ps = mk_pairs({{"a", 4}});
        CHECK_THROWS_AS(stratified_split(ps, 0.0, 1), ConfigError);
        CHECK_THROWS_AS(stratified_split(ps, 1.0, 1), ConfigError);
    }
}

TEST_CASE("synthetic corpus generator") {
    SynthOptions small;
    small.videos = 6;
    small.frames_per_video = 12;
    small.seed = 21;

    SUBCASE("same seed reproduces bitwise") {
        auto a = synth_corpus(small);
        auto b = synth_corpus(small);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].seq.video_id == b[i].seq.video_id);
            CHECK(a[i].stratum == b[i].stratum);
            REQUIRE(a[i].seq.frames.size() == b[i].seq.frames.size());
            for (size_t f = 0; f < a[i].seq.frames.size(); ++f) {
                CHECK(std::memcmp(&a[i].seq.frames[f].timestamp,
                                  &b[i].seq.frames[f].timestamp, sizeof(double)) == 0);
                REQUIRE(a[i].seq.frames[f].patches.size() ==
                        b[i].seq.frames[f].patches.size());
                CHECK(std::memcmp(a[i].seq.frames[f].patches.data(),
                                  b[i].seq.frames[f].patches.data(),
                                  a[i].seq.frames[f].patches.size() * sizeof(double)) == 0);
            }
        }
    }
    SUBCASE("sequences satisfy their own invariants") {
        for (const auto& v : synth_corpus(small)) CHECK_NOTHROW(v.seq.validate());
    }
    SUBCASE("linear probe on channel 0 recovers the stratum exactly") {
        SynthOptions opt;
        opt.videos = 32;
        opt.seed = 33;
        for (const auto& v : synth_corpus(opt)) {
            size_t want = 0;
            for (size_t t = 0; t < polyp_type_labels().size(); ++t)
                if (polyp_type_labels()[t] == v.stratum) want = t;
            for (const auto& f : v.seq.frames) {
                if (!f.polyp_present) continue;
                double mean = 0.0;
                size_t n = f.patches.size() / opt.patch_dim;
                for (size_t p = 0; p < n; ++p) mean += f.patches[p * opt.patch_dim];
                mean /= static_cast<double>(n);
                auto got = static_cast<size_t>(std::lround(mean / 0.25)) - 1;
                CHECK(got == want);
            }
        }
    }
    SUBCASE("report templates spell out the stratum") {
        for (const auto& v : synth_corpus(small))
            for (const auto& s : v.sentences) {
                CHECK(std::find(s.tokens.begin(), s.tokens.end(), v.stratum) !=
                      s.tokens.end());
                CHECK(s.stratum == v.stratum);
            }
    }
}

TEST_CASE("full pipeline conservation and determinism") {
    SUBCASE("default generator yields a corpus near five hundred pairs") {
        auto videos = synth_corpus();
        PrepResult r = run_prep(videos);
        CHECK(r.counts.input_frames == 64 * 48);
        CHECK(r.pairs.size() >= 380);
        CHECK(r.pairs.size() <= 640);
        // every input frame is accounted for exactly once
        CHECK(r.pairs.size() + r.ledger.size() == r.counts.input_frames);
        CHECK(r.split.train.size() + r.split.test.size() == r.pairs.size());
        // all four strata present and split per stratum
        std::set<std::string> strata;
        for (const auto& p : r.pairs) strata.insert(p.stratum);
        CHECK(strata.size() == polyp_type_labels().size());
    }

    SUBCASE("fuzzed sequences preserve the frame partition") {
        Rng rng(77);
        for (int trial = 0; trial < 5; ++trial) {
            // ~1000 frames across ragged videos, randomized quality and spans
            SynthOptions opt;
            opt.videos = 10;
            opt.frames_per_video = 100;
            opt.duration = 37.5;
            opt.patch_rows = 2;
            opt.patch_cols = 2;
            opt.patch_dim = 3;
            opt.seed = rng.next_u64();
            opt.low_quality_fraction = rng.uniform(0.0, 0.9);
            opt.no_polyp_fraction = rng.uniform(0.0, 0.9);
            auto videos = synth_corpus(opt);
            PrepOptions popt;
            popt.sampling.target_frames = 1 + static_cast<size_t>(rng.below(60));
            popt.min_quality = rng.uniform(0.0, 1.0);
            PrepResult r = run_prep(videos, popt);
            CHECK(r.counts.input_frames == 1000);
            CHECK(r.pairs.size() + r.ledger.size() == r.counts.input_frames);
            std::map<std::string, size_t> reasons;
            for (const auto& l : r.ledger) ++reasons[l.reason];
            size_t known = reasons["not-sampled"] + reasons["low-quality"] +
                           reasons["no-polyp"] + reasons["unaligned"];
            CHECK(known == r.ledger.size());
            // per-video conservation too
            std::map<std::string, size_t> per_video;
            for (const auto& p : r.pairs) ++per_video[p.video_id];
            for (const auto& l : r.ledger) ++per_video[l.video_id];
            for (const auto& v : videos)
                CHECK(per_video[v.seq.video_id] == v.seq.frames.size());
        }
    }

    SUBCASE("pipeline output bytes are reproducible") {
        SynthOptions opt;
        opt.videos = 8;
        opt.seed = 5;
        auto run_once = [&] {
            PrepResult r = run_prep(synth_corpus(opt));
            std::ostringstream pairs, ledger, manifest;
            save_pairs(pairs, r.pairs);
            save_ledger(ledger, r.ledger);
            save_split_manifest(manifest, r.split, 17);
            return pairs.str() + "\x01" + ledger.str() + "\x01" + manifest.str();
        };
        CHECK(run_once() == run_once());
    }
}

TEST_CASE("pair file round trip") {
    SynthOptions opt;
    opt.videos = 4;
    opt.frames_per_video = 16;
    opt.patch_rows = 2;
    opt.patch_cols = 2;
    opt.seed = 9;
    PrepResult r = run_prep(synth_corpus(opt));
    REQUIRE(!r.pairs.empty());

    std::stringstream ss;
    save_pairs(ss, r.pairs);
    auto back = load_pairs(ss, "mem");
    REQUIRE(back.size() == r.pairs.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].pair_id == r.pairs[i].pair_id);
        CHECK(back[i].report == r.pairs[i].report);
        CHECK(back[i].stratum == r.pairs[i].stratum);
        REQUIRE(back[i].patches.size() == r.pairs[i].patches.size());
        // JSON double serialization must round-trip exactly
        CHECK(std::memcmp(back[i].patches.data(), r.pairs[i].patches.data(),
                          back[i].patches.size() * sizeof(double)) == 0);
    }

    SUBCASE("schema line is checked") {
        std::stringstream bad("#ldp-other v1\n");
        CHECK_THROWS_WITH_AS(load_pairs(bad, "f"), doctest::Contains("schema"), DataError);
    }
    SUBCASE("malformed record names its line") {
        std::stringstream bad("#ldp-pairs v1\nnot json\n");
        CHECK_THROWS_WITH_AS(load_pairs(bad, "f"), doctest::Contains(":2:"), DataError);
    }
    SUBCASE("missing field names its line") {
        std::stringstream bad("#ldp-pairs v1\n{\"id\": \"x\"}\n");
        CHECK_THROWS_WITH_AS(load_pairs(bad, "f"), doctest::Contains(":2:"), DataError);
    }
}

TEST_CASE("prompt presets load as normalized token strings") {
    std::stringstream ss("  describe the\n endoscopic findings .\n\n");
    CHECK(load_prompt_preset(ss, "mem") == "describe the endoscopic findings .");
    std::stringstream empty("   \n \n");
    CHECK_THROWS_AS(load_prompt_preset(empty, "mem"), DataError);
}
