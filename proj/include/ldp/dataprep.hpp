#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace ldp {

struct Frame {
    double timestamp = 0.0;
    double quality = 1.0;  // [0,1]
    bool polyp_present = true;
    std::vector<double> patches;  // row-major patch grid payload
};

struct FrameSequence {
    std::string video_id;
    double duration = 0.0;  // seconds
    size_t patch_dim = 1;   // channels per patch in each frame payload
    std::vector<Frame> frames;

    // timestamps strictly increasing within [0, duration], qualities in [0,1],
    // payloads tiled by patch_dim
    void validate() const;
};

struct ImageTextPair {
    std::string pair_id;
    std::vector<double> patches;
    size_t patch_dim = 1;
    std::vector<std::string> report;  // nonempty
    std::string stratum;
    std::string video_id;
    double timestamp = 0.0;
};

struct SamplingOptions {
    size_t target_frames = 24;
    double min_rate = 0.1;  // fps
    double max_rate = 2.0;  // fps
};

double sampling_rate(double duration, const SamplingOptions& opt);
std::vector<size_t> sample_keyframe_indices(const FrameSequence& seq, const SamplingOptions& opt = {});
std::vector<Frame> sample_keyframes(const FrameSequence& seq, const SamplingOptions& opt = {});

struct Rejection {
    std::string video_id;
    double timestamp = 0.0;
    std::string reason;  // "low-quality" | "no-polyp" | "unaligned" | "not-sampled"
};

struct FilterResult {
    std::vector<Frame> retained;
    std::vector<Rejection> rejected;
};

FilterResult quality_filter(const std::vector<Frame>& frames, const std::string& video_id,
                            double min_quality, bool require_polyp);

struct SentenceSpan {
    double start = 0.0;
    double end = 0.0;  // closed interval [start, end]
    std::vector<std::string> tokens;
    std::string stratum;
};

struct AlignResult {
    std::vector<ImageTextPair> pairs;
    std::vector<Rejection> unaligned;
    size_t midpoint_ties = 0;  // resolved to the earlier span start
};

AlignResult align_frames_to_sentences(const std::vector<Frame>& frames,
                                      const std::vector<SentenceSpan>& sentences,
                                      const std::string& video_id, double duration,
                                      size_t patch_dim);

enum class SplitMode {
    pair_level,     // default; mirrors the 8:2 stratified protocol
    patient_level,  // leakage-safe variant: whole patients move together
};

struct SplitResult {
    std::vector<ImageTextPair> train;
    std::vector<ImageTextPair> test;
    std::vector<std::string> warnings;  // strata too small to split
};

SplitResult stratified_split(const std::vector<ImageTextPair>& pairs, double train_fraction,
                             uint64_t seed, SplitMode mode = SplitMode::pair_level);
std::pair<size_t, size_t> split_counts(size_t n, double train_fraction);

// video id "p07-v12" groups by patient "p07"; ids without a dash are their own patient
std::string patient_of(const std::string& video_id);

struct SynthOptions {
    size_t videos = 64;
    size_t frames_per_video = 48;
    double duration = 60.0;
    size_t patch_rows = 8;
    size_t patch_cols = 8;
    size_t patch_dim = 4;
    uint64_t seed = 11;
    double low_quality_fraction = 0.3;
    double no_polyp_fraction = 0.2;
    double quality_threshold = 0.5;  // generator draws qualities around this split
};

struct SynthVideo {
    FrameSequence seq;
    std::vector<SentenceSpan> sentences;
    std::string stratum;  // polyp type label driving the patch statistics
};

// Patch statistics encode (type, location, size) and the sentence templates
// spell the same attributes out, so the image→text mapping is learnable by
// construction. Channel 0 carries the stratum: mean(channel 0) sits at
// 0.25*(type index+1) with sub-0.01 noise, recoverable by a linear probe.
std::vector<SynthVideo> synth_corpus(const SynthOptions& opt = {});

const std::vector<std::string>& polyp_type_labels();

struct PrepOptions {
    SamplingOptions sampling;
    double min_quality = 0.5;
    bool require_polyp = true;
    double train_fraction = 0.8;
    uint64_t split_seed = 17;
    SplitMode split_mode = SplitMode::pair_level;
};

struct PrepCounts {
    size_t input_frames = 0;
    size_t keyframes = 0;
    size_t retained = 0;
    size_t paired = 0;
};

struct PrepResult {
    std::vector<ImageTextPair> pairs;
    std::vector<Rejection> ledger;  // not-sampled, low-quality, no-polyp, unaligned
    SplitResult split;
    PrepCounts counts;
};

// full pipeline; every input frame lands in exactly one of pairs/ledger
PrepResult run_prep(const std::vector<SynthVideo>& videos, const PrepOptions& opt = {});

// "#ldp-pairs v1": one JSON record per line
void save_pairs(std::ostream& out, const std::vector<ImageTextPair>& pairs);
std::vector<ImageTextPair> load_pairs(std::istream& in, const std::string& source_name);

// "#ldp-ledger v1": whitespace rows (video, timestamp, reason)
void save_ledger(std::ostream& out, const std::vector<Rejection>& ledger);

// "#ldp-split v1": header counts plus (side, pair id) rows
void save_split_manifest(std::ostream& out, const SplitResult& split, uint64_t seed);

// prompt preset file: free text, normalized to single-spaced tokens
std::string load_prompt_preset(std::istream& in, const std::string& source_name);

}  // namespace ldp
