#include "ldp/dataprep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "ldp/errors.hpp"
#include "ldp/rng.hpp"

namespace ldp {

namespace {

using nlohmann::json;

std::string fmt_ts(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", t);
    return buf;
}

std::string join(const std::vector<std::string>& toks) {
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) s += ' ';
        s += toks[i];
    }
    return s;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream iss(s);
    std::vector<std::string> out;
    std::string w;
    while (iss >> w) out.push_back(w);
    return out;
}

}  // namespace

void FrameSequence::validate() const {
    if (frames.empty()) throw DataError("frame sequence '" + video_id + "' is empty");
    if (!(duration > 0.0))
        throw DataError("frame sequence '" + video_id + "' has nonpositive duration");
    if (patch_dim < 1)
        throw DataError("frame sequence '" + video_id + "' has zero patch_dim");
    double prev = -1.0;
    for (const auto& f : frames) {
        if (!(f.timestamp > prev))
            throw DataError("frame sequence '" + video_id +
                            "': timestamps must be strictly increasing");
        if (f.timestamp < 0.0 || f.timestamp > duration)
            throw DataError("frame sequence '" + video_id + "': timestamp " +
                            fmt_ts(f.timestamp) + " outside [0," + fmt_ts(duration) + "]");
        if (f.quality < 0.0 || f.quality > 1.0)
            throw DataError("frame sequence '" + video_id + "': quality outside [0,1]");
        if (f.patches.size() % patch_dim != 0)
            throw DataError("frame sequence '" + video_id +
                            "': patch payload does not tile by patch_dim");
        prev = f.timestamp;
    }
}

double sampling_rate(double duration, const SamplingOptions& opt) {
    if (opt.target_frames < 1) throw ConfigError("target_frames must be at least 1");
    if (!(opt.min_rate > 0.0) || !(opt.max_rate >= opt.min_rate))
        throw ConfigError("sampling rates must satisfy 0 < min_rate <= max_rate");
    if (!(duration > 0.0)) throw DataError("duration must be positive");
    double rate = static_cast<double>(opt.target_frames) / duration;
    return std::clamp(rate, opt.min_rate, opt.max_rate);
}

std::vector<size_t> sample_keyframe_indices(const FrameSequence& seq,
                                            const SamplingOptions& opt) {
    seq.validate();
    const double rate = sampling_rate(seq.duration, opt);
    // the grid count collapses to target_frames when the rate is unclamped;
    // the epsilon absorbs one-ulp shortfalls in duration*rate
    const size_t n_grid =
        std::max<size_t>(1, static_cast<size_t>(std::floor(seq.duration * rate + 1e-9)));

    std::vector<bool> picked(seq.frames.size(), false);
    for (size_t k = 0; k < n_grid; ++k) {
        const double target = (static_cast<double>(k) + 0.5) / rate;
        size_t best = 0;
        double best_gap = std::abs(seq.frames[0].timestamp - target);
        for (size_t i = 1; i < seq.frames.size(); ++i) {
            double gap = std::abs(seq.frames[i].timestamp - target);
            if (gap < best_gap) {
                best = i;
                best_gap = gap;
            }
        }
        picked[best] = true;
    }
    std::vector<size_t> out;
    for (size_t i = 0; i < picked.size(); ++i)
        if (picked[i]) out.push_back(i);
    return out;
}

std::vector<Frame> sample_keyframes(const FrameSequence& seq, const SamplingOptions& opt) {
    std::vector<Frame> out;
    for (size_t i : sample_keyframe_indices(seq, opt)) out.push_back(seq.frames[i]);
    return out;
}

FilterResult quality_filter(const std::vector<Frame>& frames, const std::string& video_id,
                            double min_quality, bool require_polyp) {
    if (min_quality < 0.0 || min_quality > 1.0)
        throw ConfigError("min_quality must lie in [0,1]");
    FilterResult res;
    for (const auto& f : frames) {
        if (f.quality < min_quality)
            res.rejected.push_back({video_id, f.timestamp, "low-quality"});
        else if (require_polyp && !f.polyp_present)
            res.rejected.push_back({video_id, f.timestamp, "no-polyp"});
        else
            res.retained.push_back(f);
    }
    return res;
}

AlignResult align_frames_to_sentences(const std::vector<Frame>& frames,
                                      const std::vector<SentenceSpan>& sentences,
                                      const std::string& video_id, double duration,
                                      size_t patch_dim) {
    for (const auto& s : sentences) {
        if (s.tokens.empty()) throw DataError("sentence span with empty text");
        if (!(s.end >= s.start)) throw DataError("sentence span ends before it starts");
        if (s.start < 0.0 || s.end > duration)
            throw DataError("sentence span [" + fmt_ts(s.start) + "," + fmt_ts(s.end) +
                            "] outside [0," + fmt_ts(duration) + "]");
    }

    AlignResult res;
    size_t next_id = 0;
    for (const auto& f : frames) {
        const SentenceSpan* best = nullptr;
        double best_gap = 0.0;
        for (const auto& s : sentences) {
            if (f.timestamp < s.start || f.timestamp > s.end) continue;
            double gap = std::abs(f.timestamp - 0.5 * (s.start + s.end));
            if (!best || gap < best_gap) {
                best = &s;
                best_gap = gap;
            } else if (gap == best_gap) {
                ++res.midpoint_ties;
                if (s.start < best->start) best = &s;
            }
        }
        if (!best) {
            res.unaligned.push_back({video_id, f.timestamp, "unaligned"});
            continue;
        }
        ImageTextPair p;
        p.pair_id = video_id + "#" + std::to_string(next_id++);
        p.patches = f.patches;
        p.patch_dim = patch_dim;
        p.report = best->tokens;
        p.stratum = best->stratum;
        p.video_id = video_id;
        p.timestamp = f.timestamp;
        res.pairs.push_back(std::move(p));
    }
    return res;
}

std::pair<size_t, size_t> split_counts(size_t n, double train_fraction) {
    size_t train = static_cast<size_t>(
        std::floor(train_fraction * static_cast<double>(n) + 1e-9));
    return {train, n - train};
}

std::string patient_of(const std::string& video_id) {
    auto dash = video_id.find('-');
    return dash == std::string::npos ? video_id : video_id.substr(0, dash);
}

SplitResult stratified_split(const std::vector<ImageTextPair>& pairs, double train_fraction,
                             uint64_t seed, SplitMode mode) {
    if (pairs.empty()) throw DataError("nothing to split: empty pair list");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
        throw ConfigError("train fraction must lie strictly between 0 and 1");

    std::map<std::string, std::vector<size_t>> by_stratum;
    for (size_t i = 0; i < pairs.size(); ++i) by_stratum[pairs[i].stratum].push_back(i);

    SplitResult res;
    Rng rng(seed);
    for (auto& [stratum, idxs] : by_stratum) {
        if (mode == SplitMode::pair_level) {
            if (idxs.size() < 2) {
                res.warnings.push_back("stratum '" + stratum + "' has " +
                                       std::to_string(idxs.size()) +
                                       " pair(s); routed wholly to train");
                for (size_t i : idxs) res.train.push_back(pairs[i]);
                continue;
            }
            rng.shuffle(idxs);
            size_t n_train = split_counts(idxs.size(), train_fraction).first;
            for (size_t k = 0; k < idxs.size(); ++k)
                (k < n_train ? res.train : res.test).push_back(pairs[idxs[k]]);
        } else {
            std::map<std::string, std::vector<size_t>> by_patient;
            for (size_t i : idxs) by_patient[patient_of(pairs[i].video_id)].push_back(i);
            std::vector<std::string> patients;
            for (const auto& [p, v] : by_patient) patients.push_back(p);
            if (patients.size() < 2) {
                res.warnings.push_back("stratum '" + stratum + "' has " +
                                       std::to_string(patients.size()) +
                                       " patient(s); routed wholly to train");
                for (size_t i : idxs) res.train.push_back(pairs[i]);
                continue;
            }
            rng.shuffle(patients);
            size_t n_train = split_counts(patients.size(), train_fraction).first;
            for (size_t k = 0; k < patients.size(); ++k)
                for (size_t i : by_patient[patients[k]])
                    (k < n_train ? res.train : res.test).push_back(pairs[i]);
        }
    }
    return res;
}

const std::vector<std::string>& polyp_type_labels() {
    static const std::vector<std::string> labels = {"adenomatous", "hyperplastic", "serrated",
                                                    "inflammatory"};
    return labels;
}

namespace {

const std::vector<std::string> kLocations = {"ascending", "transverse", "descending", "sigmoid",
                                             "rectum"};
const std::vector<std::string> kSizes = {"small", "medium", "large"};
const int kMmLo[3] = {3, 6, 10};
const int kMmHi[3] = {5, 9, 18};

}  // namespace

std::vector<SynthVideo> synth_corpus(const SynthOptions& opt) {
    if (opt.videos < 1) throw ConfigError("need at least one video");
    if (opt.frames_per_video < 1) throw ConfigError("need at least one frame per video");
    if (!(opt.duration > 0.0)) throw ConfigError("duration must be positive");
    if (opt.patch_rows < 1 || opt.patch_cols < 1 || opt.patch_dim < 1)
        throw ConfigError("patch geometry must be nonzero");

    Rng base(opt.seed);
    std::vector<SynthVideo> out;
    out.reserve(opt.videos);
    for (size_t vi = 0; vi < opt.videos; ++vi) {
        Rng rng = base.fork(vi);
        SynthVideo v;

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "p%02zu-v%02zu", vi / 2, vi);
        v.seq.video_id = idbuf;
        v.seq.duration = opt.duration;
        v.seq.patch_dim = opt.patch_dim;

        const size_t type = rng.below(polyp_type_labels().size());
        const size_t loc = rng.below(kLocations.size());
        const size_t size_lvl = rng.below(kSizes.size());
        const int mm = kMmLo[size_lvl] +
                       static_cast<int>(rng.below(static_cast<uint64_t>(
                           kMmHi[size_lvl] - kMmLo[size_lvl] + 1)));
        v.stratum = polyp_type_labels()[type];

        const double spacing = opt.duration / static_cast<double>(opt.frames_per_video);
        const size_t n_patch = opt.patch_rows * opt.patch_cols;
        for (size_t fi = 0; fi < opt.frames_per_video; ++fi) {
            Frame f;
            // jitter of ±0.3 spacings keeps timestamps strictly increasing
            f.timestamp =
                (static_cast<double>(fi) + 0.5 + 0.3 * (2.0 * rng.uniform() - 1.0)) * spacing;
            f.quality = rng.uniform() < opt.low_quality_fraction
                            ? rng.uniform(0.0, opt.quality_threshold)
                            : rng.uniform(opt.quality_threshold, 1.0);
            f.polyp_present = rng.uniform() >= opt.no_polyp_fraction;

            f.patches.resize(n_patch * opt.patch_dim);
            for (size_t p = 0; p < n_patch; ++p) {
                const size_t row = p / opt.patch_cols;
                for (size_t c = 0; c < opt.patch_dim; ++c) {
                    double base_val = 0.0;
                    if (f.polyp_present) {
                        if (c == 0)
                            base_val = 0.25 * static_cast<double>(type + 1);
                        else if (c == 1)
                            base_val = row == loc % opt.patch_rows ? 1.0 : 0.0;
                        else if (c == 2)
                            base_val = 0.3 * static_cast<double>(size_lvl + 1);
                        else if (c == 3)
                            base_val = static_cast<double>(mm) / 20.0;
                    }
                    f.patches[p * opt.patch_dim + c] = base_val + rng.gaussian(0.0, 0.01);
                }
            }
            v.seq.frames.push_back(std::move(f));
        }

        const std::string& ty = polyp_type_labels()[type];
        const std::string& lo = kLocations[loc];
        const std::string& sz = kSizes[size_lvl];
        SentenceSpan a;
        a.start = 0.15 * opt.duration;
        a.end = 0.45 * opt.duration;
        a.tokens = {"a",  sz,   ty,  "polyp", "of", std::to_string(mm),
                    "mm", "in", "the", lo,    "colon"};
        a.stratum = v.stratum;
        SentenceSpan b;
        b.start = 0.6 * opt.duration;
        b.end = 0.85 * opt.duration;
        b.tokens = {"the", lo, "segment", "shows", "a", sz, ty, "lesion"};
        b.stratum = v.stratum;
        v.sentences = {a, b};
        out.push_back(std::move(v));
    }
    return out;
}

PrepResult run_prep(const std::vector<SynthVideo>& videos, const PrepOptions& opt) {
    if (videos.empty()) throw DataError("no videos to prepare");
    PrepResult res;
    for (const auto& v : videos) {
        v.seq.validate();
        res.counts.input_frames += v.seq.frames.size();

        auto idxs = sample_keyframe_indices(v.seq, opt.sampling);
        res.counts.keyframes += idxs.size();
        std::vector<bool> picked(v.seq.frames.size(), false);
        for (size_t i : idxs) picked[i] = true;
        for (size_t i = 0; i < v.seq.frames.size(); ++i)
            if (!picked[i])
                res.ledger.push_back(
                    {v.seq.video_id, v.seq.frames[i].timestamp, "not-sampled"});

        std::vector<Frame> keys;
        for (size_t i : idxs) keys.push_back(v.seq.frames[i]);
        FilterResult fr = quality_filter(keys, v.seq.video_id, opt.min_quality,
                                         opt.require_polyp);
        res.counts.retained += fr.retained.size();
        for (auto& r : fr.rejected) res.ledger.push_back(std::move(r));

        AlignResult ar = align_frames_to_sentences(fr.retained, v.sentences, v.seq.video_id,
                                                   v.seq.duration, v.seq.patch_dim);
        res.counts.paired += ar.pairs.size();
        for (auto& p : ar.pairs) res.pairs.push_back(std::move(p));
        for (auto& r : ar.unaligned) res.ledger.push_back(std::move(r));
    }
    if (!res.pairs.empty())
        res.split = stratified_split(res.pairs, opt.train_fraction, opt.split_seed,
                                     opt.split_mode);
    return res;
}

void save_pairs(std::ostream& out, const std::vector<ImageTextPair>& pairs) {
    out << "#ldp-pairs v1\n";
    for (const auto& p : pairs) {
        json j;
        j["id"] = p.pair_id;
        j["video"] = p.video_id;
        j["t"] = p.timestamp;
        j["stratum"] = p.stratum;
        j["patch_dim"] = p.patch_dim;
        j["report"] = join(p.report);
        j["patches"] = p.patches;
        out << j.dump() << "\n";
    }
}

std::vector<ImageTextPair> load_pairs(std::istream& in, const std::string& source_name) {
    std::string line;
    size_t line_no = 1;
    if (!std::getline(in, line) || line != "#ldp-pairs v1")
        throw DataError(source_name + ":1: expected schema line '#ldp-pairs v1'");
    std::vector<ImageTextPair> out;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw DataError(source_name + ":" + std::to_string(line_no) +
                            ": malformed pair record");
        try {
            ImageTextPair p;
            p.pair_id = j.at("id").get<std::string>();
            p.video_id = j.at("video").get<std::string>();
            p.timestamp = j.at("t").get<double>();
            p.stratum = j.at("stratum").get<std::string>();
            p.patch_dim = j.at("patch_dim").get<size_t>();
            p.report = split_ws(j.at("report").get<std::string>());
            p.patches = j.at("patches").get<std::vector<double>>();
            if (p.report.empty())
                throw DataError("pair '" + p.pair_id + "' has an empty report");
            if (p.patch_dim == 0 || p.patches.size() % p.patch_dim != 0)
                throw DataError("pair '" + p.pair_id + "' patch payload does not tile by dim");
            out.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void save_ledger(std::ostream& out, const std::vector<Rejection>& ledger) {
    out << "#ldp-ledger v1\n";
    for (const auto& r : ledger)
        out << r.video_id << " " << fmt_ts(r.timestamp) << " " << r.reason << "\n";
}

void save_split_manifest(std::ostream& out, const SplitResult& split, uint64_t seed) {
    out << "#ldp-split v1\n";
    out << "# seed " << seed << " train " << split.train.size() << " test "
        << split.test.size() << "\n";
    for (const auto& w : split.warnings) out << "# warning: " << w << "\n";
    for (const auto& p : split.train) out << "train " << p.pair_id << "\n";
    for (const auto& p : split.test) out << "test " << p.pair_id << "\n";
}

std::string load_prompt_preset(std::istream& in, const std::string& source_name) {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto toks = split_ws(text);
    if (toks.empty()) throw DataError(source_name + ": prompt preset is empty");
    return join(toks);
}

}  // namespace ldp
