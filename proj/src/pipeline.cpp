#include "ldp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ldp/checkpoint.hpp"
#include "ldp/clinical.hpp"
#include "ldp/errors.hpp"
#include "ldp/metrics.hpp"
#include "ldp/optim.hpp"

namespace ldp {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string join_tokens(const std::vector<std::string>& toks) {
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) s += ' ';
        s += toks[i];
    }
    return s;
}

class Timer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << content;
}

void add_output(RunManifest& m, const std::string& dir, const std::string& base) {
    m.outputs[base] = hex_digest(fnv1a64_file(dir + "/" + base));
}

void add_input(RunManifest& m, const std::string& path) {
    m.inputs[path] = hex_digest(fnv1a64_file(path));
}

std::string or_default(const std::string& configured, const std::string& dir,
                       const char* base) {
    return configured.empty() ? dir + "/" + base : configured;
}

std::vector<ImageTextPair> load_pairs_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open pair file '" + path + "'");
    return load_pairs(in, path);
}

std::string resolve_prompt(const PipelineConfig& cfg) {
    if (cfg.io.prompt_preset.empty()) return "describe the endoscopic findings .";
    std::ifstream in(cfg.io.prompt_preset, std::ios::binary);
    if (!in) throw ConfigError("cannot open prompt preset '" + cfg.io.prompt_preset + "'");
    return load_prompt_preset(in, cfg.io.prompt_preset);
}

Tokenizer corpus_tokenizer(const std::vector<ImageTextPair>& pairs, const std::string& prompt,
                           size_t vocab_size) {
    std::vector<std::string> texts;
    texts.reserve(pairs.size() + 1);
    for (const auto& p : pairs) texts.push_back(join_tokens(p.report));
    texts.push_back(prompt);
    return Tokenizer::train(texts, vocab_size);
}

// adapter checkpoint enriched with everything eval needs to reconstruct the
// text side: the lora keys the plain loader expects, plus tokenizer + prompt
void save_run_checkpoint(const std::string& path, const LoraState& state,
                         const Tokenizer& tok, const std::string& prompt,
                         const PipelineConfig& cfg, const std::string& phase,
                         const json& extra) {
    const auto& lc = state.config();
    Checkpoint ckpt;
    ckpt.kind = "adapter";
    ckpt.meta = {{"rank", lc.rank},
                 {"alpha", lc.alpha},
                 {"targets", lc.targets},
                 {"include_encoder", lc.include_encoder},
                 {"include_adapter", lc.include_adapter},
                 {"dropout", lc.dropout},
                 {"init_std", lc.init_std},
                 {"seed", lc.seed},
                 {"tokenizer_words", tok.words()},
                 {"prompt", prompt},
                 {"model", config_to_json(cfg)["model"]},
                 {"phase", phase},
                 {"run", extra}};
    ckpt.tensors = state.trainable_params();
    save_checkpoint(path, ckpt);
}

std::string trace_text(const std::vector<double>& losses) {
    std::string out = "#ldp-trace v1\n";
    for (size_t i = 0; i < losses.size(); ++i)
        out += std::to_string(i + 1) + " " + fmt_full(losses[i]) + "\n";
    return out;
}

MetricReport report_with_options(const EvalCorpus& corpus, const MetricConfig& mc) {
    BleuOptions bo;
    bo.sentence_averaged = mc.sentence_averaged_bleu;
    CiderOptions co;
    co.length_penalty = mc.cider_length_penalty;
    MetricReport r;
    r.bleu1 = bleu(corpus, 1, bo);
    r.bleu2 = bleu(corpus, 2, bo);
    r.bleu3 = bleu(corpus, 3, bo);
    r.bleu4 = bleu(corpus, 4, bo);
    r.meteor = meteor_lite(corpus);
    r.rouge_l = rouge_l(corpus);
    r.cider = cider(corpus, co);
    return r;
}

size_t text_vocab_limit(const Tokenizer& tok) {
    return Tokenizer::kWordBase + tok.words().size();
}

// greedy generations for every pair, scored against the expert reports
std::pair<MetricReport, EvalCorpus> eval_on_pairs(const MicroModel& model,
                                                  const Tokenizer& tok,
                                                  const std::string& prompt,
                                                  const std::vector<ImageTextPair>& pairs,
                                                  const MetricConfig& mc) {
    ad::NoGradGuard guard;
    std::vector<int> prompt_ids = tok.encode(prompt, true, false);
    EvalCorpus corpus;
    for (const auto& p : pairs) {
        EvalEntry e;
        e.id = p.pair_id;
        ad::Tensor px = patches_tensor(p, model.config());
        auto gen = model.generate(px, prompt_ids, mc.eval_max_new, Tokenizer::kEos,
                                  text_vocab_limit(tok));
        e.hyp = metric_tokenize(tok.decode(gen));
        e.refs = {metric_tokenize(join_tokens(p.report))};
        corpus.push_back(std::move(e));
    }
    return {report_with_options(corpus, mc), corpus};
}

json report_json(const MetricReport& r) {
    return {{"bleu1", r.bleu1},   {"bleu2", r.bleu2},   {"bleu3", r.bleu3},
            {"bleu4", r.bleu4},   {"meteor", r.meteor}, {"rouge_l", r.rouge_l},
            {"cider", r.cider}};
}

struct PhaseSetup {
    MicroModel* policy = nullptr;
    LoraState state;
    Tokenizer tok;
    std::string prompt;
};

}  // namespace

std::string hex_digest(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json RunManifest::to_json() const {
    return {{"command", command},
            {"config_hash", config_hash},
            {"seed", seed},
            {"inputs", inputs},
            {"outputs", outputs},
            {"wall_time_seconds", wall_time_seconds},
            {"summary", summary}};
}

void write_manifest_atomic(const std::string& path, const RunManifest& m) {
    const std::string tmp = path + ".tmp";
    write_text(tmp, m.to_json().dump(2) + "\n");
    fs::rename(tmp, path);
}

RunManifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("manifest '" + path + "' is not valid JSON");
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.seed = j.at("seed").get<uint64_t>();
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.wall_time_seconds = j.at("wall_time_seconds").get<double>();
        m.summary = j.at("summary");
    } catch (const json::exception& e) {
        throw DataError("manifest '" + path + "' malformed: " + e.what());
    }
    return m;
}

ad::Tensor patches_tensor(const ImageTextPair& pair, const ModelConfig& model) {
    const size_t want = model.n_patches() * model.patch_dim;
    if (pair.patches.size() != want)
        throw DataError("pair '" + pair.pair_id + "' carries " +
                        std::to_string(pair.patches.size()) +
                        " patch values, model expects " + std::to_string(want));
    ad::Tensor t = ad::Tensor::zeros({model.n_patches(), model.patch_dim});
    auto dst = t.mutable_data();
    std::copy(pair.patches.begin(), pair.patches.end(), dst.begin());
    return t;
}

std::vector<SftExample> make_examples(const std::vector<ImageTextPair>& pairs,
                                      const Tokenizer& tok, const std::string& prompt,
                                      const ModelConfig& model) {
    std::vector<int> prompt_ids = tok.encode(prompt, true, false);
    std::vector<SftExample> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        SftExample ex;
        ex.id = p.pair_id;
        ex.patches = patches_tensor(p, model);
        ex.prompt = prompt_ids;
        ex.target = tok.encode(join_tokens(p.report), false, true);
        if (ex.prompt.size() + ex.target.size() > model.max_text_len)
            throw DataError("pair '" + p.pair_id + "' needs " +
                            std::to_string(ex.prompt.size() + ex.target.size()) +
                            " text positions, model allows " +
                            std::to_string(model.max_text_len) +
                            "; raise model.max_text_len");
        out.push_back(std::move(ex));
    }
    return out;
}

namespace cli {

RunManifest cmd_prep(const PipelineConfig& cfg, const std::string& out_dir) {
    Timer timer;
    cfg.validate();
    fs::create_directories(out_dir);

    auto videos = synth_corpus(cfg.synth);
    PrepResult r = run_prep(videos, cfg.prep);

    {
        std::ostringstream ss;
        save_pairs(ss, r.pairs);
        write_text(out_dir + "/pairs.jsonl", ss.str());
    }
    {
        std::ostringstream ss;
        save_pairs(ss, r.split.train);
        write_text(out_dir + "/train.jsonl", ss.str());
    }
    {
        std::ostringstream ss;
        save_pairs(ss, r.split.test);
        write_text(out_dir + "/test.jsonl", ss.str());
    }
    {
        std::ostringstream ss;
        save_ledger(ss, r.ledger);
        write_text(out_dir + "/ledger.txt", ss.str());
    }
    {
        std::ostringstream ss;
        save_split_manifest(ss, r.split, cfg.prep.split_seed);
        write_text(out_dir + "/split.txt", ss.str());
    }

    RunManifest m;
    m.command = "prep";
    m.config_hash = hex_digest(fnv1a64_bytes(config_to_json(cfg).dump().data(),
                                             config_to_json(cfg).dump().size()));
    m.seed = cfg.run_seed;
    for (const char* f : {"pairs.jsonl", "train.jsonl", "test.jsonl", "ledger.txt", "split.txt"})
        add_output(m, out_dir, f);
    m.summary = {{"videos", videos.size()},
                 {"input_frames", r.counts.input_frames},
                 {"keyframes", r.counts.keyframes},
                 {"retained", r.counts.retained},
                 {"pairs", r.pairs.size()},
                 {"train", r.split.train.size()},
                 {"test", r.split.test.size()},
                 {"warnings", r.split.warnings}};
    m.wall_time_seconds = timer.seconds();
    write_manifest_atomic(out_dir + "/manifest.prep.json", m);
    return m;
}

RunManifest cmd_train(const PipelineConfig& cfg, const std::string& out_dir,
                      const std::string& phase) {
    Timer timer;
    cfg.validate();
    if (phase != "sft" && phase != "dpo" && phase != "simpo" && phase != "orpo")
        throw ConfigError("unknown phase '" + phase + "' (expected sft, dpo, simpo, orpo)");
    fs::create_directories(out_dir);

    const std::string train_path = or_default(cfg.io.train_pairs, out_dir, "train.jsonl");
    if (!fs::exists(train_path))
        throw ConfigError("training pairs not found at '" + train_path +
                          "'; run prep first or set io.train_pairs");
    auto pairs = load_pairs_file(train_path);
    if (pairs.empty()) throw DataError("training pair file '" + train_path + "' is empty");

    RunManifest m;
    m.command = "train";
    const std::string cfg_dump = config_to_json(cfg).dump();
    m.config_hash = hex_digest(fnv1a64_bytes(cfg_dump.data(), cfg_dump.size()));
    m.seed = cfg.run_seed;
    add_input(m, train_path);

    const std::string ckpt_base = "adapter." + phase + ".ckpt";
    const std::string trace_base = "trace." + phase + ".txt";

    if (phase == "sft") {
        const std::string prompt = resolve_prompt(cfg);
        Tokenizer tok = corpus_tokenizer(pairs, prompt, cfg.model.vocab_size);
        auto examples = make_examples(pairs, tok, prompt, cfg.model);

        MicroModel model(cfg.model);
        LoraState state = LoraState::inject(model, cfg.lora);
        std::vector<ad::Tensor> params;
        for (auto& [name, t] : state.trainable_params()) params.push_back(t);
        AdamConfig ac;
        ac.lr = cfg.sft.lr;
        Adam opt(params, ac);
        ad::Tape tape;
        for (auto& t : params) tape.watch(t);

        TrainLoopConfig loop;
        loop.batch_size = cfg.sft.batch_size;
        loop.steps = cfg.sft.steps;
        loop.shuffle = cfg.sft.shuffle;
        loop.seed = cfg.sft.seed;
        auto trace = sft_epoch(model, examples, opt, tape, loop);

        json extra = {{"examples", examples.size()},
                      {"steps", trace.size()},
                      {"final_loss", trace.empty() ? 0.0 : trace.back()}};
        save_run_checkpoint(out_dir + "/" + ckpt_base, state, tok, prompt, cfg, phase, extra);
        write_text(out_dir + "/" + trace_base, trace_text(trace));
        m.summary = extra;
    } else {
        // preference phases start from (and for dpo, compare against) the
        // sft checkpoint
        const std::string ref_path = or_default(cfg.io.reference, out_dir, "adapter.sft.ckpt");
        const bool have_ref = fs::exists(ref_path);
        if (phase == "dpo" && !have_ref)
            throw ConfigError("dpo needs a reference checkpoint at '" + ref_path +
                              "'; train the sft phase first or set io.reference");

        MicroModel policy(cfg.model);
        LoraState state = have_ref ? load_adapter_checkpoint(ref_path, policy)
                                   : LoraState::inject(policy, cfg.lora);
        Tokenizer tok;
        std::string prompt;
        if (have_ref) {
            add_input(m, ref_path);
            Checkpoint raw = load_checkpoint(ref_path);
            if (!raw.meta.contains("tokenizer_words") || !raw.meta.contains("prompt"))
                throw DataError("reference checkpoint '" + ref_path +
                                "' lacks tokenizer metadata; re-train the sft phase");
            tok = Tokenizer::from_words(
                raw.meta.at("tokenizer_words").get<std::vector<std::string>>(),
                cfg.model.vocab_size);
            prompt = raw.meta.at("prompt").get<std::string>();
            if (raw.meta.contains("model") && raw.meta.at("model") != config_to_json(cfg)["model"])
                throw ConfigError("reference checkpoint '" + ref_path +
                                  "' was trained with a different model configuration");
        } else {
            prompt = resolve_prompt(cfg);
            tok = corpus_tokenizer(pairs, prompt, cfg.model.vocab_size);
        }
        auto examples = make_examples(pairs, tok, prompt, cfg.model);

        // frozen copy for pair building and (dpo) margins
        MicroModel reference(cfg.model);
        LoraState ref_state = have_ref ? load_adapter_checkpoint(ref_path, reference)
                                       : LoraState::inject(reference, cfg.lora);

        PairBuildStats stats;
        std::vector<PreferencePair> prefs;
        {
            ad::NoGradGuard guard;
            prefs = build_preference_pairs(examples, reference, cfg.pref.max_new,
                                           Tokenizer::kEos, &stats, text_vocab_limit(tok));
        }
        if (prefs.empty())
            throw DataError("no preference pairs could be built: every generation matched "
                            "its expert report");

        // held-out pairs measure the alignment effect
        std::vector<size_t> order(prefs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng split_rng(Rng::mix(cfg.pref.seed, 0x70726566));
        split_rng.shuffle(order);
        size_t n_hold = static_cast<size_t>(
            std::floor(cfg.pref.holdout_fraction * static_cast<double>(prefs.size()) + 1e-9));
        std::vector<PreferencePair> hold, train_prefs;
        for (size_t k = 0; k < order.size(); ++k)
            (k < n_hold ? hold : train_prefs).push_back(prefs[order[k]]);
        if (train_prefs.empty()) throw DataError("holdout fraction leaves no training pairs");

        std::vector<double> hold_margins(hold.size(), 0.0);
        if (phase == "dpo") hold_margins = reference_margins(reference, hold);
        double win_before = hold.empty() ? 0.0 : win_rate(policy, hold, hold_margins);

        std::vector<ad::Tensor> params;
        for (auto& [name, t] : state.trainable_params()) params.push_back(t);
        AdamConfig ac;
        ac.lr = cfg.pref.lr;
        Adam opt(params, ac);
        ad::Tape tape;
        for (auto& t : params) tape.watch(t);

        TrainLoopConfig loop;
        loop.batch_size = cfg.pref.batch_size;
        loop.steps = cfg.pref.steps;
        loop.shuffle = cfg.pref.shuffle;
        loop.seed = cfg.pref.seed;
        PreferenceHyperparams hp;
        hp.beta = cfg.pref.beta;
        hp.gamma = cfg.pref.gamma;
        hp.lambda = cfg.pref.lambda;
        PreferenceObjective obj = phase == "dpo"
                                      ? PreferenceObjective::dpo
                                      : (phase == "simpo" ? PreferenceObjective::simpo
                                                          : PreferenceObjective::orpo);
        auto res = preference_epoch(policy, phase == "dpo" ? &reference : nullptr,
                                    train_prefs, opt, tape, obj, hp, loop);

        double win_after = hold.empty() ? 0.0 : win_rate(policy, hold, hold_margins);

        json extra = {{"objective", phase},
                      {"contexts", stats.contexts},
                      {"pairs_built", stats.built},
                      {"dropped_equal", stats.dropped_equal},
                      {"failed", stats.failed},
                      {"train_pairs", train_prefs.size()},
                      {"holdout_pairs", hold.size()},
                      {"holdout_win_rate_before", win_before},
                      {"holdout_win_rate_after", win_after},
                      {"train_win_rate", res.train_win_rate},
                      {"orpo_clamped", res.orpo_clamped},
                      {"final_loss", res.losses.empty() ? 0.0 : res.losses.back()}};
        save_run_checkpoint(out_dir + "/" + ckpt_base, state, tok, prompt, cfg, phase, extra);
        write_text(out_dir + "/" + trace_base, trace_text(res.losses));
        m.summary = extra;
    }

    add_output(m, out_dir, ckpt_base);
    add_output(m, out_dir, trace_base);
    m.wall_time_seconds = timer.seconds();
    write_manifest_atomic(out_dir + "/manifest.train-" + phase + ".json", m);
    return m;
}

RunManifest cmd_eval(const PipelineConfig& cfg, const std::string& out_dir) {
    Timer timer;
    cfg.validate();
    fs::create_directories(out_dir);

    const std::string ckpt_path = or_default(cfg.io.checkpoint, out_dir, "adapter.sft.ckpt");
    if (!fs::exists(ckpt_path))
        throw ConfigError("checkpoint not found at '" + ckpt_path +
                          "'; set io.checkpoint or train first");
    const std::string test_path = or_default(cfg.io.test_pairs, out_dir, "test.jsonl");
    if (!fs::exists(test_path))
        throw ConfigError("evaluation pairs not found at '" + test_path +
                          "'; run prep first or set io.test_pairs");

    Checkpoint raw = load_checkpoint(ckpt_path);
    if (raw.meta.contains("model") && raw.meta.at("model") != config_to_json(cfg)["model"])
        throw ConfigError("checkpoint '" + ckpt_path +
                          "' was trained with a different model configuration");
    if (!raw.meta.contains("tokenizer_words") || !raw.meta.contains("prompt"))
        throw DataError("checkpoint '" + ckpt_path + "' lacks tokenizer metadata");

    MicroModel model(cfg.model);
    (void)load_adapter_checkpoint(ckpt_path, model);
    Tokenizer tok = Tokenizer::from_words(
        raw.meta.at("tokenizer_words").get<std::vector<std::string>>(), cfg.model.vocab_size);
    const std::string prompt = raw.meta.at("prompt").get<std::string>();

    auto pairs = load_pairs_file(test_path);
    if (pairs.empty()) throw DataError("evaluation pair file '" + test_path + "' is empty");
    auto [rep, corpus] = eval_on_pairs(model, tok, prompt, pairs, cfg.metrics);

    // the physician-score column appears only when a score sheet is supplied
    bool have_ps = false;
    double ps = 0.0;
    if (!cfg.io.scores.empty()) {
        std::ifstream in(cfg.io.scores, std::ios::binary);
        if (!in) throw ConfigError("cannot open score sheet '" + cfg.io.scores + "'");
        auto sheets = load_score_sheets(in, cfg.io.scores);
        if (!sheets.empty()) {
            RubricWeights w;
            std::vector<double> scores;
            for (const auto& s : sheets) scores.push_back(weighted_ps(s, w));
            ps = aggregate_ps(scores, AggregateMode::mean);
            have_ps = true;
        }
    }

    const std::string name = fs::path(ckpt_path).filename().string();
    std::string txt = "#ldp-report v1\n";
    txt += "model\tbleu1\tbleu2\tbleu4\tmeteor\trouge_l\tcider\tps\n";
    txt += name + "\t" + fmt(rep.bleu1) + "\t" + fmt(rep.bleu2) + "\t" + fmt(rep.bleu4) +
           "\t" + fmt(rep.meteor) + "\t" + fmt(rep.rouge_l) + "\t" + fmt(rep.cider) + "\t" +
           (have_ps ? fmt(ps) : "-") + "\n";
    write_text(out_dir + "/report.txt", txt);

    json jr = {{"checkpoint", name},
               {"entries", corpus.size()},
               {"metrics", report_json(rep)},
               {"ps", have_ps ? json(ps) : json(nullptr)}};
    write_text(out_dir + "/report.json", jr.dump(2) + "\n");

    RunManifest m;
    m.command = "eval";
    const std::string cfg_dump = config_to_json(cfg).dump();
    m.config_hash = hex_digest(fnv1a64_bytes(cfg_dump.data(), cfg_dump.size()));
    m.seed = cfg.run_seed;
    add_input(m, ckpt_path);
    add_input(m, test_path);
    if (!cfg.io.scores.empty() && fs::exists(cfg.io.scores)) add_input(m, cfg.io.scores);
    add_output(m, out_dir, "report.txt");
    add_output(m, out_dir, "report.json");
    m.summary = jr;
    m.wall_time_seconds = timer.seconds();
    write_manifest_atomic(out_dir + "/manifest.eval.json", m);
    return m;
}

RunManifest cmd_efficiency(const PipelineConfig& cfg, const std::string& out_dir) {
    Timer timer;
    cfg.validate();
    fs::create_directories(out_dir);

    EfficiencyReport micro;
    micro.trainable = static_cast<double>(lora_trainable_count(cfg.model, cfg.lora));
    micro.base_total = static_cast<double>(MicroModel::param_count_formula(cfg.model));

    std::string txt = "#ldp-efficiency v1\n";
    txt += "scope\ttrainable\tbase_total\tpercent\treduction\n";
    auto row = [&](const std::string& scope, const EfficiencyReport& r) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s\t%.0f\t%.0f\t%.4f\t%.1f\n", scope.c_str(),
                      r.trainable, r.base_total, r.percent(), r.reduction_factor());
        txt += buf;
    };
    row("micro", micro);
    json jr = {{"micro",
                {{"trainable", micro.trainable},
                 {"base_total", micro.base_total},
                 {"percent", micro.percent()},
                 {"reduction", micro.reduction_factor()}}}};
    if (cfg.efficiency.base_total > 0.0 && cfg.efficiency.trainable > 0.0) {
        EfficiencyReport pub;
        pub.trainable = cfg.efficiency.trainable;
        pub.base_total = cfg.efficiency.base_total;
        row("published", pub);
        jr["published"] = {{"trainable", pub.trainable},
                           {"base_total", pub.base_total},
                           {"percent", pub.percent()},
                           {"reduction", pub.reduction_factor()}};
    }
    write_text(out_dir + "/efficiency.txt", txt);
    write_text(out_dir + "/efficiency.json", jr.dump(2) + "\n");

    RunManifest m;
    m.command = "efficiency";
    const std::string cfg_dump = config_to_json(cfg).dump();
    m.config_hash = hex_digest(fnv1a64_bytes(cfg_dump.data(), cfg_dump.size()));
    m.seed = cfg.run_seed;
    add_output(m, out_dir, "efficiency.txt");
    add_output(m, out_dir, "efficiency.json");
    m.summary = jr;
    m.wall_time_seconds = timer.seconds();
    write_manifest_atomic(out_dir + "/manifest.efficiency.json", m);
    return m;
}

namespace {

struct AblateRow {
    std::string variant;
    size_t params = 0;
    MetricReport rep;
};

void copy_adapter_values(const LoraState& from, LoraState& to) {
    auto src = from.trainable_params();
    auto dst = to.trainable_params();
    if (src.size() != dst.size()) throw ContractError("adapter shape mismatch in ablation");
    for (size_t i = 0; i < src.size(); ++i) {
        auto s = src[i].second.data();
        auto d = dst[i].second.mutable_data();
        std::copy(s.begin(), s.end(), d.begin());
    }
}

}  // namespace

RunManifest cmd_ablate(const PipelineConfig& cfg, const std::string& out_dir) {
    Timer timer;
    cfg.validate();
    fs::create_directories(out_dir);

    // shared, in-memory corpus for every variant
    auto videos = synth_corpus(cfg.synth);
    PrepResult prep = run_prep(videos, cfg.prep);
    if (prep.split.train.empty() || prep.split.test.size() < 2)
        throw DataError("ablation corpus too small; configure more synth videos");
    const std::string prompt = resolve_prompt(cfg);
    Tokenizer tok = corpus_tokenizer(prep.split.train, prompt, cfg.model.vocab_size);
    auto train_ex = make_examples(prep.split.train, tok, prompt, cfg.model);

    auto run_sft = [&](const LoraConfig& lc, MicroModel& model) {
        LoraState state = LoraState::inject(model, lc);
        std::vector<ad::Tensor> params;
        for (auto& [name, t] : state.trainable_params()) params.push_back(t);
        AdamConfig ac;
        ac.lr = cfg.sft.lr;
        Adam opt(params, ac);
        ad::Tape tape;
        for (auto& t : params) tape.watch(t);
        TrainLoopConfig loop;
        loop.batch_size = cfg.sft.batch_size;
        loop.steps = cfg.sft.steps;
        loop.shuffle = cfg.sft.shuffle;
        loop.seed = cfg.sft.seed;
        sft_epoch(model, train_ex, opt, tape, loop);
        return state;
    };

    std::vector<AblateRow> rows;
    if (cfg.ablate.mode == "ranks") {
        if (cfg.ablate.ranks.size() < 2)
            throw ConfigError("rank ablation needs at least two ranks");
        for (size_t r : cfg.ablate.ranks) {
            LoraConfig lc = cfg.lora;
            lc.rank = r;
            MicroModel model(cfg.model);
            LoraState state = run_sft(lc, model);
            auto [rep, corpus] = eval_on_pairs(model, tok, prompt, prep.split.test,
                                               cfg.metrics);
            rows.push_back({"r" + std::to_string(r), state.trainable_count(), rep});
        }
    } else {
        // phases: sft, then each preference objective continued from it
        MicroModel sft_model(cfg.model);
        LoraState sft_state = run_sft(cfg.lora, sft_model);
        {
            auto [rep, corpus] = eval_on_pairs(sft_model, tok, prompt, prep.split.test,
                                               cfg.metrics);
            rows.push_back({"sft", sft_state.trainable_count(), rep});
        }
        PairBuildStats stats;
        std::vector<PreferencePair> prefs;
        {
            ad::NoGradGuard guard;
            prefs = build_preference_pairs(train_ex, sft_model, cfg.pref.max_new,
                                           Tokenizer::kEos, &stats, text_vocab_limit(tok));
        }
        if (prefs.empty()) throw DataError("no preference pairs for the phase ablation");
        for (auto obj : {PreferenceObjective::dpo, PreferenceObjective::simpo,
                         PreferenceObjective::orpo}) {
            MicroModel policy(cfg.model);
            LoraState state = LoraState::inject(policy, cfg.lora);
            copy_adapter_values(sft_state, state);
            std::vector<ad::Tensor> params;
            for (auto& [name, t] : state.trainable_params()) params.push_back(t);
            AdamConfig ac;
            ac.lr = cfg.pref.lr;
            Adam opt(params, ac);
            ad::Tape tape;
            for (auto& t : params) tape.watch(t);
            TrainLoopConfig loop;
            loop.batch_size = cfg.pref.batch_size;
            loop.steps = cfg.pref.steps;
            loop.shuffle = cfg.pref.shuffle;
            loop.seed = cfg.pref.seed;
            PreferenceHyperparams hp;
            hp.beta = cfg.pref.beta;
            hp.gamma = cfg.pref.gamma;
            hp.lambda = cfg.pref.lambda;
            preference_epoch(policy, obj == PreferenceObjective::dpo ? &sft_model : nullptr,
                             prefs, opt, tape, obj, hp, loop);
            auto [rep, corpus] = eval_on_pairs(policy, tok, prompt, prep.split.test,
                                               cfg.metrics);
            std::string name = obj == PreferenceObjective::dpo
                                   ? "sft+dpo"
                                   : (obj == PreferenceObjective::simpo ? "sft+simpo"
                                                                        : "sft+orpo");
            rows.push_back({name, state.trainable_count(), rep});
        }
    }

    std::string txt = "#ldp-ablate v1\n";
    txt += "variant\tparams\tbleu1\tbleu4\tmeteor\trouge_l\tcider\n";
    json jrows = json::array();
    for (const auto& r : rows) {
        txt += r.variant + "\t" + std::to_string(r.params) + "\t" + fmt(r.rep.bleu1) + "\t" +
               fmt(r.rep.bleu4) + "\t" + fmt(r.rep.meteor) + "\t" + fmt(r.rep.rouge_l) +
               "\t" + fmt(r.rep.cider) + "\n";
        jrows.push_back({{"variant", r.variant},
                         {"params", r.params},
                         {"metrics", report_json(r.rep)}});
    }
    write_text(out_dir + "/ablate.txt", txt);
    write_text(out_dir + "/ablate.json", json({{"mode", cfg.ablate.mode}, {"rows", jrows}}).dump(2) + "\n");

    RunManifest m;
    m.command = "ablate";
    const std::string cfg_dump = config_to_json(cfg).dump();
    m.config_hash = hex_digest(fnv1a64_bytes(cfg_dump.data(), cfg_dump.size()));
    m.seed = cfg.run_seed;
    add_output(m, out_dir, "ablate.txt");
    add_output(m, out_dir, "ablate.json");
    m.summary = {{"mode", cfg.ablate.mode}, {"variants", rows.size()}};
    m.wall_time_seconds = timer.seconds();
    write_manifest_atomic(out_dir + "/manifest.ablate.json", m);
    return m;
}

RunManifest cmd_score(const PipelineConfig& cfg, const std::string& out_dir) {
    Timer timer;
    cfg.validate();
    fs::create_directories(out_dir);
    if (cfg.io.scores.empty())
        throw ConfigError("score command needs io.scores pointing at a score sheet");
    std::ifstream in(cfg.io.scores, std::ios::binary);
    if (!in) throw ConfigError("cannot open score sheet '" + cfg.io.scores + "'");
    auto sheets = load_score_sheets(in, cfg.io.scores);
    if (sheets.empty()) throw DataError("score sheet '" + cfg.io.scores + "' has no rows");

    RubricWeights w;
    // per-rater mean PS, raters in sorted order
    std::map<std::string, std::pair<double, size_t>> by_rater;
    for (const auto& s : sheets) {
        auto& [sum, n] = by_rater[s.rater];
        sum += weighted_ps(s, w);
        ++n;
    }
    std::vector<double> rater_means;
    std::string txt = "#ldp-score v1\n";
    json jraters = json::object();
    for (const auto& [rater, acc] : by_rater) {
        double mean = acc.first / static_cast<double>(acc.second);
        rater_means.push_back(mean);
        txt += "rater " + rater + " n " + std::to_string(acc.second) + " ps " + fmt(mean) +
               "\n";
        jraters[rater] = mean;
    }

    PsTable table = ps_table(sheets, w);
    json jgroups = json::object();
    for (const auto& row : table.rows) {
        txt += "group " + row.group + " n " + std::to_string(row.ratings) + " mean " +
               fmt(row.mean_ps) + "\n";
        jgroups[row.group] = {{"ratings", row.ratings}, {"mean", row.mean_ps}};
    }

    double agg_mean = aggregate_ps(rater_means, AggregateMode::mean);
    bool have_trim = rater_means.size() >= 3;
    double agg_trim = have_trim ? aggregate_ps(rater_means, AggregateMode::trimmed) : 0.0;
    txt += "aggregate mean " + fmt(agg_mean) + " trimmed " +
           (have_trim ? fmt(agg_trim) : std::string("-")) + "\n";

    json jkappa = nullptr;
    std::string kappa_note;
    try {
        KappaResult k = multi_rater_kappa(sheets, w, KappaMethod::fleiss,
                                          Rng::mix(cfg.run_seed, 0x6b617070));
        txt += "kappa " + fmt(k.kappa) + " ci " + fmt(k.ci_lo) + " " + fmt(k.ci_hi) +
               " resamples " + std::to_string(k.resamples) + "\n";
        jkappa = {{"kappa", k.kappa},
                  {"ci_lo", k.ci_lo},
                  {"ci_hi", k.ci_hi},
                  {"resamples", k.resamples},
                  {"degenerate_resamples", k.degenerate_resamples}};
    } catch (const DataError& e) {
        kappa_note = e.what();
        txt += std::string("kappa - (") + e.what() + ")\n";
    }

    write_text(out_dir + "/score.txt", txt);
    json jr = {{"raters", jraters},
               {"groups", jgroups},
               {"aggregate_mean", agg_mean},
               {"aggregate_trimmed", have_trim ? json(agg_trim) : json(nullptr)},
               {"kappa", jkappa},
               {"kappa_note", kappa_note}};
    write_text(out_dir + "/score.json", jr.dump(2) + "\n");

    RunManifest m;
    m.command = "score";
    const std::string cfg_dump = config_to_json(cfg).dump();
    m.config_hash = hex_digest(fnv1a64_bytes(cfg_dump.data(), cfg_dump.size()));
    m.seed = cfg.run_seed;
    add_input(m, cfg.io.scores);
    add_output(m, out_dir, "score.txt");
    add_output(m, out_dir, "score.json");
    m.summary = jr;
    m.wall_time_seconds = timer.seconds();
    write_manifest_atomic(out_dir + "/manifest.score.json", m);
    return m;
}

}  // namespace cli

}  // namespace ldp
