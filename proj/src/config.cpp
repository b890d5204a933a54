#include "ldp/config.hpp"

#include <fstream>
#include <sstream>

#include "ldp/errors.hpp"
#include "ldp/rng.hpp"

namespace ldp {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    for (const auto& [key, val] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok)
            throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
    }
}

template <typename T>
void get_if(const json& j, const std::string& section, const char* key, T& dst) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        dst = it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("key '" + std::string(key) + "' in section '" + section +
                          "': " + e.what());
    }
}

void parse_model(const json& j, ModelConfig& m) {
    check_keys(j, "model",
               {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "vocab_size",
                "patch_rows", "patch_cols", "patch_dim", "max_text_len", "adapter_queries",
                "d_ff", "rope_base", "use_rope", "logit_scale", "visual_positions", "seed"});
    get_if(j, "model", "d_model", m.d_model);
    get_if(j, "model", "n_heads", m.n_heads);
    get_if(j, "model", "n_enc_layers", m.n_enc_layers);
    get_if(j, "model", "n_dec_layers", m.n_dec_layers);
    get_if(j, "model", "vocab_size", m.vocab_size);
    get_if(j, "model", "patch_rows", m.patch_rows);
    get_if(j, "model", "patch_cols", m.patch_cols);
    get_if(j, "model", "patch_dim", m.patch_dim);
    get_if(j, "model", "max_text_len", m.max_text_len);
    get_if(j, "model", "adapter_queries", m.adapter_queries);
    get_if(j, "model", "d_ff", m.d_ff);
    get_if(j, "model", "rope_base", m.rope_base);
    get_if(j, "model", "use_rope", m.use_rope);
    get_if(j, "model", "logit_scale", m.logit_scale);
    get_if(j, "model", "visual_positions", m.visual_positions);
    get_if(j, "model", "seed", m.seed);
}

void parse_lora(const json& j, LoraConfig& l) {
    check_keys(j, "lora",
               {"rank", "alpha", "targets", "include_encoder", "include_adapter", "dropout",
                "init_std", "seed"});
    get_if(j, "lora", "rank", l.rank);
    get_if(j, "lora", "alpha", l.alpha);
    get_if(j, "lora", "targets", l.targets);
    get_if(j, "lora", "include_encoder", l.include_encoder);
    get_if(j, "lora", "include_adapter", l.include_adapter);
    get_if(j, "lora", "dropout", l.dropout);
    get_if(j, "lora", "init_std", l.init_std);
    get_if(j, "lora", "seed", l.seed);
}

void parse_sft(const json& j, SftRunConfig& s) {
    check_keys(j, "sft", {"steps", "batch_size", "lr", "shuffle", "seed"});
    get_if(j, "sft", "steps", s.steps);
    get_if(j, "sft", "batch_size", s.batch_size);
    get_if(j, "sft", "lr", s.lr);
    get_if(j, "sft", "shuffle", s.shuffle);
    get_if(j, "sft", "seed", s.seed);
}

PreferenceObjective objective_from(const std::string& name) {
    if (name == "dpo") return PreferenceObjective::dpo;
    if (name == "simpo") return PreferenceObjective::simpo;
    if (name == "orpo") return PreferenceObjective::orpo;
    throw ConfigError("unknown preference objective '" + name + "'");
}

void parse_pref(const json& j, PrefRunConfig& p) {
    check_keys(j, "pref",
               {"objective", "beta", "gamma", "lambda", "steps", "batch_size", "lr", "shuffle",
                "seed", "max_new", "holdout_fraction"});
    if (j.contains("objective"))
        p.objective = objective_from(j.at("objective").get<std::string>());
    get_if(j, "pref", "beta", p.beta);
    get_if(j, "pref", "gamma", p.gamma);
    get_if(j, "pref", "lambda", p.lambda);
    get_if(j, "pref", "steps", p.steps);
    get_if(j, "pref", "batch_size", p.batch_size);
    get_if(j, "pref", "lr", p.lr);
    get_if(j, "pref", "shuffle", p.shuffle);
    get_if(j, "pref", "seed", p.seed);
    get_if(j, "pref", "max_new", p.max_new);
    get_if(j, "pref", "holdout_fraction", p.holdout_fraction);
}

void parse_metrics(const json& j, MetricConfig& m) {
    check_keys(j, "metrics",
               {"sentence_averaged_bleu", "cider_length_penalty", "eval_max_new"});
    get_if(j, "metrics", "sentence_averaged_bleu", m.sentence_averaged_bleu);
    get_if(j, "metrics", "cider_length_penalty", m.cider_length_penalty);
    get_if(j, "metrics", "eval_max_new", m.eval_max_new);
}

void parse_synth(const json& j, SynthOptions& s) {
    check_keys(j, "synth",
               {"videos", "frames_per_video", "duration", "patch_rows", "patch_cols",
                "patch_dim", "seed", "low_quality_fraction", "no_polyp_fraction",
                "quality_threshold"});
    get_if(j, "synth", "videos", s.videos);
    get_if(j, "synth", "frames_per_video", s.frames_per_video);
    get_if(j, "synth", "duration", s.duration);
    get_if(j, "synth", "patch_rows", s.patch_rows);
    get_if(j, "synth", "patch_cols", s.patch_cols);
    get_if(j, "synth", "patch_dim", s.patch_dim);
    get_if(j, "synth", "seed", s.seed);
    get_if(j, "synth", "low_quality_fraction", s.low_quality_fraction);
    get_if(j, "synth", "no_polyp_fraction", s.no_polyp_fraction);
    get_if(j, "synth", "quality_threshold", s.quality_threshold);
}

void parse_prep(const json& j, PrepOptions& p) {
    check_keys(j, "prep",
               {"target_frames", "min_rate", "max_rate", "min_quality", "require_polyp",
                "train_fraction", "split_seed", "split_mode"});
    get_if(j, "prep", "target_frames", p.sampling.target_frames);
    get_if(j, "prep", "min_rate", p.sampling.min_rate);
    get_if(j, "prep", "max_rate", p.sampling.max_rate);
    get_if(j, "prep", "min_quality", p.min_quality);
    get_if(j, "prep", "require_polyp", p.require_polyp);
    get_if(j, "prep", "train_fraction", p.train_fraction);
    get_if(j, "prep", "split_seed", p.split_seed);
    if (j.contains("split_mode")) {
        std::string m = j.at("split_mode").get<std::string>();
        if (m == "pair")
            p.split_mode = SplitMode::pair_level;
        else if (m == "patient")
            p.split_mode = SplitMode::patient_level;
        else
            throw ConfigError("split_mode must be 'pair' or 'patient', got '" + m + "'");
    }
}

void parse_efficiency(const json& j, EfficiencyOverride& e) {
    check_keys(j, "efficiency", {"base_total", "trainable"});
    get_if(j, "efficiency", "base_total", e.base_total);
    get_if(j, "efficiency", "trainable", e.trainable);
}

void parse_ablate(const json& j, AblateConfig& a) {
    check_keys(j, "ablate", {"mode", "ranks"});
    get_if(j, "ablate", "mode", a.mode);
    get_if(j, "ablate", "ranks", a.ranks);
}

void parse_io(const json& j, IoPaths& io) {
    check_keys(j, "io",
               {"pairs", "train_pairs", "test_pairs", "checkpoint", "reference", "scores",
                "prompt_preset"});
    get_if(j, "io", "pairs", io.pairs);
    get_if(j, "io", "train_pairs", io.train_pairs);
    get_if(j, "io", "test_pairs", io.test_pairs);
    get_if(j, "io", "checkpoint", io.checkpoint);
    get_if(j, "io", "reference", io.reference);
    get_if(j, "io", "scores", io.scores);
    get_if(j, "io", "prompt_preset", io.prompt_preset);
}

std::string objective_name(PreferenceObjective o) {
    switch (o) {
        case PreferenceObjective::dpo: return "dpo";
        case PreferenceObjective::simpo: return "simpo";
        case PreferenceObjective::orpo: return "orpo";
    }
    return "dpo";
}

}  // namespace

void PipelineConfig::validate() const {
    model.validate();
    lora.validate();
    if (sft.batch_size < 1) throw ConfigError("sft batch_size must be at least 1");
    if (!(sft.lr > 0.0)) throw ConfigError("sft lr must be positive");
    if (pref.batch_size < 1) throw ConfigError("pref batch_size must be at least 1");
    if (!(pref.lr > 0.0)) throw ConfigError("pref lr must be positive");
    if (!(pref.beta > 0.0)) throw ConfigError("pref beta must be positive");
    if (pref.gamma < 0.0) throw ConfigError("pref gamma must be nonnegative");
    if (pref.lambda < 0.0) throw ConfigError("pref lambda must be nonnegative");
    if (pref.max_new < 1) throw ConfigError("pref max_new must be at least 1");
    if (pref.holdout_fraction < 0.0 || pref.holdout_fraction >= 1.0)
        throw ConfigError("pref holdout_fraction must lie in [0,1)");
    if (metrics.eval_max_new < 1) throw ConfigError("metrics eval_max_new must be at least 1");
    if (synth.patch_rows != model.patch_rows || synth.patch_cols != model.patch_cols ||
        synth.patch_dim != model.patch_dim)
        throw ConfigError("synth patch geometry must match the model's patch geometry");
    if (ablate.mode != "ranks" && ablate.mode != "phases")
        throw ConfigError("ablate mode must be 'ranks' or 'phases'");
}

void PipelineConfig::reseed(uint64_t seed) {
    run_seed = seed;
    model.seed = Rng::mix(seed, 1);
    lora.seed = Rng::mix(seed, 2);
    sft.seed = Rng::mix(seed, 3);
    pref.seed = Rng::mix(seed, 4);
    synth.seed = Rng::mix(seed, 5);
    prep.split_seed = Rng::mix(seed, 6);
}

PipelineConfig preset_config(const std::string& name) {
    PipelineConfig cfg;
    cfg.preset_name = name;
    if (name == "default") return cfg;
    if (name == "tiny") {
        cfg.model.d_model = 32;
        cfg.model.n_heads = 4;
        cfg.model.n_enc_layers = 1;
        cfg.model.n_dec_layers = 2;
        cfg.model.vocab_size = 320;
        cfg.model.patch_rows = 4;
        cfg.model.patch_cols = 4;
        cfg.model.patch_dim = 4;
        cfg.model.max_text_len = 32;
        cfg.model.adapter_queries = 4;
        cfg.model.d_ff = 64;
        cfg.lora.rank = 4;
        cfg.synth.videos = 4;
        cfg.synth.frames_per_video = 16;
        cfg.synth.duration = 30.0;
        cfg.synth.patch_rows = 4;
        cfg.synth.patch_cols = 4;
        cfg.synth.patch_dim = 4;
        cfg.prep.sampling.target_frames = 12;
        cfg.sft.batch_size = 4;
        cfg.pref.steps = 80;
        cfg.pref.max_new = 16;
        cfg.metrics.eval_max_new = 16;
        return cfg;
    }
    if (name == "stress") {
        cfg.synth.videos = 128;
        cfg.synth.frames_per_video = 64;
        cfg.sft.steps = 600;
        cfg.sft.lr = 5e-3;
        cfg.pref.steps = 200;
        return cfg;
    }
    throw ConfigError("unknown preset '" + name + "' (expected tiny, default, or stress)");
}

PipelineConfig load_pipeline_config(std::istream& in, const std::string& source_name) {
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError(source_name + ": malformed JSON");
    if (!j.is_object()) throw ConfigError(source_name + ": config root must be an object");
    check_keys(j, "(root)",
               {"preset", "model", "lora", "sft", "pref", "metrics", "synth", "prep",
                "efficiency", "ablate", "io", "seed"});

    PipelineConfig cfg;
    if (j.contains("preset")) cfg = preset_config(j.at("preset").get<std::string>());
    if (j.contains("model")) parse_model(j.at("model"), cfg.model);
    if (j.contains("lora")) parse_lora(j.at("lora"), cfg.lora);
    if (j.contains("sft")) parse_sft(j.at("sft"), cfg.sft);
    if (j.contains("pref")) parse_pref(j.at("pref"), cfg.pref);
    if (j.contains("metrics")) parse_metrics(j.at("metrics"), cfg.metrics);
    if (j.contains("synth")) parse_synth(j.at("synth"), cfg.synth);
    if (j.contains("prep")) parse_prep(j.at("prep"), cfg.prep);
    if (j.contains("efficiency")) parse_efficiency(j.at("efficiency"), cfg.efficiency);
    if (j.contains("ablate")) parse_ablate(j.at("ablate"), cfg.ablate);
    if (j.contains("io")) parse_io(j.at("io"), cfg.io);
    if (j.contains("seed")) {
        uint64_t s = 0;
        get_if(j, "(root)", "seed", s);
        if (s != 0) cfg.reseed(s);
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_pipeline_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return load_pipeline_config(in, path);
}

nlohmann::json config_to_json(const PipelineConfig& cfg) {
    json j;
    j["preset"] = cfg.preset_name;
    j["seed"] = cfg.run_seed;
    j["model"] = {{"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},
                  {"n_enc_layers", cfg.model.n_enc_layers},
                  {"n_dec_layers", cfg.model.n_dec_layers},
                  {"vocab_size", cfg.model.vocab_size},
                  {"patch_rows", cfg.model.patch_rows},
                  {"patch_cols", cfg.model.patch_cols},
                  {"patch_dim", cfg.model.patch_dim},
                  {"max_text_len", cfg.model.max_text_len},
                  {"adapter_queries", cfg.model.adapter_queries},
                  {"d_ff", cfg.model.d_ff},
                  {"rope_base", cfg.model.rope_base},
                  {"use_rope", cfg.model.use_rope},
                  {"logit_scale", cfg.model.logit_scale},
                  {"visual_positions", cfg.model.visual_positions},
                  {"seed", cfg.model.seed}};
    j["lora"] = {{"rank", cfg.lora.rank},
                 {"alpha", cfg.lora.alpha},
                 {"targets", cfg.lora.targets},
                 {"include_encoder", cfg.lora.include_encoder},
                 {"include_adapter", cfg.lora.include_adapter},
                 {"dropout", cfg.lora.dropout},
                 {"init_std", cfg.lora.init_std},
                 {"seed", cfg.lora.seed}};
    j["sft"] = {{"steps", cfg.sft.steps},
                {"batch_size", cfg.sft.batch_size},
                {"lr", cfg.sft.lr},
                {"shuffle", cfg.sft.shuffle},
                {"seed", cfg.sft.seed}};
    j["pref"] = {{"objective", objective_name(cfg.pref.objective)},
                 {"beta", cfg.pref.beta},
                 {"gamma", cfg.pref.gamma},
                 {"lambda", cfg.pref.lambda},
                 {"steps", cfg.pref.steps},
                 {"batch_size", cfg.pref.batch_size},
                 {"lr", cfg.pref.lr},
                 {"shuffle", cfg.pref.shuffle},
                 {"seed", cfg.pref.seed},
                 {"max_new", cfg.pref.max_new},
                 {"holdout_fraction", cfg.pref.holdout_fraction}};
    j["metrics"] = {{"sentence_averaged_bleu", cfg.metrics.sentence_averaged_bleu},
                    {"cider_length_penalty", cfg.metrics.cider_length_penalty},
                    {"eval_max_new", cfg.metrics.eval_max_new}};
    j["synth"] = {{"videos", cfg.synth.videos},
                  {"frames_per_video", cfg.synth.frames_per_video},
                  {"duration", cfg.synth.duration},
                  {"patch_rows", cfg.synth.patch_rows},
                  {"patch_cols", cfg.synth.patch_cols},
                  {"patch_dim", cfg.synth.patch_dim},
                  {"seed", cfg.synth.seed},
                  {"low_quality_fraction", cfg.synth.low_quality_fraction},
                  {"no_polyp_fraction", cfg.synth.no_polyp_fraction},
                  {"quality_threshold", cfg.synth.quality_threshold}};
    j["prep"] = {{"target_frames", cfg.prep.sampling.target_frames},
                 {"min_rate", cfg.prep.sampling.min_rate},
                 {"max_rate", cfg.prep.sampling.max_rate},
                 {"min_quality", cfg.prep.min_quality},
                 {"require_polyp", cfg.prep.require_polyp},
                 {"train_fraction", cfg.prep.train_fraction},
                 {"split_seed", cfg.prep.split_seed},
                 {"split_mode",
                  cfg.prep.split_mode == SplitMode::pair_level ? "pair" : "patient"}};
    j["efficiency"] = {{"base_total", cfg.efficiency.base_total},
                       {"trainable", cfg.efficiency.trainable}};
    j["ablate"] = {{"mode", cfg.ablate.mode}, {"ranks", cfg.ablate.ranks}};
    j["io"] = {{"pairs", cfg.io.pairs},
               {"train_pairs", cfg.io.train_pairs},
               {"test_pairs", cfg.io.test_pairs},
               {"checkpoint", cfg.io.checkpoint},
               {"reference", cfg.io.reference},
               {"scores", cfg.io.scores},
               {"prompt_preset", cfg.io.prompt_preset}};
    return j;
}

}  // namespace ldp
