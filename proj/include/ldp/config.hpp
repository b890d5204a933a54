#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "json.hpp"
#include "ldp/dataprep.hpp"
#include "ldp/lora.hpp"
#include "ldp/model.hpp"
#include "ldp/train.hpp"

namespace ldp {

struct SftRunConfig {
    size_t steps = 200;
    size_t batch_size = 8;
    double lr = 1e-2;
    bool shuffle = true;
    uint64_t seed = 1;
};

struct PrefRunConfig {
    PreferenceObjective objective = PreferenceObjective::dpo;
    double beta = 0.1;
    double gamma = 0.5;
    double lambda = 0.25;
    size_t steps = 60;
    size_t batch_size = 4;
    double lr = 5e-3;
    bool shuffle = true;
    uint64_t seed = 2;
    size_t max_new = 24;             // generation budget for rejected responses
    double holdout_fraction = 0.2;   // preference pairs reserved for win-rate eval
};

struct MetricConfig {
    bool sentence_averaged_bleu = false;
    bool cider_length_penalty = false;
    size_t eval_max_new = 24;  // generation budget during eval
};

// published-scale numbers to report alongside the micro model's own
struct EfficiencyOverride {
    double base_total = 0.0;  // 0 disables the extra row
    double trainable = 0.0;
};

struct IoPaths {
    std::string pairs;        // full corpus (prep output)
    std::string train_pairs;  // training split
    std::string test_pairs;   // held-out split
    std::string checkpoint;   // adapter checkpoint to evaluate
    std::string reference;    // adapter checkpoint used as DPO reference / init
    std::string scores;       // physician score sheet
    std::string prompt_preset;  // prompt template file
};

struct AblateConfig {
    std::string mode = "ranks";       // "ranks" | "phases"
    std::vector<size_t> ranks = {8, 16, 32, 64};
};

struct PipelineConfig {
    std::string preset_name = "default";
    ModelConfig model;
    LoraConfig lora;
    SftRunConfig sft;
    PrefRunConfig pref;
    MetricConfig metrics;
    SynthOptions synth;
    PrepOptions prep;
    EfficiencyOverride efficiency;
    AblateConfig ablate;
    IoPaths io;
    uint64_t run_seed = 0;  // nonzero: rederives every component seed

    void validate() const;
    // applies run_seed to every component stream (stable stream ids)
    void reseed(uint64_t seed);
};

// "tiny" | "default" | "stress"
PipelineConfig preset_config(const std::string& name);

// JSON object; unknown keys anywhere are config errors. An optional
// "preset" key selects the base the remaining keys override.
PipelineConfig load_pipeline_config(std::istream& in, const std::string& source_name);
PipelineConfig load_pipeline_config_file(const std::string& path);

// canonical serialization (sorted keys): the manifest's config hash input
nlohmann::json config_to_json(const PipelineConfig& cfg);

}  // namespace ldp
