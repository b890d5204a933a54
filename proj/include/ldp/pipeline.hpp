#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldp/config.hpp"
#include "ldp/dataprep.hpp"
#include "ldp/tokenizer.hpp"
#include "ldp/train.hpp"

namespace ldp {

struct RunManifest {
    std::string command;
    std::string config_hash;                        // hex fnv-1a of canonical config
    uint64_t seed = 0;                              // run seed (0: per-section seeds)
    std::map<std::string, std::string> inputs;      // path -> hex digest
    std::map<std::string, std::string> outputs;     // basename -> hex digest
    double wall_time_seconds = 0.0;                 // excluded from determinism
    nlohmann::json summary;

    nlohmann::json to_json() const;
};

// write-to-temp + rename; the manifest file is never observably partial
void write_manifest_atomic(const std::string& path, const RunManifest& m);
RunManifest read_manifest(const std::string& path);

std::string hex_digest(uint64_t v);

// tokenized training view of a pair corpus; prompt tokens carry the leading bos
ad::Tensor patches_tensor(const ImageTextPair& pair, const ModelConfig& model);
std::vector<SftExample> make_examples(const std::vector<ImageTextPair>& pairs,
                                      const Tokenizer& tok, const std::string& prompt,
                                      const ModelConfig& model);

namespace cli {

// Each command writes its outputs under out_dir and returns the manifest it
// wrote. Errors surface as ldp::Error; the binary maps them to exit codes.
RunManifest cmd_prep(const PipelineConfig& cfg, const std::string& out_dir);
RunManifest cmd_train(const PipelineConfig& cfg, const std::string& out_dir,
                      const std::string& phase);
RunManifest cmd_eval(const PipelineConfig& cfg, const std::string& out_dir);
RunManifest cmd_efficiency(const PipelineConfig& cfg, const std::string& out_dir);
RunManifest cmd_ablate(const PipelineConfig& cfg, const std::string& out_dir);
RunManifest cmd_score(const PipelineConfig& cfg, const std::string& out_dir);

}  // namespace cli

}  // namespace ldp
