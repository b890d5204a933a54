#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ldp/model.hpp"
#include "ldp/tensor.hpp"

namespace ldp {

struct LoraConfig {
    size_t rank = 8;
    double alpha = 0.0;  // 0 means "use 2*rank" (scaling 2.0)
    std::vector<std::string> targets = {"q", "k", "v", "o"};  // subset of q,k,v,o
    bool include_encoder = false;
    bool include_adapter = false;  // the cross-attention block
    double dropout = 0.0;
    double init_std = 0.02;  // for A; B starts at zero
    uint64_t seed = 7;

    double scaling() const {
        return (alpha > 0.0 ? alpha : 2.0 * static_cast<double>(rank)) /
               static_cast<double>(rank);
    }
    void validate() const;
};

// Owns the low-rank factors bolted onto a model's attention projections.
// A is small gaussian, B is zero, so injection leaves the forward pass
// bitwise unchanged until training moves the factors.
class LoraState {
  public:
    static LoraState inject(MicroModel& model, const LoraConfig& cfg);

    const LoraConfig& config() const { return cfg_; }

    // (name, tensor) for every A and B factor, in stable order. These are
    // the only tensors a LoRA phase trains.
    std::vector<std::pair<std::string, ad::Tensor>> trainable_params() const;
    size_t trainable_count() const;

    // Folds scaling*B.A into each target weight and detaches the adapters;
    // the model becomes a plain model with updated weights.
    void merge(MicroModel& model);
    // Subtracts the same delta and reattaches the adapters.
    void unmerge(MicroModel& model);
    bool merged() const { return merged_; }

  private:
    struct Entry {
        std::string target;  // e.g. "dec.0.attn.q"
        std::shared_ptr<LowRankAdapter> adapter;
    };
    LoraConfig cfg_;
    std::vector<Entry> entries_;
    bool merged_ = false;
};

// Closed-form trainable count for a (model, lora) config pair: 2*d*r per
// adapted square projection. Matches LoraState enumeration exactly.
size_t lora_trainable_count(const ModelConfig& mcfg, const LoraConfig& lcfg);

// Paper-scale ratio arithmetic (works on counts that never materialize).
struct EfficiencyReport {
    double trainable = 0.0;
    double base_total = 0.0;
    double percent() const { return 100.0 * trainable / base_total; }
    double reduction_factor() const { return base_total / trainable; }
};

// Adapter-only checkpoint: the A/B factors plus the LoraConfig, loadable
// onto a model built from the matching base checkpoint.
void save_adapter_checkpoint(const std::string& path, const LoraState& state);
LoraState load_adapter_checkpoint(const std::string& path, MicroModel& model);

// While alive, training forwards apply adapter dropout with this rng.
class AdapterDropoutScope {
  public:
    explicit AdapterDropoutScope(Rng& rng) : prev_(exchange_adapter_dropout_rng(&rng)) {}
    ~AdapterDropoutScope() { exchange_adapter_dropout_rng(prev_); }
    AdapterDropoutScope(const AdapterDropoutScope&) = delete;
    AdapterDropoutScope& operator=(const AdapterDropoutScope&) = delete;

  private:
    Rng* prev_;
};

}  // namespace ldp
