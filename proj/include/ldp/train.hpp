#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ldp/model.hpp"
#include "ldp/optim.hpp"
#include "ldp/tensor.hpp"

namespace ldp {

// One supervised example: image patches plus a tokenized prompt and target
// report. The prompt carries bos and any prompt-preset tokens; the target
// ends with eos.
struct SftExample {
    ad::Tensor patches;  // [n_patches x patch_dim]
    std::vector<int> prompt;
    std::vector<int> target;
    std::string id;
};

struct PreferencePair {
    ad::Tensor patches;
    std::vector<int> prompt;
    std::vector<int> chosen;    // y_w
    std::vector<int> rejected;  // y_l
    std::string chosen_source = "expert-report";
    std::string rejected_source = "base-model-output";
    std::string context_id;
};

struct TrainLoopConfig {
    size_t batch_size = 8;
    size_t steps = 0;  // 0 means exactly one pass over the data
    bool shuffle = true;
    uint64_t seed = 1;
};

// Mean CE over the target positions of one example (prompt positions are
// ignored in the loss).
ad::Tensor sft_example_loss(const MicroModel& model, const SftExample& ex);

// Sum over t of log softmax(logits)[y_t] for y generated after the prompt.
// Differentiable; pass an undefined patches tensor for text-only contexts.
ad::Tensor seq_logprob(const MicroModel& model, const ad::Tensor& patches,
                       const std::vector<int>& prompt, const std::vector<int>& y);

// Runs batches of SFT steps: forward, mean CE, backward, optimizer update.
// The tape must already watch exactly the tensors the optimizer holds.
// Returns the per-batch loss trace.
std::vector<double> sft_epoch(MicroModel& model, const std::vector<SftExample>& corpus,
                              Adam& opt, ad::Tape& tape, const TrainLoopConfig& cfg);

// log pi_ref(y_w) - log pi_ref(y_l) for every pair, evaluated without
// recording gradients. Cached once per run and reused across epochs.
std::vector<double> reference_margins(const MicroModel& reference,
                                      std::span<const PreferencePair> pairs);

// mean over pairs of softplus(-beta * (policy_margin - ref_margin))
ad::Tensor dpo_loss(const MicroModel& policy, std::span<const PreferencePair> batch,
                    std::span<const double> ref_margins, double beta);
ad::Tensor dpo_loss(const MicroModel& policy, const MicroModel& reference,
                    std::span<const PreferencePair> batch, double beta);

// mean over pairs of softplus(-(beta * (lp_w/|y_w| - lp_l/|y_l|) - gamma))
ad::Tensor simpo_loss(const MicroModel& policy, std::span<const PreferencePair> batch,
                      double beta, double gamma);

struct OrpoDiagnostics {
    size_t clamped = 0;  // sequences whose mean-prob hit the 1 - 1e-9 cap
};

// CE(y_w) + lambda * mean softplus(-(log odds(y_w) - log odds(y_l))),
// odds(y) = p/(1-p) with p = exp(mean token logprob), p capped at 1 - 1e-9.
ad::Tensor orpo_loss(const MicroModel& policy, std::span<const PreferencePair> batch,
                     double lambda, OrpoDiagnostics* diag = nullptr);

// Fraction of pairs where the policy's chosen/rejected logprob margin
// strictly exceeds the reference margin.
double win_rate(const MicroModel& policy, std::span<const PreferencePair> pairs,
                std::span<const double> ref_margins);

struct PairBuildStats {
    size_t contexts = 0;
    size_t built = 0;
    size_t dropped_equal = 0;  // generation reproduced the expert report
    size_t failed = 0;         // generation produced nothing usable
};

// y_w = the expert target, y_l = the base model's own continuation of the
// same prompt. Pairs where the two coincide are dropped. vocab_limit caps
// generation to the learned text vocabulary (0: full model vocab).
std::vector<PreferencePair> build_preference_pairs(const std::vector<SftExample>& corpus,
                                                   const MicroModel& base, size_t max_new,
                                                   int eos_id, PairBuildStats* stats = nullptr,
                                                   size_t vocab_limit = 0);

enum class PreferenceObjective { dpo, simpo, orpo };

struct PreferenceHyperparams {
    double beta = 0.1;
    double gamma = 0.5;    // simpo only
    double lambda = 0.25;  // orpo only
};

struct PreferenceEpochResult {
    std::vector<double> losses;  // per batch
    double train_win_rate = 0.0;
    size_t orpo_clamped = 0;  // probability clamps hit (orpo only)
};

// One pass of preference optimization. The reference model is only read
// (DPO); its logprob margins are computed once up front. Returns the loss
// trace plus the post-epoch win rate on the training pairs themselves.
PreferenceEpochResult preference_epoch(MicroModel& policy, const MicroModel* reference,
                                       const std::vector<PreferencePair>& pairs, Adam& opt,
                                       ad::Tape& tape, PreferenceObjective objective,
                                       const PreferenceHyperparams& hp,
                                       const TrainLoopConfig& cfg);

// DPO spelling of the above (reference required).
PreferenceEpochResult dpo_epoch(MicroModel& policy, const MicroModel& reference,
                                const std::vector<PreferencePair>& pairs, Adam& opt,
                                ad::Tape& tape, double beta, const TrainLoopConfig& cfg);

}  // namespace ldp
