#include "ldp/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldp/errors.hpp"
#include "ldp/ops.hpp"

namespace ldp {

using ad::Tensor;

namespace {

std::vector<int> cat(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

// Sum of log softmax picks for y, given already-encoded visual features.
// Sharing the visual encode between the chosen and rejected branch halves
// the cost of a preference forward; the arithmetic is identical to
// seq_logprob because forward() is decode(encode_image(...), ...).
Tensor logprob_from_visual(const MicroModel& model, const Tensor& visual,
                           const std::vector<int>& prompt, const std::vector<int>& y) {
    if (prompt.empty()) throw DataError("logprob: empty prompt");
    if (y.empty()) throw DataError("logprob: zero-length sequence");
    const std::vector<int> seq = cat(prompt, y);
    Tensor logits = visual.defined() ? model.decode(visual, seq) : model.forward_text_only(seq);
    Tensor rows = ad::slice_rows(logits, prompt.size() - 1, y.size());
    return ad::sum(ad::pick_rows(ad::log_softmax_rows(rows), y));
}

void check_pair(const PreferencePair& p) {
    if (p.chosen.empty() || p.rejected.empty())
        throw DataError("preference pair with zero-length sequence");
    if (p.chosen == p.rejected) throw DataError("preference pair with identical sequences");
}

// Keeps the mean token logprob out of exp() underflow range; untouched for
// any sequence a micro model can actually produce.
constexpr double kLogProbFloor = 700.0;

struct BatchPlan {
    std::vector<size_t> order;
    size_t cursor = 0;
    Rng rng;
    bool shuffle;

    BatchPlan(size_t n, const TrainLoopConfig& cfg) : rng(cfg.seed), shuffle(cfg.shuffle) {
        order.resize(n);
        std::iota(order.begin(), order.end(), size_t{0});
        if (shuffle) rng.shuffle(order);
    }
    std::vector<size_t> next(size_t batch_size) {
        if (cursor >= order.size()) {
            if (shuffle) rng.shuffle(order);
            cursor = 0;
        }
        size_t take = std::min(batch_size, order.size() - cursor);
        std::vector<size_t> out(order.begin() + static_cast<ptrdiff_t>(cursor),
                                order.begin() + static_cast<ptrdiff_t>(cursor + take));
        cursor += take;
        return out;
    }
};

size_t steps_for(const TrainLoopConfig& cfg, size_t n) {
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.steps > 0) return cfg.steps;
    return (n + cfg.batch_size - 1) / cfg.batch_size;  // one pass
}

}  // namespace

Tensor sft_example_loss(const MicroModel& model, const SftExample& ex) {
    if (ex.prompt.empty()) throw DataError("sft example with empty prompt");
    if (ex.target.empty()) throw DataError("sft example with empty target");
    const std::vector<int> seq = cat(ex.prompt, ex.target);
    Tensor logits = model.forward(ex.patches, seq);
    std::vector<int> targets(seq.size(), -1);
    for (size_t t = ex.prompt.size() - 1; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
    return ad::cross_entropy(logits, targets, -1);
}

Tensor seq_logprob(const MicroModel& model, const Tensor& patches,
                   const std::vector<int>& prompt, const std::vector<int>& y) {
    Tensor visual = patches.defined() ? model.encode_image(patches) : Tensor{};
    return logprob_from_visual(model, visual, prompt, y);
}

std::vector<double> sft_epoch(MicroModel& model, const std::vector<SftExample>& corpus,
                              Adam& opt, ad::Tape& tape, const TrainLoopConfig& cfg) {
    if (corpus.empty()) throw DataError("sft: empty corpus");
    const size_t total = steps_for(cfg, corpus.size());
    BatchPlan plan(corpus.size(), cfg);
    std::vector<double> trace;
    trace.reserve(total);
    for (size_t s = 0; s < total; ++s) {
        auto batch = plan.next(cfg.batch_size);
        std::vector<Tensor> losses;
        losses.reserve(batch.size());
        for (size_t idx : batch) losses.push_back(sft_example_loss(model, corpus[idx]));
        Tensor loss = ad::mean(ad::stack_scalars(losses));
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
        tape.clear();
        trace.push_back(loss.value());
    }
    return trace;
}

std::vector<double> reference_margins(const MicroModel& reference,
                                      std::span<const PreferencePair> pairs) {
    ad::NoGradGuard ng;
    std::vector<double> margins;
    margins.reserve(pairs.size());
    for (const auto& p : pairs) {
        check_pair(p);
        Tensor vis = p.patches.defined() ? reference.encode_image(p.patches) : Tensor{};
        double w = logprob_from_visual(reference, vis, p.prompt, p.chosen).value();
        double l = logprob_from_visual(reference, vis, p.prompt, p.rejected).value();
        margins.push_back(w - l);
    }
    return margins;
}

Tensor dpo_loss(const MicroModel& policy, std::span<const PreferencePair> batch,
                std::span<const double> ref_margins, double beta) {
    if (batch.empty()) throw DataError("dpo: empty batch");
    if (ref_margins.size() != batch.size())
        throw ContractError("dpo: one reference margin per pair required");
    if (beta <= 0.0) throw ConfigError("dpo beta must be > 0");
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const auto& p = batch[i];
        check_pair(p);
        Tensor vis = p.patches.defined() ? policy.encode_image(p.patches) : Tensor{};
        Tensor margin = ad::sub(logprob_from_visual(policy, vis, p.prompt, p.chosen),
                                 logprob_from_visual(policy, vis, p.prompt, p.rejected));
        Tensor z = ad::mul_scalar(ad::add_scalar(margin, -ref_margins[i]), beta);
        losses.push_back(ad::softplus(ad::neg(z)));
    }
    return ad::mean(ad::stack_scalars(losses));
}

Tensor dpo_loss(const MicroModel& policy, const MicroModel& reference,
                std::span<const PreferencePair> batch, double beta) {
    if (policy.config().vocab_size != reference.config().vocab_size)
        throw ConfigError("dpo: policy and reference vocabularies differ");
    return dpo_loss(policy, batch, reference_margins(reference, batch), beta);
}

Tensor simpo_loss(const MicroModel& policy, std::span<const PreferencePair> batch,
                  double beta, double gamma) {
    if (batch.empty()) throw DataError("simpo: empty batch");
    if (beta <= 0.0) throw ConfigError("simpo beta must be > 0");
    if (gamma < 0.0) throw ConfigError("simpo gamma must be >= 0");
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (const auto& p : batch) {
        check_pair(p);
        Tensor vis = p.patches.defined() ? policy.encode_image(p.patches) : Tensor{};
        Tensor nw = ad::mul_scalar(logprob_from_visual(policy, vis, p.prompt, p.chosen),
                                    1.0 / static_cast<double>(p.chosen.size()));
        Tensor nl = ad::mul_scalar(logprob_from_visual(policy, vis, p.prompt, p.rejected),
                                    1.0 / static_cast<double>(p.rejected.size()));
        Tensor z = ad::add_scalar(ad::mul_scalar(ad::sub(nw, nl), beta), -gamma);
        losses.push_back(ad::softplus(ad::neg(z)));
    }
    return ad::mean(ad::stack_scalars(losses));
}

Tensor orpo_loss(const MicroModel& policy, std::span<const PreferencePair> batch,
                 double lambda, OrpoDiagnostics* diag) {
    if (batch.empty()) throw DataError("orpo: empty batch");
    if (lambda < 0.0) throw ConfigError("orpo lambda must be >= 0");
    std::vector<Tensor> ce_terms, odds_terms;
    ce_terms.reserve(batch.size());
    odds_terms.reserve(batch.size());
    for (const auto& p : batch) {
        check_pair(p);
        Tensor vis = p.patches.defined() ? policy.encode_image(p.patches) : Tensor{};

        const std::vector<int> seq = cat(p.prompt, p.chosen);
        Tensor logits = vis.defined() ? policy.decode(vis, seq) : policy.forward_text_only(seq);
        std::vector<int> targets(seq.size(), -1);
        for (size_t t = p.prompt.size() - 1; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
        ce_terms.push_back(ad::cross_entropy(logits, targets, -1));

        auto log_odds = [&](const std::vector<int>& y) {
            Tensor avg = ad::mul_scalar(logprob_from_visual(policy, vis, p.prompt, y),
                                         1.0 / static_cast<double>(y.size()));
            avg = ad::neg(ad::clamp_max(ad::neg(avg), kLogProbFloor));
            size_t clamped = 0;
            Tensor prob = ad::clamp_max(ad::exp(avg), 1.0 - 1e-9, &clamped);
            if (diag) diag->clamped += clamped;
            return ad::sub(ad::log(prob), ad::log(ad::affine(prob, -1.0, 1.0)));
        };
        Tensor z = ad::sub(log_odds(p.chosen), log_odds(p.rejected));
        odds_terms.push_back(ad::softplus(ad::neg(z)));
    }
    Tensor sft_term = ad::mean(ad::stack_scalars(ce_terms));
    Tensor odds_term = ad::mul_scalar(ad::mean(ad::stack_scalars(odds_terms)), lambda);
    return ad::add(sft_term, odds_term);
}

double win_rate(const MicroModel& policy, std::span<const PreferencePair> pairs,
                std::span<const double> ref_margins) {
    if (pairs.empty()) throw DataError("win_rate: no pairs");
    if (ref_margins.size() != pairs.size())
        throw ContractError("win_rate: one reference margin per pair required");
    ad::NoGradGuard ng;
    size_t wins = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        Tensor vis = p.patches.defined() ? policy.encode_image(p.patches) : Tensor{};
        double w = logprob_from_visual(policy, vis, p.prompt, p.chosen).value();
        double l = logprob_from_visual(policy, vis, p.prompt, p.rejected).value();
        if (w - l > ref_margins[i]) ++wins;
    }
    return static_cast<double>(wins) / static_cast<double>(pairs.size());
}

std::vector<PreferencePair> build_preference_pairs(const std::vector<SftExample>& corpus,
                                                   const MicroModel& base, size_t max_new,
                                                   int eos_id, PairBuildStats* stats,
                                                   size_t vocab_limit) {
    std::vector<PreferencePair> out;
    PairBuildStats local;
    local.contexts = corpus.size();
    for (const auto& ex : corpus) {
        if (ex.prompt.empty() || ex.target.empty()) {
            ++local.failed;
            continue;
        }
        std::vector<int> gen = base.generate(ex.patches, ex.prompt, max_new, eos_id, vocab_limit);
        if (gen.empty()) {
            ++local.failed;
            continue;
        }
        if (gen == ex.target) {
            ++local.dropped_equal;
            continue;
        }
        PreferencePair p;
        p.patches = ex.patches;
        p.prompt = ex.prompt;
        p.chosen = ex.target;
        p.rejected = std::move(gen);
        p.context_id = ex.id;
        out.push_back(std::move(p));
        ++local.built;
    }
    if (stats) *stats = local;
    return out;
}

PreferenceEpochResult preference_epoch(MicroModel& policy, const MicroModel* reference,
                                       const std::vector<PreferencePair>& pairs, Adam& opt,
                                       ad::Tape& tape, PreferenceObjective objective,
                                       const PreferenceHyperparams& hp,
                                       const TrainLoopConfig& cfg) {
    if (pairs.empty()) throw DataError("preference run: no pairs");
    if (objective == PreferenceObjective::dpo && reference == nullptr)
        throw ConfigError("dpo requires a reference model");
    if (reference && policy.config().vocab_size != reference->config().vocab_size)
        throw ConfigError("policy and reference vocabularies differ");

    // Frozen-reference logprob margins; zero margins double as the win
    // threshold for the reference-free objectives (win = policy prefers
    // the chosen sequence at all).
    std::vector<double> margins(pairs.size(), 0.0);
    if (reference) margins = reference_margins(*reference, pairs);

    const size_t total = steps_for(cfg, pairs.size());
    BatchPlan plan(pairs.size(), cfg);
    PreferenceEpochResult res;
    res.losses.reserve(total);
    OrpoDiagnostics diag;
    for (size_t s = 0; s < total; ++s) {
        auto idxs = plan.next(cfg.batch_size);
        std::vector<PreferencePair> batch;
        std::vector<double> batch_margins;
        batch.reserve(idxs.size());
        for (size_t i : idxs) {
            batch.push_back(pairs[i]);
            batch_margins.push_back(margins[i]);
        }
        Tensor loss;
        switch (objective) {
            case PreferenceObjective::dpo:
                loss = dpo_loss(policy, batch, batch_margins, hp.beta);
                break;
            case PreferenceObjective::simpo:
                loss = simpo_loss(policy, batch, hp.beta, hp.gamma);
                break;
            case PreferenceObjective::orpo:
                loss = orpo_loss(policy, batch, hp.lambda, &diag);
                break;
        }
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
        tape.clear();
        res.losses.push_back(loss.value());
    }
    res.orpo_clamped = diag.clamped;
    res.train_win_rate = win_rate(policy, pairs, margins);
    return res;
}

PreferenceEpochResult dpo_epoch(MicroModel& policy, const MicroModel& reference,
                                const std::vector<PreferencePair>& pairs, Adam& opt,
                                ad::Tape& tape, double beta, const TrainLoopConfig& cfg) {
    PreferenceHyperparams hp;
    hp.beta = beta;
    return preference_epoch(policy, &reference, pairs, opt, tape, PreferenceObjective::dpo, hp,
                            cfg);
}

}  // namespace ldp
