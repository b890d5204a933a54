#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ldp/rng.hpp"
#include "ldp/tensor.hpp"

namespace ldp {

struct ModelConfig {
    size_t d_model = 64;
    size_t n_heads = 4;
    size_t n_enc_layers = 2;
    size_t n_dec_layers = 2;
    size_t vocab_size = 512;
    size_t patch_rows = 8;
    size_t patch_cols = 8;
    size_t patch_dim = 4;
    size_t max_text_len = 64;
    size_t adapter_queries = 16;
    size_t d_ff = 128;
    double rope_base = 10000.0;
    bool use_rope = true;
    // fixed multiplier on the output logits; the head is frozen during
    // adapter tuning, so this sets the reachable confidence ceiling
    double logit_scale = 4.0;
    // Sequential 1D positions for the visual block in the decoder; when
    // false all visual tokens sit at position 0 (identity rotation, i.e. no
    // positional encoding for them).
    bool visual_positions = true;
    uint64_t seed = 1;

    void validate() const;
    size_t head_dim() const { return d_model / n_heads; }
    size_t n_patches() const { return patch_rows * patch_cols; }
};

// Low-rank bolt-on for one linear layer: effective weight W + scaling * B.A.
struct LowRankAdapter {
    ad::Tensor a;  // [r x d_in]
    ad::Tensor b;  // [d_out x r]
    double scaling = 1.0;
    double dropout_p = 0.0;
};

struct LinearLayer {
    ad::Tensor w;  // [d_out x d_in]
    ad::Tensor b;  // [d_out]
    std::shared_ptr<LowRankAdapter> adapter;  // null until injected
};

struct AttentionBlock {
    LinearLayer q, k, v, o;
};

struct TransformerLayer {
    ad::Tensor ln1_g, ln1_b;
    AttentionBlock attn;
    ad::Tensor ln2_g, ln2_b;
    LinearLayer mlp1, mlp2;
};

struct AdapterBlock {
    ad::Tensor queries;  // [adapter_queries x d_model]
    AttentionBlock attn;
    ad::Tensor ln_g, ln_b;
};

// Vision encoder -> cross-attention adapter -> causal decoder over
// [visual tokens ‖ text tokens], with rotary positions (2D in the encoder,
// 1D in the decoder). Weights are plain tensors; training code watches the
// ones it wants trained.
class MicroModel {
  public:
    explicit MicroModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // image_patches: [n_patches x patch_dim], row-major over the grid.
    ad::Tensor encode_patches(const ad::Tensor& image_patches) const;  // [P x d]
    ad::Tensor encode_image(const ad::Tensor& image_patches) const;    // [nq x d]

    // Logits for the text rows only: [len(text) x vocab].
    ad::Tensor forward(const ad::Tensor& image_patches, const std::vector<int>& text) const;
    // Decoder-only path (no visual block, positions from 0): the image
    // ablation hook.
    ad::Tensor forward_text_only(const std::vector<int>& text) const;
    // Shared core: visual may be undefined for the text-only path.
    ad::Tensor decode(const ad::Tensor& visual, const std::vector<int>& text) const;

    // Greedy continuation of prompt; stops after emitting eos or max_new
    // tokens. Returns only the newly generated ids (eos included if hit).
    // vocab_limit > 0 restricts sampling to ids below it (embedding rows
    // past the learned text vocabulary have no surface form).
    std::vector<int> generate(const ad::Tensor& image_patches, const std::vector<int>& prompt,
                              size_t max_new, int eos_id, size_t vocab_limit = 0) const;
    std::vector<int> generate_top_k(const ad::Tensor& image_patches,
                                    const std::vector<int>& prompt, size_t max_new, int eos_id,
                                    size_t k, Rng& rng, size_t vocab_limit = 0) const;

    // Stable (name, tensor) enumeration; names are checkpoint keys and the
    // construction/init order. Adapter (LoRA) tensors are not included.
    std::vector<std::pair<std::string, ad::Tensor>> named_params() const;

    size_t param_count() const;
    static size_t param_count_formula(const ModelConfig& cfg);

    // Mutable wiring access for adapter injection.
    std::vector<TransformerLayer>& encoder_layers() { return enc_; }
    std::vector<TransformerLayer>& decoder_layers() { return dec_; }
    AdapterBlock& adapter_block() { return adapter_; }
    const std::vector<TransformerLayer>& encoder_layers() const { return enc_; }
    const std::vector<TransformerLayer>& decoder_layers() const { return dec_; }
    const AdapterBlock& adapter_block() const { return adapter_; }
    const LinearLayer& patch_embedding() const { return patch_embed_; }
    const ad::Tensor& token_embedding() const { return tok_embed_; }
    const ad::Tensor& final_ln_gamma() const { return final_ln_g_; }
    const ad::Tensor& final_ln_beta() const { return final_ln_b_; }
    const LinearLayer& output_projection() const { return out_proj_; }

  private:
    ModelConfig cfg_;
    LinearLayer patch_embed_;
    std::vector<TransformerLayer> enc_;
    AdapterBlock adapter_;
    std::vector<TransformerLayer> dec_;
    ad::Tensor tok_embed_;  // [vocab x d]
    ad::Tensor final_ln_g_, final_ln_b_;
    LinearLayer out_proj_;  // [vocab x d]
};

// y = x . W^T + b, plus the low-rank branch when an adapter is attached.
ad::Tensor linear(const ad::Tensor& x, const LinearLayer& layer);

// Installs (or clears, with nullptr) the thread-local rng that turns adapter
// dropout on during training forward passes; returns the previous value.
Rng* exchange_adapter_dropout_rng(Rng* rng);

}  // namespace ldp
