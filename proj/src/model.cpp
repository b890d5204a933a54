#include "ldp/model.hpp"

#include <algorithm>
#include <cmath>

#include "ldp/errors.hpp"
#include "ldp/ops.hpp"

namespace ldp {

using ad::Tensor;

namespace {

// Set while a training loop wants adapter dropout live; see
// AdapterDropoutScope in lora.hpp.
thread_local Rng* t_adapter_dropout_rng = nullptr;

struct RopeSpec {
    const std::vector<int64_t>* pos1 = nullptr;
    const std::vector<std::array<int64_t, 2>>* pos2 = nullptr;
    double base = 10000.0;
};

Tensor rotate(const Tensor& h, const RopeSpec& rope) {
    if (rope.pos1) return ad::rope1d(h, *rope.pos1, rope.base);
    if (rope.pos2) return ad::rope2d(h, *rope.pos2, rope.base);
    return h;
}

// Rotary rotation goes on q, k, and v: with q/k-only rotation a grid of
// identical patches would wash out all positional signal in the value mix,
// and the encoder position-sensitivity contract would be unsatisfiable.
Tensor self_attention(const Tensor& x, const AttentionBlock& blk,
                      const std::vector<uint8_t>* mask, const RopeSpec& rope, size_t n_heads) {
    Tensor q = linear(x, blk.q);
    Tensor k = linear(x, blk.k);
    Tensor v = linear(x, blk.v);
    size_t d = q.cols();
    size_t hd = d / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (size_t h = 0; h < n_heads; ++h) {
        Tensor qh = rotate(ad::slice_cols(q, h * hd, hd), rope);
        Tensor kh = rotate(ad::slice_cols(k, h * hd, hd), rope);
        Tensor vh = rotate(ad::slice_cols(v, h * hd, hd), rope);
        Tensor scores = ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale);
        Tensor attn = mask ? ad::masked_softmax_rows(scores, *mask) : ad::softmax(scores, 1);
        heads.push_back(ad::matmul(attn, vh));
    }
    return linear(ad::concat_cols(heads), blk.o);
}

Tensor cross_attention(const Tensor& queries, const Tensor& context, const AttentionBlock& blk,
                       size_t n_heads) {
    Tensor q = linear(queries, blk.q);
    Tensor k = linear(context, blk.k);
    Tensor v = linear(context, blk.v);
    size_t d = q.cols();
    size_t hd = d / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (size_t h = 0; h < n_heads; ++h) {
        Tensor qh = ad::slice_cols(q, h * hd, hd);
        Tensor kh = ad::slice_cols(k, h * hd, hd);
        Tensor vh = ad::slice_cols(v, h * hd, hd);
        Tensor scores = ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale);
        heads.push_back(ad::matmul(ad::softmax(scores, 1), vh));
    }
    return linear(ad::concat_cols(heads), blk.o);
}

Tensor transformer_layer(const Tensor& x_in, const TransformerLayer& layer,
                         const std::vector<uint8_t>* mask, const RopeSpec& rope,
                         size_t n_heads) {
    Tensor x = x_in;
    Tensor h = ad::layer_norm(x, layer.ln1_g, layer.ln1_b);
    x = ad::add(x, self_attention(h, layer.attn, mask, rope, n_heads));
    Tensor h2 = ad::layer_norm(x, layer.ln2_g, layer.ln2_b);
    Tensor up = ad::gelu(linear(h2, layer.mlp1));
    return ad::add(x, linear(up, layer.mlp2));
}

}  // namespace

Tensor linear(const Tensor& x, const LinearLayer& layer) {
    Tensor y = ad::add_rowvec(ad::matmul(x, ad::transpose(layer.w)), layer.b);
    if (layer.adapter) {
        const auto& lr = *layer.adapter;
        Tensor h = ad::matmul(x, ad::transpose(lr.a));
        if (lr.dropout_p > 0.0 && t_adapter_dropout_rng) {
            h = ad::dropout(h, lr.dropout_p, *t_adapter_dropout_rng, true);
        }
        y = ad::add(y, ad::mul_scalar(ad::matmul(h, ad::transpose(lr.b)), lr.scaling));
    }
    return y;
}

Rng* exchange_adapter_dropout_rng(Rng* rng) {
    Rng* prev = t_adapter_dropout_rng;
    t_adapter_dropout_rng = rng;
    return prev;
}

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("model config: d_model must be a positive multiple of n_heads");
    }
    if (head_dim() % 4 != 0) {
        throw ConfigError("model config: head_dim must be divisible by 4 for 2D rotary");
    }
    if (n_enc_layers == 0 || n_dec_layers == 0) {
        throw ConfigError("model config: layer counts must be positive");
    }
    if (vocab_size < 4) {
        throw ConfigError("model config: vocab_size too small");
    }
    if (patch_rows == 0 || patch_cols == 0 || patch_dim == 0) {
        throw ConfigError("model config: patch grid and patch_dim must be positive");
    }
    if (adapter_queries == 0 || adapter_queries > n_patches()) {
        throw ConfigError("model config: adapter_queries must be in [1, n_patches]");
    }
    if (max_text_len < 2) {
        throw ConfigError("model config: max_text_len must be at least 2");
    }
    if (d_ff == 0) {
        throw ConfigError("model config: d_ff must be positive");
    }
    if (rope_base <= 0.0) {
        throw ConfigError("model config: rope_base must be positive");
    }
    if (logit_scale <= 0.0) {
        throw ConfigError("model config: logit_scale must be positive");
    }
}

namespace {

Tensor gaussian_tensor(const ad::Shape& shape, Rng& rng, double stddev) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    std::vector<double> data(n);
    for (auto& v : data) v = rng.gaussian(0.0, stddev);
    return Tensor::from(shape, std::move(data));
}

// fan-in scaling keeps activations O(1) at any width; the base stays frozen
// under adapter tuning, so its init must already span a useful range
LinearLayer make_linear(size_t d_out, size_t d_in, Rng& rng) {
    LinearLayer l;
    l.w = gaussian_tensor({d_out, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
    l.b = Tensor::zeros({d_out});
    return l;
}

AttentionBlock make_attention(size_t d, Rng& rng) {
    AttentionBlock blk;
    blk.q = make_linear(d, d, rng);
    blk.k = make_linear(d, d, rng);
    blk.v = make_linear(d, d, rng);
    blk.o = make_linear(d, d, rng);
    return blk;
}

TransformerLayer make_layer(const ModelConfig& cfg, Rng& rng) {
    TransformerLayer l;
    l.ln1_g = Tensor::full({cfg.d_model}, 1.0);
    l.ln1_b = Tensor::zeros({cfg.d_model});
    l.attn = make_attention(cfg.d_model, rng);
    l.ln2_g = Tensor::full({cfg.d_model}, 1.0);
    l.ln2_b = Tensor::zeros({cfg.d_model});
    l.mlp1 = make_linear(cfg.d_ff, cfg.d_model, rng);
    l.mlp2 = make_linear(cfg.d_model, cfg.d_ff, rng);
    return l;
}

}  // namespace

MicroModel::MicroModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    patch_embed_ = make_linear(cfg_.d_model, cfg_.patch_dim, rng);
    for (size_t i = 0; i < cfg_.n_enc_layers; ++i) enc_.push_back(make_layer(cfg_, rng));
    adapter_.queries = gaussian_tensor({cfg_.adapter_queries, cfg_.d_model}, rng,
                                       1.0 / std::sqrt(static_cast<double>(cfg_.d_model)));
    adapter_.attn = make_attention(cfg_.d_model, rng);
    adapter_.ln_g = Tensor::full({cfg_.d_model}, 1.0);
    adapter_.ln_b = Tensor::zeros({cfg_.d_model});
    for (size_t i = 0; i < cfg_.n_dec_layers; ++i) dec_.push_back(make_layer(cfg_, rng));
    tok_embed_ = gaussian_tensor({cfg_.vocab_size, cfg_.d_model}, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg_.d_model)));
    final_ln_g_ = Tensor::full({cfg_.d_model}, 1.0);
    final_ln_b_ = Tensor::zeros({cfg_.d_model});
    out_proj_ = make_linear(cfg_.vocab_size, cfg_.d_model, rng);
}

Tensor MicroModel::encode_patches(const Tensor& image_patches) const {
    if (image_patches.ndim() != 2 || image_patches.rows() != cfg_.n_patches() ||
        image_patches.cols() != cfg_.patch_dim) {
        throw ShapeError("encode_patches: patch grid does not match model config");
    }
    Tensor x = linear(image_patches, patch_embed_);
    std::vector<std::array<int64_t, 2>> pos(cfg_.n_patches());
    for (size_t p = 0; p < pos.size(); ++p) {
        pos[p] = {static_cast<int64_t>(p / cfg_.patch_cols),
                  static_cast<int64_t>(p % cfg_.patch_cols)};
    }
    RopeSpec rope;
    rope.base = cfg_.rope_base;
    if (cfg_.use_rope) rope.pos2 = &pos;
    for (const auto& layer : enc_) {
        x = transformer_layer(x, layer, nullptr, rope, cfg_.n_heads);
    }
    return x;
}

Tensor MicroModel::encode_image(const Tensor& image_patches) const {
    Tensor ctx = encode_patches(image_patches);
    Tensor attended = cross_attention(adapter_.queries, ctx, adapter_.attn, cfg_.n_heads);
    return ad::layer_norm(ad::add(adapter_.queries, attended), adapter_.ln_g, adapter_.ln_b);
}

Tensor MicroModel::decode(const Tensor& visual, const std::vector<int>& text) const {
    if (text.empty()) {
        throw DataError("decode: empty text sequence");
    }
    if (text.size() > cfg_.max_text_len) {
        throw DataError("decode: text length exceeds max_text_len");
    }
    size_t nv = visual.defined() ? visual.rows() : 0;
    size_t L = text.size();
    size_t T = nv + L;

    Tensor emb = ad::embedding(tok_embed_, text);
    Tensor x = visual.defined() ? ad::concat_rows({visual, emb}) : emb;

    std::vector<uint8_t> mask(T * T, 0);
    for (size_t i = 0; i < T; ++i) {
        for (size_t j = 0; j <= i; ++j) mask[i * T + j] = 1;
    }
    std::vector<int64_t> pos(T);
    for (size_t i = 0; i < nv; ++i) {
        pos[i] = cfg_.visual_positions ? static_cast<int64_t>(i) : 0;
    }
    for (size_t j = 0; j < L; ++j) pos[nv + j] = static_cast<int64_t>(nv + j);

    RopeSpec rope;
    rope.base = cfg_.rope_base;
    if (cfg_.use_rope) rope.pos1 = &pos;
    for (const auto& layer : dec_) {
        x = transformer_layer(x, layer, &mask, rope, cfg_.n_heads);
    }
    Tensor x_text = ad::slice_rows(x, nv, L);
    Tensor normed = ad::layer_norm(x_text, final_ln_g_, final_ln_b_);
    // the head never trains under adapter tuning; the fixed scale widens its
    // logit range so hidden-state direction alone can separate the vocab
    return ad::mul_scalar(linear(normed, out_proj_), cfg_.logit_scale);
}

Tensor MicroModel::forward(const Tensor& image_patches, const std::vector<int>& text) const {
    return decode(encode_image(image_patches), text);
}

Tensor MicroModel::forward_text_only(const std::vector<int>& text) const {
    return decode(Tensor(), text);
}

namespace {

size_t argmax_row(std::span<const double> row) {
    size_t best = 0;
    for (size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

}  // namespace

std::vector<int> MicroModel::generate(const Tensor& image_patches, const std::vector<int>& prompt,
                                      size_t max_new, int eos_id, size_t vocab_limit) const {
    if (prompt.empty()) throw DataError("generate: prompt must be nonempty");
    if (max_new == 0) throw ConfigError("generate: max_new must be at least 1");
    ad::NoGradGuard ng;
    Tensor visual = image_patches.defined() ? encode_image(image_patches) : Tensor();
    std::vector<int> seq = prompt;
    std::vector<int> out;
    while (out.size() < max_new && seq.size() < cfg_.max_text_len) {
        Tensor logits = decode(visual, seq);
        auto d = logits.data();
        size_t V = logits.cols();
        if (vocab_limit > 0) V = std::min(V, vocab_limit);
        int next = static_cast<int>(argmax_row(d.subspan((logits.rows() - 1) * logits.cols(), V)));
        seq.push_back(next);
        out.push_back(next);
        if (next == eos_id) break;
    }
    return out;
}

std::vector<int> MicroModel::generate_top_k(const Tensor& image_patches,
                                            const std::vector<int>& prompt, size_t max_new,
                                            int eos_id, size_t k, Rng& rng,
                                            size_t vocab_limit) const {
    if (prompt.empty()) throw DataError("generate: prompt must be nonempty");
    if (max_new == 0) throw ConfigError("generate: max_new must be at least 1");
    if (k == 0) throw ConfigError("generate: top_k needs k >= 1");
    ad::NoGradGuard ng;
    Tensor visual = image_patches.defined() ? encode_image(image_patches) : Tensor();
    std::vector<int> seq = prompt;
    std::vector<int> out;
    while (out.size() < max_new && seq.size() < cfg_.max_text_len) {
        Tensor logits = decode(visual, seq);
        size_t V = logits.cols();
        if (vocab_limit > 0) V = std::min(V, vocab_limit);
        auto row = logits.data().subspan((logits.rows() - 1) * logits.cols(), V);
        size_t kk = std::min(k, V);
        std::vector<size_t> order(V);
        for (size_t i = 0; i < V; ++i) order[i] = i;
        std::partial_sort(order.begin(), order.begin() + kk, order.end(),
                          [&](size_t a, size_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;  // deterministic tie order
                          });
        double mx = row[order[0]];
        std::vector<double> probs(kk);
        double z = 0.0;
        for (size_t i = 0; i < kk; ++i) {
            probs[i] = std::exp(row[order[i]] - mx);
            z += probs[i];
        }
        double u = rng.uniform() * z;
        size_t pick = kk - 1;
        double acc = 0.0;
        for (size_t i = 0; i < kk; ++i) {
            acc += probs[i];
            if (u < acc) {
                pick = i;
                break;
            }
        }
        int next = static_cast<int>(order[pick]);
        seq.push_back(next);
        out.push_back(next);
        if (next == eos_id) break;
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> MicroModel::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto lin = [&](const std::string& name, const LinearLayer& l) {
        out.emplace_back(name + ".w", l.w);
        out.emplace_back(name + ".b", l.b);
    };
    auto attn = [&](const std::string& name, const AttentionBlock& a) {
        lin(name + ".q", a.q);
        lin(name + ".k", a.k);
        lin(name + ".v", a.v);
        lin(name + ".o", a.o);
    };
    auto layer = [&](const std::string& name, const TransformerLayer& l) {
        out.emplace_back(name + ".ln1.g", l.ln1_g);
        out.emplace_back(name + ".ln1.b", l.ln1_b);
        attn(name + ".attn", l.attn);
        out.emplace_back(name + ".ln2.g", l.ln2_g);
        out.emplace_back(name + ".ln2.b", l.ln2_b);
        lin(name + ".mlp1", l.mlp1);
        lin(name + ".mlp2", l.mlp2);
    };
    lin("patch_embed", patch_embed_);
    for (size_t i = 0; i < enc_.size(); ++i) layer("enc." + std::to_string(i), enc_[i]);
    out.emplace_back("adapter.queries", adapter_.queries);
    attn("adapter.attn", adapter_.attn);
    out.emplace_back("adapter.ln.g", adapter_.ln_g);
    out.emplace_back("adapter.ln.b", adapter_.ln_b);
    for (size_t i = 0; i < dec_.size(); ++i) layer("dec." + std::to_string(i), dec_[i]);
    out.emplace_back("tok_embed", tok_embed_);
    out.emplace_back("final_ln.g", final_ln_g_);
    out.emplace_back("final_ln.b", final_ln_b_);
    lin("out_proj", out_proj_);
    return out;
}

size_t MicroModel::param_count() const {
    size_t n = 0;
    for (const auto& [name, t] : named_params()) {
        (void)name;
        n += t.numel();
    }
    return n;
}

size_t MicroModel::param_count_formula(const ModelConfig& cfg) {
    size_t d = cfg.d_model, f = cfg.d_ff, V = cfg.vocab_size;
    // ln pair = 2d; attention = 4 (d*d + d); mlp = d*f + f + f*d + d.
    size_t layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
    size_t patch = cfg.patch_dim * d + d;
    size_t adapter = cfg.adapter_queries * d + 4 * (d * d + d) + 2 * d;
    size_t total = patch + (cfg.n_enc_layers + cfg.n_dec_layers) * layer + adapter;
    total += V * d;            // token embedding
    total += 2 * d;            // final layer norm
    total += V * d + V;        // output projection
    return total;
}

}  // namespace ldp
