#include "ldp/lora.hpp"

#include <algorithm>
#include <set>

#include "ldp/checkpoint.hpp"
#include "ldp/errors.hpp"
#include "ldp/rng.hpp"

namespace ldp {

namespace {

const std::set<std::string>& valid_targets() {
    static const std::set<std::string> t = {"q", "k", "v", "o"};
    return t;
}

LinearLayer& proj_of(AttentionBlock& attn, const std::string& t) {
    if (t == "q") return attn.q;
    if (t == "k") return attn.k;
    if (t == "v") return attn.v;
    return attn.o;
}

// Stable enumeration of adapted projections. Order here fixes the rng
// consumption order at injection and the checkpoint key order, so it must
// not change once checkpoints exist.
std::vector<std::string> target_paths(const ModelConfig& mcfg, const LoraConfig& lcfg) {
    std::vector<std::string> paths;
    auto add_scope = [&](const std::string& scope, size_t layers) {
        for (size_t i = 0; i < layers; ++i)
            for (const auto& t : lcfg.targets)
                paths.push_back(scope + "." + std::to_string(i) + ".attn." + t);
    };
    add_scope("dec", mcfg.n_dec_layers);
    if (lcfg.include_encoder) add_scope("enc", mcfg.n_enc_layers);
    if (lcfg.include_adapter)
        for (const auto& t : lcfg.targets) paths.push_back("adapter.attn." + t);
    return paths;
}

ad::Tensor gaussian_tensor(const ad::Shape& shape, Rng& rng, double stddev) {
    size_t n = 1;
    for (auto d : shape) n *= static_cast<size_t>(d);
    std::vector<double> data(n);
    for (auto& v : data) v = rng.gaussian(0.0, stddev);
    return ad::Tensor::from(shape, std::move(data));
}

LinearLayer& resolve(MicroModel& model, const std::string& path) {
    // path is "<scope>.<idx>.attn.<t>" or "adapter.attn.<t>"
    auto dot1 = path.find('.');
    std::string scope = path.substr(0, dot1);
    std::string rest = path.substr(dot1 + 1);
    if (scope == "adapter") {
        return proj_of(model.adapter_block().attn, rest.substr(rest.rfind('.') + 1));
    }
    auto dot2 = rest.find('.');
    size_t idx = static_cast<size_t>(std::stoul(rest.substr(0, dot2)));
    std::string t = rest.substr(rest.rfind('.') + 1);
    auto& layers = (scope == "dec") ? model.decoder_layers() : model.encoder_layers();
    if (idx >= layers.size()) throw ContractError("lora target out of range: " + path);
    return proj_of(layers[idx].attn, t);
}

}  // namespace

void LoraConfig::validate() const {
    if (rank < 1) throw ConfigError("lora rank must be >= 1");
    if (alpha < 0.0) throw ConfigError("lora alpha must be >= 0");
    if (targets.empty()) throw ConfigError("lora targets must not be empty");
    std::set<std::string> seen;
    for (const auto& t : targets) {
        if (!valid_targets().count(t))
            throw ConfigError("unknown lora target '" + t + "' (expected q, k, v, o)");
        if (!seen.insert(t).second) throw ConfigError("duplicate lora target '" + t + "'");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("lora dropout must be in [0, 1)");
    if (init_std <= 0.0) throw ConfigError("lora init_std must be > 0");
}

LoraState LoraState::inject(MicroModel& model, const LoraConfig& cfg) {
    cfg.validate();
    const auto paths = target_paths(model.config(), cfg);
    for (const auto& p : paths)
        if (resolve(model, p).adapter)
            throw ConfigError("adapters already injected at " + p);

    LoraState st;
    st.cfg_ = cfg;
    Rng rng(cfg.seed);
    const double scaling = cfg.scaling();
    for (const auto& p : paths) {
        LinearLayer& layer = resolve(model, p);
        const size_t d_out = layer.w.shape()[0];
        const size_t d_in = layer.w.shape()[1];
        auto adp = std::make_shared<LowRankAdapter>();
        adp->a = gaussian_tensor({cfg.rank, d_in}, rng, cfg.init_std);
        adp->b = ad::Tensor::zeros({d_out, cfg.rank});
        adp->scaling = scaling;
        adp->dropout_p = cfg.dropout;
        layer.adapter = adp;
        st.entries_.push_back({p, adp});
    }
    return st;
}

std::vector<std::pair<std::string, ad::Tensor>> LoraState::trainable_params() const {
    std::vector<std::pair<std::string, ad::Tensor>> out;
    out.reserve(entries_.size() * 2);
    for (const auto& e : entries_) {
        out.emplace_back(e.target + ".lora_a", e.adapter->a);
        out.emplace_back(e.target + ".lora_b", e.adapter->b);
    }
    return out;
}

size_t LoraState::trainable_count() const {
    size_t n = 0;
    for (const auto& e : entries_)
        n += static_cast<size_t>(e.adapter->a.numel() + e.adapter->b.numel());
    return n;
}

void LoraState::merge(MicroModel& model) {
    if (merged_) throw ContractError("lora adapters already merged");
    for (const auto& e : entries_) {
        LinearLayer& layer = resolve(model, e.target);
        if (layer.adapter != e.adapter)
            throw ContractError("model does not carry these adapters: " + e.target);
        const auto& a = e.adapter->a;  // [r x d_in]
        const auto& b = e.adapter->b;  // [d_out x r]
        const size_t r = static_cast<size_t>(a.shape()[0]);
        const size_t din = static_cast<size_t>(a.shape()[1]);
        const size_t dout = static_cast<size_t>(b.shape()[0]);
        auto w = layer.w.mutable_data();
        auto pa = a.data();
        auto pb = b.data();
        const double s = e.adapter->scaling;
        for (size_t i = 0; i < dout; ++i)
            for (size_t kk = 0; kk < r; ++kk) {
                const double bs = s * pb[i * r + kk];
                if (bs == 0.0) continue;  // keeps the zero-B merge bitwise
                for (size_t j = 0; j < din; ++j) w[i * din + j] += bs * pa[kk * din + j];
            }
        layer.adapter.reset();
    }
    merged_ = true;
}

void LoraState::unmerge(MicroModel& model) {
    if (!merged_) throw ContractError("lora adapters are not merged");
    for (const auto& e : entries_) {
        LinearLayer& layer = resolve(model, e.target);
        if (layer.adapter)
            throw ContractError("target already has an adapter: " + e.target);
        const auto& a = e.adapter->a;
        const auto& b = e.adapter->b;
        const size_t r = static_cast<size_t>(a.shape()[0]);
        const size_t din = static_cast<size_t>(a.shape()[1]);
        const size_t dout = static_cast<size_t>(b.shape()[0]);
        auto w = layer.w.mutable_data();
        auto pa = a.data();
        auto pb = b.data();
        const double s = e.adapter->scaling;
        for (size_t i = 0; i < dout; ++i)
            for (size_t kk = 0; kk < r; ++kk) {
                const double bs = s * pb[i * r + kk];
                if (bs == 0.0) continue;
                for (size_t j = 0; j < din; ++j) w[i * din + j] -= bs * pa[kk * din + j];
            }
        layer.adapter = e.adapter;
    }
    merged_ = false;
}

void save_adapter_checkpoint(const std::string& path, const LoraState& state) {
    if (state.merged()) throw ContractError("cannot checkpoint merged adapters");
    const auto& cfg = state.config();
    Checkpoint ckpt;
    ckpt.kind = "adapter";
    ckpt.meta = {{"rank", cfg.rank},
                 {"alpha", cfg.alpha},
                 {"targets", cfg.targets},
                 {"include_encoder", cfg.include_encoder},
                 {"include_adapter", cfg.include_adapter},
                 {"dropout", cfg.dropout},
                 {"init_std", cfg.init_std},
                 {"seed", cfg.seed}};
    ckpt.tensors = state.trainable_params();
    save_checkpoint(path, ckpt);
}

LoraState load_adapter_checkpoint(const std::string& path, MicroModel& model) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.kind != "adapter")
        throw DataError("checkpoint kind '" + ckpt.kind + "', expected 'adapter'");
    LoraConfig cfg;
    try {
        cfg.rank = ckpt.meta.at("rank").get<size_t>();
        cfg.alpha = ckpt.meta.at("alpha").get<double>();
        cfg.targets = ckpt.meta.at("targets").get<std::vector<std::string>>();
        cfg.include_encoder = ckpt.meta.at("include_encoder").get<bool>();
        cfg.include_adapter = ckpt.meta.at("include_adapter").get<bool>();
        cfg.dropout = ckpt.meta.at("dropout").get<double>();
        cfg.init_std = ckpt.meta.at("init_std").get<double>();
        cfg.seed = ckpt.meta.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("adapter checkpoint meta malformed: ") + e.what());
    }
    LoraState st = LoraState::inject(model, cfg);
    auto params = st.trainable_params();
    if (params.size() != ckpt.tensors.size())
        throw DataError("adapter checkpoint tensor count does not match config");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [want_name, dst] = params[i];
        const auto& [got_name, src] = ckpt.tensors[i];
        if (want_name != got_name)
            throw DataError("adapter checkpoint tensor '" + got_name + "', expected '" +
                            want_name + "'");
        if (src.shape() != dst.shape())
            throw DataError("adapter checkpoint shape mismatch at " + got_name);
        auto out = const_cast<ad::Tensor&>(dst).mutable_data();
        auto in = src.data();
        std::copy(in.begin(), in.end(), out.begin());
    }
    return st;
}

size_t lora_trainable_count(const ModelConfig& mcfg, const LoraConfig& lcfg) {
    lcfg.validate();
    size_t matrices = lcfg.targets.size() * mcfg.n_dec_layers;
    if (lcfg.include_encoder) matrices += lcfg.targets.size() * mcfg.n_enc_layers;
    if (lcfg.include_adapter) matrices += lcfg.targets.size();
    // every adapted projection is d_model x d_model, so each contributes
    // r*d (A) + d*r (B) = 2*d*r
    return matrices * 2 * static_cast<size_t>(mcfg.d_model) * lcfg.rank;
}

}  // namespace ldp
