#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "ldp/errors.hpp"
#include "ldp/lora.hpp"
#include "ldp/model.hpp"
#include "ldp/ops.hpp"
#include "ldp/optim.hpp"
#include "ldp/train.hpp"

using namespace ldp;
using ad::Tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.vocab_size = 300;
    c.patch_rows = 2;
    c.patch_cols = 2;
    c.patch_dim = 3;
    c.max_text_len = 16;
    c.adapter_queries = 2;
    c.d_ff = 24;
    c.seed = 99;
    return c;
}

Tensor random_patches(const ModelConfig& c, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(c.n_patches() * c.patch_dim);
    for (auto& x : v) x = rng.gaussian(0.0, 1.0);
    return Tensor::from({c.n_patches(), c.patch_dim}, std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

std::vector<Tensor> snapshot_params(const MicroModel& m) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : m.named_params()) out.push_back(t.detach());
    return out;
}

}  // namespace

TEST_CASE("lora config validation") {
    LoraConfig bad;
    bad.rank = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    LoraConfig unknown;
    unknown.targets = {"q", "x"};
    CHECK_THROWS_AS(unknown.validate(), ConfigError);

    LoraConfig dup;
    dup.targets = {"q", "q"};
    CHECK_THROWS_AS(dup.validate(), ConfigError);

    LoraConfig nodrop;
    nodrop.dropout = 1.0;
    CHECK_THROWS_AS(nodrop.validate(), ConfigError);

    LoraConfig empty;
    empty.targets = {};
    CHECK_THROWS_AS(empty.validate(), ConfigError);

    LoraConfig ok;
    CHECK_NOTHROW(ok.validate());
    CHECK(ok.scaling() == doctest::Approx(2.0));
    ok.alpha = 4.0;
    ok.rank = 16;
    CHECK(ok.scaling() == doctest::Approx(0.25));
}

TEST_CASE("injection is bitwise transparent and exactly enumerable") {
    MicroModel model(tiny_config());
    Tensor patches = random_patches(model.config(), 5);
    std::vector<int> text = {1, 40, 41, 42, 2};

    Tensor before = model.forward(patches, text);

    LoraConfig lcfg;
    lcfg.rank = 4;
    LoraState st = LoraState::inject(model, lcfg);

    Tensor after = model.forward(patches, text);
    CHECK(bitwise_equal(before, after));

    // 1 decoder layer x {q,k,v,o}, an A and a B each
    auto params = st.trainable_params();
    REQUIRE(params.size() == 8);
    CHECK(params[0].first == "dec.0.attn.q.lora_a");
    CHECK(params[1].first == "dec.0.attn.q.lora_b");
    CHECK(params[7].first == "dec.0.attn.o.lora_b");

    // the enumeration hands out the very tensors wired into the model
    const auto& wired = model.decoder_layers()[0].attn.q.adapter;
    REQUIRE(wired != nullptr);
    CHECK(params[0].second.data().data() == wired->a.data().data());
    CHECK(params[1].second.data().data() == wired->b.data().data());

    // every B starts at zero, every A does not
    for (size_t i = 0; i < params.size(); i += 2) {
        bool a_nonzero = false;
        for (double v : params[i].second.data()) a_nonzero |= (v != 0.0);
        CHECK(a_nonzero);
        for (double v : params[i + 1].second.data()) CHECK(v == 0.0);
    }

    CHECK(st.trainable_count() == lora_trainable_count(model.config(), lcfg));
    CHECK(st.trainable_count() == 2 * 16 * 4 * 4);  // 2dr x 4 targets

    CHECK_THROWS_AS(LoraState::inject(model, lcfg), ConfigError);
}

TEST_CASE("trainable accounting reproduces the reference arithmetic") {
    // single d=64 matrix at r=8
    ModelConfig one;
    one.n_dec_layers = 1;
    LoraConfig single;
    single.targets = {"q"};
    single.rank = 8;
    CHECK(lora_trainable_count(one, single) == 1024);

    // default model, default adapters: 4 targets x 2 decoder layers
    CHECK(lora_trainable_count(ModelConfig{}, LoraConfig{}) == 8192);

    // encoder/adapter scopes add their layers
    LoraConfig wide;
    wide.include_encoder = true;
    wide.include_adapter = true;
    CHECK(lora_trainable_count(ModelConfig{}, wide) == 8192 + 8192 + 4096);

    EfficiencyReport rep;
    rep.base_total = 7.0e9;
    rep.trainable = 8.4e6;
    CHECK(rep.percent() == doctest::Approx(0.12));
    CHECK(rep.reduction_factor() == doctest::Approx(833.3).epsilon(1e-3));
}

TEST_CASE("merge folds the low-rank delta into the base weights") {
    MicroModel model(tiny_config());
    Tensor patches = random_patches(model.config(), 11);
    std::vector<int> text = {1, 10, 20, 30, 2};

    LoraConfig lcfg;
    lcfg.rank = 4;

    SUBCASE("merge at B=0 leaves weights bitwise untouched") {
        Tensor w0 = model.decoder_layers()[0].attn.q.w.detach();
        LoraState st = LoraState::inject(model, lcfg);
        st.merge(model);
        CHECK(bitwise_equal(w0, model.decoder_layers()[0].attn.q.w));
        CHECK(model.decoder_layers()[0].attn.q.adapter == nullptr);
        CHECK(st.merged());
        CHECK_THROWS_AS(st.merge(model), ContractError);
    }

    SUBCASE("merged forward tracks adapted forward after the factors move") {
        LoraState st = LoraState::inject(model, lcfg);
        Rng rng(123);
        for (auto& [name, t] : st.trainable_params())
            for (auto& v : const_cast<Tensor&>(t).mutable_data()) v = rng.gaussian(0.0, 0.05);

        Tensor adapted = model.forward(patches, text);
        Tensor w_before = model.decoder_layers()[0].attn.v.w.detach();

        st.merge(model);
        Tensor merged = model.forward(patches, text);
        CHECK(max_abs_diff(adapted, merged) < 1e-10);

        st.unmerge(model);
        CHECK(max_abs_diff(w_before, model.decoder_layers()[0].attn.v.w) < 1e-12);
        Tensor restored = model.forward(patches, text);
        CHECK(max_abs_diff(adapted, restored) < 1e-12);
    }

    SUBCASE("unmerge before merge is a state error") {
        LoraState st = LoraState::inject(model, lcfg);
        CHECK_THROWS_AS(st.unmerge(model), ContractError);
    }
}

TEST_CASE("training moves only the adapters, base weights stay frozen") {
    MicroModel model(tiny_config());
    auto base_before = snapshot_params(model);

    LoraConfig lcfg;
    lcfg.rank = 2;
    LoraState st = LoraState::inject(model, lcfg);

    SftExample ex;
    ex.patches = random_patches(model.config(), 3);
    ex.prompt = {1, 50};
    ex.target = {60, 61, 2};

    ad::Tape tape;
    std::vector<Tensor> trainable;
    for (auto& [name, t] : st.trainable_params()) trainable.push_back(t);
    for (auto& t : trainable) tape.watch(t);

    AdamConfig acfg;
    acfg.lr = 1e-2;
    Adam opt(trainable, acfg);

    TrainLoopConfig loop;
    loop.batch_size = 1;
    loop.steps = 12;
    auto trace = sft_epoch(model, {ex}, opt, tape, loop);
    REQUIRE(trace.size() == 12);
    CHECK(trace.back() < trace.front());

    auto base_after = model.named_params();
    REQUIRE(base_after.size() == base_before.size());
    for (size_t i = 0; i < base_after.size(); ++i)
        CHECK(bitwise_equal(base_before[i], base_after[i].second));

    bool b_moved = false;
    for (double v : model.decoder_layers()[0].attn.q.adapter->b.data()) b_moved |= (v != 0.0);
    CHECK(b_moved);
}

TEST_CASE("adapter checkpoints restore the factors onto a fresh base") {
    auto cfg = tiny_config();
    MicroModel model(cfg);
    Tensor patches = random_patches(cfg, 21);
    std::vector<int> text = {1, 77, 78, 2};

    LoraConfig lcfg;
    lcfg.rank = 3;
    lcfg.alpha = 12.0;
    LoraState st = LoraState::inject(model, lcfg);
    Rng rng(9);
    for (auto& [name, t] : st.trainable_params())
        for (auto& v : const_cast<Tensor&>(t).mutable_data()) v = rng.gaussian(0.0, 0.05);
    Tensor adapted = model.forward(patches, text);

    auto path = std::filesystem::temp_directory_path() / "ldp_adapter_test.ckpt";
    save_adapter_checkpoint(path.string(), st);

    MicroModel fresh(cfg);  // same base seed, same base weights
    LoraState loaded = load_adapter_checkpoint(path.string(), fresh);
    CHECK(loaded.config().rank == 3);
    CHECK(loaded.config().alpha == doctest::Approx(12.0));

    Tensor replayed = fresh.forward(patches, text);
    CHECK(bitwise_equal(adapted, replayed));
    std::filesystem::remove(path);
}
