#include <doctest.h>

#include <cstring>

#include "evalnet/model.hpp"
#include "synthetic.hpp"

using namespace evalnet;
using evalnet::testsupport::tiny_model_config;

namespace {

// Hand parameter count, derived from the architecture definition and not
// from ParamStore: conv(in,out,k) owns out*in*k*k weights plus out biases.
long long conv_params(int in, int out, int k) {
    return static_cast<long long>(out) * in * k * k + out;
}

long long res_block_params(int c) { return 2 * conv_params(c, c, 3); }

long long expected_params(const ModelConfig& cfg) {
    const auto& enc = cfg.encoder_channels;
    const auto& dec = cfg.decoder_channels;
    long long total = 0;
    for (int i = 0; i < 5; ++i) {
        const int in = i == 0 ? cfg.in_channels : enc[i - 1];
        const int f = enc[i];
        total += conv_params(in, f, 3) + conv_params(f, f, 3) + conv_params(f, f, 3);
        if (in != f) total += conv_params(in, f, 1);
    }
    const int nb = static_cast<int>(cfg.ma_dilations.size());
    for (int s = 0; s < 5; ++s) {
        const int pc = s == 0 ? enc[4] : dec[s - 1];
        const int sc = s < 4 ? enc[3 - s] : enc[0];
        const int d = dec[s];
        if (cfg.srf_enabled)
            total += conv_params(sc, d, 1) + conv_params(sc, d, 5) +
                     conv_params(d + pc / 4, d, 3) + conv_params(d, d, 1) + conv_params(d, d, 1);
        else
            total += conv_params(sc + pc / 4, d, 3);
        if (cfg.ma_enabled) total += nb * conv_params(d, d, 3) + conv_params(d, nb * d, 1);
    }
    total += conv_params(dec[4], 1, 3);
    if (cfg.dfr_enabled) {
        const int m = cfg.dfr_channels;
        total += 2 * conv_params(1, m, 3);
        total += (cfg.dfr_blocks_low + cfg.dfr_blocks_high + cfg.dfr_blocks_fused) *
                 res_block_params(m);
        total += 3 * conv_params(m, m, 1);
        total += conv_params(2 * m, m, 1);
        total += conv_params(m, 1, 3);
    }
    return total;
}

bool same_bytes(const Tensor& a, const Tensor& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("config validation rejects malformed settings") {
    ModelConfig bad = tiny_model_config(7, 5);
    bad.encoder_channels = {8, 8, 8};
    CHECK_THROWS_AS(Model m(bad), DataError);

    bad = tiny_model_config(7, 5);
    bad.cla_window = 4;
    CHECK_THROWS_AS(Model m(bad), DataError);

    bad = tiny_model_config(7, 5);
    bad.encoder_channels[4] = 6;  // pixel-shuffle needs a multiple of 4
    CHECK_THROWS_AS(Model m(bad), DataError);

    bad = tiny_model_config(7, 5);
    bad.scale_ratio = 0;
    CHECK_THROWS_AS(Model m(bad), DataError);

    bad = tiny_model_config(7, 5);
    bad.ma_dilations.clear();
    CHECK_THROWS_AS(Model m(bad), DataError);
}

TEST_CASE("config json round trip") {
    ModelConfig cfg = tiny_model_config(7, 5);
    cfg.srf_enabled = false;
    const ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back == cfg);
    // Missing keys fall back to defaults.
    const ModelConfig defd = ModelConfig::from_json(nlohmann::json::object());
    CHECK(defd == ModelConfig{});
}

TEST_CASE("forward shape contract at the documented sizes") {
    ModelConfig cfg = tiny_model_config(7, 5);
    Model model(cfg);
    Tensor x = Tensor::zeros({1, 7, 64, 64});
    Tensor mask = Tensor::zeros({1, 1, 320, 320});
    const auto [initial, refined] = model.forward(x, mask);
    CHECK(initial.shape() == std::vector<int>{1, 1, 64, 64});
    CHECK(refined.shape() == std::vector<int>{1, 1, 64, 64});
}

TEST_CASE("encoder features sit at scales /2 through /32") {
    Model model(tiny_model_config(3, 2));
    const auto feats = model.encoder_forward(Tensor::zeros({2, 3, 64, 32}));
    REQUIRE(feats.size() == 5);
    for (int i = 0; i < 5; ++i) {
        const int div = 2 << i;
        CHECK(feats[i].shape() == std::vector<int>{2, 8, 64 / div, 32 / div});
    }
}

TEST_CASE("input contract violations") {
    Model model(tiny_model_config(7, 5));
    CHECK_THROWS_AS(model.construction_forward(Tensor::zeros({1, 6, 64, 64})), ShapeError);
    CHECK_THROWS_AS(model.construction_forward(Tensor::zeros({1, 7, 48, 64})), ShapeError);
    CHECK_THROWS_AS(model.construction_forward(Tensor::zeros({7, 64, 64})), ShapeError);
    CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 7, 64, 64}), Tensor::zeros({1, 1, 64, 64})),
                    ShapeError);
}

TEST_CASE("parameter counts match the hand count across the ablation lattice") {
    for (const bool srf : {true, false})
        for (const bool ma : {true, false})
            for (const bool dfr : {true, false}) {
                ModelConfig cfg = tiny_model_config(7, 5);
                cfg.srf_enabled = srf;
                cfg.ma_enabled = ma;
                cfg.dfr_enabled = dfr;
                Model model(cfg);
                CHECK(static_cast<long long>(model.parameter_count()) == expected_params(cfg));
            }
}

TEST_CASE("parameter names split cleanly into stages") {
    Model model(tiny_model_config(7, 5));
    CHECK(model.find_parameter("encoder.stage0.conv_a.weight") != nullptr);
    CHECK(model.find_parameter("decoder.stage4.srf.main.weight") != nullptr);
    CHECK(model.find_parameter("dfr.head.weight") != nullptr);
    CHECK(model.find_parameter("nonexistent") == nullptr);

    for (const auto& [name, t] : model.stage_parameters(1))
        CHECK(name.rfind("dfr.", 0) != 0);
    auto dfr_params = model.stage_parameters(2);
    CHECK_FALSE(dfr_params.empty());
    for (const auto& [name, t] : dfr_params) CHECK(name.rfind("dfr.", 0) == 0);
    CHECK(model.stage_parameters(1).size() + dfr_params.size() == model.parameters().size());
}

TEST_CASE("srf-off stages register the plain fusion conv") {
    ModelConfig cfg = tiny_model_config(7, 5);
    cfg.srf_enabled = false;
    Model model(cfg);
    CHECK(model.find_parameter("decoder.stage0.fuse.weight") != nullptr);
    CHECK(model.find_parameter("decoder.stage0.srf.main.weight") == nullptr);
}

TEST_CASE("refined output bit-equals initial at initialization") {
    Model model(tiny_model_config(4, 2));
    Rng rng(33);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor x = Tensor::uniform({1, 4, 32, 32}, rng);
        Tensor mask = Tensor::uniform({1, 1, 64, 64}, rng);
        const auto [initial, refined] = model.forward(x, mask);
        bool equal = true;
        for (std::size_t i = 0; i < initial.size(); ++i)
            equal = equal && initial.at(i) == refined.at(i);
        CHECK(equal);
    }
}

TEST_CASE("disabled refiner returns the construction output and rejects dfr_forward") {
    ModelConfig cfg = tiny_model_config(4, 2);
    cfg.dfr_enabled = false;
    Model model(cfg);
    Rng rng(34);
    Tensor x = Tensor::uniform({1, 4, 32, 32}, rng);
    Tensor mask = Tensor::uniform({1, 1, 64, 64}, rng);
    const auto [initial, refined] = model.forward(x, mask);
    CHECK(same_bytes(initial, refined));
    CHECK_THROWS_AS(model.dfr_forward(initial, mask), DataError);
}

TEST_CASE("seeded construction is bit-reproducible") {
    const ModelConfig cfg = tiny_model_config(4, 2);
    Model a(cfg), b(cfg);
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
        CHECK(same_bytes(a.parameters()[i].second, b.parameters()[i].second));

    Rng rng(35);
    Tensor x = Tensor::uniform({1, 4, 32, 32}, rng);
    Tensor mask = Tensor::uniform({1, 1, 64, 64}, rng);
    CHECK(same_bytes(a.forward(x, mask).second, b.forward(x, mask).second));

    ModelConfig other = cfg;
    other.seed = 99;
    Model c(other);
    CHECK_FALSE(same_bytes(a.parameters()[0].second, c.parameters()[0].second));
}

TEST_CASE("decoder parameter shapes follow decoder_channels") {
    ModelConfig cfg = tiny_model_config(7, 5);
    cfg.encoder_channels = {8, 12, 16, 20, 24};
    cfg.decoder_channels = {24, 20, 16, 12, 8};
    Model model(cfg);
    // Stage 2 fuses the /4 skip (16 ch) with the shuffled stage-1 output
    // (20/4 = 5 ch) into 16 channels.
    const Tensor* w = model.find_parameter("decoder.stage2.srf.main.weight");
    REQUIRE(w != nullptr);
    CHECK(w->shape() == std::vector<int>{16, 16 + 5, 3, 3});
    const Tensor* s = model.find_parameter("decoder.stage4.srf.structure.weight");
    REQUIRE(s != nullptr);
    CHECK(s->shape() == std::vector<int>{8, 8, 5, 5});  // full-res skip has enc[0] channels
}

TEST_SUITE_END();
