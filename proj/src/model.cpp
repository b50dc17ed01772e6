#include "evalnet/model.hpp"

#include <cmath>

namespace evalnet {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw DataError("model config: " + msg); };
    if (in_channels < 1) fail("in_channels must be positive");
    if (encoder_channels.size() != 5) fail("encoder_channels must have length 5");
    if (decoder_channels.size() != 5) fail("decoder_channels must have length 5");
    for (int c : encoder_channels)
        if (c < 1) fail("encoder channel counts must be positive");
    for (int c : decoder_channels)
        if (c < 1) fail("decoder channel counts must be positive");
    if (ma_dilations.empty()) fail("ma_dilations must be non-empty");
    for (int d : ma_dilations)
        if (d < 1) fail("dilation rates must be >= 1");
    if (cla_window < 1 || cla_window % 2 == 0) fail("cla_window must be odd and positive");
    if (scale_ratio < 1) fail("scale_ratio must be >= 1");
    if (dfr_blocks_low < 0 || dfr_blocks_high < 0 || dfr_blocks_fused < 0)
        fail("dfr block counts must be >= 0");
    if (dfr_channels < 1) fail("dfr_channels must be positive");
    // Every decoder stage pixel-shuffles its input by r=2.
    if (encoder_channels[4] % 4 != 0) fail("encoder_channels[4] must be divisible by 4");
    for (int s = 0; s < 4; ++s)
        if (decoder_channels[s] % 4 != 0)
            fail("decoder_channels[0..3] must be divisible by 4 for pixel shuffle");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"in_channels", in_channels},
                          {"encoder_channels", encoder_channels},
                          {"decoder_channels", decoder_channels},
                          {"ma_dilations", ma_dilations},
                          {"srf_enabled", srf_enabled},
                          {"ma_enabled", ma_enabled},
                          {"dfr_enabled", dfr_enabled},
                          {"cla_window", cla_window},
                          {"scale_ratio", scale_ratio},
                          {"dfr_blocks_low", dfr_blocks_low},
                          {"dfr_blocks_high", dfr_blocks_high},
                          {"dfr_blocks_fused", dfr_blocks_fused},
                          {"dfr_channels", dfr_channels},
                          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig d;
    ModelConfig c;
    try {
        c.in_channels = j.value("in_channels", d.in_channels);
        c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
        c.decoder_channels = j.value("decoder_channels", d.decoder_channels);
        c.ma_dilations = j.value("ma_dilations", d.ma_dilations);
        c.srf_enabled = j.value("srf_enabled", d.srf_enabled);
        c.ma_enabled = j.value("ma_enabled", d.ma_enabled);
        c.dfr_enabled = j.value("dfr_enabled", d.dfr_enabled);
        c.cla_window = j.value("cla_window", d.cla_window);
        c.scale_ratio = j.value("scale_ratio", d.scale_ratio);
        c.dfr_blocks_low = j.value("dfr_blocks_low", d.dfr_blocks_low);
        c.dfr_blocks_high = j.value("dfr_blocks_high", d.dfr_blocks_high);
        c.dfr_blocks_fused = j.value("dfr_blocks_fused", d.dfr_blocks_fused);
        c.dfr_channels = j.value("dfr_channels", d.dfr_channels);
        c.seed = j.value("seed", d.seed);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor ParamStore::add(const std::string& name, Tensor t) {
    if (find(name)) throw DataError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
}

Tensor* ParamStore::find(const std::string& name) {
    for (auto& [n, t] : items_)
        if (n == name) return &t;
    return nullptr;
}

std::size_t ParamStore::value_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
}

// ---------------------------------------------------------------------------
// Layers

Conv::Conv(ParamStore& store, const std::string& name, int in_c, int out_c, int k, Rng& rng,
           int stride, int padding, int dilation, bool zero_init)
    : stride(stride), padding(padding), dilation(dilation) {
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
    Tensor w = zero_init ? Tensor::zeros({out_c, in_c, k, k})
                         : Tensor::randn({out_c, in_c, k, k}, rng, std_dev);
    weight = store.add(name + ".weight", w);
    bias = store.add(name + ".bias", Tensor::zeros({out_c}));
}

Tensor Conv::operator()(const Tensor& x) const {
    return conv2d(x, weight, bias, stride, padding, dilation);
}

ResBlock::ResBlock(ParamStore& store, const std::string& name, int channels, Rng& rng)
    : a(store, name + ".a", channels, channels, 3, rng, 1, 1),
      b(store, name + ".b", channels, channels, 3, rng, 1, 1) {}

Tensor ResBlock::forward(const Tensor& x) const { return relu(add(x, b(relu(a(x))))); }

EncoderStage::EncoderStage(ParamStore& store, const std::string& name, int in_c, int out_c,
                           Rng& rng)
    : conv_a(store, name + ".conv_a", in_c, out_c, 3, rng, 1, 1),
      conv_b(store, name + ".conv_b", out_c, out_c, 3, rng, 1, 1) {
    if (in_c != out_c) {
        shortcut = Conv(store, name + ".shortcut", in_c, out_c, 1, rng);
        projected = true;
    }
    down = Conv(store, name + ".down", out_c, out_c, 3, rng, 2, 1);
}

Tensor EncoderStage::pre(const Tensor& x) const {
    Tensor h = conv_b(relu(conv_a(x)));
    return relu(add(h, projected ? shortcut(x) : x));
}

SrfBlock::SrfBlock(ParamStore& store, const std::string& name, int skip_c, int prev_c, int out_c,
                   Rng& rng)
    : content(store, name + ".content", skip_c, out_c, 1, rng),
      structure(store, name + ".structure", skip_c, out_c, 5, rng, 1, 2),
      main(store, name + ".main", out_c + prev_c / 4, out_c, 3, rng, 1, 1),
      gate(store, name + ".gate", out_c, out_c, 1, rng),
      proj(store, name + ".proj", out_c, out_c, 1, rng) {}

Tensor SrfBlock::forward(const Tensor& skip, const Tensor& prev) const {
    Tensor c = relu(content(skip));
    Tensor s = relu(structure(skip));
    Tensor up = pixel_shuffle(prev, 2);
    Tensor m = relu(main(concat_channels({c, up})));
    Tensor residual = hadamard(sigmoid(gate(s)), proj(s));
    return add(m, residual);
}

MaBlock::MaBlock(ParamStore& store, const std::string& name, int channels,
                 const std::vector<int>& dilations, Rng& rng) {
    for (std::size_t i = 0; i < dilations.size(); ++i)
        branches.push_back(Conv(store, name + ".branch" + std::to_string(i), channels, channels, 3,
                                rng, 1, dilations[i], dilations[i]));
    attn = Conv(store, name + ".attn", channels, static_cast<int>(dilations.size()) * channels, 1,
                rng);
}

Tensor MaBlock::forward(const Tensor& x) const {
    const int n = x.dim(0), c = x.dim(1);
    const int nb = static_cast<int>(branches.size());
    // attention channel c*nb+d holds the logit of branch d for channel c
    Tensor logits = attn(global_avg_pool(x));
    Tensor weights = softmax_last(reshape(logits, {n, c, nb}));
    Tensor out;
    for (int d = 0; d < nb; ++d) {
        Tensor term = scale_channels(relu(branches[d](x)), slice_last(weights, d));
        out = (d == 0) ? term : add(out, term);
    }
    return out;
}

HfdStage::HfdStage(ParamStore& store, const std::string& name, int skip_c, int prev_c, int out_c,
                   const ModelConfig& cfg, Rng& rng)
    : srf_on(cfg.srf_enabled), ma_on(cfg.ma_enabled) {
    if (srf_on)
        srf = SrfBlock(store, name + ".srf", skip_c, prev_c, out_c, rng);
    else
        plain_fuse = Conv(store, name + ".fuse", skip_c + prev_c / 4, out_c, 3, rng, 1, 1);
    if (ma_on) ma = MaBlock(store, name + ".ma", out_c, cfg.ma_dilations, rng);
}

Tensor HfdStage::forward(const Tensor& prev, const Tensor& skip) const {
    Tensor fused;
    if (srf_on) {
        fused = srf.forward(skip, prev);
    } else {
        Tensor up = pixel_shuffle(prev, 2);
        fused = relu(plain_fuse(concat_channels({skip, up})));
    }
    return ma_on ? ma.forward(fused) : fused;
}

ClaBlock::ClaBlock(ParamStore& store, const std::string& name, int channels, int scale, int window,
                   Rng& rng)
    : query(store, name + ".query", channels, channels, 1, rng),
      key(store, name + ".key", channels, channels, 1, rng),
      value(store, name + ".value", channels, channels, 1, rng),
      scale(scale),
      window(window) {}

Tensor ClaBlock::forward(const Tensor& low_feat, const Tensor& high_feat) const {
    if (low_feat.rank() != 4 || high_feat.rank() != 4 ||
        high_feat.dim(0) != low_feat.dim(0) || high_feat.dim(1) != low_feat.dim(1) ||
        high_feat.dim(2) != low_feat.dim(2) * scale || high_feat.dim(3) != low_feat.dim(3) * scale)
        throw ShapeError("cla: high-res feature must be scale_ratio times the low-res extent");
    const int h = low_feat.dim(2), w = low_feat.dim(3);
    const int hh = high_feat.dim(2), hw = high_feat.dim(3);
    Tensor q = query(low_feat);
    Tensor gk = gather_windows(key(high_feat), h, w, scale, window);
    Tensor gv = gather_windows(value(high_feat), h, w, scale, window);
    Tensor mask = window_mask(hh, hw, h, w, scale, window);
    return add(low_feat, local_dot_attention(q, gk, gv, mask));
}

DfrModule::DfrModule(ParamStore& store, const std::string& name, const ModelConfig& cfg, Rng& rng)
    : low_stem(store, name + ".low_stem", 1, cfg.dfr_channels, 3, rng, 1, 1),
      high_stem(store, name + ".high_stem", 1, cfg.dfr_channels, 3, rng, 1, 1),
      cla(store, name + ".cla", cfg.dfr_channels, cfg.scale_ratio, cfg.cla_window, rng),
      fuse(store, name + ".fuse", 2 * cfg.dfr_channels, cfg.dfr_channels, 1, rng),
      head(store, name + ".head", cfg.dfr_channels, 1, 3, rng, 1, 1, 1, /*zero_init=*/true),
      scale(cfg.scale_ratio) {
    for (int i = 0; i < cfg.dfr_blocks_low; ++i)
        low_blocks.emplace_back(store, name + ".low_block" + std::to_string(i), cfg.dfr_channels,
                                rng);
    for (int i = 0; i < cfg.dfr_blocks_high; ++i)
        high_blocks.emplace_back(store, name + ".high_block" + std::to_string(i), cfg.dfr_channels,
                                 rng);
    for (int i = 0; i < cfg.dfr_blocks_fused; ++i)
        fused_blocks.emplace_back(store, name + ".fused_block" + std::to_string(i),
                                  cfg.dfr_channels, rng);
}

Tensor DfrModule::forward(const Tensor& pred_low, const Tensor& mask_high) const {
    if (pred_low.rank() != 4 || pred_low.dim(1) != 1)
        throw ShapeError("dfr: prediction must be N,1,h,w, got " + shape_str(pred_low.shape()));
    if (mask_high.rank() != 4 || mask_high.dim(1) != 1 ||
        mask_high.dim(0) != pred_low.dim(0) ||
        mask_high.dim(2) != pred_low.dim(2) * scale ||
        mask_high.dim(3) != pred_low.dim(3) * scale)
        throw ShapeError("dfr: mask must be N,1," + std::to_string(pred_low.dim(2) * scale) + "," +
                         std::to_string(pred_low.dim(3) * scale) + ", got " +
                         shape_str(mask_high.shape()));
    Tensor lo = relu(low_stem(pred_low));
    for (const ResBlock& blk : low_blocks) lo = blk.forward(lo);
    Tensor hi = relu(high_stem(mask_high));
    for (const ResBlock& blk : high_blocks) hi = blk.forward(hi);
    Tensor fused_in = concat_channels({cla.forward(lo, hi), avg_pool(hi, scale)});
    Tensor f = relu(fuse(fused_in));
    for (const ResBlock& blk : fused_blocks) f = blk.forward(f);
    return head(f);
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto& enc = cfg_.encoder_channels;
    const auto& dec = cfg_.decoder_channels;
    for (int i = 0; i < 5; ++i)
        encoder_.emplace_back(store_, "encoder.stage" + std::to_string(i),
                              i == 0 ? cfg_.in_channels : enc[i - 1], enc[i], rng);
    // Decoder stage s consumes the previous decoder output (the deepest
    // encoder feature for s=0) and the encoder skip at its output scale;
    // the full-resolution skip of the last stage is the pre-downsample
    // feature of encoder stage 0.
    for (int s = 0; s < 5; ++s) {
        const int prev_c = s == 0 ? enc[4] : dec[s - 1];
        const int skip_c = s < 4 ? enc[3 - s] : enc[0];
        decoder_.emplace_back(store_, "decoder.stage" + std::to_string(s), skip_c, prev_c, dec[s],
                              cfg_, rng);
    }
    head_ = Conv(store_, "head", dec[4], 1, 3, rng, 1, 1);
    if (cfg_.dfr_enabled) dfr_ = DfrModule(store_, "dfr", cfg_, rng);
}

std::vector<std::pair<std::string, Tensor>> Model::stage_parameters(int stage) const {
    if (stage != 1 && stage != 2) throw DataError("stage must be 1 or 2");
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : store_.items()) {
        const bool is_dfr = name.rfind("dfr.", 0) == 0;
        if ((stage == 1 && !is_dfr) || (stage == 2 && is_dfr)) out.emplace_back(name, t);
    }
    return out;
}

void Model::set_requires_grad(bool backbone, bool dfr) {
    for (auto& [name, t] : store_.items()) {
        const bool is_dfr = name.rfind("dfr.", 0) == 0;
        const_cast<Tensor&>(t).set_requires_grad(is_dfr ? dfr : backbone);
    }
}

namespace {

void check_input(const Tensor& x, int in_channels) {
    if (x.rank() != 4) throw ShapeError("model: input must be N,C,H,W");
    if (x.dim(1) != in_channels)
        throw ShapeError("model: expected " + std::to_string(in_channels) + " channels, got " +
                         std::to_string(x.dim(1)));
    if (x.dim(2) < 32 || x.dim(3) < 32 || x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0)
        throw ShapeError("model: spatial extent must be a positive multiple of 32, got " +
                         shape_str(x.shape()));
}

}  // namespace

std::vector<Tensor> Model::encoder_forward(const Tensor& x) const {
    check_input(x, cfg_.in_channels);
    std::vector<Tensor> feats;
    Tensor f = x;
    for (const EncoderStage& st : encoder_) {
        f = st.forward(f);
        feats.push_back(f);
    }
    return feats;
}

Tensor Model::construction_forward(const Tensor& x) const {
    check_input(x, cfg_.in_channels);
    Tensor pre0 = encoder_[0].pre(x);
    Tensor f = relu(encoder_[0].down(pre0));
    std::vector<Tensor> feats{f};
    for (int i = 1; i < 5; ++i) {
        f = encoder_[i].forward(f);
        feats.push_back(f);
    }
    Tensor d = feats[4];
    const Tensor* skips[5] = {&feats[3], &feats[2], &feats[1], &feats[0], &pre0};
    for (int s = 0; s < 5; ++s) d = decoder_[s].forward(d, *skips[s]);
    return head_(d);
}

Tensor Model::dfr_forward(const Tensor& pred_low, const Tensor& mask_high) const {
    if (!cfg_.dfr_enabled) throw DataError("dfr: module disabled in this configuration");
    return dfr_.forward(pred_low, mask_high);
}

std::pair<Tensor, Tensor> Model::forward(const Tensor& x, const Tensor& mask_high) const {
    Tensor initial = construction_forward(x);
    if (!cfg_.dfr_enabled) return {initial, initial};
    Tensor refined = add(initial, dfr_.forward(initial, mask_high));
    return {initial, refined};
}

}  // namespace evalnet
