#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evalnet/ops.hpp"

namespace evalnet {

// Architecture hyperparameters. Defaults describe the full-size network;
// tests and the synthetic pipeline shrink the channel lists.
struct ModelConfig {
    int in_channels = 7;
    std::vector<int> encoder_channels = {32, 64, 128, 256, 512};
    std::vector<int> decoder_channels = {512, 256, 128, 64, 32};
    std::vector<int> ma_dilations = {1, 4, 9};
    bool srf_enabled = true;
    bool ma_enabled = true;
    bool dfr_enabled = true;
    int cla_window = 5;
    int scale_ratio = 5;
    int dfr_blocks_low = 4;
    int dfr_blocks_high = 4;
    int dfr_blocks_fused = 2;
    int dfr_channels = 32;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

// Ordered name -> parameter registry. Registration order is construction
// order and therefore deterministic for a given config.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t);
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    Tensor* find(const std::string& name);
    std::size_t value_count() const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// Convolution layer with owned weight O,I,K,K and bias O.
struct Conv {
    Tensor weight;
    Tensor bias;
    int stride = 1;
    int padding = 0;
    int dilation = 1;

    Conv() = default;
    // He-style init: zero-mean Gaussian, std = sqrt(2 / fan_in).
    Conv(ParamStore& store, const std::string& name, int in_c, int out_c, int k, Rng& rng,
         int stride = 1, int padding = 0, int dilation = 1, bool zero_init = false);
    Tensor operator()(const Tensor& x) const;
};

struct ResBlock {
    Conv a;
    Conv b;
    ResBlock() = default;
    ResBlock(ParamStore& store, const std::string& name, int channels, Rng& rng);
    Tensor forward(const Tensor& x) const;
};

// One encoder stage: residual pair at the input scale, then stride-2
// downsampling. pre keeps the full-scale feature for skip use.
struct EncoderStage {
    Conv conv_a;
    Conv conv_b;
    Conv shortcut;
    bool projected = false;
    Conv down;
    EncoderStage() = default;
    EncoderStage(ParamStore& store, const std::string& name, int in_c, int out_c, Rng& rng);
    Tensor pre(const Tensor& x) const;
    Tensor forward(const Tensor& x) const { return relu(down(pre(x))); }
};

// Structure Residual Fusion: content/structure split of the skip feature
// with a sigmoid-gated structural residual added to the fused main path.
struct SrfBlock {
    Conv content;    // 1x1 on skip
    Conv structure;  // 5x5 on skip
    Conv main;       // 3x3 on concat(content, shuffled prev)
    Conv gate;       // 1x1 on structure, sigmoid
    Conv proj;       // 1x1 structure -> out channels
    SrfBlock() = default;
    SrfBlock(ParamStore& store, const std::string& name, int skip_c, int prev_c, int out_c,
             Rng& rng);
    Tensor forward(const Tensor& skip, const Tensor& prev) const;
};

// Multi-scale Aggregator: dilated branches fused by per-channel softmax
// weights from a channel-attention head.
struct MaBlock {
    std::vector<Conv> branches;
    Conv attn;  // 1x1 on global average pool, channels -> branches*channels
    MaBlock() = default;
    MaBlock(ParamStore& store, const std::string& name, int channels,
            const std::vector<int>& dilations, Rng& rng);
    Tensor forward(const Tensor& x) const;
};

// One decoder stage: SRF (or plain U-Net fusion) followed by MA.
struct HfdStage {
    bool srf_on = true;
    bool ma_on = true;
    SrfBlock srf;
    Conv plain_fuse;  // 3x3 on concat(skip, shuffled prev) when SRF is off
    MaBlock ma;
    HfdStage() = default;
    HfdStage(ParamStore& store, const std::string& name, int skip_c, int prev_c, int out_c,
             const ModelConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& prev, const Tensor& skip) const;
};

// Cross-Resolution Local Attention: each low-res query attends to its
// window x window high-res footprint block; output is a residual add.
struct ClaBlock {
    Conv query;
    Conv key;
    Conv value;
    int scale = 5;
    int window = 5;
    ClaBlock() = default;
    ClaBlock(ParamStore& store, const std::string& name, int channels, int scale, int window,
             Rng& rng);
    Tensor forward(const Tensor& low_feat, const Tensor& high_feat) const;
};

// Dual Feature Refiner: dual-branch residual stacks fused through CLA,
// ending in a zero-initialized head so the initial residual is exactly 0.
struct DfrModule {
    Conv low_stem;
    std::vector<ResBlock> low_blocks;
    Conv high_stem;
    std::vector<ResBlock> high_blocks;
    ClaBlock cla;
    Conv fuse;  // 1x1 on concat(cla out, pooled high branch)
    std::vector<ResBlock> fused_blocks;
    Conv head;  // 3x3 to 1 channel, zero-initialized
    int scale = 5;
    DfrModule() = default;
    DfrModule(ParamStore& store, const std::string& name, const ModelConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& pred_low, const Tensor& mask_high) const;
};

class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const {
        return store_.items();
    }
    Tensor* find_parameter(const std::string& name) { return store_.find(name); }
    std::size_t parameter_count() const { return store_.value_count(); }
    // Parameters whose names start with "dfr." belong to the refiner.
    std::vector<std::pair<std::string, Tensor>> stage_parameters(int stage) const;
    void set_requires_grad(bool backbone, bool dfr);

    // Five downsampled features at scales /2 .. /32.
    std::vector<Tensor> encoder_forward(const Tensor& x) const;
    // Construction-stage prediction, N,1,H,W in normalized log space.
    Tensor construction_forward(const Tensor& x) const;
    // Refinement residual for a given initial prediction.
    Tensor dfr_forward(const Tensor& pred_low, const Tensor& mask_high) const;
    // (initial, refined); refined == initial when the DFR is disabled.
    std::pair<Tensor, Tensor> forward(const Tensor& x, const Tensor& mask_high) const;

private:
    ModelConfig cfg_;
    ParamStore store_;
    std::vector<EncoderStage> encoder_;
    std::vector<HfdStage> decoder_;
    Conv head_;
    DfrModule dfr_;
};

}  // namespace evalnet
