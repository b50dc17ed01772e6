#pragma once

#include <string>
#include <vector>

#include "evalnet/checkpoint.hpp"
#include "evalnet/patches.hpp"

namespace evalnet {

struct TrainConfig {
    double lr_stage1 = 1e-4;
    double lr_stage2 = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // kept at 0; the optimizer applies none
    int batch_size = 4;
    int epochs_stage1 = 60;
    int epochs_stage2 = 10;
    std::uint64_t seed = 0;
    std::string checkpoint_dir;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Adam with bias correction over a fixed parameter list; moment state is
// created lazily per parameter.
class Adam {
public:
    Adam(std::vector<std::pair<std::string, Tensor>> params, double beta1, double beta2,
         double eps);
    void step(double lr);
    void clear_grads();
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double beta1_, beta2_, eps_;
    long long t_ = 0;
};

struct EpochLog {
    int epoch = 0;
    int stage = 1;
    double train_loss = 0.0;
    double val_rmse_log = 0.0;
    double wall_seconds = 0.0;
};

struct TrainResult {
    std::string best_path;
    CheckpointMeta best_meta;
    std::vector<EpochLog> log;
};

// Batched N,C,H,W tensors for a list of record indices.
struct Batch {
    Tensor input;
    Tensor mask;
    Tensor target;
};
Batch make_batch(const PatchSet& set, const std::vector<std::size_t>& indices);

// Log-space RMSE of the stage's prediction over one split, accumulated in
// float64 across batches.
double validate(const Model& model, const PatchSet& set, const std::string& split, int stage,
                int batch_size);

// Stage 1: MSE on the construction prediction, all backbone parameters
// updated, per-epoch checkpoints, returns the lowest-validation-RMSE one.
TrainResult train_stage1(Model& model, const PatchSet& set, const TrainConfig& cfg);
// Stage 2: L1 on the refined prediction, DFR parameters only; the
// untrained epoch-0 state is also a selection candidate, so the returned
// checkpoint never validates worse than its stage-1 input.
TrainResult train_stage2(Model& model, const PatchSet& set, const TrainConfig& cfg);

std::string training_log_csv(const std::vector<EpochLog>& log);

}  // namespace evalnet
