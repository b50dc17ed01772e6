#include "evalnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "evalnet/io_util.hpp"

namespace evalnet {

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw DataError("train config: " + msg); };
    if (!(lr_stage1 > 0.0) || !(lr_stage2 > 0.0)) fail("learning rates must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        fail("betas must lie in [0,1)");
    if (!(eps > 0.0)) fail("eps must be positive");
    if (weight_decay != 0.0) fail("weight decay is not supported and must be 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs_stage1 < 1 || epochs_stage2 < 1) fail("epoch counts must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
    return nlohmann::json{{"lr_stage1", lr_stage1},
                          {"lr_stage2", lr_stage2},
                          {"beta1", beta1},
                          {"beta2", beta2},
                          {"eps", eps},
                          {"weight_decay", weight_decay},
                          {"batch_size", batch_size},
                          {"epochs_stage1", epochs_stage1},
                          {"epochs_stage2", epochs_stage2},
                          {"seed", seed},
                          {"checkpoint_dir", checkpoint_dir}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig d;
    TrainConfig c;
    try {
        c.lr_stage1 = j.value("lr_stage1", d.lr_stage1);
        c.lr_stage2 = j.value("lr_stage2", d.lr_stage2);
        c.beta1 = j.value("beta1", d.beta1);
        c.beta2 = j.value("beta2", d.beta2);
        c.eps = j.value("eps", d.eps);
        c.weight_decay = j.value("weight_decay", d.weight_decay);
        c.batch_size = j.value("batch_size", d.batch_size);
        c.epochs_stage1 = j.value("epochs_stage1", d.epochs_stage1);
        c.epochs_stage2 = j.value("epochs_stage2", d.epochs_stage2);
        c.seed = j.value("seed", d.seed);
        c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k].second;
        if (!p.has_grad()) throw DataError("adam: missing gradient for " + params_[k].first);
        auto g = p.grad();
        if (m_[k].empty()) {
            m_[k].assign(p.size(), 0.0);
            v_[k].assign(p.size(), 0.0);
        }
        auto data = p.mutable_data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            m_[k][i] = store_round(beta1_ * m_[k][i] + (1.0 - beta1_) * gi);
            v_[k][i] = store_round(beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi);
            const double mh = m_[k][i] / bc1;
            const double vh = v_[k][i] / bc2;
            data[i] = store_round(data[i] - lr * mh / (std::sqrt(vh) + eps_));
        }
    }
}

void Adam::clear_grads() {
    for (auto& [name, p] : params_) p.impl->grad.clear();
}

// ---------------------------------------------------------------------------
// batching

namespace {

std::vector<std::size_t> split_indices(const PatchSet& set, const std::string& split) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < set.records.size(); ++i)
        if (set.records[i].split == split) idx.push_back(i);
    return idx;
}

void fill_plane(Tensor& t, std::size_t sample, const std::vector<float>& src) {
    auto dst = t.mutable_data();
    const std::size_t n = src.size();
    for (std::size_t i = 0; i < n; ++i) dst[sample * n + i] = static_cast<double>(src[i]);
}

std::string checkpoint_name(int stage, int epoch) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "stage%d_epoch%03d.ckpt", stage, epoch);
    return buf;
}

void copy_file_bytes(const std::string& from, const std::string& to) {
    const auto bytes = read_binary_file(from);
    write_binary_file_atomic(to, bytes.data(), bytes.size());
}

}  // namespace

Batch make_batch(const PatchSet& set, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DataError("batch: no records");
    const int n = static_cast<int>(indices.size());
    const int p = set.patch;
    const int hp = p * set.scale;
    Batch b{Tensor::zeros({n, set.bands, p, p}), Tensor::zeros({n, 1, hp, hp}),
            Tensor::zeros({n, 1, p, p})};
    for (int s = 0; s < n; ++s) {
        const PatchRecord& rec = set.records[indices[s]];
        fill_plane(b.input, s, rec.input);
        fill_plane(b.mask, s, rec.mask);
        fill_plane(b.target, s, rec.target);
    }
    return b;
}

namespace {

// Mean per-element loss of a stage's prediction over a full index list,
// without recording.
double dataset_loss(const Model& model, const PatchSet& set,
                    const std::vector<std::size_t>& idx, int stage, int batch_size,
                    LossKind kind) {
    NoGradScope ng;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < idx.size(); at += batch_size) {
        const std::vector<std::size_t> chunk(
            idx.begin() + static_cast<std::ptrdiff_t>(at),
            idx.begin() + static_cast<std::ptrdiff_t>(std::min(at + batch_size, idx.size())));
        const Batch b = make_batch(set, chunk);
        Tensor pred;
        if (stage == 1)
            pred = model.construction_forward(b.input);
        else
            pred = model.forward(b.input, b.mask).second;
        acc += loss(pred, b.target, kind).item() * static_cast<double>(chunk.size());
        count += chunk.size();
    }
    return acc / static_cast<double>(count);
}

}  // namespace

double validate(const Model& model, const PatchSet& set, const std::string& split, int stage,
                int batch_size) {
    const std::vector<std::size_t> idx = split_indices(set, split);
    if (idx.empty()) throw DataError("validate: empty " + split + " split");
    NoGradScope ng;
    double sse = 0.0;
    std::size_t n = 0;
    for (std::size_t at = 0; at < idx.size(); at += batch_size) {
        const std::vector<std::size_t> chunk(
            idx.begin() + static_cast<std::ptrdiff_t>(at),
            idx.begin() + static_cast<std::ptrdiff_t>(std::min(at + batch_size, idx.size())));
        const Batch b = make_batch(set, chunk);
        Tensor pred;
        if (stage == 1)
            pred = model.construction_forward(b.input);
        else
            pred = model.forward(b.input, b.mask).second;
        const auto pv = pred.data();
        const auto tv = b.target.data();
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double e = pv[i] - tv[i];
            sse += e * e;
        }
        n += pred.size();
    }
    return std::sqrt(sse / static_cast<double>(n));
}

namespace {

struct StageRunner {
    Model& model;
    const PatchSet& set;
    const TrainConfig& cfg;
    int stage;

    TrainResult run() {
        cfg.validate();
        if (cfg.checkpoint_dir.empty()) throw DataError("train: checkpoint_dir is required");
        std::filesystem::create_directories(cfg.checkpoint_dir);
        const std::vector<std::size_t> train_idx_base = split_indices(set, "train");
        if (train_idx_base.empty()) throw DataError("train: empty training split");
        if (split_indices(set, "val").empty()) throw DataError("train: empty validation split");

        const LossKind kind = stage == 1 ? LossKind::Mse : LossKind::L1;
        const double lr = stage == 1 ? cfg.lr_stage1 : cfg.lr_stage2;
        const int epochs = stage == 1 ? cfg.epochs_stage1 : cfg.epochs_stage2;
        Adam adam(model.stage_parameters(stage), cfg.beta1, cfg.beta2, cfg.eps);
        Rng shuffle_rng(cfg.seed);
        const std::filesystem::path dir(cfg.checkpoint_dir);

        TrainResult result;
        double best_rmse = 0.0;
        bool have_best = false;
        auto consider = [&](double rmse, int epoch, const std::string& path) {
            if (!have_best || rmse < best_rmse) {
                best_rmse = rmse;
                have_best = true;
                result.best_meta = CheckpointMeta{stage, epoch, rmse};
                result.best_path = path;
            }
        };

        {
            // Epoch 0: evaluate the starting point. Stage 2 also keeps it
            // as a selection candidate, so refinement cannot regress the
            // stage-1 result.
            const auto t0 = std::chrono::steady_clock::now();
            const double loss0 =
                dataset_loss(model, set, train_idx_base, stage, cfg.batch_size, kind);
            const double rmse0 = validate(model, set, "val", stage, cfg.batch_size);
            if (stage == 2) {
                const std::string path = (dir / checkpoint_name(stage, 0)).string();
                save_checkpoint(model, CheckpointMeta{stage, 0, rmse0}, path);
                consider(rmse0, 0, path);
            }
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.log.push_back(EpochLog{0, stage, loss0, rmse0, wall});
        }

        std::vector<std::size_t> train_idx = train_idx_base;
        for (int epoch = 1; epoch <= epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            shuffle_rng.shuffle(train_idx);
            double loss_acc = 0.0;
            for (std::size_t at = 0; at < train_idx.size(); at += cfg.batch_size) {
                const std::vector<std::size_t> chunk(
                    train_idx.begin() + static_cast<std::ptrdiff_t>(at),
                    train_idx.begin() +
                        static_cast<std::ptrdiff_t>(
                            std::min(at + cfg.batch_size, train_idx.size())));
                const Batch b = make_batch(set, chunk);
                adam.clear_grads();
                Tape tape;
                double lv;
                {
                    TapeScope scope(tape);
                    Tensor pred;
                    if (stage == 1) {
                        pred = model.construction_forward(b.input);
                    } else {
                        Tensor initial;
                        {
                            NoGradScope ng;
                            initial = model.construction_forward(b.input);
                        }
                        pred = add(initial, model.dfr_forward(initial, b.mask));
                    }
                    Tensor l = loss(pred, b.target, kind);
                    lv = l.item();
                    if (!std::isfinite(lv))
                        throw NumericError("train: non-finite loss at stage " +
                                           std::to_string(stage) + " epoch " +
                                           std::to_string(epoch));
                    backward(l);
                }
                adam.step(lr);
                loss_acc += lv * static_cast<double>(chunk.size());
            }
            const double train_loss = loss_acc / static_cast<double>(train_idx.size());
            const double rmse = validate(model, set, "val", stage, cfg.batch_size);
            const std::string path = (dir / checkpoint_name(stage, epoch)).string();
            save_checkpoint(model, CheckpointMeta{stage, epoch, rmse}, path);
            consider(rmse, epoch, path);
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.log.push_back(EpochLog{epoch, stage, train_loss, rmse, wall});
        }

        const std::string best_copy =
            (dir / ("stage" + std::to_string(stage) + "_best.ckpt")).string();
        copy_file_bytes(result.best_path, best_copy);
        result.best_path = best_copy;
        return result;
    }
};

}  // namespace

TrainResult train_stage1(Model& model, const PatchSet& set, const TrainConfig& cfg) {
    StageRunner runner{model, set, cfg, 1};
    return runner.run();
}

TrainResult train_stage2(Model& model, const PatchSet& set, const TrainConfig& cfg) {
    if (!model.config().dfr_enabled)
        throw DataError("train: stage 2 requires dfr_enabled in the model config");
    StageRunner runner{model, set, cfg, 2};
    return runner.run();
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream out;
    out << "epoch,stage,train_loss,val_rmse_log,wall_seconds\n";
    char buf[96];
    for (const EpochLog& e : log) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.3f\n", e.epoch, e.stage, e.train_loss,
                      e.val_rmse_log, e.wall_seconds);
        out << buf;
    }
    return out.str();
}

}  // namespace evalnet
