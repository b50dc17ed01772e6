#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "evalnet/raster.hpp"

namespace evalnet {

// One co-registered training sample. input holds bands*P*P values (raw
// after extraction, normalized once stats are applied), mask holds the
// (s*P)^2 high-resolution window, target holds the P^2 log-space values.
struct PatchRecord {
    int patch_id = 0;
    int row0 = 0;
    int col0 = 0;
    std::vector<float> input;
    std::vector<float> mask;
    std::vector<float> target;
    std::string stratum = "all";
    float lit_fraction = 0.0f;
    std::string split;
};

struct PatchSet {
    int patch = 64;  // P, low-res window extent
    int bands = 7;
    int scale = 5;
    std::vector<PatchRecord> records;
};

// Per-band min/max fitted on the training split only.
struct NormStats {
    struct Band {
        float min = 0.0f;
        float max = 0.0f;
    };
    std::vector<Band> bands;

    nlohmann::json to_json() const;
    static NormStats from_json(const nlohmann::json& j);
};

// Co-registered source rasters named by a manifest JSON
// {dmsp, landsat: [...], mask, target?, strata?, norm?}. All low-res
// grids share one geometry; the mask grid is scale times finer.
struct RasterStack {
    RasterGrid dmsp;
    std::vector<RasterGrid> landsat;
    RasterGrid mask;
    RasterGrid target;
    bool has_target = false;
    RasterGrid strata;
    bool has_strata = false;
    std::string norm_path;  // optional pointer to a NormStats JSON
    int scale = 1;

    int bands() const { return 1 + static_cast<int>(landsat.size()); }
};

RasterStack load_raster_stack(const std::string& manifest_path);

struct ExtractReport {
    std::size_t attempts = 0;
    bool budget_exhausted = false;
};

// Seeded uniform window sampling. Rejects windows with lit_fraction below
// lit_min (share of DMSP pixels > 0) or nodata in any band; stops after
// count retained patches or 100*count attempts. Targets are stored in log
// space; inputs stay raw until minmax_apply.
PatchSet extract_patches(const RasterStack& stack, int patch, int count, double lit_min,
                         std::uint64_t seed, ExtractReport* report = nullptr);

// Per-stratum shuffle and floor-allocation into train/val/test; the
// remainder of each stratum goes to train.
void stratified_split(PatchSet& set, double train_ratio, double val_ratio, double test_ratio,
                      std::uint64_t seed);

NormStats minmax_fit(const PatchSet& set);
// (x - min) / (max - min) clipped to [0,1] per band; a degenerate band
// (max == min) maps to 0.
void minmax_apply(std::vector<float>& stack, int bands, const NormStats& stats);
void minmax_apply(PatchSet& set, const NormStats& stats);

// patches.pack ("EVPK0001" + u32 header length + JSON header + fixed-size
// float32 blobs per record) plus index.csv
// (patch_id,row0,col0,stratum,lit_fraction,split) and norm.json.
void save_patch_set(const PatchSet& set, const NormStats& stats, const std::string& dir);
PatchSet load_patch_set(const std::string& dir, NormStats* stats = nullptr);

}  // namespace evalnet
