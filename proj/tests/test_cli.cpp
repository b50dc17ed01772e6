#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "evalnet/cli.hpp"
#include "evalnet/io_util.hpp"
#include "evalnet/metrics.hpp"
#include "evalnet/patches.hpp"
#include "evalnet/raster.hpp"
#include "synthetic.hpp"

using namespace evalnet;
namespace ts = evalnet::testsupport;
namespace fs = std::filesystem;

namespace {

std::string read_text(const std::string& path) {
    const auto bytes = read_binary_file(path);
    return std::string(bytes.begin(), bytes.end());
}

bool same_bytes(const std::string& a, const std::string& b) {
    return read_binary_file(a) == read_binary_file(b);
}

// Tiny but complete model/train config file for fast end-to-end runs.
std::string write_config(const std::string& dir, int bands, int scale) {
    nlohmann::json train{{"epochs_stage1", 1}, {"epochs_stage2", 1}, {"batch_size", 4},
                         {"lr_stage1", 1e-3},  {"lr_stage2", 1e-4},  {"seed", 5}};
    const nlohmann::json j{{"model", ts::tiny_model_config(bands, scale).to_json()},
                           {"train", train}};
    const std::string path = dir + "/config.json";
    write_text_file_atomic(path, j.dump(2));
    return path;
}

int count_lines(const std::string& text) {
    int n = 0;
    for (const char c : text) n += c == '\n';
    return n;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("usage errors exit 1") {
    CHECK(run_cli({"nonsense"}) == 1);
    CHECK(run_cli({"evaluate", "--ref", "a.egrid"}) == 1);  // missing required options
    CHECK(run_cli({"infer", "--ckpt", "x", "--rasters", "y", "--out", "z", "--tile", "48"}) == 1);
    CHECK(run_cli({"infer", "--ckpt", "x", "--rasters", "y", "--out", "z", "--overlap", "7"}) ==
          1);
    CHECK(run_cli({"evaluate", "--ref", "a", "--pred", "b", "--out", "c", "--space", "exp"}) ==
          1);
    CHECK(run_cli({"correlate", "--zonal", "notayear", "--indicators", "i", "--out", "o"}) == 1);
}

TEST_CASE("help exits 0") {
    CHECK(run_cli({"--help"}) == 0);
    CHECK(run_cli({"train", "--print-config"}) == 0);
}

TEST_CASE("missing inputs exit 2") {
    const std::string dir = ts::fresh_dir("cli_missing");
    CHECK(run_cli({"train", "--data", dir + "/nope", "--out", dir + "/run"}) == 2);
    CHECK(run_cli({"evaluate", "--ref", dir + "/a.egrid", "--pred", dir + "/b.egrid", "--out",
                   dir + "/m.json"}) == 2);
}

TEST_CASE("preprocess composite and cap match the library routines") {
    const std::string dir = ts::fresh_dir("cli_preprocess");
    fs::create_directories(dir + "/obs");
    std::vector<RasterGrid> stack;
    for (int i = 0; i < 3; ++i) {
        RasterGrid g = RasterGrid::make(8, 8);
        for (std::size_t k = 0; k < g.values.size(); ++k)
            g.values[k] = static_cast<float>((k * 7 + i * 13) % 50);
        g.at(0, 0) = i == 0 ? g.nodata : 40.0f;
        stack.push_back(g);
        char name[32];
        std::snprintf(name, sizeof(name), "/obs/year_%d.egrid", i);
        write_egrid(g, dir + name);
    }

    const std::string composite_out = dir + "/composite.egrid";
    REQUIRE(run_cli({"preprocess", "composite", "--inputs", dir + "/obs", "--percentile", "10",
                     "--out", composite_out}) == 0);
    const RasterGrid expect = percentile_composite(stack, 10.0);
    const RasterGrid got = read_egrid(composite_out);
    CHECK(got.values == expect.values);
    CHECK(fs::exists(composite_out + ".manifest.json"));

    const std::string capped_out = dir + "/capped.egrid";
    REQUIRE(run_cli({"preprocess", "cap", "--input", composite_out, "--cities",
                     dir + "/obs/year_1.egrid," + dir + "/obs/year_2.egrid", "--out",
                     capped_out}) == 0);
    const double threshold = compute_cap_threshold({stack[1], stack[2]});
    const RasterGrid capped_expect = cap_outliers(expect, threshold);
    CHECK(read_egrid(capped_out).values == capped_expect.values);

    const nlohmann::json m = nlohmann::json::parse(read_text(capped_out + ".manifest.json"));
    CHECK(m.at("command").get<std::string>() == "preprocess cap");
    CHECK(m.at("extra").at("threshold").get<double>() == doctest::Approx(threshold));
}

TEST_CASE("sampling an all-dark stack exits 2") {
    const std::string dir = ts::fresh_dir("cli_dark");
    RasterGrid dark = RasterGrid::make(64, 64, 0.0f);
    write_egrid(dark, dir + "/dmsp.egrid");
    write_egrid(RasterGrid::make(64, 64, 1.0f), dir + "/optical.egrid");
    write_egrid(RasterGrid::make(128, 128, 1.0f), dir + "/mask.egrid");
    write_egrid(RasterGrid::make(64, 64, 1.0f), dir + "/target.egrid");
    const nlohmann::json manifest{{"dmsp", "dmsp.egrid"},
                                  {"landsat", {"optical.egrid"}},
                                  {"mask", "mask.egrid"},
                                  {"target", "target.egrid"}};
    write_text_file_atomic(dir + "/manifest.json", manifest.dump());
    CHECK(run_cli({"sample", "--rasters", dir + "/manifest.json", "--patch", "32", "--count",
                   "4", "--out", dir + "/patches"}) == 2);
}

TEST_CASE("log-space evaluation of negative radiance exits 2") {
    const std::string dir = ts::fresh_dir("cli_negative");
    RasterGrid g = RasterGrid::make(4, 4, 1.0f);
    g.at(2, 2) = -3.0f;
    write_egrid(g, dir + "/neg.egrid");
    CHECK(run_cli({"evaluate", "--ref", dir + "/neg.egrid", "--pred", dir + "/neg.egrid",
                   "--space", "log", "--out", dir + "/m.json"}) == 2);
}

TEST_CASE("end-to-end pipeline on a synthetic stack") {
    const std::string dir = ts::fresh_dir("cli_pipeline");
    ts::SyntheticSpec spec;
    spec.bands = 3;
    const std::string manifest = ts::write_synthetic_stack(dir + "/stack", spec);
    const std::string config = write_config(dir, spec.bands, spec.scale);

    // sample
    const std::string pd = dir + "/patches";
    REQUIRE(run_cli({"sample", "--rasters", manifest, "--patch", "32", "--count", "12",
                     "--seed", "3", "--out", pd}) == 0);
    REQUIRE(fs::exists(pd + "/patches.pack"));
    REQUIRE(fs::exists(pd + "/index.csv"));
    REQUIRE(fs::exists(pd + "/norm.json"));
    CHECK(fs::exists(pd + "/run_manifest.json"));
    {
        const PatchSet set = load_patch_set(pd);
        CHECK(set.records.size() == 12);
        CHECK(set.patch == 32);
        CHECK(set.bands == 3);
    }

    // a second identical sample run is byte-identical (manifests aside)
    const std::string pd2 = dir + "/patches2";
    REQUIRE(run_cli({"sample", "--rasters", manifest, "--patch", "32", "--count", "12",
                     "--seed", "3", "--out", pd2}) == 0);
    CHECK(same_bytes(pd + "/patches.pack", pd2 + "/patches.pack"));
    CHECK(same_bytes(pd + "/index.csv", pd2 + "/index.csv"));
    CHECK(same_bytes(pd + "/norm.json", pd2 + "/norm.json"));

    // train both stages
    const std::string run = dir + "/run";
    REQUIRE(run_cli({"train", "--data", pd, "--config", config, "--stage", "both", "--out",
                     run}) == 0);
    REQUIRE(fs::exists(run + "/stage1_best.ckpt"));
    REQUIRE(fs::exists(run + "/stage2_best.ckpt"));
    const std::string log_text = read_text(run + "/training_log.csv");
    CHECK(count_lines(log_text) == 5);  // header + stage1 epochs 0..1 + stage2 epochs 0..1
    const nlohmann::json rm = nlohmann::json::parse(read_text(run + "/run_manifest.json"));
    CHECK(rm.at("command").get<std::string>() == "train");
    CHECK(rm.at("config_sha256").get<std::string>().size() == 64);
    CHECK(rm.at("seed").get<std::uint64_t>() == 5);

    // stage 2 alone resumes the stage-1 best
    REQUIRE(run_cli({"train", "--data", pd, "--config", config, "--stage", "2", "--out",
                     run}) == 0);

    // infer, twice for determinism
    const std::string pred = dir + "/pred.egrid";
    const std::string pred2 = dir + "/pred2.egrid";
    REQUIRE(run_cli({"infer", "--ckpt", run + "/stage2_best.ckpt", "--rasters", manifest,
                     "--norm", pd + "/norm.json", "--out", pred, "--tile", "32", "--overlap",
                     "16", "--export-500m", dir + "/pred500.egrid"}) == 0);
    REQUIRE(run_cli({"infer", "--ckpt", run + "/stage2_best.ckpt", "--rasters", manifest,
                     "--norm", pd + "/norm.json", "--out", pred2, "--tile", "32", "--overlap",
                     "16"}) == 0);
    CHECK(same_bytes(pred, pred2));
    {
        const RasterGrid p = read_egrid(pred);
        CHECK(p.rows == spec.rows);
        CHECK(p.cols == spec.cols);
        const RasterGrid p500 = read_egrid(dir + "/pred500.egrid");
        CHECK(p500.rows == spec.rows / 2);
        CHECK(p500.cols == spec.cols / 2);
    }

    // evaluate without and with zones
    const std::string target = dir + "/stack/target.egrid";
    REQUIRE(run_cli({"evaluate", "--ref", target, "--pred", target, "--out",
                     dir + "/ideal.json"}) == 0);
    {
        const nlohmann::json j = nlohmann::json::parse(read_text(dir + "/ideal.json"));
        CHECK(j.at("r2").get<double>() == 1.0);
        CHECK(j.at("psnr_db").is_null());
    }

    RasterGrid zones = read_egrid(target);
    for (int r = 0; r < zones.rows; ++r)
        for (int c = 0; c < zones.cols; ++c) zones.at(r, c) = r < zones.rows / 2 ? 1.0f : 2.0f;
    write_egrid(zones, dir + "/zones.egrid");
    REQUIRE(run_cli({"evaluate", "--ref", target, "--pred", pred, "--zones",
                     dir + "/zones.egrid", "--out", dir + "/metrics.json"}) == 0);
    {
        const nlohmann::json j = nlohmann::json::parse(read_text(dir + "/metrics.json"));
        CHECK(j.contains("r2"));
        CHECK(j.at("zonal").at("zones").get<int>() == 2);
    }
    REQUIRE(fs::exists(dir + "/metrics.zonal.csv"));

    // correlate the zonal totals with synthetic indicators
    const ZonalTable table = parse_zonal_table_csv(read_text(dir + "/metrics.zonal.csv"));
    REQUIRE(table.size() == 2);
    std::string ind = "indicator,region,year,value\n";
    for (int year = 2013; year <= 2014; ++year)
        for (const ZonalRow& row : table) {
            ind += "gdp," + std::to_string(row.zone_id) + "," + std::to_string(year) + "," +
                   std::to_string(3.0 * row.sum_prediction + year) + "\n";
        }
    write_text_file_atomic(dir + "/indicators.csv", ind);
    REQUIRE(run_cli({"correlate", "--zonal",
                     "2013=" + dir + "/metrics.zonal.csv,2014=" + dir + "/metrics.zonal.csv",
                     "--indicators", dir + "/indicators.csv", "--out", dir + "/corr.csv"}) == 0);
    const std::string corr = read_text(dir + "/corr.csv");
    CHECK(corr.rfind("indicator,n_pairs,pearson\n", 0) == 0);
    CHECK(corr.find("gdp,4,") != std::string::npos);
    CHECK(corr.find("average,4,") != std::string::npos);

    // duplicate years are rejected up front
    CHECK(run_cli({"correlate", "--zonal",
                   "2013=" + dir + "/metrics.zonal.csv,2013=" + dir + "/metrics.zonal.csv",
                   "--indicators", dir + "/indicators.csv", "--out", dir + "/corr2.csv"}) == 1);
}

TEST_CASE("ablation grid trains the lattice and reports parameter counts") {
    const std::string dir = ts::fresh_dir("cli_ablate");
    ts::SyntheticSpec spec;
    spec.bands = 3;
    const std::string manifest = ts::write_synthetic_stack(dir + "/stack", spec);
    const std::string config = write_config(dir, spec.bands, spec.scale);
    const std::string pd = dir + "/patches";
    REQUIRE(run_cli({"sample", "--rasters", manifest, "--patch", "32", "--count", "12",
                     "--seed", "3", "--out", pd}) == 0);

    REQUIRE(run_cli({"ablate", "--data", pd, "--config", config, "--grid", "dfr", "--out",
                     dir + "/ablation"}) == 0);
    const std::string csv = read_text(dir + "/ablation/ablation.csv");
    CHECK(count_lines(csv) == 3);
    const std::string header = "variant,parameters,stage,epoch,val_rmse_log\n";
    CHECK(csv.rfind(header, 0) == 0);
    CHECK(csv.compare(header.size(), 5, "full,") == 0);  // baseline row comes first
    CHECK(csv.find("\nno_dfr,") != std::string::npos);
    CHECK(fs::exists(dir + "/ablation/full/training_log.csv"));
    CHECK(fs::exists(dir + "/ablation/no_dfr/training_log.csv"));

    // The parameter column difference is exactly the refiner size.
    ModelConfig full_cfg = ts::tiny_model_config(spec.bands, spec.scale);
    ModelConfig trimmed = full_cfg;
    trimmed.dfr_enabled = false;
    const std::size_t expect_full = Model(full_cfg).parameter_count();
    const std::size_t expect_trimmed = Model(trimmed).parameter_count();
    CHECK(csv.find("full," + std::to_string(expect_full) + ",") != std::string::npos);
    CHECK(csv.find("no_dfr," + std::to_string(expect_trimmed) + ",") != std::string::npos);
}

TEST_SUITE_END();
