#include "evalnet/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evalnet/checkpoint.hpp"
#include "evalnet/hash.hpp"
#include "evalnet/io_util.hpp"
#include "evalnet/metrics.hpp"
#include "evalnet/patches.hpp"
#include "evalnet/raster.hpp"
#include "evalnet/trainer.hpp"

namespace fs = std::filesystem;

namespace evalnet {

namespace {

std::string read_text_file(const std::string& path) {
    const auto bytes = read_binary_file(path);
    return std::string(bytes.begin(), bytes.end());
}

nlohmann::json parse_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
}

std::string iso_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::size_t at = 0;
    while (at <= text.size()) {
        const std::size_t comma = text.find(',', at);
        const std::size_t end = comma == std::string::npos ? text.size() : comma;
        if (end > at) out.push_back(text.substr(at, end - at));
        if (comma == std::string::npos) break;
        at = comma + 1;
    }
    return out;
}

// Model/train sections of a config file; either may be absent.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string hash;
};

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (path.empty()) {
        const std::string canonical =
            nlohmann::json{{"model", rc.model.to_json()}, {"train", rc.train.to_json()}}.dump();
        rc.hash = config_blob_hash(canonical);
        return rc;
    }
    const std::string text = read_text_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    if (j.contains("model")) rc.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) rc.train = TrainConfig::from_json(j.at("train"));
    rc.hash = config_blob_hash(text);
    return rc;
}

void check_set_compat(const ModelConfig& cfg, const PatchSet& set) {
    if (cfg.in_channels != set.bands)
        throw DataError("train: model expects " + std::to_string(cfg.in_channels) +
                        " input bands, patch set has " + std::to_string(set.bands));
    if (cfg.scale_ratio != set.scale)
        throw DataError("train: model scale ratio " + std::to_string(cfg.scale_ratio) +
                        " does not match patch set scale " + std::to_string(set.scale));
}

// ---------------------------------------------------------------------------
// preprocess

struct CompositeOptions {
    std::string inputs;
    std::string out;
    double percentile = 10.0;
};

void run_composite(const CompositeOptions& opt) {
    std::vector<std::string> paths;
    if (!fs::is_directory(opt.inputs))
        throw DataError("composite: " + opt.inputs + " is not a directory");
    for (const auto& entry : fs::directory_iterator(opt.inputs))
        if (entry.is_regular_file() && entry.path().extension() == ".egrid")
            paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw DataError("composite: no .egrid files in " + opt.inputs);
    std::vector<RasterGrid> stack;
    stack.reserve(paths.size());
    for (const auto& p : paths) stack.push_back(read_egrid(p));
    write_egrid(percentile_composite(stack, opt.percentile), opt.out);

    RunManifest m;
    m.command = "preprocess composite";
    m.inputs = paths;
    m.outputs = {opt.out};
    m.extra["percentile"] = opt.percentile;
    write_run_manifest(m, opt.out);
}

struct CapOptions {
    std::string input;
    std::string cities;
    std::string out;
};

void run_cap(const CapOptions& opt) {
    const std::vector<std::string> city_paths = split_list(opt.cities);
    if (city_paths.empty()) throw UsageError("cap: --cities needs at least one grid");
    std::vector<RasterGrid> cities;
    cities.reserve(city_paths.size());
    for (const auto& p : city_paths) cities.push_back(read_egrid(p));
    const double threshold = compute_cap_threshold(cities);
    write_egrid(cap_outliers(read_egrid(opt.input), threshold), opt.out);

    RunManifest m;
    m.command = "preprocess cap";
    m.inputs.push_back(opt.input);
    m.inputs.insert(m.inputs.end(), city_paths.begin(), city_paths.end());
    m.outputs = {opt.out};
    m.extra["threshold"] = threshold;
    write_run_manifest(m, opt.out);
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
    std::string rasters;
    std::string out;
    std::string split = "0.8,0.1,0.1";
    int patch = 64;
    int count = 200;
    double lit_min = 0.01;
    std::uint64_t seed = 0;
};

void run_sample(const SampleOptions& opt) {
    const std::vector<std::string> ratio_str = split_list(opt.split);
    if (ratio_str.size() != 3)
        throw UsageError("sample: --split takes three comma-separated ratios");
    double ratios[3];
    try {
        for (int i = 0; i < 3; ++i) ratios[i] = std::stod(ratio_str[i]);
    } catch (const std::exception&) {
        throw UsageError("sample: --split ratios must be numbers");
    }

    const RasterStack stack = load_raster_stack(opt.rasters);
    ExtractReport report;
    PatchSet set = extract_patches(stack, opt.patch, opt.count, opt.lit_min, opt.seed, &report);
    if (set.records.empty())
        throw DataError("sample: no patches retained after " + std::to_string(report.attempts) +
                        " attempts");
    if (report.budget_exhausted)
        std::fprintf(stderr,
                     "sample: attempt budget exhausted, retained %zu of %d requested patches\n",
                     set.records.size(), opt.count);
    stratified_split(set, ratios[0], ratios[1], ratios[2], opt.seed);
    const NormStats stats = minmax_fit(set);
    minmax_apply(set, stats);
    fs::create_directories(opt.out);
    save_patch_set(set, stats, opt.out);

    RunManifest m;
    m.command = "sample";
    m.seed = opt.seed;
    m.has_seed = true;
    m.inputs = {opt.rasters};
    m.outputs = {(fs::path(opt.out) / "patches.pack").string(),
                 (fs::path(opt.out) / "index.csv").string(),
                 (fs::path(opt.out) / "norm.json").string()};
    m.extra["retained"] = set.records.size();
    m.extra["attempts"] = report.attempts;
    m.extra["budget_exhausted"] = report.budget_exhausted;
    write_run_manifest(m, opt.out);
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    std::string data;
    std::string config;
    std::string stage = "both";
    std::string out;
    bool print_config = false;
};

void run_train(const TrainOptions& opt) {
    if (opt.print_config) {
        const nlohmann::json j{{"model", ModelConfig{}.to_json()},
                               {"train", TrainConfig{}.to_json()}};
        std::printf("%s\n", j.dump(2).c_str());
        return;
    }
    if (opt.data.empty() || opt.out.empty())
        throw UsageError("train: --data and --out are required");

    RunConfig rc = load_run_config(opt.config);
    rc.train.checkpoint_dir = opt.out;
    NormStats stats;
    const PatchSet set = load_patch_set(opt.data, &stats);

    std::vector<EpochLog> log;
    RunManifest m;
    m.command = "train";
    m.config_path = opt.config;
    m.config_sha256 = rc.hash;
    m.seed = rc.train.seed;
    m.has_seed = true;
    m.inputs = {opt.data};

    if (opt.stage == "1" || opt.stage == "both") {
        check_set_compat(rc.model, set);
        Model model(rc.model);
        const TrainResult r1 = train_stage1(model, set, rc.train);
        log.insert(log.end(), r1.log.begin(), r1.log.end());
        m.outputs.push_back(r1.best_path);
        m.extra["stage1_val_rmse_log"] = r1.best_meta.validation_rmse_log;
        if (opt.stage == "both") {
            Model best = load_checkpoint(r1.best_path).model;
            const TrainResult r2 = train_stage2(best, set, rc.train);
            log.insert(log.end(), r2.log.begin(), r2.log.end());
            m.outputs.push_back(r2.best_path);
            m.extra["stage2_val_rmse_log"] = r2.best_meta.validation_rmse_log;
        }
    } else {
        const std::string resume = (fs::path(opt.out) / "stage1_best.ckpt").string();
        if (!fs::exists(resume))
            throw DataError("train: stage 2 needs " + resume + "; run stage 1 first");
        Model model = load_checkpoint(resume).model;
        if (!opt.config.empty() && parse_json_file(opt.config).contains("model") &&
            !(rc.model == model.config()))
            throw DataError("train: config model section differs from the checkpoint");
        check_set_compat(model.config(), set);
        const TrainResult r2 = train_stage2(model, set, rc.train);
        log.insert(log.end(), r2.log.begin(), r2.log.end());
        m.outputs.push_back(r2.best_path);
        m.extra["stage2_val_rmse_log"] = r2.best_meta.validation_rmse_log;
    }

    const std::string log_path = (fs::path(opt.out) / "training_log.csv").string();
    write_text_file_atomic(log_path, training_log_csv(log));
    m.outputs.push_back(log_path);
    write_run_manifest(m, opt.out);
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
    std::string ckpt;
    std::string rasters;
    std::string out;
    std::string norm;
    std::string export_500m;
    int tile = 64;
    int overlap = 32;
};

std::vector<int> axis_origins(int extent, int tile, int step) {
    std::vector<int> origins;
    if (extent <= tile) {
        origins.push_back(0);
        return origins;
    }
    for (int r = 0;; r += step) {
        if (r + tile >= extent) {
            origins.push_back(extent - tile);
            break;
        }
        origins.push_back(r);
    }
    return origins;
}

void run_infer(const InferOptions& opt) {
    if (opt.tile < 32 || opt.tile % 32 != 0)
        throw UsageError("infer: --tile must be a positive multiple of 32");
    if (opt.overlap < 0 || opt.overlap % 2 != 0 || opt.overlap >= opt.tile)
        throw UsageError("infer: --overlap must be even and smaller than --tile");

    const Checkpoint ckpt = load_checkpoint(opt.ckpt);
    const Model& model = ckpt.model;
    const ModelConfig& cfg = model.config();
    const RasterStack stack = load_raster_stack(opt.rasters);
    if (stack.bands() != cfg.in_channels)
        throw DataError("infer: model expects " + std::to_string(cfg.in_channels) +
                        " input bands, raster stack has " + std::to_string(stack.bands()));
    if (stack.scale != cfg.scale_ratio)
        throw DataError("infer: raster stack scale " + std::to_string(stack.scale) +
                        " does not match model scale ratio " + std::to_string(cfg.scale_ratio));

    const std::string norm_file = opt.norm.empty() ? stack.norm_path : opt.norm;
    if (norm_file.empty())
        throw DataError("infer: normalization stats required (--norm or a norm entry in the "
                        "raster manifest)");
    const NormStats stats = NormStats::from_json(parse_json_file(norm_file));
    if (static_cast<int>(stats.bands.size()) != stack.bands())
        throw DataError("infer: norm stats cover " + std::to_string(stats.bands.size()) +
                        " bands, raster stack has " + std::to_string(stack.bands()));

    const int rows = stack.dmsp.rows;
    const int cols = stack.dmsp.cols;
    if (rows % 32 != 0 || cols % 32 != 0)
        throw DataError("infer: raster extent must be a multiple of 32");
    const int scale = stack.scale;
    const int bands = stack.bands();

    // Any-band-nodata footprint at the input resolution.
    std::vector<uint8_t> hole(static_cast<std::size_t>(rows) * cols, 0);
    auto mark_holes = [&](const RasterGrid& g) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                if (!g.valid_at(r, c)) hole[static_cast<std::size_t>(r) * cols + c] = 1;
    };
    mark_holes(stack.dmsp);
    for (const auto& g : stack.landsat) mark_holes(g);

    RasterGrid out = RasterGrid::make(rows, cols, 0.0f, stack.dmsp.nodata);
    out.x_origin = stack.dmsp.x_origin;
    out.y_origin = stack.dmsp.y_origin;
    out.pixel_size = stack.dmsp.pixel_size;

    const int ty = std::min(opt.tile, rows);
    const int tx = std::min(opt.tile, cols);
    const int step = opt.tile - opt.overlap;
    const std::vector<int> row_origins = axis_origins(rows, ty, step);
    const std::vector<int> col_origins = axis_origins(cols, tx, step);
    const int half = opt.overlap / 2;

    NoGradScope ng;
    for (std::size_t ri = 0; ri < row_origins.size(); ++ri) {
        for (std::size_t ci = 0; ci < col_origins.size(); ++ci) {
            const int r0 = row_origins[ri];
            const int c0 = col_origins[ci];
            std::vector<float> tile(static_cast<std::size_t>(bands) * ty * tx);
            auto fill_band = [&](int b, const RasterGrid& g) {
                for (int y = 0; y < ty; ++y)
                    for (int x = 0; x < tx; ++x) {
                        const float v = g.at(r0 + y, c0 + x);
                        tile[(static_cast<std::size_t>(b) * ty + y) * tx + x] =
                            g.is_nodata(v) ? 0.0f : v;
                    }
            };
            fill_band(0, stack.dmsp);
            for (std::size_t b = 0; b < stack.landsat.size(); ++b)
                fill_band(static_cast<int>(b) + 1, stack.landsat[b]);
            minmax_apply(tile, bands, stats);
            for (int b = 0; b < bands; ++b)
                for (int y = 0; y < ty; ++y)
                    for (int x = 0; x < tx; ++x)
                        if (hole[static_cast<std::size_t>(r0 + y) * cols + c0 + x])
                            tile[(static_cast<std::size_t>(b) * ty + y) * tx + x] = 0.0f;

            Tensor input = Tensor::zeros({1, bands, ty, tx});
            {
                auto d = input.mutable_data();
                for (std::size_t i = 0; i < tile.size(); ++i)
                    d[i] = static_cast<double>(tile[i]);
            }
            Tensor mask = Tensor::zeros({1, 1, ty * scale, tx * scale});
            {
                auto d = mask.mutable_data();
                for (int y = 0; y < ty * scale; ++y)
                    for (int x = 0; x < tx * scale; ++x) {
                        const float v = stack.mask.at(r0 * scale + y, c0 * scale + x);
                        d[static_cast<std::size_t>(y) * tx * scale + x] =
                            stack.mask.is_nodata(v) ? 0.0 : static_cast<double>(v);
                    }
            }

            const Tensor pred = model.forward(input, mask).second;
            const auto pv = pred.data();

            // Each tile contributes its centre; border tiles keep their
            // image-facing margins. Later tiles overwrite in row-major
            // order when clamping widens the overlap.
            const int y_lo = ri == 0 ? 0 : half;
            const int y_hi = ri + 1 == row_origins.size() ? ty : ty - half;
            const int x_lo = ci == 0 ? 0 : half;
            const int x_hi = ci + 1 == col_origins.size() ? tx : tx - half;
            for (int y = y_lo; y < y_hi; ++y) {
                const std::size_t src = static_cast<std::size_t>(y) * tx + x_lo;
                const std::size_t dst =
                    static_cast<std::size_t>(r0 + y) * out.cols + (c0 + x_lo);
                for (int k = 0; k < x_hi - x_lo; ++k)
                    out.values[dst + k] = static_cast<float>(pv[src + k]);
            }
        }
    }

    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            if (hole[static_cast<std::size_t>(r) * cols + c]) out.at(r, c) = out.nodata;

    write_egrid(inverse_log(out), opt.out);

    RunManifest m;
    m.command = "infer";
    m.inputs = {opt.ckpt, opt.rasters, norm_file};
    m.outputs = {opt.out};
    m.extra["tile"] = opt.tile;
    m.extra["overlap"] = opt.overlap;
    if (!opt.export_500m.empty()) {
        write_egrid(downsample_mean(inverse_log(out), 2), opt.export_500m);
        m.outputs.push_back(opt.export_500m);
    }
    write_run_manifest(m, opt.out);
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
    std::string ref;
    std::string pred;
    std::string zones;
    std::string space = "radiance";
    std::string out;
};

void run_evaluate(const EvaluateOptions& opt) {
    RasterGrid ref = read_egrid(opt.ref);
    RasterGrid pred = read_egrid(opt.pred);
    if (opt.space == "log") {
        ref = log_transform(ref);
        pred = log_transform(pred);
    }
    MetricReport rep = compute_metrics(ref, pred);
    rep.space = opt.space;
    nlohmann::json j = rep.to_json();

    RunManifest m;
    m.command = "evaluate";
    m.inputs = {opt.ref, opt.pred};
    m.outputs = {opt.out};
    if (!opt.zones.empty()) {
        const RasterGrid zones = read_egrid(opt.zones);
        const CityScaleResult cs = city_scale_eval(ref, pred, zones);
        j["zonal"] = {{"r2", cs.r2}, {"rmse", cs.rmse}, {"zones", cs.zones}};
        fs::path zp(opt.out);
        zp.replace_extension(".zonal.csv");
        write_text_file_atomic(zp.string(), zonal_table_csv(zonal_pair(ref, pred, zones)));
        m.inputs.push_back(opt.zones);
        m.outputs.push_back(zp.string());
    }
    write_text_file_atomic(opt.out, j.dump(2) + "\n");
    write_run_manifest(m, opt.out);
}

// ---------------------------------------------------------------------------
// correlate

struct CorrelateOptions {
    std::vector<std::string> zonal;
    std::string indicators;
    std::string column = "pred";
    std::string out;
};

void run_correlate(const CorrelateOptions& opt) {
    std::map<int, ZonalTable> totals;
    std::vector<std::string> zonal_paths;
    for (const std::string& entry : opt.zonal) {
        for (const std::string& token : split_list(entry)) {
            const std::size_t eq = token.find('=');
            if (eq == std::string::npos || eq == 0 || eq + 1 == token.size())
                throw UsageError("correlate: --zonal entries take the form year=path");
            int year = 0;
            try {
                year = std::stoi(token.substr(0, eq));
            } catch (const std::exception&) {
                throw UsageError("correlate: bad year in --zonal entry '" + token + "'");
            }
            const std::string path = token.substr(eq + 1);
            if (totals.count(year))
                throw UsageError("correlate: duplicate year " + std::to_string(year));
            totals[year] = parse_zonal_table_csv(read_text_file(path));
            zonal_paths.push_back(path);
        }
    }
    const auto indicators = parse_indicator_csv(read_text_file(opt.indicators));
    const auto rows = correlation_report(totals, indicators, opt.column == "pred");
    write_text_file_atomic(opt.out, correlation_csv(rows));

    RunManifest m;
    m.command = "correlate";
    m.inputs = zonal_paths;
    m.inputs.push_back(opt.indicators);
    m.outputs = {opt.out};
    m.extra["column"] = opt.column;
    write_run_manifest(m, opt.out);
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
    std::string data;
    std::string grid;
    std::string config;
    std::string out;
};

void run_ablate(const AblateOptions& opt) {
    std::set<std::string> tokens;
    for (const std::string& t : split_list(opt.grid)) {
        if (t != "srf" && t != "ma" && t != "dfr")
            throw UsageError("ablate: unknown grid token '" + t + "'");
        tokens.insert(t);
    }

    RunConfig rc = load_run_config(opt.config);
    NormStats stats;
    const PatchSet set = load_patch_set(opt.data, &stats);
    check_set_compat(rc.model, set);

    // Ablation lattice: removing SRF or MA also drops the refinement stage
    // so those rows isolate the decoder change.
    std::vector<std::pair<std::string, ModelConfig>> variants;
    variants.emplace_back("full", rc.model);
    if (tokens.count("srf")) {
        ModelConfig v = rc.model;
        v.srf_enabled = false;
        v.dfr_enabled = false;
        variants.emplace_back("no_srf", v);
    }
    if (tokens.count("ma")) {
        ModelConfig v = rc.model;
        v.ma_enabled = false;
        v.dfr_enabled = false;
        variants.emplace_back("no_ma", v);
    }
    if (tokens.count("dfr")) {
        ModelConfig v = rc.model;
        v.dfr_enabled = false;
        variants.emplace_back("no_dfr", v);
    }

    fs::create_directories(opt.out);
    std::string csv = "variant,parameters,stage,epoch,val_rmse_log\n";
    for (const auto& [name, vcfg] : variants) {
        const std::string dir = (fs::path(opt.out) / name).string();
        TrainConfig tcfg = rc.train;
        tcfg.checkpoint_dir = dir;
        Model model(vcfg);
        const std::size_t params = model.parameter_count();
        TrainResult res = train_stage1(model, set, tcfg);
        if (vcfg.dfr_enabled) {
            Model best = load_checkpoint(res.best_path).model;
            TrainResult r2 = train_stage2(best, set, tcfg);
            res.log.insert(res.log.end(), r2.log.begin(), r2.log.end());
            res.best_meta = r2.best_meta;
        }
        write_text_file_atomic((fs::path(dir) / "training_log.csv").string(),
                               training_log_csv(res.log));
        char row[160];
        std::snprintf(row, sizeof(row), "%s,%zu,%d,%d,%.9g\n", name.c_str(), params,
                      res.best_meta.stage, res.best_meta.epoch,
                      res.best_meta.validation_rmse_log);
        csv += row;
    }
    const std::string csv_path = (fs::path(opt.out) / "ablation.csv").string();
    write_text_file_atomic(csv_path, csv);

    RunManifest m;
    m.command = "ablate";
    m.config_path = opt.config;
    m.config_sha256 = rc.hash;
    m.seed = rc.train.seed;
    m.has_seed = true;
    m.inputs = {opt.data};
    m.outputs = {csv_path};
    write_run_manifest(m, opt.out);
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j{{"command", command},
                     {"inputs", inputs},
                     {"outputs", outputs},
                     {"timestamp", iso_timestamp()}};
    if (!config_path.empty()) j["config"] = config_path;
    if (!config_sha256.empty()) j["config_sha256"] = config_sha256;
    if (has_seed) j["seed"] = seed;
    if (!extra.empty()) j["extra"] = extra;
    return j;
}

void write_run_manifest(const RunManifest& m, const std::string& out_target) {
    const std::string path = fs::is_directory(out_target)
                                 ? (fs::path(out_target) / "run_manifest.json").string()
                                 : out_target + ".manifest.json";
    write_text_file_atomic(path, m.to_json().dump(2) + "\n");
}

std::string config_blob_hash(const std::string& bytes) {
    std::string blob = "blob " + std::to_string(bytes.size());
    blob.push_back('\0');
    blob += bytes;
    return sha256_hex(blob);
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"EVAL-style nighttime-light reconstruction toolkit"};
    app.require_subcommand(1);

    auto* preprocess = app.add_subcommand("preprocess", "Composite and cap source rasters");
    preprocess->require_subcommand(1);

    CompositeOptions composite_opt;
    auto* composite =
        preprocess->add_subcommand("composite", "Per-pixel annual percentile composite");
    composite->add_option("--inputs", composite_opt.inputs, "Directory of .egrid observations")
        ->required();
    composite->add_option("--percentile", composite_opt.percentile, "Percentile in (0,100]")
        ->capture_default_str();
    composite->add_option("--out", composite_opt.out, "Output .egrid")->required();
    composite->callback([&] { run_composite(composite_opt); });

    CapOptions cap_opt;
    auto* cap = preprocess->add_subcommand("cap", "Cap outlier radiances");
    cap->add_option("--input", cap_opt.input, "Input .egrid")->required();
    cap->add_option("--cities", cap_opt.cities, "Comma-separated stable-city .egrid list")
        ->required();
    cap->add_option("--out", cap_opt.out, "Output .egrid")->required();
    cap->callback([&] { run_cap(cap_opt); });

    SampleOptions sample_opt;
    auto* sample = app.add_subcommand("sample", "Extract training patches from a raster stack");
    sample->add_option("--rasters", sample_opt.rasters, "Raster manifest JSON")->required();
    sample->add_option("--patch", sample_opt.patch, "Low-res patch extent")
        ->capture_default_str();
    sample->add_option("--count", sample_opt.count, "Patches to retain")->capture_default_str();
    sample->add_option("--lit-min", sample_opt.lit_min, "Minimum lit fraction")
        ->capture_default_str();
    sample->add_option("--seed", sample_opt.seed, "Sampling seed")->capture_default_str();
    sample->add_option("--split", sample_opt.split, "train,val,test ratios")
        ->capture_default_str();
    sample->add_option("--out", sample_opt.out, "Output directory")->required();
    sample->callback([&] { run_sample(sample_opt); });

    TrainOptions train_opt;
    auto* train = app.add_subcommand("train", "Two-stage training");
    train->add_option("--data", train_opt.data, "Patch set directory");
    train->add_option("--config", train_opt.config, "Config JSON with model/train sections");
    train->add_option("--stage", train_opt.stage, "1, 2 or both")
        ->check(CLI::IsMember({"1", "2", "both"}))
        ->capture_default_str();
    train->add_option("--out", train_opt.out, "Checkpoint directory");
    train->add_flag("--print-config", train_opt.print_config,
                    "Print the full default config and exit");
    train->callback([&] { run_train(train_opt); });

    InferOptions infer_opt;
    auto* infer = app.add_subcommand("infer", "Tiled whole-raster inference");
    infer->add_option("--ckpt", infer_opt.ckpt, "Checkpoint file")->required();
    infer->add_option("--rasters", infer_opt.rasters, "Raster manifest JSON")->required();
    infer->add_option("--out", infer_opt.out, "Output .egrid")->required();
    infer->add_option("--norm", infer_opt.norm, "NormStats JSON (overrides manifest)");
    infer->add_option("--tile", infer_opt.tile, "Tile extent, multiple of 32")
        ->capture_default_str();
    infer->add_option("--overlap", infer_opt.overlap, "Tile overlap, even")
        ->capture_default_str();
    infer->add_option("--export-500m", infer_opt.export_500m,
                      "Also write a 2x aggregated .egrid");
    infer->callback([&] { run_infer(infer_opt); });

    EvaluateOptions eval_opt;
    auto* evaluate = app.add_subcommand("evaluate", "Pixel and zonal metrics");
    evaluate->add_option("--ref", eval_opt.ref, "Reference .egrid")->required();
    evaluate->add_option("--pred", eval_opt.pred, "Prediction .egrid")->required();
    evaluate->add_option("--zones", eval_opt.zones, "Zone-label .egrid");
    evaluate->add_option("--space", eval_opt.space, "Comparison space")
        ->check(CLI::IsMember({"radiance", "log"}))
        ->capture_default_str();
    evaluate->add_option("--out", eval_opt.out, "Output JSON")->required();
    evaluate->callback([&] { run_evaluate(eval_opt); });

    CorrelateOptions corr_opt;
    auto* correlate = app.add_subcommand("correlate", "Correlate zonal sums with indicators");
    correlate
        ->add_option("--zonal", corr_opt.zonal, "year=path zonal-table CSVs, comma-separated")
        ->required();
    correlate->add_option("--indicators", corr_opt.indicators, "Indicator CSV")->required();
    correlate->add_option("--column", corr_opt.column, "Zonal column to correlate")
        ->check(CLI::IsMember({"pred", "ref"}))
        ->capture_default_str();
    correlate->add_option("--out", corr_opt.out, "Output CSV")->required();
    correlate->callback([&] { run_correlate(corr_opt); });

    AblateOptions ablate_opt;
    auto* ablate = app.add_subcommand("ablate", "Train the ablation lattice");
    ablate->add_option("--data", ablate_opt.data, "Patch set directory")->required();
    ablate->add_option("--grid", ablate_opt.grid, "Comma list from srf,ma,dfr");
    ablate->add_option("--config", ablate_opt.config, "Config JSON with model/train sections");
    ablate->add_option("--out", ablate_opt.out, "Output directory")->required();
    ablate->callback([&] { run_ablate(ablate_opt); });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "data: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("evalnet");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace evalnet
