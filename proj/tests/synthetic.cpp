#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "evalnet/io_util.hpp"
#include "evalnet/raster.hpp"
#include "evalnet/rng.hpp"

namespace fs = std::filesystem;

namespace evalnet::testsupport {

namespace {

// Sum of random Gaussian blobs, everywhere positive.
std::vector<double> blob_field(int rows, int cols, Rng& rng) {
    std::vector<double> f(static_cast<std::size_t>(rows) * cols, 0.1);
    const int blobs = std::max(4, rows * cols / 1600);
    for (int b = 0; b < blobs; ++b) {
        const double cy = rng.uniform() * rows;
        const double cx = rng.uniform() * cols;
        const double amp = 15.0 + 45.0 * rng.uniform();
        const double sigma = rows / 16.0 + rng.uniform() * rows / 6.0;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
                f[static_cast<std::size_t>(r) * cols + c] +=
                    amp * std::exp(-d2 / (2.0 * sigma * sigma));
            }
    }
    return f;
}

double boxcar3(const std::vector<double>& f, int rows, int cols, int r, int c) {
    double acc = 0.0;
    int n = 0;
    for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
            acc += f[static_cast<std::size_t>(rr) * cols + cc];
            ++n;
        }
    return acc / n;
}

}  // namespace

std::string write_synthetic_stack(const std::string& dir, const SyntheticSpec& spec) {
    fs::create_directories(dir);
    Rng rng(spec.seed);
    const int rows = spec.rows, cols = spec.cols, s = spec.scale;

    const std::vector<double> dmsp = blob_field(rows, cols, rng);

    RasterGrid dg = RasterGrid::make(rows, cols);
    for (std::size_t i = 0; i < dmsp.size(); ++i) dg.values[i] = static_cast<float>(dmsp[i]);
    write_egrid(dg, dir + "/dmsp.egrid");

    nlohmann::json landsat_names = nlohmann::json::array();
    for (int b = 0; b < spec.bands - 1; ++b) {
        RasterGrid lg = RasterGrid::make(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const double ramp = 0.1 * (b + 1) * (r + c) / double(rows + cols);
                const double v = ramp + 0.3 * dmsp[static_cast<std::size_t>(r) * cols + c] +
                                 rng.uniform();
                lg.at(r, c) = static_cast<float>(v);
            }
        const std::string name = "landsat_" + std::to_string(b) + ".egrid";
        write_egrid(lg, dir + "/" + name);
        landsat_names.push_back(name);
    }

    RasterGrid mg = RasterGrid::make(rows * s, cols * s);
    mg.pixel_size = 1.0 / s;
    std::vector<double> density(static_cast<std::size_t>(rows) * cols, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double p =
                std::clamp(dmsp[static_cast<std::size_t>(r) * cols + c] / 40.0, 0.0, 1.0);
            int lit = 0;
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx) {
                    const int on = rng.uniform() < p ? 1 : 0;
                    lit += on;
                    mg.at(r * s + dy, c * s + dx) = static_cast<float>(on);
                }
            density[static_cast<std::size_t>(r) * cols + c] = lit / double(s * s);
        }
    write_egrid(mg, dir + "/mask.egrid");

    RasterGrid tg = RasterGrid::make(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            tg.at(r, c) = static_cast<float>(5.0 * density[static_cast<std::size_t>(r) * cols + c] +
                                             boxcar3(dmsp, rows, cols, r, c));
    write_egrid(tg, dir + "/target.egrid");

    const nlohmann::json manifest{{"dmsp", "dmsp.egrid"},
                                  {"landsat", landsat_names},
                                  {"mask", "mask.egrid"},
                                  {"target", "target.egrid"}};
    const std::string path = dir + "/manifest.json";
    write_text_file_atomic(path, manifest.dump(2) + "\n");
    return path;
}

ModelConfig tiny_model_config(int in_channels, int scale) {
    ModelConfig cfg;
    cfg.in_channels = in_channels;
    cfg.encoder_channels = {8, 8, 8, 8, 8};
    cfg.decoder_channels = {8, 8, 8, 8, 8};
    cfg.ma_dilations = {1, 2};
    cfg.cla_window = 3;
    cfg.scale_ratio = scale;
    cfg.dfr_blocks_low = 1;
    cfg.dfr_blocks_high = 1;
    cfg.dfr_blocks_fused = 1;
    cfg.dfr_channels = 8;
    cfg.seed = 1;
    return cfg;
}

std::string fresh_dir(const std::string& name) {
    const fs::path p = fs::current_path() / "tmp" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

}  // namespace evalnet::testsupport
