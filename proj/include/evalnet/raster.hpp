#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "evalnet/errors.hpp"

namespace evalnet {

// Georeferenced single-band grid, row-major float32. (x_origin, y_origin)
// is the outer corner of cell (0,0); pixel_size is in map units.
struct RasterGrid {
    int rows = 0;
    int cols = 0;
    double x_origin = 0.0;
    double y_origin = 0.0;
    double pixel_size = 1.0;
    float nodata = -9999.0f;
    std::vector<float> values;

    static RasterGrid make(int rows, int cols, float fill = 0.0f, float nodata = -9999.0f);

    float at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
    float& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
    bool is_nodata(float v) const {
        return std::isnan(nodata) ? std::isnan(v) : v == nodata;
    }
    bool valid_at(int r, int c) const { return !is_nodata(at(r, c)); }
    bool same_geometry(const RasterGrid& o) const;
};

// EGRID container: 64-byte header (magic "EGRD", u32 version=1, u32 rows,
// u32 cols, f64 x_origin, f64 y_origin, f64 pixel_size, f32 nodata, 20
// reserved zero bytes, all little-endian) followed by rows*cols float32
// row-major values.
RasterGrid read_egrid(const std::string& path);
void write_egrid(const RasterGrid& grid, const std::string& path);

// Per-pixel nearest-rank percentile over the valid observations of a
// co-registered stack: 1-based sorted index ceil(n*p/100). A pixel with no
// valid observation becomes nodata.
RasterGrid percentile_composite(const std::vector<RasterGrid>& stack, double p);

// Mean of the per-grid maxima over valid pixels.
double compute_cap_threshold(const std::vector<RasterGrid>& city_grids);

// Single pass: each valid pixel above the threshold is replaced by the
// mean of the valid, non-exceeding original values in its 5x5
// neighborhood (center excluded); clamped to the threshold when no such
// neighbor exists. Pixels at or below the threshold are untouched.
RasterGrid cap_outliers(const RasterGrid& grid, double threshold);

// y = ln(1+x) and its inverse; nodata cells pass through.
RasterGrid log_transform(const RasterGrid& grid);
RasterGrid inverse_log(const RasterGrid& grid);

// Factor-f average pooling over full blocks (rows, cols divisible by f);
// a block containing any nodata cell becomes nodata.
RasterGrid downsample_mean(const RasterGrid& grid, int factor);

}  // namespace evalnet
