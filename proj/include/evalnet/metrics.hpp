#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "evalnet/raster.hpp"

namespace evalnet {

struct MetricReport {
    double r2 = 0.0;
    double rmse = 0.0;
    double psnr_db = 0.0;
    bool psnr_infinite = false;
    double uiqi = 0.0;
    std::size_t n = 0;
    std::string scale = "pixel";
    std::string space = "radiance";

    // {r2, rmse, psnr_db, uiqi, n, scale, space}; infinite PSNR serializes
    // as null.
    nlohmann::json to_json() const;
};

// R^2, RMSE, PSNR (MAX = max of the reference values) and global UIQI with
// population (1/n) variances, in float64 over the paired samples.
MetricReport compute_metrics(const std::vector<double>& reference,
                             const std::vector<double>& prediction);
// Same over the co-registered valid pixels of two grids (nodata in either
// grid excludes the pixel).
MetricReport compute_metrics(const RasterGrid& reference, const RasterGrid& prediction);

struct ZonalRow {
    long long zone_id = 0;
    std::size_t pixel_count = 0;
    double sum_reference = 0.0;
    double sum_prediction = 0.0;
};
using ZonalTable = std::vector<ZonalRow>;  // ascending zone_id

// Per-zone totals of one grid over valid pixels; zone label 0 or nodata is
// unlabeled. Sums land in sum_reference.
ZonalTable zonal_sum(const RasterGrid& grid, const RasterGrid& zones);
// Shared-mask totals of a reference/prediction pair (pixels valid in both).
ZonalTable zonal_pair(const RasterGrid& reference, const RasterGrid& prediction,
                      const RasterGrid& zones);

struct CityScaleResult {
    double r2 = 0.0;
    double rmse = 0.0;
    std::size_t zones = 0;
};
// R^2 and RMSE over paired zone totals.
CityScaleResult city_scale_eval(const RasterGrid& reference, const RasterGrid& prediction,
                                const RasterGrid& zones);

// prediction - reference; nodata where either input is nodata.
RasterGrid error_map(const RasterGrid& reference, const RasterGrid& prediction);

// Sample Pearson correlation in float64.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

std::string zonal_table_csv(const ZonalTable& table);
ZonalTable parse_zonal_table_csv(const std::string& text);

struct IndicatorRow {
    std::string indicator;
    long long region = 0;
    int year = 0;
    double value = 0.0;
};
// CSV with header indicator,region,year,value.
std::vector<IndicatorRow> parse_indicator_csv(const std::string& text);

struct CorrelationRow {
    std::string indicator;
    std::size_t n_pairs = 0;
    double pearson = 0.0;
};
// Inner-joins zone-year NTL totals with each indicator and appends an
// "average" row over the per-indicator coefficients.
std::vector<CorrelationRow> correlation_report(
    const std::map<int, ZonalTable>& totals_by_year, const std::vector<IndicatorRow>& indicators,
    bool use_prediction_column);
std::string correlation_csv(const std::vector<CorrelationRow>& rows);

}  // namespace evalnet
