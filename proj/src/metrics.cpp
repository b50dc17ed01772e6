#include "evalnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace evalnet {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = line.find(',', pos);
        cells.push_back(line.substr(pos, comma - pos));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return cells;
}

std::vector<std::string> read_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

// r2 and rmse shared by the pixel- and zonal-scale paths.
void fit_stats(const std::vector<double>& y, const std::vector<double>& yhat, double& r2,
               double& rmse) {
    const std::size_t n = y.size();
    double sum_y = 0.0;
    for (double v : y) sum_y += v;
    const double mean_y = sum_y / static_cast<double>(n);
    double sse = 0.0, sst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = y[i] - yhat[i];
        const double d = y[i] - mean_y;
        sse += e * e;
        sst += d * d;
    }
    if (sst == 0.0) throw DataError("metrics: degenerate (constant) reference");
    r2 = 1.0 - sse / sst;
    rmse = std::sqrt(sse / static_cast<double>(n));
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j{{"r2", r2},       {"rmse", rmse}, {"uiqi", uiqi},  {"n", n},
                     {"scale", scale}, {"space", space}};
    if (psnr_infinite)
        j["psnr_db"] = nullptr;
    else
        j["psnr_db"] = psnr_db;
    return j;
}

MetricReport compute_metrics(const std::vector<double>& reference,
                             const std::vector<double>& prediction) {
    if (reference.size() != prediction.size())
        throw DataError("metrics: length mismatch");
    const std::size_t n = reference.size();
    if (n < 2) throw DataError("metrics: fewer than 2 paired samples");
    MetricReport rep;
    rep.n = n;
    fit_stats(reference, prediction, rep.r2, rep.rmse);

    double sum_y = 0.0, sum_p = 0.0;
    double max_y = reference[0];
    for (std::size_t i = 0; i < n; ++i) {
        sum_y += reference[i];
        sum_p += prediction[i];
        max_y = std::max(max_y, reference[i]);
    }
    const double mean_y = sum_y / static_cast<double>(n);
    const double mean_p = sum_p / static_cast<double>(n);
    double var_y = 0.0, var_p = 0.0, cov = 0.0, sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dy = reference[i] - mean_y;
        const double dp = prediction[i] - mean_p;
        var_y += dy * dy;
        var_p += dp * dp;
        cov += dy * dp;
        const double e = prediction[i] - reference[i];
        sse += e * e;
    }
    var_y /= static_cast<double>(n);
    var_p /= static_cast<double>(n);
    cov /= static_cast<double>(n);
    const double mse = sse / static_cast<double>(n);

    if (mse == 0.0) {
        rep.psnr_infinite = true;
        rep.psnr_db = std::numeric_limits<double>::infinity();
    } else {
        rep.psnr_db = 10.0 * std::log10(max_y * max_y / mse);
    }
    const double num = (4.0 * cov) * (mean_y * mean_p);
    const double den = (var_y + var_p) * (mean_y * mean_y + mean_p * mean_p);
    if (den == 0.0) throw DataError("metrics: UIQI denominator is zero");
    rep.uiqi = num / den;
    return rep;
}

MetricReport compute_metrics(const RasterGrid& reference, const RasterGrid& prediction) {
    if (!reference.same_geometry(prediction))
        throw DataError("metrics: reference/prediction geometry mismatch");
    std::vector<double> y, p;
    y.reserve(reference.values.size());
    p.reserve(reference.values.size());
    for (std::size_t i = 0; i < reference.values.size(); ++i) {
        const float rv = reference.values[i];
        const float pv = prediction.values[i];
        if (reference.is_nodata(rv) || prediction.is_nodata(pv)) continue;
        y.push_back(rv);
        p.push_back(pv);
    }
    if (y.size() < 2) throw DataError("metrics: fewer than 2 valid common pixels");
    return compute_metrics(y, p);
}

namespace {

long long zone_label(const RasterGrid& zones, std::size_t i) {
    return std::llround(static_cast<double>(zones.values[i]));
}

}  // namespace

ZonalTable zonal_sum(const RasterGrid& grid, const RasterGrid& zones) {
    if (!grid.same_geometry(zones)) throw DataError("zonal: geotransform mismatch");
    std::map<long long, ZonalRow> acc;
    for (std::size_t i = 0; i < grid.values.size(); ++i) {
        const float v = grid.values[i];
        const float z = zones.values[i];
        if (grid.is_nodata(v) || zones.is_nodata(z)) continue;
        const long long id = zone_label(zones, i);
        if (id == 0) continue;
        ZonalRow& row = acc[id];
        row.zone_id = id;
        row.pixel_count += 1;
        row.sum_reference += v;
    }
    ZonalTable out;
    out.reserve(acc.size());
    for (auto& [id, row] : acc) out.push_back(row);
    return out;
}

ZonalTable zonal_pair(const RasterGrid& reference, const RasterGrid& prediction,
                      const RasterGrid& zones) {
    if (!reference.same_geometry(prediction) || !reference.same_geometry(zones))
        throw DataError("zonal: geotransform mismatch");
    std::map<long long, ZonalRow> acc;
    for (std::size_t i = 0; i < reference.values.size(); ++i) {
        const float rv = reference.values[i];
        const float pv = prediction.values[i];
        const float z = zones.values[i];
        if (reference.is_nodata(rv) || prediction.is_nodata(pv) || zones.is_nodata(z)) continue;
        const long long id = zone_label(zones, i);
        if (id == 0) continue;
        ZonalRow& row = acc[id];
        row.zone_id = id;
        row.pixel_count += 1;
        row.sum_reference += rv;
        row.sum_prediction += pv;
    }
    ZonalTable out;
    out.reserve(acc.size());
    for (auto& [id, row] : acc) out.push_back(row);
    return out;
}

CityScaleResult city_scale_eval(const RasterGrid& reference, const RasterGrid& prediction,
                                const RasterGrid& zones) {
    const ZonalTable table = zonal_pair(reference, prediction, zones);
    if (table.size() < 2) throw DataError("city scale: fewer than 2 labeled zones");
    std::vector<double> y, p;
    for (const ZonalRow& row : table) {
        y.push_back(row.sum_reference);
        p.push_back(row.sum_prediction);
    }
    CityScaleResult res;
    res.zones = table.size();
    fit_stats(y, p, res.r2, res.rmse);
    return res;
}

RasterGrid error_map(const RasterGrid& reference, const RasterGrid& prediction) {
    if (!reference.same_geometry(prediction)) throw DataError("error map: geometry mismatch");
    RasterGrid out = reference;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        const float rv = reference.values[i];
        const float pv = prediction.values[i];
        out.values[i] = (reference.is_nodata(rv) || prediction.is_nodata(pv))
                            ? out.nodata
                            : pv - rv;
    }
    return out;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DataError("pearson: length mismatch");
    const std::size_t n = x.size();
    if (n < 2) throw DataError("pearson: fewer than 2 samples");
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / static_cast<double>(n);
    const double my = sy / static_cast<double>(n);
    double cxx = 0.0, cyy = 0.0, cxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    if (cxx == 0.0 || cyy == 0.0) throw DataError("pearson: constant input");
    return cxy / std::sqrt(cxx * cyy);
}

std::string zonal_table_csv(const ZonalTable& table) {
    std::ostringstream out;
    out << "zone_id,pixel_count,sum_reference,sum_prediction\n";
    for (const ZonalRow& row : table)
        out << row.zone_id << "," << row.pixel_count << "," << fmt_double(row.sum_reference) << ","
            << fmt_double(row.sum_prediction) << "\n";
    return out.str();
}

ZonalTable parse_zonal_table_csv(const std::string& text) {
    const std::vector<std::string> lines = read_lines(text);
    if (lines.empty() || lines[0] != "zone_id,pixel_count,sum_reference,sum_prediction")
        throw DataError("zonal csv: unexpected header");
    ZonalTable table;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split_csv_line(lines[i]);
        if (cells.size() != 4) throw DataError("zonal csv: malformed row: " + lines[i]);
        ZonalRow row;
        try {
            row.zone_id = std::stoll(cells[0]);
            row.pixel_count = static_cast<std::size_t>(std::stoull(cells[1]));
            row.sum_reference = std::stod(cells[2]);
            row.sum_prediction = std::stod(cells[3]);
        } catch (const std::exception&) {
            throw DataError("zonal csv: malformed row: " + lines[i]);
        }
        table.push_back(row);
    }
    return table;
}

std::vector<IndicatorRow> parse_indicator_csv(const std::string& text) {
    const std::vector<std::string> lines = read_lines(text);
    if (lines.empty() || lines[0] != "indicator,region,year,value")
        throw DataError("indicator csv: expected header indicator,region,year,value");
    std::vector<IndicatorRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split_csv_line(lines[i]);
        if (cells.size() != 4) throw DataError("indicator csv: malformed row: " + lines[i]);
        IndicatorRow row;
        try {
            row.indicator = cells[0];
            row.region = std::stoll(cells[1]);
            row.year = std::stoi(cells[2]);
            row.value = std::stod(cells[3]);
        } catch (const std::exception&) {
            throw DataError("indicator csv: malformed row: " + lines[i]);
        }
        rows.push_back(row);
    }
    return rows;
}

std::vector<CorrelationRow> correlation_report(const std::map<int, ZonalTable>& totals_by_year,
                                               const std::vector<IndicatorRow>& indicators,
                                               bool use_prediction_column) {
    std::map<std::pair<int, long long>, double> totals;
    for (const auto& [year, table] : totals_by_year)
        for (const ZonalRow& row : table)
            totals[{year, row.zone_id}] =
                use_prediction_column ? row.sum_prediction : row.sum_reference;

    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> joined;
    std::vector<std::string> order;
    for (const IndicatorRow& row : indicators) {
        if (!joined.count(row.indicator)) order.push_back(row.indicator);
        auto& slot = joined[row.indicator];
        const auto it = totals.find({row.year, row.region});
        if (it == totals.end()) continue;
        slot.first.push_back(it->second);
        slot.second.push_back(row.value);
    }
    std::size_t total_pairs = 0;
    for (const auto& [name, vecs] : joined) total_pairs += vecs.first.size();
    if (total_pairs == 0) throw DataError("correlate: empty join");

    std::vector<CorrelationRow> report;
    double coeff_sum = 0.0;
    for (const std::string& name : order) {
        const auto& [ntl, ind] = joined[name];
        if (ntl.size() < 2)
            throw DataError("correlate: indicator " + name + " joins fewer than 2 pairs");
        CorrelationRow row;
        row.indicator = name;
        row.n_pairs = ntl.size();
        row.pearson = pearson(ntl, ind);
        coeff_sum += row.pearson;
        report.push_back(row);
    }
    CorrelationRow avg;
    avg.indicator = "average";
    avg.n_pairs = total_pairs;
    avg.pearson = coeff_sum / static_cast<double>(order.size());
    report.push_back(avg);
    return report;
}

std::string correlation_csv(const std::vector<CorrelationRow>& rows) {
    std::ostringstream out;
    out << "indicator,n_pairs,pearson\n";
    for (const CorrelationRow& row : rows)
        out << row.indicator << "," << row.n_pairs << "," << fmt_double(row.pearson) << "\n";
    return out.str();
}

}  // namespace evalnet
