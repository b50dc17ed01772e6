#include "evalnet/raster.hpp"

#include <algorithm>
#include <cstring>

#include "evalnet/io_util.hpp"

namespace evalnet {

namespace {

constexpr char kMagic[4] = {'E', 'G', 'R', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderSize = 64;
constexpr std::uint64_t kMaxCells = 1u << 30;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T get(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

}  // namespace

RasterGrid RasterGrid::make(int rows, int cols, float fill, float nodata) {
    RasterGrid g;
    g.rows = rows;
    g.cols = cols;
    g.nodata = nodata;
    g.values.assign(static_cast<std::size_t>(rows) * cols, fill);
    return g;
}

bool RasterGrid::same_geometry(const RasterGrid& o) const {
    return rows == o.rows && cols == o.cols && x_origin == o.x_origin && y_origin == o.y_origin &&
           pixel_size == o.pixel_size;
}

RasterGrid read_egrid(const std::string& path) {
    const std::vector<std::uint8_t> buf = read_binary_file(path);
    if (buf.size() < kHeaderSize || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw DataError("egrid: bad magic in " + path);
    if (get<std::uint32_t>(buf.data() + 4) != kVersion)
        throw DataError("egrid: unsupported version in " + path);
    const std::uint32_t rows = get<std::uint32_t>(buf.data() + 8);
    const std::uint32_t cols = get<std::uint32_t>(buf.data() + 12);
    const std::uint64_t cells = static_cast<std::uint64_t>(rows) * cols;
    if (rows == 0 || cols == 0 || cells > kMaxCells)
        throw DataError("egrid: dimension overflow in " + path);
    if (buf.size() != kHeaderSize + cells * 4)
        throw DataError("egrid: truncated payload in " + path);
    RasterGrid g;
    g.rows = static_cast<int>(rows);
    g.cols = static_cast<int>(cols);
    g.x_origin = get<double>(buf.data() + 16);
    g.y_origin = get<double>(buf.data() + 24);
    g.pixel_size = get<double>(buf.data() + 32);
    g.nodata = get<float>(buf.data() + 40);
    g.values.resize(cells);
    std::memcpy(g.values.data(), buf.data() + kHeaderSize, cells * 4);
    return g;
}

void write_egrid(const RasterGrid& grid, const std::string& path) {
    if (grid.rows <= 0 || grid.cols <= 0 ||
        grid.values.size() != static_cast<std::size_t>(grid.rows) * grid.cols)
        throw DataError("egrid: inconsistent grid dimensions");
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderSize + grid.values.size() * 4);
    out.insert(out.end(), kMagic, kMagic + 4);
    put(out, kVersion);
    put(out, static_cast<std::uint32_t>(grid.rows));
    put(out, static_cast<std::uint32_t>(grid.cols));
    put(out, grid.x_origin);
    put(out, grid.y_origin);
    put(out, grid.pixel_size);
    put(out, grid.nodata);
    out.resize(kHeaderSize, 0);
    const std::size_t data_off = out.size();
    out.resize(kHeaderSize + grid.values.size() * 4);
    std::memcpy(out.data() + data_off, grid.values.data(), grid.values.size() * 4);
    write_binary_file_atomic(path, out.data(), out.size());
}

RasterGrid percentile_composite(const std::vector<RasterGrid>& stack, double p) {
    if (stack.empty()) throw DataError("composite: empty stack");
    if (!(p > 0.0 && p <= 100.0)) throw DataError("composite: percentile must be in (0,100]");
    const RasterGrid& first = stack.front();
    for (const RasterGrid& g : stack)
        if (!g.same_geometry(first)) throw DataError("composite: geotransform mismatch");
    RasterGrid out = first;
    std::vector<float> obs;
    obs.reserve(stack.size());
    const std::size_t cells = first.values.size();
    for (std::size_t i = 0; i < cells; ++i) {
        obs.clear();
        for (const RasterGrid& g : stack) {
            const float v = g.values[i];
            if (!g.is_nodata(v)) obs.push_back(v);
        }
        if (obs.empty()) {
            out.values[i] = out.nodata;
            continue;
        }
        std::sort(obs.begin(), obs.end());
        const std::size_t n = obs.size();
        std::size_t idx = static_cast<std::size_t>(
            std::ceil(static_cast<double>(n) * p / 100.0));
        idx = std::clamp<std::size_t>(idx, 1, n);
        out.values[i] = obs[idx - 1];
    }
    return out;
}

double compute_cap_threshold(const std::vector<RasterGrid>& city_grids) {
    if (city_grids.empty()) throw DataError("cap threshold: no city grids");
    double sum = 0.0;
    for (const RasterGrid& g : city_grids) {
        bool any = false;
        float mx = 0.0f;
        for (const float v : g.values) {
            if (g.is_nodata(v)) continue;
            if (!any || v > mx) mx = v;
            any = true;
        }
        if (!any) throw DataError("cap threshold: all-nodata city grid");
        sum += mx;
    }
    return sum / static_cast<double>(city_grids.size());
}

RasterGrid cap_outliers(const RasterGrid& grid, double threshold) {
    if (!(threshold > 0.0)) throw DataError("cap: threshold must be positive");
    RasterGrid out = grid;
    for (int r = 0; r < grid.rows; ++r) {
        for (int c = 0; c < grid.cols; ++c) {
            const float v = grid.at(r, c);
            if (grid.is_nodata(v) || !(static_cast<double>(v) > threshold)) continue;
            double acc = 0.0;
            int n = 0;
            for (int dr = -2; dr <= 2; ++dr) {
                for (int dc = -2; dc <= 2; ++dc) {
                    if (dr == 0 && dc == 0) continue;
                    const int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= grid.rows || cc < 0 || cc >= grid.cols) continue;
                    const float nv = grid.at(rr, cc);
                    if (grid.is_nodata(nv) || static_cast<double>(nv) > threshold) continue;
                    acc += nv;
                    ++n;
                }
            }
            double repl = n > 0 ? acc / n : threshold;
            if (repl > threshold) repl = threshold;
            // The float cast rounds to nearest and can land just above the
            // threshold, which would invite a recap on the next pass.
            float stored = static_cast<float>(repl);
            if (static_cast<double>(stored) > threshold) stored = std::nextafterf(stored, 0.0f);
            out.at(r, c) = stored;
        }
    }
    return out;
}

RasterGrid log_transform(const RasterGrid& grid) {
    RasterGrid out = grid;
    for (float& v : out.values) {
        if (grid.is_nodata(v)) continue;
        if (v < 0.0f) throw DataError("log transform: negative input value");
        v = static_cast<float>(std::log1p(static_cast<double>(v)));
    }
    return out;
}

RasterGrid inverse_log(const RasterGrid& grid) {
    RasterGrid out = grid;
    for (float& v : out.values) {
        if (grid.is_nodata(v)) continue;
        v = static_cast<float>(std::expm1(static_cast<double>(v)));
    }
    return out;
}

RasterGrid downsample_mean(const RasterGrid& grid, int factor) {
    if (factor < 1) throw DataError("downsample: factor must be >= 1");
    if (grid.rows % factor != 0 || grid.cols % factor != 0)
        throw DataError("downsample: extent not divisible by factor");
    RasterGrid out;
    out.rows = grid.rows / factor;
    out.cols = grid.cols / factor;
    out.x_origin = grid.x_origin;
    out.y_origin = grid.y_origin;
    out.pixel_size = grid.pixel_size * factor;
    out.nodata = grid.nodata;
    out.values.resize(static_cast<std::size_t>(out.rows) * out.cols);
    for (int r = 0; r < out.rows; ++r) {
        for (int c = 0; c < out.cols; ++c) {
            double acc = 0.0;
            bool ok = true;
            for (int dr = 0; dr < factor && ok; ++dr)
                for (int dc = 0; dc < factor; ++dc) {
                    const float v = grid.at(r * factor + dr, c * factor + dc);
                    if (grid.is_nodata(v)) {
                        ok = false;
                        break;
                    }
                    acc += v;
                }
            out.at(r, c) = ok ? static_cast<float>(acc / (static_cast<double>(factor) * factor))
                              : out.nodata;
        }
    }
    return out;
}

}  // namespace evalnet
