#include "evalnet/patches.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "evalnet/io_util.hpp"
#include "evalnet/rng.hpp"

namespace evalnet {

namespace {

std::string fmt_float(float v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

std::string resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_absolute()) return path.string();
    return (base / path).string();
}

}  // namespace

nlohmann::json NormStats::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const Band& b : bands)
        arr.push_back({{"min", static_cast<double>(b.min)}, {"max", static_cast<double>(b.max)}});
    return nlohmann::json{{"bands", arr}};
}

NormStats NormStats::from_json(const nlohmann::json& j) {
    NormStats s;
    try {
        for (const auto& e : j.at("bands"))
            s.bands.push_back({e.at("min").get<float>(), e.at("max").get<float>()});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("norm stats: ") + e.what());
    }
    return s;
}

RasterStack load_raster_stack(const std::string& manifest_path) {
    nlohmann::json j;
    try {
        const auto bytes = read_binary_file(manifest_path);
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("raster manifest parse failure: " + std::string(e.what()));
    }
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    RasterStack s;
    try {
        s.dmsp = read_egrid(resolve(base, j.at("dmsp").get<std::string>()));
        for (const auto& p : j.at("landsat"))
            s.landsat.push_back(read_egrid(resolve(base, p.get<std::string>())));
        s.mask = read_egrid(resolve(base, j.at("mask").get<std::string>()));
        if (j.contains("target")) {
            s.target = read_egrid(resolve(base, j.at("target").get<std::string>()));
            s.has_target = true;
        }
        if (j.contains("strata")) {
            s.strata = read_egrid(resolve(base, j.at("strata").get<std::string>()));
            s.has_strata = true;
        }
        if (j.contains("norm")) s.norm_path = resolve(base, j.at("norm").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("raster manifest: " + std::string(e.what()));
    }
    for (const RasterGrid& g : s.landsat)
        if (!g.same_geometry(s.dmsp)) throw DataError("raster manifest: landsat geometry mismatch");
    if (s.has_target && !s.target.same_geometry(s.dmsp))
        throw DataError("raster manifest: target geometry mismatch");
    if (s.has_strata && !s.strata.same_geometry(s.dmsp))
        throw DataError("raster manifest: strata geometry mismatch");
    if (s.mask.rows % s.dmsp.rows != 0 || s.mask.cols % s.dmsp.cols != 0 ||
        s.mask.rows / s.dmsp.rows != s.mask.cols / s.dmsp.cols)
        throw DataError("raster manifest: mask resolution is not an integer multiple");
    s.scale = s.mask.rows / s.dmsp.rows;
    return s;
}

PatchSet extract_patches(const RasterStack& stack, int patch, int count, double lit_min,
                         std::uint64_t seed, ExtractReport* report) {
    if (patch < 32 || patch % 32 != 0)
        throw DataError("sample: patch extent must be a positive multiple of 32");
    if (count < 1) throw DataError("sample: count must be >= 1");
    if (!stack.has_target) throw DataError("sample: manifest must include a target raster");
    if (stack.dmsp.rows < patch || stack.dmsp.cols < patch)
        throw DataError("sample: patch extent exceeds the raster");

    const int s = stack.scale;
    const int hp = patch * s;
    PatchSet set;
    set.patch = patch;
    set.bands = stack.bands();
    set.scale = s;

    Rng rng(seed);
    const std::size_t budget = static_cast<std::size_t>(count) * 100;
    std::size_t attempts = 0;
    const int row_span = stack.dmsp.rows - patch + 1;
    const int col_span = stack.dmsp.cols - patch + 1;

    std::vector<const RasterGrid*> low_bands{&stack.dmsp};
    for (const RasterGrid& g : stack.landsat) low_bands.push_back(&g);

    while (set.records.size() < static_cast<std::size_t>(count) && attempts < budget) {
        ++attempts;
        const int r0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(row_span)));
        const int c0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(col_span)));

        bool ok = true;
        int lit = 0;
        for (int r = r0; r < r0 + patch && ok; ++r)
            for (int c = c0; c < c0 + patch; ++c) {
                const float v = stack.dmsp.at(r, c);
                if (stack.dmsp.is_nodata(v)) {
                    ok = false;
                    break;
                }
                if (v > 0.0f) ++lit;
            }
        if (!ok) continue;
        const float lit_fraction =
            static_cast<float>(static_cast<double>(lit) / (static_cast<double>(patch) * patch));
        if (lit_fraction < lit_min) continue;

        for (std::size_t b = 1; b < low_bands.size() && ok; ++b)
            for (int r = r0; r < r0 + patch && ok; ++r)
                for (int c = c0; c < c0 + patch; ++c)
                    if (!low_bands[b]->valid_at(r, c)) {
                        ok = false;
                        break;
                    }
        for (int r = r0; r < r0 + patch && ok; ++r)
            for (int c = c0; c < c0 + patch; ++c)
                if (!stack.target.valid_at(r, c)) {
                    ok = false;
                    break;
                }
        for (int r = r0 * s; r < (r0 + patch) * s && ok; ++r)
            for (int c = c0 * s; c < (c0 + patch) * s; ++c)
                if (!stack.mask.valid_at(r, c)) {
                    ok = false;
                    break;
                }
        std::string stratum = "all";
        if (ok && stack.has_strata) {
            const float z = stack.strata.at(r0 + patch / 2, c0 + patch / 2);
            if (stack.strata.is_nodata(z))
                ok = false;
            else
                stratum = "z" + std::to_string(std::llround(static_cast<double>(z)));
        }
        if (!ok) continue;

        PatchRecord rec;
        rec.patch_id = static_cast<int>(set.records.size());
        rec.row0 = r0;
        rec.col0 = c0;
        rec.stratum = std::move(stratum);
        rec.lit_fraction = lit_fraction;
        rec.input.reserve(static_cast<std::size_t>(set.bands) * patch * patch);
        for (const RasterGrid* g : low_bands)
            for (int r = r0; r < r0 + patch; ++r)
                for (int c = c0; c < c0 + patch; ++c) rec.input.push_back(g->at(r, c));
        rec.target.reserve(static_cast<std::size_t>(patch) * patch);
        for (int r = r0; r < r0 + patch; ++r)
            for (int c = c0; c < c0 + patch; ++c) {
                const float v = stack.target.at(r, c);
                if (v < 0.0f) throw DataError("sample: negative target radiance");
                rec.target.push_back(static_cast<float>(std::log1p(static_cast<double>(v))));
            }
        rec.mask.reserve(static_cast<std::size_t>(hp) * hp);
        for (int r = r0 * s; r < r0 * s + hp; ++r)
            for (int c = c0 * s; c < c0 * s + hp; ++c) rec.mask.push_back(stack.mask.at(r, c));
        set.records.push_back(std::move(rec));
    }
    if (report) {
        report->attempts = attempts;
        report->budget_exhausted = set.records.size() < static_cast<std::size_t>(count);
    }
    return set;
}

void stratified_split(PatchSet& set, double train_ratio, double val_ratio, double test_ratio,
                      std::uint64_t seed) {
    if (train_ratio < 0 || val_ratio < 0 || test_ratio < 0 ||
        std::fabs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
        throw DataError("split: ratios must be non-negative and sum to 1");
    std::map<std::string, std::vector<std::size_t>> by_stratum;
    for (std::size_t i = 0; i < set.records.size(); ++i)
        by_stratum[set.records[i].stratum].push_back(i);
    Rng rng(seed);
    for (auto& [stratum, idx] : by_stratum) {
        rng.shuffle(idx);
        const std::size_t n = idx.size();
        const auto n_train = static_cast<std::size_t>(std::floor(n * train_ratio));
        const auto n_val = static_cast<std::size_t>(std::floor(n * val_ratio));
        const auto n_test = static_cast<std::size_t>(std::floor(n * test_ratio));
        for (std::size_t k = 0; k < n; ++k) {
            const char* split = "train";
            if (k >= n_train && k < n_train + n_val)
                split = "val";
            else if (k >= n_train + n_val && k < n_train + n_val + n_test)
                split = "test";
            set.records[idx[k]].split = split;
        }
    }
}

NormStats minmax_fit(const PatchSet& set) {
    bool any = false;
    NormStats stats;
    stats.bands.assign(static_cast<std::size_t>(set.bands), {0.0f, 0.0f});
    const std::size_t plane = static_cast<std::size_t>(set.patch) * set.patch;
    for (const PatchRecord& rec : set.records) {
        if (rec.split != "train") continue;
        for (int b = 0; b < set.bands; ++b) {
            const float* p = rec.input.data() + static_cast<std::size_t>(b) * plane;
            float lo = p[0], hi = p[0];
            for (std::size_t i = 1; i < plane; ++i) {
                lo = std::min(lo, p[i]);
                hi = std::max(hi, p[i]);
            }
            if (!any) {
                stats.bands[b] = {lo, hi};
            } else {
                stats.bands[b].min = std::min(stats.bands[b].min, lo);
                stats.bands[b].max = std::max(stats.bands[b].max, hi);
            }
        }
        any = true;
    }
    if (!any) throw DataError("normalization: empty training split");
    return stats;
}

void minmax_apply(std::vector<float>& stack, int bands, const NormStats& stats) {
    if (static_cast<int>(stats.bands.size()) != bands)
        throw DataError("normalization: band count mismatch");
    const std::size_t plane = stack.size() / static_cast<std::size_t>(bands);
    for (int b = 0; b < bands; ++b) {
        const float lo = stats.bands[b].min;
        // The span stays in double so the band extremes land on exactly 0
        // and 1; a float span can round and pull the maximum just below 1.
        const double span = static_cast<double>(stats.bands[b].max) - static_cast<double>(lo);
        float* p = stack.data() + static_cast<std::size_t>(b) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            if (span <= 0.0) {
                p[i] = 0.0f;
            } else {
                const double y = (static_cast<double>(p[i]) - lo) / span;
                p[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
            }
        }
    }
}

void minmax_apply(PatchSet& set, const NormStats& stats) {
    for (PatchRecord& rec : set.records) minmax_apply(rec.input, set.bands, stats);
}

namespace {

constexpr char kPackMagic[8] = {'E', 'V', 'P', 'K', '0', '0', '0', '1'};
constexpr const char* kIndexHeader = "patch_id,row0,col0,stratum,lit_fraction,split";

}  // namespace

void save_patch_set(const PatchSet& set, const NormStats& stats, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);

    const nlohmann::json header{{"format_version", 1},
                                {"patch", set.patch},
                                {"bands", set.bands},
                                {"scale", set.scale},
                                {"count", set.records.size()}};
    const std::string htext = header.dump();
    const std::string pack_path = (base / "patches.pack").string();
    {
        const std::string tmp = pack_path + ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open file for write: " + tmp);
        out.write(kPackMagic, sizeof(kPackMagic));
        const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
        out.write(reinterpret_cast<const char*>(&hlen), 4);
        out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
        for (const PatchRecord& rec : set.records) {
            out.write(reinterpret_cast<const char*>(rec.input.data()),
                      static_cast<std::streamsize>(rec.input.size() * 4));
            out.write(reinterpret_cast<const char*>(rec.mask.data()),
                      static_cast<std::streamsize>(rec.mask.size() * 4));
            out.write(reinterpret_cast<const char*>(rec.target.data()),
                      static_cast<std::streamsize>(rec.target.size() * 4));
        }
        out.flush();
        if (!out) throw DataError("short write: " + tmp);
        out.close();
        std::error_code ec;
        std::filesystem::rename(tmp, pack_path, ec);
        if (ec) throw DataError("cannot rename " + tmp + ": " + ec.message());
    }

    std::ostringstream csv;
    csv << kIndexHeader << "\n";
    for (const PatchRecord& rec : set.records)
        csv << rec.patch_id << "," << rec.row0 << "," << rec.col0 << "," << rec.stratum << ","
            << fmt_float(rec.lit_fraction) << "," << rec.split << "\n";
    write_text_file_atomic((base / "index.csv").string(), csv.str());
    write_text_file_atomic((base / "norm.json").string(), stats.to_json().dump(2) + "\n");
}

PatchSet load_patch_set(const std::string& dir, NormStats* stats) {
    const std::filesystem::path base(dir);
    const std::vector<std::uint8_t> buf = read_binary_file((base / "patches.pack").string());
    if (buf.size() < sizeof(kPackMagic) + 4 ||
        std::memcmp(buf.data(), kPackMagic, sizeof(kPackMagic)) != 0)
        throw DataError("patch pack: bad magic");
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, buf.data() + sizeof(kPackMagic), 4);
    const std::size_t blob_start = sizeof(kPackMagic) + 4 + hlen;
    if (buf.size() < blob_start) throw DataError("patch pack: truncated header");
    PatchSet set;
    std::size_t count = 0;
    try {
        const nlohmann::json header = nlohmann::json::parse(
            buf.begin() + sizeof(kPackMagic) + 4, buf.begin() + static_cast<std::ptrdiff_t>(blob_start));
        if (header.at("format_version").get<int>() != 1)
            throw DataError("patch pack: unsupported format_version");
        set.patch = header.at("patch").get<int>();
        set.bands = header.at("bands").get<int>();
        set.scale = header.at("scale").get<int>();
        count = header.at("count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("patch pack: bad header: ") + e.what());
    }
    const std::size_t plane = static_cast<std::size_t>(set.patch) * set.patch;
    const std::size_t in_n = static_cast<std::size_t>(set.bands) * plane;
    const std::size_t mask_n = plane * set.scale * set.scale;
    const std::size_t rec_bytes = (in_n + mask_n + plane) * 4;
    if (buf.size() != blob_start + count * rec_bytes)
        throw DataError("patch pack: truncated records");

    std::ifstream csv((base / "index.csv").string());
    if (!csv) throw DataError("cannot open file: " + (base / "index.csv").string());
    std::string line;
    if (!std::getline(csv, line)) throw DataError("patch index: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kIndexHeader) throw DataError("patch index: unexpected header: " + line);

    const std::uint8_t* p = buf.data() + blob_start;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(csv, line)) throw DataError("patch index: fewer rows than records");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            const std::size_t comma = line.find(',', pos);
            cells.push_back(line.substr(pos, comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (cells.size() != 6) throw DataError("patch index: malformed row: " + line);
        PatchRecord rec;
        try {
            rec.patch_id = std::stoi(cells[0]);
            rec.row0 = std::stoi(cells[1]);
            rec.col0 = std::stoi(cells[2]);
            rec.stratum = cells[3];
            rec.lit_fraction = std::strtof(cells[4].c_str(), nullptr);
            rec.split = cells[5];
        } catch (const std::exception&) {
            throw DataError("patch index: malformed row: " + line);
        }
        rec.input.resize(in_n);
        std::memcpy(rec.input.data(), p, in_n * 4);
        p += in_n * 4;
        rec.mask.resize(mask_n);
        std::memcpy(rec.mask.data(), p, mask_n * 4);
        p += mask_n * 4;
        rec.target.resize(plane);
        std::memcpy(rec.target.data(), p, plane * 4);
        p += plane * 4;
        set.records.push_back(std::move(rec));
    }
    if (stats) {
        const auto bytes = read_binary_file((base / "norm.json").string());
        try {
            *stats = NormStats::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("norm stats parse failure: ") + e.what());
        }
    }
    return set;
}

}  // namespace evalnet
