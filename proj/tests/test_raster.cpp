#include <doctest.h>

#include <cmath>

#include "evalnet/io_util.hpp"
#include "evalnet/raster.hpp"
#include "evalnet/rng.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace evalnet;
using evalnet::testsupport::fresh_dir;

namespace {

RasterGrid random_grid(int rows, int cols, Rng& rng, double nodata_frac = 0.0) {
    RasterGrid g = RasterGrid::make(rows, cols);
    for (float& v : g.values)
        v = rng.uniform() < nodata_frac ? g.nodata : static_cast<float>(rng.uniform() * 50.0);
    return g;
}

}  // namespace

TEST_SUITE_BEGIN("raster");

TEST_CASE("egrid round trip preserves values, nodata and geometry") {
    const std::string dir = fresh_dir("raster_roundtrip");
    RasterGrid g = RasterGrid::make(3, 2, 0.0f);
    g.x_origin = 100.5;
    g.y_origin = -20.25;
    g.pixel_size = 0.5;
    g.at(0, 0) = 1.5f;
    g.at(1, 1) = -3.25f;
    g.at(2, 0) = g.nodata;

    const std::string path = dir + "/g.egrid";
    write_egrid(g, path);
    const RasterGrid back = read_egrid(path);
    CHECK(back.rows == 3);
    CHECK(back.cols == 2);
    CHECK(back.x_origin == 100.5);
    CHECK(back.y_origin == -20.25);
    CHECK(back.pixel_size == 0.5);
    CHECK(back.nodata == g.nodata);
    CHECK(back.values == g.values);
    CHECK_FALSE(back.valid_at(2, 0));

    // A second write is byte-identical.
    const std::string path2 = dir + "/g2.egrid";
    write_egrid(back, path2);
    CHECK(read_binary_file(path) == read_binary_file(path2));
}

TEST_CASE("egrid structural errors") {
    const std::string dir = fresh_dir("raster_bad");
    RasterGrid g = RasterGrid::make(2, 2, 1.0f);
    const std::string path = dir + "/g.egrid";
    write_egrid(g, path);

    auto bytes = read_binary_file(path);
    auto write_back = [&](const std::vector<std::uint8_t>& b, const std::string& p) {
        write_binary_file_atomic(p, b.data(), b.size());
    };

    auto bad = bytes;
    bad[0] = 'X';
    write_back(bad, dir + "/magic.egrid");
    CHECK_THROWS_WITH_AS(read_egrid(dir + "/magic.egrid"), doctest::Contains("bad magic"),
                         DataError);

    bad = bytes;
    bad[4] = 9;  // version field
    write_back(bad, dir + "/version.egrid");
    CHECK_THROWS_WITH_AS(read_egrid(dir + "/version.egrid"),
                         doctest::Contains("unsupported version"), DataError);

    bad = bytes;
    bad.resize(bad.size() - 4);
    write_back(bad, dir + "/short.egrid");
    CHECK_THROWS_AS(read_egrid(dir + "/short.egrid"), DataError);

    CHECK_THROWS_AS(read_egrid(dir + "/missing.egrid"), DataError);
}

TEST_CASE("percentile composite single grid and spec values") {
    RasterGrid g = RasterGrid::make(2, 2);
    g.at(0, 0) = 4.0f;
    g.at(1, 1) = 7.0f;
    const RasterGrid same = percentile_composite({g}, 10.0);
    CHECK(same.values == g.values);

    // 20 observations 1..20 at one pixel: p=10 selects rank ceil(2)=2.
    std::vector<RasterGrid> stack;
    for (int i = 1; i <= 20; ++i) stack.push_back(RasterGrid::make(1, 1, static_cast<float>(i)));
    CHECK(percentile_composite(stack, 10.0).at(0, 0) == 2.0f);
    CHECK(percentile_composite(stack, 100.0).at(0, 0) == 20.0f);

    // Nodata observations are skipped: {5, nodata, 3} at p=10 gives 3.
    std::vector<RasterGrid> trio{RasterGrid::make(1, 1, 5.0f), RasterGrid::make(1, 1),
                                 RasterGrid::make(1, 1, 3.0f)};
    trio[1].at(0, 0) = trio[1].nodata;
    CHECK(percentile_composite(trio, 10.0).at(0, 0) == 3.0f);

    // A pixel with no valid observation becomes nodata.
    for (auto& gr : trio) gr.at(0, 0) = gr.nodata;
    const RasterGrid all_bad = percentile_composite(trio, 10.0);
    CHECK_FALSE(all_bad.valid_at(0, 0));
}

TEST_CASE("percentile composite matches the sort oracle under random nodata") {
    Rng rng(55);
    for (const double p : {1.0, 10.0, 50.0, 100.0}) {
        std::vector<RasterGrid> stack;
        for (int i = 0; i < 7; ++i) stack.push_back(random_grid(6, 5, rng, 0.2));
        const RasterGrid out = percentile_composite(stack, p);
        for (int r = 0; r < 6; ++r)
            for (int c = 0; c < 5; ++c) {
                std::vector<float> vals;
                for (const auto& g : stack)
                    if (g.valid_at(r, c)) vals.push_back(g.at(r, c));
                if (vals.empty())
                    CHECK_FALSE(out.valid_at(r, c));
                else
                    CHECK(out.at(r, c) == oracle::percentile(vals, p));
            }
    }
}

TEST_CASE("percentile composite contract violations") {
    CHECK_THROWS_AS(percentile_composite({}, 10.0), DataError);
    RasterGrid a = RasterGrid::make(2, 2);
    RasterGrid b = RasterGrid::make(3, 2);
    CHECK_THROWS_AS(percentile_composite({a, b}, 10.0), DataError);
    CHECK_THROWS_AS(percentile_composite({a}, 0.0), DataError);
    CHECK_THROWS_AS(percentile_composite({a}, 101.0), DataError);
}

TEST_CASE("cap threshold is the mean of per-grid maxima") {
    std::vector<RasterGrid> grids;
    for (const float m : {10.0f, 20.0f, 30.0f, 40.0f}) {
        RasterGrid g = RasterGrid::make(2, 2, 1.0f);
        g.at(1, 1) = m;
        grids.push_back(g);
    }
    CHECK(compute_cap_threshold(grids) == 25.0);
    CHECK(compute_cap_threshold({grids[2]}) == 30.0);
    CHECK(compute_cap_threshold({RasterGrid::make(3, 3, 7.0f)}) == 7.0);

    RasterGrid dead = RasterGrid::make(2, 2);
    for (float& v : dead.values) v = dead.nodata;
    CHECK_THROWS_AS(compute_cap_threshold({dead}), DataError);
}

TEST_CASE("cap_outliers spec cases") {
    RasterGrid below = RasterGrid::make(4, 4, 3.0f);
    CHECK(cap_outliers(below, 10.0).values == below.values);

    RasterGrid spike = RasterGrid::make(5, 5, 1.0f);
    spike.at(2, 2) = 100.0f;
    const RasterGrid capped = cap_outliers(spike, 10.0);
    CHECK(capped.at(2, 2) == 1.0f);  // mean of the 24 surrounding 1s
    CHECK(capped.at(0, 0) == 1.0f);

    RasterGrid isolated = RasterGrid::make(5, 5);
    for (float& v : isolated.values) v = isolated.nodata;
    isolated.at(2, 2) = 100.0f;
    CHECK(cap_outliers(isolated, 10.0).at(2, 2) == 10.0f);  // clamp fallback

    CHECK_THROWS_AS(cap_outliers(below, 0.0), DataError);
}

TEST_CASE("cap_outliers post-conditions on random grids") {
    Rng rng(56);
    for (int trial = 0; trial < 20; ++trial) {
        const RasterGrid g = random_grid(8, 8, rng, 0.1);
        const double threshold = 25.0;
        const RasterGrid capped = cap_outliers(g, threshold);
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) {
                if (!g.valid_at(r, c)) {
                    CHECK_FALSE(capped.valid_at(r, c));
                    continue;
                }
                CHECK(capped.at(r, c) <= threshold);
                if (g.at(r, c) <= threshold) CHECK(capped.at(r, c) == g.at(r, c));
            }
        // Idempotence: a second pass changes nothing.
        CHECK(cap_outliers(capped, threshold).values == capped.values);
    }
}

TEST_CASE("log transform closed forms and round trip") {
    RasterGrid g = RasterGrid::make(1, 3);
    g.at(0, 0) = 0.0f;
    g.at(0, 1) = static_cast<float>(std::exp(1.0) - 1.0);
    g.at(0, 2) = g.nodata;
    const RasterGrid lg = log_transform(g);
    CHECK(lg.at(0, 0) == 0.0f);
    CHECK(lg.at(0, 1) == doctest::Approx(1.0f));
    CHECK_FALSE(lg.valid_at(0, 2));

    Rng rng(57);
    RasterGrid big = RasterGrid::make(4, 4);
    for (float& v : big.values) v = static_cast<float>(rng.uniform() * 1e4);
    const RasterGrid round = inverse_log(log_transform(big));
    for (std::size_t i = 0; i < big.values.size(); ++i)
        CHECK(round.values[i] == doctest::Approx(big.values[i]).epsilon(1e-6));

    RasterGrid neg = RasterGrid::make(1, 1, -0.5f);
    CHECK_THROWS_AS(log_transform(neg), DataError);
}

TEST_CASE("downsample_mean aggregates full blocks") {
    RasterGrid g = RasterGrid::make(2, 4);
    const float vals[] = {1, 2, 3, 4, 5, 6, 7, 8};
    std::copy(std::begin(vals), std::end(vals), g.values.begin());
    g.pixel_size = 0.25;
    const RasterGrid d = downsample_mean(g, 2);
    CHECK(d.rows == 1);
    CHECK(d.cols == 2);
    CHECK(d.at(0, 0) == 3.5f);  // mean of 1,2,5,6
    CHECK(d.at(0, 1) == 5.5f);
    CHECK(d.pixel_size == 0.5);

    g.at(0, 0) = g.nodata;
    const RasterGrid dn = downsample_mean(g, 2);
    CHECK_FALSE(dn.valid_at(0, 0));
    CHECK(dn.at(0, 1) == 5.5f);

    CHECK_THROWS_AS(downsample_mean(RasterGrid::make(3, 4), 2), DataError);
}

TEST_SUITE_END();
