#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "urbanet/error.hpp"
#include "urbanet/synth.hpp"

using namespace urbanet;

namespace {

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

long manhattan(std::size_t r0, std::size_t c0, long r1, long c1) {
    return std::labs(static_cast<long>(r0) - r1) + std::labs(static_cast<long>(c0) - c1);
}

// All-pairs scan: nearest source by 4-connected hop count (= Manhattan distance
// on a fully traversable grid).
std::vector<double> brute_hops(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& src) {
    std::vector<double> out(h * w);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            long best = 1L << 30;
            for (std::size_t i = 0; i < h * w; ++i) {
                if (src[i]) best = std::min(best, manhattan(r, c, static_cast<long>(i / w), static_cast<long>(i % w)));
            }
            out[r * w + c] = static_cast<double>(best);
        }
    }
    return out;
}

// Nearest water cell, where the ring just outside the grid counts as water, minus one.
std::vector<double> brute_water(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& mask) {
    std::vector<double> out(h * w, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!mask[r * w + c]) continue;
            long best = std::min({static_cast<long>(r) + 1, static_cast<long>(c) + 1, static_cast<long>(h - r),
                                  static_cast<long>(w - c)});
            for (std::size_t i = 0; i < h * w; ++i) {
                if (!mask[i]) best = std::min(best, manhattan(r, c, static_cast<long>(i / w), static_cast<long>(i % w)));
            }
            out[r * w + c] = static_cast<double>(best - 1);
        }
    }
    return out;
}

// Independent evaluation of the documented target formulas.
void formula_targets(const WorldGrid& g, std::vector<double>& du, std::vector<double>& dp) {
    const auto& u = g.channel("urban_2000").plane;
    const auto& pop = g.channel("pop_2000").plane;
    const auto& dc = g.channel("dist_city").plane;
    du.assign(g.size(), 0.0);
    dp.assign(g.size(), 0.0);
    const long h = static_cast<long>(g.height), w = static_cast<long>(g.width);
    for (long r = 0; r < h; ++r) {
        for (long c = 0; c < w; ++c) {
            const auto i = static_cast<std::size_t>(r * w + c);
            if (!g.mask[i]) continue;
            double sum = 0.0, n = 0.0;
            for (long dr = -2; dr <= 2; ++dr) {
                for (long dcol = -2; dcol <= 2; ++dcol) {
                    const long rr = r + dr, cc = c + dcol;
                    if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
                    const auto j = static_cast<std::size_t>(rr * w + cc);
                    if (!g.mask[j]) continue;
                    sum += u[j];
                    n += 1.0;
                }
            }
            const double n5 = sum / n;
            const double reach = std::max(0.0, 1.0 - dc[i] / 12.0);
            du[i] = 1.5 * n5 * (1.0 - u[i]) + 0.4 * pop[i] * reach;
            dp[i] = 0.5 * n5 + 0.3 * pop[i] * (1.0 - u[i]) + 0.05 * reach;
        }
    }
}

SynthConfig small(std::uint64_t seed, double noise = 0.01) {
    SynthConfig c;
    c.seed = seed;
    c.height = 30;
    c.width = 28;
    c.noise_std = noise;
    c.pop_noise_std = 3.0 * noise;
    return c;
}

}  // namespace

TEST_CASE("generated worlds carry the expected channels and regions") {
    const auto g = gen_world({});
    CHECK_NOTHROW(g.validate());
    CHECK(g.height == 96);
    CHECK(g.width == 96);
    for (auto name : synth::kInputChannels) CHECK(g.find_channel(name).has_value());
    CHECK(g.find_channel("d_urban").has_value());
    CHECK(g.find_channel("d_pop").has_value());
    CHECK(g.find_channel("urban_2010").has_value());
    CHECK(g.region_table.size() == 16);
    for (const char* iso : {"USA", "CHN", "GBR", "MWI"}) CHECK(g.region_code(iso).has_value());
    const double land = static_cast<double>(g.land_count()) / static_cast<double>(g.size());
    CHECK(land == doctest::Approx(0.6).epsilon(0.05));
    const auto split = assign_split(g, {"USA", "CHN", "GBR", "MWI"});
    CHECK(split.test_count > 0);
    CHECK(split.train_count > 3 * split.test_count);
}

TEST_CASE("generation is deterministic") {
    testing::TempDir dir("synth");
    save_grid(gen_world(small(5)), dir / "a.wgrd");
    save_grid(gen_world(small(5)), dir / "b.wgrd");
    save_grid(gen_world(small(6)), dir / "c.wgrd");
    CHECK(file_bytes(dir / "a.wgrd") == file_bytes(dir / "b.wgrd"));
    CHECK(file_bytes(dir / "a.wgrd") != file_bytes(dir / "c.wgrd"));
}

TEST_CASE("noise-free targets equal the documented formulas") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto g = gen_world(small(seed, 0.0));
        std::vector<double> du, dp;
        formula_targets(g, du, dp);
        const auto& got_u = g.channel("d_urban").plane;
        const auto& got_p = g.channel("d_pop").plane;
        const auto& u = g.channel("urban_2000").plane;
        const auto& u10 = g.channel("urban_2010").plane;
        for (std::size_t i = 0; i < g.size(); ++i) {
            CHECK(got_u[i] == doctest::Approx(du[i]).epsilon(1e-12));
            CHECK(got_p[i] == doctest::Approx(dp[i]).epsilon(1e-12));
            CHECK(u10[i] == doctest::Approx(std::max(0.0, u[i] + got_u[i])).epsilon(1e-12));
        }
    }
}

TEST_CASE("noise moves targets only on land") {
    const auto clean = gen_world(small(4, 0.0));
    const auto noisy = gen_world(small(4, 0.05));
    const auto& a = clean.channel("d_urban").plane;
    const auto& b = noisy.channel("d_urban").plane;
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!clean.mask[i]) CHECK(b[i] == 0.0);
        sq += (a[i] - b[i]) * (a[i] - b[i]);
    }
    const double rms = std::sqrt(sq / static_cast<double>(clean.land_count()));
    CHECK(rms == doctest::Approx(0.05).epsilon(0.15));

    const auto& p = clean.channel("d_pop").plane;
    const auto& q = noisy.channel("d_pop").plane;
    sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!clean.mask[i]) CHECK(q[i] == 0.0);
        sq += (p[i] - q[i]) * (p[i] - q[i]);
    }
    CHECK(std::sqrt(sq / static_cast<double>(clean.land_count())) == doctest::Approx(0.15).epsilon(0.15));
}

TEST_CASE("population noise leaves the built-up target untouched") {
    auto a = small(8);
    auto b = small(8);
    b.pop_noise_std = 0.2;
    const auto ga = gen_world(a);
    const auto gb = gen_world(b);
    CHECK(ga.channel("d_urban").plane == gb.channel("d_urban").plane);
    CHECK(ga.channel("d_pop").plane != gb.channel("d_pop").plane);
}

TEST_CASE("distance channels match an all-pairs scan") {
    for (std::uint64_t seed : {1u, 7u}) {
        const auto g = gen_world(small(seed));
        const auto& dc = g.channel("dist_city").plane;
        const auto& dw = g.channel("dist_water").plane;
        std::vector<std::uint8_t> cities(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) cities[i] = g.mask[i] && dc[i] == 0.0;
        REQUIRE(std::count(cities.begin(), cities.end(), 1) >= 1);
        const auto hops = brute_hops(g.height, g.width, cities);
        const auto water = brute_water(g.height, g.width, g.mask);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!g.mask[i]) continue;
            CHECK(dc[i] == hops[i]);
            CHECK(dw[i] == water[i]);
        }
    }
}

TEST_CASE("distance transforms on random masks") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t h = 1 + rng() % 30, w = 1 + rng() % 30;
        auto mask = testing::random_mask(h * w, 0.7, rng());
        auto src = testing::random_mask(h * w, 0.05, rng());
        src[rng() % (h * w)] = 1;
        CHECK(synth::hop_distance(h, w, src) == brute_hops(h, w, src));
        CHECK(synth::water_distance(h, w, mask) == brute_water(h, w, mask));
    }
    // Land touching water is at distance 0.
    const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1};
    const auto d = synth::water_distance(5, 5, mask);
    CHECK(d[13] == 0.0);
    CHECK(d[17] == 0.0);
    CHECK(d[12] == 1.0);
    CHECK(d[0] == 0.0);
}

TEST_CASE("oracle predictors") {
    const auto clean = gen_world(small(2, 0.0));
    std::vector<std::uint8_t> land(clean.mask.begin(), clean.mask.end());
    const auto truth = oracle_metrics(clean, OraclePredictor::TrueFunction, "d_urban", land);
    CHECK(*truth.r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*oracle_metrics(clean, OraclePredictor::TrueFunction, "d_pop", land).r2 == doctest::Approx(1.0).epsilon(1e-12));

    const auto zero = oracle_metrics(clean, OraclePredictor::Zero, "d_urban", land);
    const auto persist = oracle_metrics(clean, OraclePredictor::Persistence, "d_urban", land);
    CHECK(*zero.r2 <= 0.0);
    CHECK(zero.n_cells == persist.n_cells);
    CHECK(*zero.r2 == *persist.r2);
    CHECK(*zero.mean_abs == *persist.mean_abs);
    CHECK(*zero.max_abs == *persist.max_abs);
    CHECK(*zero.std_dev == *persist.std_dev);

    const auto noisy = gen_world(small(2, 0.01));
    const auto r = oracle_metrics(noisy, OraclePredictor::TrueFunction, "d_urban", land);
    CHECK(*r.r2 < 1.0);
    CHECK(*r.r2 > 0.98);
}

TEST_CASE("invalid configs are rejected") {
    SynthConfig c;
    c.land_fraction = 0.0;
    CHECK_THROWS_AS(gen_world(c), PreconditionError);
    c = {};
    c.height = c.width = 8;
    CHECK_THROWS_AS(gen_world(c), PreconditionError);
    c = {};
    c.n_regions = 10;
    CHECK_THROWS_AS(gen_world(c), PreconditionError);
    c = {};
    c.noise_std = -1.0;
    CHECK_THROWS_AS(gen_world(c), PreconditionError);
    c = {};
    c.pop_noise_std = -0.5;
    CHECK_THROWS_AS(gen_world(c), PreconditionError);
}

TEST_CASE("region names") {
    const auto four = synth::region_names(4);
    REQUIRE(four.size() == 4);
    const auto many = synth::region_names(49);
    CHECK(many.size() == 49);
    CHECK(std::set<std::string>(many.begin(), many.end()).size() == 49);
}
