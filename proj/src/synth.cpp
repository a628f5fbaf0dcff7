#include "urbanet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>

#include "urbanet/error.hpp"

namespace urbanet {

void SynthConfig::validate() const {
    if (height == 0 || width == 0) throw PreconditionError("synthetic world needs a positive size");
    if (!(land_fraction > 0.0 && land_fraction <= 1.0)) throw PreconditionError("land_fraction must lie in (0, 1]");
    if (!(noise_std >= 0.0)) throw PreconditionError("noise_std must be non-negative");
    if (!(pop_noise_std >= 0.0)) throw PreconditionError("pop_noise_std must be non-negative");
    if (static_cast<double>(height * width) * land_fraction < 100.0) {
        throw PreconditionError("synthetic world has fewer than 100 expected land pixels");
    }
    const auto k = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_regions))));
    if (n_regions == 0 || k * k != n_regions) throw PreconditionError("n_regions must be a perfect square");
    if (k > height || k > width) throw PreconditionError("more region blocks than pixels along an axis");
}

namespace synth {

std::vector<std::string> region_names(std::size_t n_regions) {
    static const std::vector<std::string> base = {
        "USA", "CAN", "MEX", "BRA", "ARG", "GBR", "FRA", "DEU", "NGA", "KEN", "CHN", "IND", "JPN", "AUS", "ZAF", "MWI",
        "PER", "CHL", "ESP", "ITA", "POL", "EGY", "ETH", "TZA", "IDN", "PHL", "VNM", "THA", "PAK", "IRN", "TUR", "SAU",
        "NZL", "NOR", "SWE", "FIN"};
    std::vector<std::string> names(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(std::min(n_regions, base.size())));
    for (std::size_t i = names.size(); i < n_regions; ++i) names.push_back("R" + std::to_string(i + 1));
    return names;
}

std::vector<double> hop_distance(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& sources) {
    constexpr double kUnreached = -1.0;
    std::vector<double> dist(h * w, kUnreached);
    std::deque<std::size_t> queue;
    for (std::size_t i = 0; i < h * w; ++i) {
        if (sources[i]) {
            dist[i] = 0.0;
            queue.push_back(i);
        }
    }
    if (queue.empty()) throw PreconditionError("hop_distance needs at least one source pixel");
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        const std::size_t r = i / w, c = i % w;
        auto visit = [&](std::size_t j) {
            if (dist[j] == kUnreached) {
                dist[j] = dist[i] + 1.0;
                queue.push_back(j);
            }
        };
        if (r > 0) visit(i - w);
        if (r + 1 < h) visit(i + w);
        if (c > 0) visit(i - 1);
        if (c + 1 < w) visit(i + 1);
    }
    return dist;
}

std::vector<double> water_distance(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& mask) {
    // BFS seeded with water at 0 and edge land at 1 (one hop from the outside).
    std::vector<double> dist(h * w, -1.0);
    std::deque<std::size_t> queue;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t i = r * w + c;
            if (!mask[i]) {
                dist[i] = 0.0;
                queue.push_back(i);
            }
        }
    }
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t i = r * w + c;
            if (mask[i] && (r == 0 || c == 0 || r + 1 == h || c + 1 == w)) {
                dist[i] = 1.0;
                queue.push_back(i);
            }
        }
    }
    // Water seeds come first in the queue, then edge cells at distance 1, so
    // the queue stays sorted by distance.
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        const std::size_t r = i / w, c = i % w;
        auto visit = [&](std::size_t j) {
            if (dist[j] < 0.0) {
                dist[j] = dist[i] + 1.0;
                queue.push_back(j);
            }
        };
        if (r > 0) visit(i - w);
        if (r + 1 < h) visit(i + w);
        if (c > 0) visit(i - 1);
        if (c + 1 < w) visit(i + 1);
    }
    for (std::size_t i = 0; i < h * w; ++i) dist[i] = mask[i] ? dist[i] - 1.0 : 0.0;
    return dist;
}

std::vector<double> land_mean5(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& mask,
                               const std::vector<double>& plane) {
    std::vector<double> out(h * w, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!mask[r * w + c]) continue;
            double sum = 0.0;
            double n = 0.0;
            for (std::size_t y = r > 2 ? r - 2 : 0; y <= std::min(h - 1, r + 2); ++y) {
                for (std::size_t x = c > 2 ? c - 2 : 0; x <= std::min(w - 1, c + 2); ++x) {
                    if (!mask[y * w + x]) continue;
                    sum += plane[y * w + x];
                    n += 1.0;
                }
            }
            out[r * w + c] = sum / n;
        }
    }
    return out;
}

Targets true_targets(const WorldGrid& world) {
    const std::size_t h = world.height, w = world.width;
    const auto& u = world.channel("urban_2000").plane;
    const auto& pop = world.channel("pop_2000").plane;
    const auto& dc = world.channel("dist_city").plane;
    const auto n5 = land_mean5(h, w, world.mask, u);
    Targets t{std::vector<double>(h * w, 0.0), std::vector<double>(h * w, 0.0)};
    for (std::size_t i = 0; i < h * w; ++i) {
        if (!world.mask[i]) continue;
        const double reach = std::max(0.0, 1.0 - dc[i] / 12.0);
        t.d_urban[i] = 1.5 * n5[i] * (1.0 - u[i]) + 0.4 * pop[i] * reach;
        t.d_pop[i] = 0.5 * n5[i] + 0.3 * pop[i] * (1.0 - u[i]) + 0.05 * reach;
    }
    return t;
}

}  // namespace synth

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

// White noise box-blurred three times (radius r, edge-normalised), rescaled to [0, 1].
std::vector<double> smooth_field(std::size_t h, std::size_t w, std::size_t radius, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(h * w);
    for (auto& x : v) x = normal(rng);
    std::vector<double> tmp(h * w);
    const auto rad = static_cast<std::ptrdiff_t>(radius);
    for (int pass = 0; pass < 3; ++pass) {
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                double s = 0.0;
                double n = 0.0;
                for (std::ptrdiff_t d = -rad; d <= rad; ++d) {
                    const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(c) + d;
                    if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
                    s += v[r * w + static_cast<std::size_t>(x)];
                    n += 1.0;
                }
                tmp[r * w + c] = s / n;
            }
        }
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                double s = 0.0;
                double n = 0.0;
                for (std::ptrdiff_t d = -rad; d <= rad; ++d) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(r) + d;
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
                    s += tmp[static_cast<std::size_t>(y) * w + c];
                    n += 1.0;
                }
                v[r * w + c] = s / n;
            }
        }
    }
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double a = *lo, span = *hi - *lo;
    for (auto& x : v) x = span > 0.0 ? (x - a) / span : 0.5;
    return v;
}

}  // namespace

WorldGrid gen_world(const SynthConfig& config) {
    config.validate();
    const std::size_t h = config.height, w = config.width, n = h * w;

    auto rng_land = stream_rng(config.seed, 1);
    auto rng_field = stream_rng(config.seed, 2);
    auto rng_city = stream_rng(config.seed, 3);
    auto rng_noise = stream_rng(config.seed, 4);

    WorldGrid g(h, w);
    const auto relief = smooth_field(h, w, 4, rng_land);
    if (config.land_fraction >= 1.0) {
        std::fill(g.mask.begin(), g.mask.end(), 1);
    } else {
        auto sorted = relief;
        const auto k = static_cast<std::size_t>(std::floor((1.0 - config.land_fraction) * static_cast<double>(n)));
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
        const double threshold = sorted[k];
        for (std::size_t i = 0; i < n; ++i) g.mask[i] = relief[i] >= threshold ? 1 : 0;
    }
    const std::size_t land = g.land_count();
    if (land == 0) throw PreconditionError("synthetic world came out all water");

    // Regions: k x k rectangular blocks.
    const auto k = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(config.n_regions))));
    const auto names = synth::region_names(config.n_regions);
    for (std::size_t i = 0; i < config.n_regions; ++i) g.region_table[static_cast<std::uint16_t>(i + 1)] = names[i];
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!g.mask[r * w + c]) continue;
            const std::size_t block = (r * k / h) * k + (c * k / w);
            g.regions[r * w + c] = static_cast<std::uint16_t>(block + 1);
        }
    }

    const auto elevation_field = smooth_field(h, w, 3, rng_field);
    const auto vigor = smooth_field(h, w, 2, rng_field);
    const auto density = smooth_field(h, w, 3, rng_field);

    std::vector<std::size_t> land_idx;
    for (std::size_t i = 0; i < n; ++i) {
        if (g.mask[i]) land_idx.push_back(i);
    }
    const std::size_t n_cities = std::max<std::size_t>(1, land / 250);
    std::vector<std::uint8_t> cities(n, 0);
    for (std::size_t i = 0; i < n_cities; ++i) {
        std::uniform_int_distribution<std::size_t> pick(0, land_idx.size() - 1);
        cities[land_idx[pick(rng_city)]] = 1;
    }

    const auto dist_water = synth::water_distance(h, w, g.mask);
    const auto dist_city = synth::hop_distance(h, w, cities);

    std::vector<double> elevation(n, 0.0), slope(n, 0.0), area(n, 0.0), pop(n, 0.0), u80(n, 0.0), u90(n, 0.0),
        u00(n, 0.0), dw(n, 0.0), dc(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!g.mask[i]) continue;
        elevation[i] = elevation_field[i];
    }
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t i = r * w + c;
            if (!g.mask[i]) continue;
            double lo = elevation[i], hi = elevation[i];
            for (std::size_t y = r > 0 ? r - 1 : 0; y <= std::min(h - 1, r + 1); ++y) {
                for (std::size_t x = c > 0 ? c - 1 : 0; x <= std::min(w - 1, c + 1); ++x) {
                    if (!g.mask[y * w + x]) continue;
                    lo = std::min(lo, elevation[y * w + x]);
                    hi = std::max(hi, elevation[y * w + x]);
                }
            }
            slope[i] = hi - lo;
            int wet = 0;
            wet += r == 0 || !g.mask[i - w];
            wet += r + 1 == h || !g.mask[i + w];
            wet += c == 0 || !g.mask[i - 1];
            wet += c + 1 == w || !g.mask[i + 1];
            area[i] = 1.0 - 0.25 * wet;
            // isolated pixel
            if (area[i] <= 0.0) area[i] = 0.05;
            dw[i] = dist_water[i];
            dc[i] = dist_city[i];
            const double urban = std::exp(-dc[i] / 3.0) * (0.6 + 0.4 * vigor[i]) - 0.08;
            u00[i] = std::clamp(urban, 0.0, 1.0);
            u90[i] = 0.8 * u00[i];
            u80[i] = 0.6 * u00[i];
            pop[i] = std::clamp(0.6 * std::exp(-dc[i] / 6.0) + 0.2 * density[i], 0.0, 1.0);
        }
    }

    g.add_channel("dist_water", std::move(dw));
    g.add_channel("dist_city", std::move(dc));
    g.add_channel("elevation", std::move(elevation));
    g.add_channel("slope_range", std::move(slope));
    g.add_channel("land_area", std::move(area));
    g.add_channel("pop_2000", std::move(pop));
    g.add_channel("urban_1980", std::move(u80));
    g.add_channel("urban_1990", std::move(u90));
    g.add_channel("urban_2000", std::move(u00));

    auto targets = synth::true_targets(g);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> built(n, 0.0);
    const auto& u = g.channel("urban_2000").plane;
    for (std::size_t i = 0; i < n; ++i) {
        if (!g.mask[i]) continue;
        targets.d_urban[i] += config.noise_std * noise(rng_noise);
        targets.d_pop[i] += config.pop_noise_std * noise(rng_noise);
        built[i] = std::max(0.0, u[i] + targets.d_urban[i]);
    }
    g.add_channel(std::string(synth::kUrbanChange), std::move(targets.d_urban));
    g.add_channel(std::string(synth::kPopChange), std::move(targets.d_pop));
    g.add_channel(std::string(synth::kBuiltup2010), std::move(built));
    g.validate();
    return g;
}

MetricsRow oracle_metrics(const WorldGrid& world, OraclePredictor predictor, std::string_view target,
                          std::span<const std::uint8_t> cells) {
    const auto& truth = world.channel(target).plane;
    std::vector<double> pred(truth.size(), 0.0);
    std::string label = "zero";
    if (predictor == OraclePredictor::Persistence) {
        // No change from the 2000 state.
        label = "persistence";
    } else if (predictor == OraclePredictor::TrueFunction) {
        const auto t = synth::true_targets(world);
        if (target == synth::kUrbanChange) {
            pred = t.d_urban;
        } else if (target == synth::kPopChange) {
            pred = t.d_pop;
        } else {
            throw PreconditionError("no true function for target " + std::string(target));
        }
        label = "true-function";
    }
    MetricsRow row;
    try {
        row = residual_metrics(pred, truth, cells);
    } catch (const UndefinedMetricError& e) {
        row = e.row;
    }
    row.model = label;
    return row;
}

}  // namespace urbanet
