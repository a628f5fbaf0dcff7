#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "urbanet/eval.hpp"
#include "urbanet/grid.hpp"

namespace urbanet {

struct SynthConfig {
    std::uint64_t seed = 1;
    std::size_t height = 96;
    std::size_t width = 96;
    double land_fraction = 0.6;
    // Square number of rectangular region blocks.
    std::size_t n_regions = 16;
    double noise_std = 0.01;
    // Population-change labels are noisier than built-up change.
    double pop_noise_std = 0.03;

    void validate() const;
};

namespace synth {

inline constexpr std::array<std::string_view, 9> kInputChannels = {
    "dist_water", "dist_city", "elevation", "slope_range", "land_area",
    "pop_2000",   "urban_1980", "urban_1990", "urban_2000"};
inline constexpr std::string_view kUrbanChange = "d_urban";
inline constexpr std::string_view kPopChange = "d_pop";
inline constexpr std::string_view kBuiltup2010 = "urban_2010";

// Region names, block-major; the default test regions are spread over the map.
std::vector<std::string> region_names(std::size_t n_regions);

// 4-connected hop distance to the nearest source pixel (all pixels are traversable).
std::vector<double> hop_distance(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& sources);

// Hops to the nearest water pixel minus one; cells outside the grid count as water,
// so land next to water or the map edge gets 0. Water pixels get 0.
std::vector<double> water_distance(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& mask);

// Mean of `plane` over the land pixels of the 5x5 neighbourhood (clipped at the edges).
std::vector<double> land_mean5(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& mask,
                               const std::vector<double>& plane);

struct Targets {
    std::vector<double> d_urban;
    std::vector<double> d_pop;
};

// Noise-free target formulas evaluated on the raw input channels of a generated world:
//   n5      = land_mean5(urban_2000)
//   reach   = max(0, 1 - dist_city / 12)
//   d_urban = 1.5 * n5 * (1 - urban_2000) + 0.4 * pop_2000 * reach
//   d_pop   = 0.5 * n5 + 0.3 * pop_2000 * (1 - urban_2000) + 0.05 * reach
// Both are 0 on water.
Targets true_targets(const WorldGrid& world);

}  // namespace synth

// Nine input channels, d_urban / d_pop targets (true formulas plus Gaussian
// noise on land, noise_std and pop_noise_std), urban_2010 = max(0, urban_2000 + d_urban), mask, regions.
WorldGrid gen_world(const SynthConfig& config);

enum class OraclePredictor { Zero, Persistence, TrueFunction };

// Closed-form predictor evaluated on the cells of `cells` for the named target.
MetricsRow oracle_metrics(const WorldGrid& world, OraclePredictor predictor, std::string_view target,
                          std::span<const std::uint8_t> cells);

}  // namespace urbanet
