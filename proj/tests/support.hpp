#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "urbanet/grid.hpp"

namespace testing {

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("urbanet_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Grid with the given land mask: region "AAA" on the left half, "BBB" on the
// right half, `n_channels` random channels on land (named c0, c1, ...).
inline urbanet::WorldGrid random_world(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& mask,
                                       std::size_t n_channels, std::uint64_t seed) {
    urbanet::WorldGrid g(h, w);
    g.mask = mask;
    g.region_table = {{1, "AAA"}, {2, "BBB"}};
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const auto i = r * w + c;
            g.regions[i] = mask[i] ? (c < w / 2 ? 1 : 2) : 0;
        }
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t k = 0; k < n_channels; ++k) {
        std::vector<double> plane(h * w, 0.0);
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = mask[i] ? u(rng) : 0.0;
        g.add_channel("c" + std::to_string(k), std::move(plane));
    }
    return g;
}

inline std::vector<std::uint8_t> random_mask(std::size_t n, double land, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(land);
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = b(rng) ? 1 : 0;
    return m;
}

}  // namespace testing
