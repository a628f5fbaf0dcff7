#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace urbanet {

struct Pixel {
    std::size_t row = 0;
    std::size_t col = 0;

    friend bool operator==(const Pixel&, const Pixel&) = default;
    friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

struct Channel {
    std::string name;
    std::vector<double> plane;  // height*width, row-major
};

// Multi-channel world raster. Water pixels (mask 0) carry region 0 and a
// value of exactly 0.0 in every channel.
struct WorldGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<Channel> channels;
    std::vector<std::uint8_t> mask;        // 1 = land
    std::vector<std::uint16_t> regions;    // 0 = water / none
    std::map<std::uint16_t, std::string> region_table;

    WorldGrid() = default;
    // All-water grid with no channels.
    WorldGrid(std::size_t h, std::size_t w);

    std::size_t size() const { return height * width; }
    std::size_t index(std::size_t r, std::size_t c) const { return r * width + c; }
    bool is_land(std::size_t r, std::size_t c) const { return mask[index(r, c)] != 0; }
    std::size_t land_count() const;

    std::optional<std::size_t> find_channel(std::string_view name) const;
    // Throws PreconditionError when the channel is absent.
    std::size_t channel_index(std::string_view name) const;
    const Channel& channel(std::string_view name) const;
    std::vector<std::string> channel_names() const;

    void add_channel(std::string name, std::vector<double> plane);
    std::optional<std::uint16_t> region_code(std::string_view iso) const;

    // Throws FormatError / IntegrityError when an invariant is violated.
    void validate() const;
};

WorldGrid load_grid(const std::filesystem::path& path);
void save_grid(const WorldGrid& grid, const std::filesystem::path& path);

// In-memory WGRD codec; load_grid/save_grid are thin wrappers.
std::vector<std::uint8_t> encode_grid(const WorldGrid& grid);
WorldGrid decode_grid(std::span<const std::uint8_t> bytes);

WorldGrid pad_grid(const WorldGrid& grid, std::size_t pad);

enum class SplitLabel : std::uint8_t { Train, Test, Water };

struct SplitAssignment {
    std::set<std::string> test_regions;
    std::vector<SplitLabel> labels;  // per pixel, row-major
    std::size_t train_count = 0;
    std::size_t test_count = 0;
    std::size_t water_count = 0;
    std::vector<std::string> unknown_regions;  // requested but not in the region table
};

SplitAssignment assign_split(const WorldGrid& grid, const std::set<std::string>& test_regions);

enum class NormMode { MinMax, ZScore };

struct ChannelStats {
    std::string name;
    double a = 0.0;  // min (MinMax) or mean (ZScore)
    double b = 0.0;  // max (MinMax) or stddev (ZScore)
};

struct NormStats {
    NormMode mode = NormMode::MinMax;
    std::vector<ChannelStats> channels;
    std::string computed_on = "train";

    const ChannelStats* find(std::string_view name) const;
};

struct Normalized {
    WorldGrid grid;
    NormStats stats;
};

// Without `stats`, fits min-max statistics over train-labelled land pixels for
// the named channels (all channels when `channels` is empty) and applies them.
// With `stats`, applies them to the channels they list. Water stays 0.0.
Normalized normalize_channels(const WorldGrid& grid, const std::optional<NormStats>& stats,
                              const SplitAssignment& split,
                              std::span<const std::string> channels = {});

void save_norm_stats(const NormStats& stats, const std::filesystem::path& path);
NormStats load_norm_stats(const std::filesystem::path& path);

}  // namespace urbanet
