#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "urbanet/grid.hpp"

namespace urbanet {

// Window of size S whose center pixel sits at `offset` inside the window.
struct WindowSpec {
    std::size_t size = 28;
    std::size_t offset_row = 14;
    std::size_t offset_col = 14;

    // Center at (S/2, S/2): the window spans [r - S/2, r + S/2 - 1] for even S.
    static WindowSpec centered(std::size_t size) { return {size, size / 2, size / 2}; }
    void validate() const;
};

enum class SplitFilter { Train, Test, All };

// A padded world together with its padding width, so tiles can be addressed
// in unpadded coordinates.
struct PaddedWorld {
    WorldGrid grid;
    std::size_t pad = 0;

    static PaddedWorld from(const WorldGrid& unpadded, std::size_t pad) { return {pad_grid(unpadded, pad), pad}; }
    std::size_t height() const { return grid.height - 2 * pad; }
    std::size_t width() const { return grid.width - 2 * pad; }
    bool is_land(Pixel p) const { return grid.is_land(p.row + pad, p.col + pad); }
};

// Which grid channels feed the network and which are regression targets.
struct ChannelLayout {
    std::vector<std::string> inputs;
    std::vector<std::string> targets;
};

struct TileSample {
    std::size_t size = 0;
    std::size_t input_channels = 0;
    std::size_t target_channels = 0;
    std::vector<float> input;   // C_in x S x S
    std::vector<float> target;  // C_t x S x S
    std::vector<float> mask;    // S x S, values 0/1
    Pixel center;               // unpadded coordinates
    std::uint16_t region = 0;
    SplitLabel split = SplitLabel::Train;

    std::size_t plane_size() const { return size * size; }
};

// Crops tiles out of a padded world. Holds references: the world and split
// must outlive the sampler.
class TileSampler {
public:
    TileSampler(const PaddedWorld& world, const SplitAssignment& split, ChannelLayout layout, WindowSpec window);

    const PaddedWorld& world() const { return *world_; }
    const SplitAssignment& split() const { return *split_; }
    const ChannelLayout& layout() const { return layout_; }
    const WindowSpec& window() const { return window_; }

    // Land-pixel centers matching the filter, in row-major order.
    std::vector<Pixel> centers(SplitFilter filter) const;

    TileSample tile_at(Pixel center) const;

    // Window rows/cols covered by the tile centered at `center`, in unpadded
    // coordinates (may extend past the grid edge into padding).
    std::pair<std::ptrdiff_t, std::ptrdiff_t> origin(Pixel center) const;

private:
    const PaddedWorld* world_;
    const SplitAssignment* split_;
    ChannelLayout layout_;
    WindowSpec window_;
    std::vector<std::size_t> input_idx_;
    std::vector<std::size_t> target_idx_;
};

// Lazy, indexable sequence of tiles; indices can be partitioned across workers.
class TileStream {
public:
    TileStream(const TileSampler& sampler, std::vector<Pixel> centers)
        : sampler_(&sampler), centers_(std::move(centers)) {}

    std::size_t size() const { return centers_.size(); }
    bool empty() const { return centers_.empty(); }
    TileSample operator[](std::size_t i) const { return sampler_->tile_at(centers_[i]); }
    const std::vector<Pixel>& centers() const { return centers_; }
    const TileSampler& sampler() const { return *sampler_; }

    // Half-open index range of part `part` when split into `parts` contiguous chunks.
    std::pair<std::size_t, std::size_t> partition(std::size_t part, std::size_t parts) const;

private:
    const TileSampler* sampler_;
    std::vector<Pixel> centers_;
};

TileStream sample_all(const TileSampler& sampler, SplitFilter filter);

// Number of land-centered tiles whose window contains each pixel (unpadded, row-major).
std::vector<std::uint32_t> coverage_count(const PaddedWorld& world, const WindowSpec& window);

// Debug dump: header then f32 planes (input, target, mask).
void write_tile_dump(const TileSample& tile, const std::filesystem::path& path);

}  // namespace urbanet
