#include "urbanet/tiler.hpp"

#include <algorithm>
#include <fstream>

#include "urbanet/error.hpp"

namespace urbanet {

void WindowSpec::validate() const {
    if (size == 0) throw ShapeError("window size must be positive");
    if (offset_row >= size || offset_col >= size) throw ShapeError("window center offset must lie inside the window");
}

TileSampler::TileSampler(const PaddedWorld& world, const SplitAssignment& split, ChannelLayout layout,
                         WindowSpec window)
    : world_(&world), split_(&split), layout_(std::move(layout)), window_(window) {
    window_.validate();
    if (split.labels.size() != world.height() * world.width()) {
        throw ShapeError("split labels do not match the unpadded grid shape");
    }
    for (const auto& name : layout_.inputs) input_idx_.push_back(world.grid.channel_index(name));
    for (const auto& name : layout_.targets) target_idx_.push_back(world.grid.channel_index(name));

    const std::size_t reach_lo = std::max(window_.offset_row, window_.offset_col);
    const std::size_t reach_hi = std::max(window_.size - 1 - window_.offset_row, window_.size - 1 - window_.offset_col);
    if (world.pad < reach_lo || world.pad < reach_hi) {
        throw BoundsError("padding " + std::to_string(world.pad) + " is too small for window size " +
                          std::to_string(window_.size));
    }
}

std::vector<Pixel> TileSampler::centers(SplitFilter filter) const {
    std::vector<Pixel> out;
    const std::size_t h = world_->height();
    const std::size_t w = world_->width();
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const auto label = split_->labels[r * w + c];
            if (label == SplitLabel::Water) continue;
            if (filter == SplitFilter::Train && label != SplitLabel::Train) continue;
            if (filter == SplitFilter::Test && label != SplitLabel::Test) continue;
            out.push_back({r, c});
        }
    }
    return out;
}

std::pair<std::ptrdiff_t, std::ptrdiff_t> TileSampler::origin(Pixel center) const {
    return {static_cast<std::ptrdiff_t>(center.row) - static_cast<std::ptrdiff_t>(window_.offset_row),
            static_cast<std::ptrdiff_t>(center.col) - static_cast<std::ptrdiff_t>(window_.offset_col)};
}

TileSample TileSampler::tile_at(Pixel center) const {
    const auto& g = world_->grid;
    const std::size_t pad = world_->pad;
    if (center.row >= world_->height() || center.col >= world_->width()) {
        throw BoundsError("tile center outside the grid");
    }
    if (!world_->is_land(center)) {
        throw PreconditionError("tile center (" + std::to_string(center.row) + "," + std::to_string(center.col) +
                                ") is a water pixel");
    }

    const std::size_t s = window_.size;
    TileSample t;
    t.size = s;
    t.input_channels = input_idx_.size();
    t.target_channels = target_idx_.size();
    t.input.resize(t.input_channels * s * s);
    t.target.resize(t.target_channels * s * s);
    t.mask.resize(s * s);
    t.center = center;
    t.region = g.regions[g.index(center.row + pad, center.col + pad)];
    t.split = split_->labels[center.row * world_->width() + center.col];

    // Padded coordinates of the window's top-left corner; in bounds by the
    // padding check in the constructor.
    const std::size_t r0 = center.row + pad - window_.offset_row;
    const std::size_t c0 = center.col + pad - window_.offset_col;
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t base = g.index(r0 + i, c0);
        for (std::size_t j = 0; j < s; ++j) t.mask[i * s + j] = static_cast<float>(g.mask[base + j]);
        for (std::size_t k = 0; k < input_idx_.size(); ++k) {
            const auto& plane = g.channels[input_idx_[k]].plane;
            float* dst = t.input.data() + (k * s + i) * s;
            for (std::size_t j = 0; j < s; ++j) dst[j] = static_cast<float>(plane[base + j]);
        }
        for (std::size_t k = 0; k < target_idx_.size(); ++k) {
            const auto& plane = g.channels[target_idx_[k]].plane;
            float* dst = t.target.data() + (k * s + i) * s;
            for (std::size_t j = 0; j < s; ++j) dst[j] = static_cast<float>(plane[base + j]);
        }
    }
    return t;
}

std::pair<std::size_t, std::size_t> TileStream::partition(std::size_t part, std::size_t parts) const {
    if (parts == 0 || part >= parts) throw PreconditionError("invalid partition index");
    const std::size_t n = centers_.size();
    return {n * part / parts, n * (part + 1) / parts};
}

TileStream sample_all(const TileSampler& sampler, SplitFilter filter) {
    return TileStream(sampler, sampler.centers(filter));
}

std::vector<std::uint32_t> coverage_count(const PaddedWorld& world, const WindowSpec& window) {
    window.validate();
    const std::size_t h = world.height();
    const std::size_t w = world.width();
    // prefix[(r+1)*(w+1) + (c+1)] = land pixels in [0,r] x [0,c]
    std::vector<std::uint32_t> prefix((h + 1) * (w + 1), 0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            prefix[(r + 1) * (w + 1) + c + 1] = static_cast<std::uint32_t>(world.is_land({r, c})) +
                                                 prefix[r * (w + 1) + c + 1] + prefix[(r + 1) * (w + 1) + c] -
                                                 prefix[r * (w + 1) + c];
        }
    }
    auto clamp_row = [](std::ptrdiff_t v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n)));
    };

    // Center c covers p iff c - offset <= p <= c - offset + S - 1, i.e.
    // c in [p + offset - S + 1, p + offset].
    const auto s = static_cast<std::ptrdiff_t>(window.size);
    const auto orow = static_cast<std::ptrdiff_t>(window.offset_row);
    const auto ocol = static_cast<std::ptrdiff_t>(window.offset_col);
    std::vector<std::uint32_t> counts(h * w, 0);
    for (std::size_t r = 0; r < h; ++r) {
        const auto pr = static_cast<std::ptrdiff_t>(r);
        const std::size_t r_lo = clamp_row(pr + orow - s + 1, h);
        const std::size_t r_hi = clamp_row(pr + orow + 1, h);
        for (std::size_t c = 0; c < w; ++c) {
            const auto pc = static_cast<std::ptrdiff_t>(c);
            const std::size_t c_lo = clamp_row(pc + ocol - s + 1, w);
            const std::size_t c_hi = clamp_row(pc + ocol + 1, w);
            if (r_lo >= r_hi || c_lo >= c_hi) continue;
            counts[r * w + c] = prefix[r_hi * (w + 1) + c_hi] - prefix[r_lo * (w + 1) + c_hi] -
                                prefix[r_hi * (w + 1) + c_lo] + prefix[r_lo * (w + 1) + c_lo];
        }
    }
    return counts;
}

void write_tile_dump(const TileSample& tile, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::uint32_t header[] = {static_cast<std::uint32_t>(tile.center.row),
                                    static_cast<std::uint32_t>(tile.center.col),
                                    tile.region,
                                    static_cast<std::uint32_t>(tile.split),
                                    static_cast<std::uint32_t>(tile.size),
                                    static_cast<std::uint32_t>(tile.input_channels),
                                    static_cast<std::uint32_t>(tile.target_channels)};
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    for (const auto* v : {&tile.input, &tile.target, &tile.mask}) {
        out.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace urbanet
