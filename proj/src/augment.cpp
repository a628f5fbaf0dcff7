#include "urbanet/augment.hpp"

#include "urbanet/error.hpp"

namespace urbanet {

std::string_view transform_name(Transform t) {
    switch (t) {
        case Transform::Identity: return "identity";
        case Transform::HFlip: return "hflip";
        case Transform::VFlip: return "vflip";
        case Transform::Rot90: return "rot90";
        case Transform::Rot180: return "rot180";
        case Transform::Rot270: return "rot270";
    }
    return "?";
}

void transform_plane(std::span<const float> src, std::span<float> dst, std::size_t s, Transform t) {
    if (src.size() != s * s || dst.size() != s * s) throw ShapeError("transform_plane expects square S x S planes");
    const std::size_t m = s - 1;
    // dst(a, b) = src(source row, source col)
    for (std::size_t a = 0; a < s; ++a) {
        for (std::size_t b = 0; b < s; ++b) {
            std::size_t i = a, j = b;
            switch (t) {
                case Transform::Identity: break;
                case Transform::HFlip: j = m - b; break;
                case Transform::VFlip: i = m - a; break;
                case Transform::Rot90: i = b; j = m - a; break;
                case Transform::Rot180: i = m - a; j = m - b; break;
                case Transform::Rot270: i = m - b; j = a; break;
            }
            dst[a * s + b] = src[i * s + j];
        }
    }
}

TileSample apply_transform(const TileSample& tile, Transform t) {
    const std::size_t n = tile.plane_size();
    if (tile.mask.size() != n || tile.input.size() != tile.input_channels * n ||
        tile.target.size() != tile.target_channels * n) {
        throw ShapeError("apply_transform expects a square tile");
    }
    TileSample out = tile;
    if (t == Transform::Identity) return out;
    auto permute = [&](const std::vector<float>& src, std::vector<float>& dst, std::size_t planes) {
        for (std::size_t k = 0; k < planes; ++k) {
            transform_plane(std::span(src).subspan(k * n, n), std::span(dst).subspan(k * n, n), tile.size, t);
        }
    };
    permute(tile.input, out.input, tile.input_channels);
    permute(tile.target, out.target, tile.target_channels);
    permute(tile.mask, out.mask, 1);
    return out;
}

std::vector<TileSample> augment_set(const TileSample& tile) {
    std::vector<TileSample> out;
    out.reserve(kAugmentations.size());
    for (auto t : kAugmentations) out.push_back(apply_transform(tile, t));
    return out;
}

}  // namespace urbanet
