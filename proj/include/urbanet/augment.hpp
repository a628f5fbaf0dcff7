#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "urbanet/tiler.hpp"

namespace urbanet {

enum class Transform { Identity, HFlip, VFlip, Rot90, Rot180, Rot270 };

// Training order: the original followed by the five augmentations.
inline constexpr std::array<Transform, 6> kAugmentations = {Transform::Identity, Transform::HFlip, Transform::VFlip,
                                                             Transform::Rot90,    Transform::Rot180, Transform::Rot270};

std::string_view transform_name(Transform t);

// Permutes one S x S plane. Rot90 is counterclockwise: element (i, j) moves to (S-1-j, i).
void transform_plane(std::span<const float> src, std::span<float> dst, std::size_t size, Transform t);

TileSample apply_transform(const TileSample& tile, Transform t);

std::vector<TileSample> augment_set(const TileSample& tile);

}  // namespace urbanet
