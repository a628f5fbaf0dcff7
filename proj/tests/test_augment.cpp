#include <random>
#include <set>

#include "doctest.h"
#include "urbanet/augment.hpp"
#include "urbanet/error.hpp"

using namespace urbanet;

namespace {

std::vector<float> apply(const std::vector<float>& p, std::size_t s, Transform t) {
    std::vector<float> out(s * s);
    transform_plane(p, out, s, t);
    return out;
}

TileSample random_tile(std::size_t s, std::size_t cin, std::size_t ct, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(-2.0f, 2.0f);
    std::bernoulli_distribution land(0.7);
    TileSample t;
    t.size = s;
    t.input_channels = cin;
    t.target_channels = ct;
    t.mask.resize(s * s);
    for (auto& m : t.mask) m = land(rng) ? 1.0f : 0.0f;
    t.input.resize(cin * s * s);
    t.target.resize(ct * s * s);
    for (std::size_t i = 0; i < t.input.size(); ++i) t.input[i] = t.mask[i % (s * s)] ? u(rng) : 0.0f;
    for (std::size_t i = 0; i < t.target.size(); ++i) t.target[i] = t.mask[i % (s * s)] ? u(rng) : 0.0f;
    t.center = {3, 5};
    t.region = 7;
    t.split = SplitLabel::Train;
    return t;
}

bool same(const TileSample& a, const TileSample& b) {
    return a.input == b.input && a.target == b.target && a.mask == b.mask;
}

}  // namespace

TEST_CASE("2x2 reference planes") {
    const std::vector<float> p = {1, 2, 3, 4};
    CHECK(apply(p, 2, Transform::Identity) == p);
    CHECK(apply(p, 2, Transform::HFlip) == std::vector<float>{2, 1, 4, 3});
    CHECK(apply(p, 2, Transform::VFlip) == std::vector<float>{3, 4, 1, 2});
    CHECK(apply(p, 2, Transform::Rot90) == std::vector<float>{2, 4, 1, 3});
    CHECK(apply(p, 2, Transform::Rot180) == std::vector<float>{4, 3, 2, 1});
    CHECK(apply(p, 2, Transform::Rot270) == std::vector<float>{3, 1, 4, 2});
}

TEST_CASE("Rot90 follows the counterclockwise index map") {
    for (std::size_t s : {1u, 3u, 6u, 28u}) {
        std::vector<float> p(s * s);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(i);
        const auto r = apply(p, s, Transform::Rot90);
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) CHECK(r[(s - 1 - j) * s + i] == p[i * s + j]);
        }
    }
}

TEST_CASE("group laws hold bitwise on random tiles") {
    std::mt19937_64 rng(99);
    for (int k = 0; k < 200; ++k) {
        const auto t = random_tile(2 + rng() % 27, 2, 1, rng);
        auto r = t;
        for (int i = 0; i < 4; ++i) r = apply_transform(r, Transform::Rot90);
        CHECK(same(r, t));
        CHECK(same(apply_transform(apply_transform(t, Transform::HFlip), Transform::HFlip), t));
        CHECK(same(apply_transform(apply_transform(t, Transform::VFlip), Transform::VFlip), t));
        CHECK(same(apply_transform(apply_transform(t, Transform::Rot180), Transform::Rot180), t));
        CHECK(same(apply_transform(apply_transform(t, Transform::HFlip), Transform::Rot180),
                   apply_transform(t, Transform::VFlip)));
        CHECK(same(apply_transform(t, Transform::Identity), t));
    }
}

TEST_CASE("transforms keep metadata, water zeros and pointwise relations") {
    std::mt19937_64 rng(5);
    auto t = random_tile(9, 3, 1, rng);
    for (std::size_t i = 0; i < 81; ++i) t.target[i] = 2.0f * t.input[i] + t.input[81 + i];
    for (auto tr : kAugmentations) {
        const auto a = apply_transform(t, tr);
        CHECK(a.center.row == t.center.row);
        CHECK(a.center.col == t.center.col);
        CHECK(a.region == t.region);
        CHECK(a.split == t.split);
        for (std::size_t i = 0; i < 81; ++i) {
            if (a.mask[i] == 0.0f) {
                CHECK(a.input[i] == 0.0f);
                CHECK(a.target[i] == 0.0f);
            }
            CHECK(a.target[i] == 2.0f * a.input[i] + a.input[81 + i]);
        }
    }
}

TEST_CASE("augment_set yields six distinct planes in fixed order") {
    TileSample t;
    t.size = 3;
    t.input_channels = 1;
    t.target_channels = 1;
    t.input = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    t.target = t.input;
    t.mask.assign(9, 1.0f);
    const auto set = augment_set(t);
    REQUIRE(set.size() == 6);
    CHECK(same(set[0], t));
    std::set<std::vector<float>> distinct;
    for (std::size_t k = 0; k < 6; ++k) {
        CHECK(same(set[k], apply_transform(t, kAugmentations[k])));
        distinct.insert(set[k].input);
    }
    CHECK(distinct.size() == 6);
    CHECK(kAugmentations[0] == Transform::Identity);
}

TEST_CASE("non-square planes are rejected") {
    TileSample t;
    t.size = 3;
    t.input_channels = 1;
    t.target_channels = 1;
    t.input.assign(8, 0.0f);
    t.target.assign(9, 0.0f);
    t.mask.assign(9, 1.0f);
    CHECK_THROWS_AS(apply_transform(t, Transform::Rot90), ShapeError);
    std::vector<float> src(6), dst(6);
    CHECK_THROWS_AS(transform_plane(src, dst, 3, Transform::HFlip), ShapeError);
}
