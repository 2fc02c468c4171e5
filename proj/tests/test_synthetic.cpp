#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "volflow/components.hpp"
#include "volflow/synthetic.hpp"

using namespace volflow;

namespace {

SynthSpec base_spec() {
    SynthSpec sp;
    sp.dims = {48, 48, 48};
    sp.spacing = {2.0f, 2.0f, 2.0f};
    sp.seed = 42;
    return sp;
}

}  // namespace

TEST_CASE("same spec twice gives bit identical output") {
    SynthSpec sp = base_spec();
    sp.lesion_count = 2;
    const SynthVolume a = generate_synthetic(sp);
    const SynthVolume b = generate_synthetic(sp);
    CHECK(a.volume.voxels == b.volume.voxels);
    CHECK(a.lung.bits == b.lung.bits);
    CHECK(a.lesions.bits == b.lesions.bits);
}

TEST_CASE("different seeds give different textures") {
    SynthSpec sp = base_spec();
    const SynthVolume a = generate_synthetic(sp);
    sp.seed = 43;
    const SynthVolume b = generate_synthetic(sp);
    CHECK(a.volume.voxels != b.volume.voxels);
}

TEST_CASE("zero lesion count means empty lesion mask") {
    const SynthVolume s = generate_synthetic(base_spec());
    CHECK(s.lesions.count() == 0);
}

TEST_CASE("lesion mask is contained in the lung mask") {
    SynthSpec sp = base_spec();
    sp.lesion_count = 3;
    sp.lesion_radius_mm = 6.0f;
    const SynthVolume s = generate_synthetic(sp);
    REQUIRE(s.lesions.count() > 0);
    for (std::size_t i = 0; i < s.lesions.bits.size(); ++i)
        if (s.lesions.bits[i]) CHECK(s.lung.bits[i] == 1);
}

TEST_CASE("three 6mm lesions at 2mm spacing have the expected voxel count") {
    SynthSpec sp = base_spec();
    sp.dims = {64, 64, 64};
    sp.lesion_count = 3;
    sp.lesion_radius_mm = 6.0f;
    const SynthVolume s = generate_synthetic(sp);

    const Labeling lab = label_components_26(s.lesions);
    REQUIRE(lab.components.size() == 3);
    // Sphere of radius 3 voxels is about 113 voxels; rasterization keeps
    // each component within +-30% of that.
    for (const auto& c : lab.components) {
        CHECK(double(c.voxels) > 113.0 * 0.7);
        CHECK(double(c.voxels) < 113.0 * 1.3);
    }
}

TEST_CASE("values live in the expected HU bands") {
    SynthSpec sp = base_spec();
    sp.lesion_count = 1;
    sp.lesion_radius_mm = 8.0f;
    const SynthVolume s = generate_synthetic(sp);
    CHECK(s.volume.value_space == ValueSpace::HU);
    REQUIRE(s.lung.count() > 0);

    double bg_sum = 0, lung_sum = 0, lesion_sum = 0;
    std::size_t bg_n = 0, lung_n = 0, lesion_n = 0;
    for (std::size_t i = 0; i < s.volume.voxels.size(); ++i) {
        const double hu = s.volume.voxels[i];
        if (!s.lung.bits[i]) {
            bg_sum += hu;
            ++bg_n;
        } else if (s.lesions.bits[i]) {
            lesion_sum += hu;
            ++lesion_n;
        } else {
            lung_sum += hu;
            ++lung_n;
        }
    }
    REQUIRE(lesion_n > 0);
    const double bg = bg_sum / double(bg_n);
    const double lung = lung_sum / double(lung_n);
    const double lesion = lesion_sum / double(lesion_n);
    CHECK(bg == doctest::Approx(-1000.0).epsilon(0.05));
    CHECK(lung == doctest::Approx(-800.0).epsilon(0.15));
    // Lesions are shifted up by about the configured intensity delta
    // (+300 nominal, smeared by the texture field).
    CHECK(lesion - lung > 150.0);
    CHECK(lesion - lung < 450.0);
}

TEST_CASE("lung occupies a plausible interior fraction") {
    const SynthVolume s = generate_synthetic(base_spec());
    const double frac =
        double(s.lung.count()) / double(s.volume.dims.count());
    CHECK(frac > 0.05);
    CHECK(frac < 0.5);
}

TEST_CASE("tiny dims are rejected") {
    SynthSpec sp = base_spec();
    sp.dims = {8, 48, 48};
    CHECK_THROWS_AS(generate_synthetic(sp), ArgumentError);
}

TEST_CASE("oversized lesions exhaust placement retries") {
    SynthSpec sp = base_spec();
    sp.lesion_count = 1;
    sp.lesion_radius_mm = 500.0f;
    CHECK_THROWS_AS(generate_synthetic(sp), PlacementError);
}
