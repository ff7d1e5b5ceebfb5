#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>

#include "a3dseg/tensorio.hpp"
#include "a3dseg/volume.hpp"

namespace a3dseg {

// Intensity interval [lo, hi] in normalized units.
struct IntensityRange {
    float lo = 0.0f;
    float hi = 0.0f;
};

struct PhantomConfig {
    std::array<int, 3> volume_shape{16, 64, 64};     // D,H,W, each >= 16
    std::array<float, 3> spacing_mm{1.0f, 0.5f, 0.5f};
    int n_vertebrae = 3;
    IntensityRange bone{0.70f, 0.95f};
    IntensityRange tissue{0.25f, 0.45f};
    IntensityRange air{0.00f, 0.05f};
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

struct DegradationParams {
    float noise_sigma = 0.08f;
    int n_streaks = 6;
    float streak_amplitude = 0.35f;
    float contrast_gamma = 1.6f;
    float metal_prob = 0.5f;

    void validate() const;
};

// Clean "CT-like" phantom: stacked rounded vertebra bodies with darker disc
// gaps, inside a soft-tissue cylinder, air elsewhere. All intensities land in
// the configured ranges; the mask marks vertebra bodies only.
std::pair<Volume, Volume> generate_phantom(const PhantomConfig& config);

// "CBCT-like" degradation: contrast compression, optional metal blob,
// per-slice streak ridges (amplitude follows the metal along depth when one
// is present), additive noise, clamp to [0,1]. With all-neutral parameters
// the output is bit-identical to the input.
Volume degrade_to_cbct(const Volume& volume, const DegradationParams& params,
                       std::uint64_t seed);

// Generates an unpaired two-domain dataset. Training CBCT entries have no
// mask on disk at all; test CBCT entries keep one for evaluation only. Every
// entry uses its own derived phantom seed so the two domains never share
// anatomy.
DatasetManifest build_dataset(const PhantomConfig& config, const DegradationParams& params,
                              int n_low, int n_high, const std::string& out_dir,
                              int n_low_test = 0, int n_high_test = 0);

}  // namespace a3dseg
