#pragma once

#include <array>
#include <string>

#include "a3dseg/error.hpp"
#include "a3dseg/tensor.hpp"

namespace a3dseg {

enum class Domain { Low, High, Mask };

inline std::string domain_str(Domain d) {
    switch (d) {
        case Domain::Low: return "low";
        case Domain::High: return "high";
        case Domain::Mask: return "mask";
    }
    return "low";
}

inline Domain domain_from_str(const std::string& s) {
    if (s == "low") return Domain::Low;
    if (s == "high") return Domain::High;
    if (s == "mask") return Domain::Mask;
    throw ContractError("volume", "unknown domain tag '" + s + "'");
}

// Single-channel intensity volume (D,H,W) with physical spacing in mm per
// axis and a quality-domain tag. 2D slices are views taken along dim 0.
struct Volume {
    Tensor data;                      // rank 3: D x H x W
    std::array<float, 3> spacing{};   // mm, (d,h,w) order
    Domain domain = Domain::Low;

    int depth() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }

    // Copies slice k into an NCHW tensor (batch 1, one channel).
    Tensor slice_nchw(int k) const {
        const int h = height(), w = width();
        Tensor s({1, 1, h, w});
        const float* src = data.data() + static_cast<std::int64_t>(k) * h * w;
        std::copy_n(src, static_cast<std::int64_t>(h) * w, s.data());
        return s;
    }

    void set_slice(int k, const Tensor& nchw) {
        const int h = height(), w = width();
        float* dst = data.data() + static_cast<std::int64_t>(k) * h * w;
        std::copy_n(nchw.data(), static_cast<std::int64_t>(h) * w, dst);
    }
};

}  // namespace a3dseg
