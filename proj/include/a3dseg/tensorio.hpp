#pragma once

#include <optional>
#include <string>
#include <vector>

#include "a3dseg/volume.hpp"

namespace a3dseg {

// Tensor container: <base>.f32 holds the raw little-endian float32 array,
// <base>.json the sidecar {"dims":[...],"spacing_mm":[...],"domain":...,
// "dtype":"f32le","version":1}. `path` in the API is the .f32 path; the
// sidecar sits next to it. Format documented in docs/FORMATS.md.
void write_volume(const std::string& f32_path, const Volume& v);
Volume read_volume(const std::string& f32_path);

struct ManifestEntry {
    std::string volume_path;                // .f32
    std::optional<std::string> mask_path;   // absent for unpaired training CBCT
    Domain domain = Domain::Low;
    std::array<float, 3> spacing{};
    std::string split;                      // "train" | "test"
    std::uint64_t phantom_seed = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> select(Domain d, const std::string& split) const;
    void validate() const;  // unpaired-setting invariants
};

void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// File-access audit: when enabled, every read_volume() records its path.
// Training-stage tests use this to prove no low-quality ground-truth mask
// is ever opened.
class AccessAudit {
public:
    static void enable();
    static void disable();
    static bool enabled();
    static std::vector<std::string> reads();  // snapshot
    static void reset();
    static void record(const std::string& path);
};

}  // namespace a3dseg
