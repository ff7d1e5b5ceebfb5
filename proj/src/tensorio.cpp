#include "a3dseg/tensorio.hpp"

#include <bit>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>

namespace a3dseg {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace {

std::string sidecar_path(const std::string& f32_path) {
    fs::path p(f32_path);
    p.replace_extension(".json");
    return p.string();
}

}  // namespace

void write_volume(const std::string& f32_path, const Volume& v) {
    std::ofstream raw(f32_path, std::ios::binary | std::ios::trunc);
    if (!raw) throw IoError("tensorio", "cannot open for write: " + f32_path);
    raw.write(reinterpret_cast<const char*>(v.data.data()),
              static_cast<std::streamsize>(v.data.numel() * sizeof(float)));
    if (!raw) throw IoError("tensorio", "short write: " + f32_path);

    json side;
    side["dims"] = v.data.dims();
    side["spacing_mm"] = std::vector<float>{v.spacing[0], v.spacing[1], v.spacing[2]};
    side["domain"] = domain_str(v.domain);
    side["dtype"] = "f32le";
    side["version"] = 1;
    std::ofstream sc(sidecar_path(f32_path), std::ios::trunc);
    if (!sc) throw IoError("tensorio", "cannot open for write: " + sidecar_path(f32_path));
    sc << side.dump(2) << "\n";
}

Volume read_volume(const std::string& f32_path) {
    AccessAudit::record(f32_path);
    std::ifstream sc(sidecar_path(f32_path));
    if (!sc) throw IoError("tensorio", "missing sidecar: " + sidecar_path(f32_path));
    json side;
    try {
        sc >> side;
    } catch (const json::exception& e) {
        throw IoError("tensorio", "bad sidecar " + sidecar_path(f32_path) + ": " + e.what());
    }
    if (side.value("dtype", "") != "f32le" || side.value("version", 0) != 1)
        throw IoError("tensorio", "unsupported container version/dtype: " + f32_path);

    Volume v;
    std::vector<int> dims = side.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw IoError("tensorio", "expected rank-3 dims in " + f32_path);
    auto sp = side.at("spacing_mm").get<std::vector<float>>();
    if (sp.size() != 3) throw IoError("tensorio", "expected 3 spacing values in " + f32_path);
    v.spacing = {sp[0], sp[1], sp[2]};
    v.domain = domain_from_str(side.at("domain").get<std::string>());

    v.data = Tensor(dims);
    std::ifstream raw(f32_path, std::ios::binary);
    if (!raw) throw IoError("tensorio", "cannot open: " + f32_path);
    raw.read(reinterpret_cast<char*>(v.data.data()),
             static_cast<std::streamsize>(v.data.numel() * sizeof(float)));
    if (raw.gcount() != static_cast<std::streamsize>(v.data.numel() * sizeof(float)))
        throw IoError("tensorio", "truncated data: " + f32_path);
    return v;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::vector<const ManifestEntry*> DatasetManifest::select(Domain d,
                                                          const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.domain == d && e.split == split) out.push_back(&e);
    return out;
}

void DatasetManifest::validate() const {
    for (const auto& e : entries) {
        if (e.split != "train" && e.split != "test")
            throw DatasetError("tensorio", "bad split '" + e.split + "' for " + e.volume_path);
        if (e.domain == Domain::High && !e.mask_path)
            throw DatasetError("tensorio", "high-quality entry lacks mask: " + e.volume_path);
        if (e.domain == Domain::Low && e.split == "train" && e.mask_path)
            throw DatasetError("tensorio",
                               "unpaired violation: training CBCT entry carries a mask: " +
                                   e.volume_path);
        if (e.domain == Domain::Low && e.split == "test" && !e.mask_path)
            throw DatasetError("tensorio", "test CBCT entry lacks evaluation mask: " +
                                               e.volume_path);
    }
    // Anatomical unpairedness: a phantom seed never appears in both domains.
    for (const auto& a : entries)
        for (const auto& b : entries)
            if (&a != &b && a.domain != b.domain && a.phantom_seed == b.phantom_seed)
                throw DatasetError("tensorio", "low/high entries share phantom seed " +
                                                   std::to_string(a.phantom_seed));
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
    json j;
    j["version"] = 1;
    j["entries"] = json::array();
    for (const auto& e : m.entries) {
        json je;
        je["volume"] = e.volume_path;
        if (e.mask_path) je["mask"] = *e.mask_path;
        else je["mask"] = nullptr;
        je["domain"] = domain_str(e.domain);
        je["spacing_mm"] = std::vector<float>{e.spacing[0], e.spacing[1], e.spacing[2]};
        je["split"] = e.split;
        je["phantom_seed"] = e.phantom_seed;
        j["entries"].push_back(std::move(je));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("tensorio", "cannot open for write: " + path);
    f << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DatasetError("tensorio", "cannot open manifest: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DatasetError("tensorio", "bad manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    for (const auto& je : j.at("entries")) {
        ManifestEntry e;
        e.volume_path = je.at("volume").get<std::string>();
        if (!je.at("mask").is_null()) e.mask_path = je.at("mask").get<std::string>();
        e.domain = domain_from_str(je.at("domain").get<std::string>());
        auto sp = je.at("spacing_mm").get<std::vector<float>>();
        e.spacing = {sp[0], sp[1], sp[2]};
        e.split = je.at("split").get<std::string>();
        e.phantom_seed = je.at("phantom_seed").get<std::uint64_t>();
        m.entries.push_back(std::move(e));
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// AccessAudit
// ---------------------------------------------------------------------------

namespace {
std::mutex g_audit_mutex;
bool g_audit_enabled = false;
std::vector<std::string> g_audit_reads;
}  // namespace

void AccessAudit::enable() {
    std::lock_guard lock(g_audit_mutex);
    g_audit_enabled = true;
}

void AccessAudit::disable() {
    std::lock_guard lock(g_audit_mutex);
    g_audit_enabled = false;
}

bool AccessAudit::enabled() {
    std::lock_guard lock(g_audit_mutex);
    return g_audit_enabled;
}

std::vector<std::string> AccessAudit::reads() {
    std::lock_guard lock(g_audit_mutex);
    return g_audit_reads;
}

void AccessAudit::reset() {
    std::lock_guard lock(g_audit_mutex);
    g_audit_reads.clear();
}

void AccessAudit::record(const std::string& path) {
    std::lock_guard lock(g_audit_mutex);
    if (g_audit_enabled) g_audit_reads.push_back(path);
}

}  // namespace a3dseg
