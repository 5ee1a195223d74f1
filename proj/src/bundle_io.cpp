#include "nrr/bundle_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace nrr {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "payloads are read as native little-endian");

namespace {

struct Sidecar {
    Dims dims{};
    Spacing spacing{};
    std::string dtype;
    fs::path payload;
};

json read_json(const fs::path& p)
{
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

Sidecar read_sidecar(const fs::path& path, const char* expected_dtype)
{
    const json j = read_json(path);
    Sidecar s;
    try {
        const auto dims = j.at("dims").get<std::vector<long long>>();
        const auto spacing = j.at("spacing").get<std::vector<double>>();
        if (dims.size() != 3 || spacing.size() != 3) throw IoError(path.string() + ": dims/spacing need 3 entries");
        for (int a = 0; a < 3; ++a) {
            if (dims[a] <= 0) throw IoError(path.string() + ": dims must be positive");
            s.dims[a] = static_cast<std::size_t>(dims[a]);
            s.spacing[a] = spacing[a];
        }
        s.dtype = j.at("dtype").get<std::string>();
        if (j.contains("order") && j["order"].get<std::string>() != "x-fastest") {
            throw IoError(path.string() + ": unsupported voxel order " + j["order"].get<std::string>());
        }
        s.payload = j.contains("payload") ? path.parent_path() / j["payload"].get<std::string>()
                                          : fs::path(path).replace_extension(".raw");
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": invalid sidecar: " + e.what());
    }
    if (s.dtype != expected_dtype) {
        throw IoError(path.string() + ": expected dtype " + expected_dtype + ", found " + s.dtype);
    }
    return s;
}

template <typename T>
std::vector<T> read_payload(const Sidecar& s)
{
    const std::size_t n = s.dims[0] * s.dims[1] * s.dims[2];
    std::ifstream in(s.payload, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open payload " + s.payload.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != n * sizeof(T)) {
        throw IoError("payload " + s.payload.string() + " holds " + std::to_string(bytes) + " bytes but dims " +
                      to_string(s.dims) + " need " + std::to_string(n * sizeof(T)));
    }
    std::vector<T> data(n);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("short read from " + s.payload.string());
    return data;
}

template <typename T>
void write_bundle(const fs::path& sidecar, const Grid3<T>& g, const char* dtype)
{
    if (sidecar.extension() != ".json") throw IoError("sidecar path must end in .json: " + sidecar.string());
    const fs::path payload = fs::path(sidecar).replace_extension(".raw");
    if (sidecar.has_parent_path()) fs::create_directories(sidecar.parent_path());
    json j;
    j["dims"] = {g.dims()[0], g.dims()[1], g.dims()[2]};
    j["spacing"] = {g.spacing()[0], g.spacing()[1], g.spacing()[2]};
    j["dtype"] = dtype;
    j["order"] = "x-fastest";
    j["payload"] = payload.filename().string();
    {
        std::ofstream out(sidecar);
        if (!out) throw IoError("cannot write " + sidecar.string());
        out << j.dump(2) << '\n';
    }
    std::ofstream out(payload, std::ios::binary);
    if (!out) throw IoError("cannot write " + payload.string());
    out.write(reinterpret_cast<const char*>(g.voxels().data()), static_cast<std::streamsize>(g.size() * sizeof(T)));
    if (!out) throw IoError("write failed for " + payload.string());
}

}  // namespace

Volume load_volume(const fs::path& sidecar)
{
    const Sidecar s = read_sidecar(sidecar, "f32");
    Volume v(s.dims, s.spacing, read_payload<float>(s));
    try {
        validate(v);
    } catch (const Error& e) {
        throw IoError(sidecar.string() + ": " + e.what());
    }
    return v;
}

Mask load_mask(const fs::path& sidecar)
{
    const Sidecar s = read_sidecar(sidecar, "u8");
    Mask m(s.dims, s.spacing, read_payload<std::uint8_t>(s));
    try {
        validate(m);
    } catch (const Error& e) {
        throw IoError(sidecar.string() + ": " + e.what());
    }
    return m;
}

void save_volume(const fs::path& sidecar, const Volume& v) { write_bundle(sidecar, v, "f32"); }
void save_mask(const fs::path& sidecar, const Mask& m) { write_bundle(sidecar, m, "u8"); }

const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

Split split_from_string(const std::string& s)
{
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    throw Error("unknown split '" + s + "'");
}

std::size_t marker_index(const std::string& name)
{
    for (std::size_t i = 0; i < kMarkerCount; ++i) {
        if (name == kMarkerNames[i]) return i;
    }
    throw Error("unknown marker '" + name + "'");
}

std::vector<std::size_t> CohortManifest::indices(Split s) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        if (subjects[i].split == s) out.push_back(i);
    }
    return out;
}

CohortManifest load_manifest(const fs::path& path)
{
    const json j = read_json(path);
    if (!j.is_array()) throw IoError(path.string() + ": manifest must be a JSON array");
    CohortManifest m;
    m.base_dir = path.parent_path();
    try {
        for (const auto& r : j) {
            SubjectRecord s;
            s.id = r.at("id").get<std::string>();
            s.volume = r.at("volume").get<std::string>();
            s.mask = r.at("mask").get<std::string>();
            s.split = split_from_string(r.at("split").get<std::string>());
            if (r.contains("seed") && !r.at("seed").is_null()) s.seed = r.at("seed").get<std::uint64_t>();
            const auto& labels = r.at("labels");
            for (std::size_t k = 0; k < kMarkerCount; ++k) {
                if (!labels.contains(kMarkerNames[k]) || labels[kMarkerNames[k]].is_null()) continue;
                const int v = labels[kMarkerNames[k]].get<int>();
                if (v != 0 && v != 1) throw IoError(path.string() + ": label values must be 0, 1 or null");
                s.labels[k] = v;
            }
            m.subjects.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": invalid manifest: " + e.what());
    }
    return m;
}

void save_manifest(const fs::path& path, const CohortManifest& m)
{
    json j = json::array();
    for (const auto& s : m.subjects) {
        json labels = json::object();
        for (std::size_t k = 0; k < kMarkerCount; ++k) {
            labels[kMarkerNames[k]] = s.labels[k] ? json(*s.labels[k]) : json(nullptr);
        }
        j.push_back({{"id", s.id}, {"volume", s.volume}, {"mask", s.mask}, {"labels", labels},
                     {"split", to_string(s.split)}});
        if (s.seed) j.back()["seed"] = *s.seed;
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

MaskedVolume load_subject(const CohortManifest& m, const SubjectRecord& s)
{
    return MaskedVolume(load_volume(m.volume_path(s)), load_mask(m.mask_path(s)));
}

}  // namespace nrr
