#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nrr/volume.hpp"

namespace nrr {

// A volume bundle is a JSON sidecar
//   {"dims":[nx,ny,nz], "spacing":[sx,sy,sz], "dtype":"f32"|"u8", "order":"x-fastest", "payload":"name.raw"}
// next to a raw little-endian payload. "payload" defaults to the sidecar
// path with its extension replaced by ".raw".

Volume load_volume(const std::filesystem::path& sidecar);
Mask load_mask(const std::filesystem::path& sidecar);

/// Writes `<stem>.json` and `<stem>.raw`; `sidecar` must end in ".json".
void save_volume(const std::filesystem::path& sidecar, const Volume& v);
void save_mask(const std::filesystem::path& sidecar, const Mask& m);

inline constexpr std::array<const char*, 4> kMarkerNames = {"shape", "atrophy", "fat", "senility"};
inline constexpr std::size_t kMarkerCount = kMarkerNames.size();

/// Per-marker label: 0, 1 or missing.
using MarkerLabels = std::array<std::optional<int>, kMarkerCount>;

enum class Split { Train, Test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct SubjectRecord {
    std::string id;
    std::string volume;  // sidecar path, relative to the manifest directory
    std::string mask;
    MarkerLabels labels{};
    Split split = Split::Train;
    std::optional<std::uint64_t> seed;  // generator seed, when the subject is synthetic

    bool operator==(const SubjectRecord&) const = default;
};

struct CohortManifest {
    std::vector<SubjectRecord> subjects;
    std::filesystem::path base_dir;  // directory the relative paths resolve against

    std::filesystem::path volume_path(const SubjectRecord& s) const { return base_dir / s.volume; }
    std::filesystem::path mask_path(const SubjectRecord& s) const { return base_dir / s.mask; }
    std::vector<std::size_t> indices(Split s) const;
};

std::size_t marker_index(const std::string& name);

CohortManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const CohortManifest& m);

MaskedVolume load_subject(const CohortManifest& m, const SubjectRecord& s);

}  // namespace nrr
