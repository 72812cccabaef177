#pragma once

// Volume editing by resampling: every deformation is a pull through a
// per-cell source coordinate field. All operations return new volumes.

#include "cnrf/feature_volume.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cnrf {

/// Source position (continuous grid coordinates of the source volume) for
/// every target cell, in target storage order.
struct CoordField {
    GridDims dims;
    std::vector<double> coords;  // 3 per cell

    CoordField() = default;
    explicit CoordField(GridDims d) : dims(d), coords(d.cells() * 3, 0.0) {}

    Vec3 at(size_t cell) const { return {coords[3 * cell], coords[3 * cell + 1], coords[3 * cell + 2]}; }
    void set(size_t cell, const Vec3& g)
    {
        coords[3 * cell] = g.x();
        coords[3 * cell + 1] = g.y();
        coords[3 * cell + 2] = g.z();
    }
    bool valid() const;

    static CoordField identity(GridDims d);
};

/// Target cell = trilinear sample of `source` at the field coordinate.
/// Out-of-range coordinates give a zero feature flagged empty. Target cells
/// whose stencil is mostly empty in the source are flagged as well. Bounds
/// default to the source's.
FeatureVolume resample(const FeatureVolume& source, const CoordField& field,
                       const std::optional<Aabb>& bounds = std::nullopt);

/// Field over `source`'s bounds (at `out_dims`, default source dims) that
/// makes content appear transformed by the world-space affine M. With a
/// region, cells whose preimage M^-1 p falls inside it pull from there and
/// all other cells keep their identity coordinate; without one, every cell
/// pulls from M^-1 p.
CoordField affine_coord_field(const FeatureVolume& source, const std::optional<Aabb>& region, const Mat4& M,
                              std::optional<GridDims> out_dims = std::nullopt);

/// Copy of the content inside `box`, sampled at the source pitch. The
/// fragment's bounds are `box`.
FeatureVolume extract_region(const FeatureVolume& volume, const Aabb& box);

/// Zeroes and flags empty every cell whose centre lies inside `box`.
FeatureVolume erase_region(const FeatureVolume& volume, const Aabb& box);

enum class PasteMode { Overwrite, FuseMax };

/// Places `fragment` into `target` under the world-space affine M. Only
/// cells covered by non-empty fragment content change. Both volumes must
/// carry the same renderer hash.
FeatureVolume paste(const FeatureVolume& target, const FeatureVolume& fragment, const Mat4& M, PasteMode mode);

/// Per cell, the feature vector of larger L2 norm (masked cells count as 0;
/// ties keep `a`). Requires equal dims, feature length, bounds and hash.
FeatureVolume fuse_max_norm(const FeatureVolume& a, const FeatureVolume& b);

// ---------------------------------------------------------------------------
// Edit scripts

struct EditOp {
    enum class Kind { Resample, Extract, Erase, Paste, Affine, FuseMax };
    Kind kind = Kind::Resample;
    std::string target;
    std::string source;
    std::string result;  // defaults to target
    std::optional<Aabb> aabb;
    Mat4 matrix = Mat4::Identity();
    PasteMode mode = PasteMode::Overwrite;
    std::optional<GridDims> dims;  // resample only
};

struct EditScript {
    std::map<std::string, std::filesystem::path> inputs;
    std::vector<EditOp> ops;
    std::map<std::string, std::filesystem::path> outputs;
};

/// Parses the script JSON. Syntax errors report line and column.
EditScript parse_edit_script(const std::string& text);
EditScript load_edit_script(const std::filesystem::path& path);

using VolumeRegistry = std::map<std::string, FeatureVolume>;

/// Applies the ops in order; results are stored under their names.
void apply_edit_ops(VolumeRegistry& registry, const std::vector<EditOp>& ops);

/// Loads inputs, applies the ops and writes outputs. Relative paths are
/// resolved against `base_dir`.
VolumeRegistry run_edit_script(const EditScript& script, const std::filesystem::path& base_dir);

}  // namespace cnrf
