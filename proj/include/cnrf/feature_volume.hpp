#pragma once

// Dense learned feature grid.
//
// Geometry: cell centres sit at integer grid coordinates 0..axis-1 and are
// mapped affinely onto `bounds`, so bounds.min is the centre of cell (0,0,0)
// and bounds.max the centre of the last cell. Storage is one contiguous
// F-block per cell, cells ordered with x fastest, then y, then z.

#include "cnrf/common.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace cnrf {

struct GridDims {
    int x = 0, y = 0, z = 0;

    size_t cells() const { return size_t(x) * size_t(y) * size_t(z); }
    int operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
    bool operator==(const GridDims&) const = default;
    GridDims doubled() const { return {2 * x, 2 * y, 2 * z}; }
    static GridDims cube(int n) { return {n, n, n}; }
};

struct CellIndex {
    int i = 0, j = 0, k = 0;
    bool operator==(const CellIndex&) const = default;
};

/// Contiguous box of cells.
struct VolumeRegion {
    CellIndex offset;
    GridDims size;
    size_t cells() const { return size.cells(); }
};

/// The eight corner cells and weights of a trilinear lookup. `valid` is
/// false when the point lies outside the grid.
struct TrilinearStencil {
    std::array<uint32_t, 8> cell{};
    std::array<double, 8> weight{};
    bool valid = false;
};

template <typename T>
class BasicFeatureVolume {
public:
    using Scalar = T;

    BasicFeatureVolume() = default;
    /// Zero-filled volume. Throws InvalidArgument for axes smaller than 2,
    /// non-positive feature length or an inverted box.
    BasicFeatureVolume(GridDims dims, int feat_len, Aabb bounds);

    const GridDims& dims() const { return dims_; }
    int feat_len() const { return feat_len_; }
    const Aabb& bounds() const { return bounds_; }
    void set_bounds(const Aabb& b);
    size_t cell_count() const { return dims_.cells(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }

    uint32_t cell_index(int i, int j, int k) const
    {
        return uint32_t((size_t(k) * dims_.y + j) * dims_.x + i);
    }
    CellIndex cell_coords(uint32_t cell) const
    {
        int i = int(cell % dims_.x);
        int j = int((cell / dims_.x) % dims_.y);
        int k = int(cell / (size_t(dims_.x) * dims_.y));
        return {i, j, k};
    }
    std::span<T> feature(uint32_t cell) { return {data_.data() + size_t(cell) * feat_len_, size_t(feat_len_)}; }
    std::span<const T> feature(uint32_t cell) const
    {
        return {data_.data() + size_t(cell) * feat_len_, size_t(feat_len_)};
    }
    std::span<T> feature(int i, int j, int k) { return feature(cell_index(i, j, k)); }
    std::span<const T> feature(int i, int j, int k) const { return feature(cell_index(i, j, k)); }

    /// World position -> continuous grid coordinate.
    Vec3 to_grid(const Vec3& p) const;
    Vec3 to_world(const Vec3& g) const;
    Vec3 cell_center(int i, int j, int k) const { return to_world(Vec3(i, j, k)); }
    /// World distance between neighbouring cell centres, per axis.
    Vec3 pitch() const;

    // Empty-mask: cells flagged empty render with zero density regardless of
    // what the network makes of their (zero) feature.
    bool has_empty_mask() const { return !empty_.empty(); }
    bool is_empty(uint32_t cell) const { return !empty_.empty() && empty_[cell] != 0; }
    void set_empty(uint32_t cell, bool e);
    void clear_empty_mask() { empty_.clear(); }
    std::span<const uint8_t> empty_mask() const { return empty_; }
    void set_empty_mask(std::vector<uint8_t> mask);
    size_t empty_count() const;

    /// Content hash of the renderer this volume was trained against; 0 when unknown.
    uint64_t renderer_hash() const { return renderer_hash_; }
    void set_renderer_hash(uint64_t h) { renderer_hash_ = h; }

    TrilinearStencil stencil_at_grid(const Vec3& g) const;
    TrilinearStencil stencil_at_world(const Vec3& p) const { return stencil_at_grid(to_grid(p)); }

    /// Sum of stencil weights on non-empty cells; 1 when no mask is present.
    double occupancy(const TrilinearStencil& s) const;

    /// Writes the trilinear blend into `out` (length F).
    void blend(const TrilinearStencil& s, std::span<T> out) const;

    bool all_finite() const;

    /// Bit-for-bit equality of shape, bounds, features, mask and hash.
    bool identical(const BasicFeatureVolume& o) const;

    template <typename U>
    BasicFeatureVolume<U> cast() const
    {
        BasicFeatureVolume<U> out(dims_, feat_len_, bounds_);
        auto dst = out.data();
        for (size_t n = 0; n < data_.size(); ++n) dst[n] = static_cast<U>(data_[n]);
        if (has_empty_mask()) out.set_empty_mask(empty_);
        out.set_renderer_hash(renderer_hash_);
        return out;
    }

private:
    GridDims dims_;
    int feat_len_ = 0;
    Aabb bounds_;
    std::vector<T> data_;
    std::vector<uint8_t> empty_;
    uint64_t renderer_hash_ = 0;
};

using FeatureVolume = BasicFeatureVolume<float>;
using FeatureVolumeD = BasicFeatureVolume<double>;

/// Gradient buffer mirroring a volume. Dense storage with a touched-cell
/// list so clears, merges and sparse optimizer updates only visit cells that
/// actually received gradient.
template <typename T>
class VolumeGrad {
public:
    VolumeGrad() = default;
    VolumeGrad(GridDims dims, int feat_len);

    template <typename V>
    static VolumeGrad like(const BasicFeatureVolume<V>& v)
    {
        return VolumeGrad(v.dims(), v.feat_len());
    }

    const GridDims& dims() const { return dims_; }
    int feat_len() const { return feat_len_; }

    /// grad[cell] += weight * upstream
    void add(uint32_t cell, double weight, std::span<const T> upstream);
    void add(uint32_t cell, std::span<const T> upstream) { add(cell, 1.0, upstream); }

    std::span<const T> cell(uint32_t c) const
    {
        return {data_.data() + size_t(c) * feat_len_, size_t(feat_len_)};
    }
    std::span<const T> data() const { return data_; }
    const std::vector<uint32_t>& touched() const { return touched_; }
    bool is_touched(uint32_t c) const { return flags_[c] != 0; }

    /// this += other, visiting other's cells in its touch order.
    void merge(const VolumeGrad& other);
    void scale(T s);
    void clear();

private:
    void touch(uint32_t c)
    {
        if (!flags_[c]) {
            flags_[c] = 1;
            touched_.push_back(c);
        }
    }

    GridDims dims_;
    int feat_len_ = 0;
    std::vector<T> data_;
    std::vector<uint8_t> flags_;
    std::vector<uint32_t> touched_;
};

struct SampledFeature {
    bool inside = false;
    double occupancy = 0.0;
};

// ---------------------------------------------------------------------------
// Operations

/// Volume with features i.i.d. uniform in [-init_scale, init_scale].
FeatureVolume new_volume(GridDims dims, int feat_len, const Aabb& bounds, double init_scale, uint64_t seed);

/// Trilinear lookup at a world position. Writes zeros and reports
/// inside=false outside the span of cell centres.
template <typename T>
SampledFeature sample(const BasicFeatureVolume<T>& volume, const Vec3& p_world, std::span<T> out);

/// Adjoint of `sample`: scatters the trilinear weights times `upstream`
/// into `grad`. No-op outside the grid.
template <typename T>
void sample_backward(const BasicFeatureVolume<T>& volume, const Vec3& p_world, std::span<const T> upstream,
                     VolumeGrad<T>& grad);

template <typename T>
void sample_backward(const TrilinearStencil& stencil, std::span<const T> upstream, VolumeGrad<T>& grad);

/// Doubles the resolution over unchanged bounds by sampling the input at
/// each output cell centre.
template <typename T>
BasicFeatureVolume<T> upsample_2x(const BasicFeatureVolume<T>& volume);

/// Random contiguous region of ceil(dims/4) cells per axis, or the whole
/// volume when any axis is below 4.
VolumeRegion tv_region_sample(GridDims dims, Rng& rng);

inline constexpr double kTvEpsilon = 1e-8;

/// Smoothed isotropic total variation over `region`, normalised by the
/// region's cell count. Adds weight * dLoss/dV into `grad` when non-null.
template <typename T>
double tv_loss(const BasicFeatureVolume<T>& volume, const VolumeRegion& region, VolumeGrad<T>* grad,
               double weight = 1.0);

void save_volume(const FeatureVolume& volume, const std::filesystem::path& path);
FeatureVolume load_volume(const std::filesystem::path& path);
std::vector<uint8_t> encode_volume(const FeatureVolume& volume);
FeatureVolume decode_volume(const std::vector<uint8_t>& bytes);

}  // namespace cnrf
