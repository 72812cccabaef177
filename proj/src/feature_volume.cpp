#include "cnrf/feature_volume.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>

namespace cnrf {

namespace {

constexpr std::string_view kVolumeMagic = "CNRFVOL1";
constexpr std::string_view kMetaMagic = "CNRFMETA";
constexpr size_t kVolumeHeaderBytes = 8 + 4 * 4 + 6 * 4;
// Hard cap on decoded element count; anything larger is treated as a corrupt header.
constexpr uint64_t kMaxElements = uint64_t(1) << 32;

}  // namespace

template <typename T>
BasicFeatureVolume<T>::BasicFeatureVolume(GridDims dims, int feat_len, Aabb bounds)
    : dims_(dims), feat_len_(feat_len), bounds_(bounds)
{
    if (dims.x < 2 || dims.y < 2 || dims.z < 2)
        throw InvalidArgument("volume needs at least 2 cells per axis");
    if (feat_len < 1) throw InvalidArgument("feature length must be positive");
    if (!bounds.valid()) throw InvalidArgument("volume bounds must satisfy min < max");
    data_.assign(dims.cells() * size_t(feat_len), T(0));
}

template <typename T>
void BasicFeatureVolume<T>::set_bounds(const Aabb& b)
{
    if (!b.valid()) throw InvalidArgument("volume bounds must satisfy min < max");
    bounds_ = b;
}

template <typename T>
Vec3 BasicFeatureVolume<T>::to_grid(const Vec3& p) const
{
    Vec3 g;
    for (int a = 0; a < 3; ++a)
        g[a] = (p[a] - bounds_.min[a]) / (bounds_.max[a] - bounds_.min[a]) * double(dims_[a] - 1);
    return g;
}

template <typename T>
Vec3 BasicFeatureVolume<T>::to_world(const Vec3& g) const
{
    Vec3 p;
    for (int a = 0; a < 3; ++a)
        p[a] = bounds_.min[a] + g[a] / double(dims_[a] - 1) * (bounds_.max[a] - bounds_.min[a]);
    return p;
}

template <typename T>
Vec3 BasicFeatureVolume<T>::pitch() const
{
    Vec3 h;
    for (int a = 0; a < 3; ++a) h[a] = (bounds_.max[a] - bounds_.min[a]) / double(dims_[a] - 1);
    return h;
}

template <typename T>
void BasicFeatureVolume<T>::set_empty(uint32_t cell, bool e)
{
    if (empty_.empty()) {
        if (!e) return;
        empty_.assign(cell_count(), 0);
    }
    empty_[cell] = e ? 1 : 0;
}

template <typename T>
void BasicFeatureVolume<T>::set_empty_mask(std::vector<uint8_t> mask)
{
    if (!mask.empty() && mask.size() != cell_count())
        throw InvalidArgument("empty-mask size does not match cell count");
    empty_ = std::move(mask);
}

template <typename T>
size_t BasicFeatureVolume<T>::empty_count() const
{
    return size_t(std::count_if(empty_.begin(), empty_.end(), [](uint8_t e) { return e != 0; }));
}

template <typename T>
TrilinearStencil BasicFeatureVolume<T>::stencil_at_grid(const Vec3& g) const
{
    TrilinearStencil s;
    int base[3];
    double frac[3];
    for (int a = 0; a < 3; ++a) {
        const double hi = double(dims_[a] - 1);
        if (!std::isfinite(g[a]) || g[a] < 0.0 || g[a] > hi) return s;
        int i0 = std::min(int(std::floor(g[a])), dims_[a] - 2);
        base[a] = i0;
        frac[a] = g[a] - double(i0);
    }
    for (int c = 0; c < 8; ++c) {
        const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
        s.cell[c] = cell_index(base[0] + dx, base[1] + dy, base[2] + dz);
        s.weight[c] = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) *
                      (dz ? frac[2] : 1.0 - frac[2]);
    }
    s.valid = true;
    return s;
}

template <typename T>
double BasicFeatureVolume<T>::occupancy(const TrilinearStencil& s) const
{
    if (!s.valid) return 0.0;
    if (empty_.empty()) return 1.0;
    double occ = 0.0;
    for (int c = 0; c < 8; ++c)
        if (!empty_[s.cell[c]]) occ += s.weight[c];
    return occ;
}

template <typename T>
void BasicFeatureVolume<T>::blend(const TrilinearStencil& s, std::span<T> out) const
{
    std::fill(out.begin(), out.end(), T(0));
    if (!s.valid) return;
    for (int c = 0; c < 8; ++c) {
        const T w = T(s.weight[c]);
        if (w == T(0)) continue;
        const T* f = data_.data() + size_t(s.cell[c]) * feat_len_;
        for (int n = 0; n < feat_len_; ++n) out[n] += w * f[n];
    }
}

template <typename T>
bool BasicFeatureVolume<T>::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool BasicFeatureVolume<T>::identical(const BasicFeatureVolume& o) const
{
    if (!(dims_ == o.dims_) || feat_len_ != o.feat_len_ || !(bounds_ == o.bounds_)) return false;
    if (renderer_hash_ != o.renderer_hash_ || empty_ != o.empty_) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
}

template class BasicFeatureVolume<float>;
template class BasicFeatureVolume<double>;

// ---------------------------------------------------------------------------

template <typename T>
VolumeGrad<T>::VolumeGrad(GridDims dims, int feat_len)
    : dims_(dims), feat_len_(feat_len), data_(dims.cells() * size_t(feat_len), T(0)), flags_(dims.cells(), 0)
{
}

template <typename T>
void VolumeGrad<T>::add(uint32_t cell, double weight, std::span<const T> upstream)
{
    touch(cell);
    T* g = data_.data() + size_t(cell) * feat_len_;
    const T w = T(weight);
    for (int n = 0; n < feat_len_; ++n) g[n] += w * upstream[n];
}

template <typename T>
void VolumeGrad<T>::merge(const VolumeGrad& other)
{
    if (!(other.dims_ == dims_) || other.feat_len_ != feat_len_)
        throw InvalidArgument("gradient buffers differ in shape");
    for (uint32_t c : other.touched_) add(c, 1.0, other.cell(c));
}

template <typename T>
void VolumeGrad<T>::scale(T s)
{
    for (uint32_t c : touched_) {
        T* g = data_.data() + size_t(c) * feat_len_;
        for (int n = 0; n < feat_len_; ++n) g[n] *= s;
    }
}

template <typename T>
void VolumeGrad<T>::clear()
{
    for (uint32_t c : touched_) {
        std::fill_n(data_.begin() + ptrdiff_t(size_t(c) * feat_len_), feat_len_, T(0));
        flags_[c] = 0;
    }
    touched_.clear();
}

template class VolumeGrad<float>;
template class VolumeGrad<double>;

// ---------------------------------------------------------------------------

FeatureVolume new_volume(GridDims dims, int feat_len, const Aabb& bounds, double init_scale, uint64_t seed)
{
    if (dims.x < 1 || dims.y < 1 || dims.z < 1) throw InvalidArgument("zero-sized volume axis");
    if (init_scale < 0.0 || !std::isfinite(init_scale)) throw InvalidArgument("init_scale must be >= 0");
    FeatureVolume v(dims, feat_len, bounds);
    if (init_scale > 0.0) {
        Rng rng(seed);
        for (float& x : v.data()) x = float(rng.uniform(-init_scale, init_scale));
    }
    return v;
}

template <typename T>
SampledFeature sample(const BasicFeatureVolume<T>& volume, const Vec3& p_world, std::span<T> out)
{
    const TrilinearStencil s = volume.stencil_at_world(p_world);
    volume.blend(s, out);
    return {s.valid, volume.occupancy(s)};
}

template <typename T>
void sample_backward(const TrilinearStencil& stencil, std::span<const T> upstream, VolumeGrad<T>& grad)
{
    if (!stencil.valid) return;
    for (int c = 0; c < 8; ++c)
        if (stencil.weight[c] != 0.0) grad.add(stencil.cell[c], stencil.weight[c], upstream);
}

template <typename T>
void sample_backward(const BasicFeatureVolume<T>& volume, const Vec3& p_world, std::span<const T> upstream,
                     VolumeGrad<T>& grad)
{
    sample_backward(volume.stencil_at_world(p_world), upstream, grad);
}

template <typename T>
BasicFeatureVolume<T> upsample_2x(const BasicFeatureVolume<T>& volume)
{
    const GridDims in = volume.dims();
    const GridDims od = in.doubled();
    BasicFeatureVolume<T> out(od, volume.feat_len(), volume.bounds());
    out.set_renderer_hash(volume.renderer_hash());
    for (int k = 0; k < od.z; ++k)
        for (int j = 0; j < od.y; ++j)
            for (int i = 0; i < od.x; ++i) {
                // Output cell centre expressed in input grid coordinates.
                const Vec3 g(double(i) * (in.x - 1) / (od.x - 1), double(j) * (in.y - 1) / (od.y - 1),
                             double(k) * (in.z - 1) / (od.z - 1));
                const TrilinearStencil s = volume.stencil_at_grid(g);
                const uint32_t cell = out.cell_index(i, j, k);
                volume.blend(s, out.feature(cell));
                if (volume.has_empty_mask() && volume.occupancy(s) < 0.5) out.set_empty(cell, true);
            }
    return out;
}

VolumeRegion tv_region_sample(GridDims dims, Rng& rng)
{
    if (dims.x < 4 || dims.y < 4 || dims.z < 4) return {{0, 0, 0}, dims};
    VolumeRegion r;
    r.size = {(dims.x + 3) / 4, (dims.y + 3) / 4, (dims.z + 3) / 4};
    r.offset.i = int(rng.below(uint64_t(dims.x - r.size.x + 1)));
    r.offset.j = int(rng.below(uint64_t(dims.y - r.size.y + 1)));
    r.offset.k = int(rng.below(uint64_t(dims.z - r.size.z + 1)));
    return r;
}

template <typename T>
double tv_loss(const BasicFeatureVolume<T>& volume, const VolumeRegion& region, VolumeGrad<T>* grad, double weight)
{
    const GridDims d = volume.dims();
    const int F = volume.feat_len();
    if (region.size.x < 1 || region.size.y < 1 || region.size.z < 1 || region.offset.i < 0 ||
        region.offset.j < 0 || region.offset.k < 0 || region.offset.i + region.size.x > d.x ||
        region.offset.j + region.size.y > d.y || region.offset.k + region.size.z > d.z)
        throw InvalidArgument("TV region outside volume");

    const double norm = 1.0 / double(region.cells());
    double total = 0.0;
    std::vector<T> diff(size_t(3) * F);
    std::vector<T> g(F);
    for (int k = region.offset.k; k < region.offset.k + region.size.z; ++k)
        for (int j = region.offset.j; j < region.offset.j + region.size.y; ++j)
            for (int i = region.offset.i; i < region.offset.i + region.size.x; ++i) {
                const uint32_t c = volume.cell_index(i, j, k);
                const auto center = volume.feature(c);
                std::array<int64_t, 3> nb{-1, -1, -1};
                if (i + 1 < d.x) nb[0] = volume.cell_index(i + 1, j, k);
                if (j + 1 < d.y) nb[1] = volume.cell_index(i, j + 1, k);
                if (k + 1 < d.z) nb[2] = volume.cell_index(i, j, k + 1);
                double sq = 0.0;
                bool any = false;
                for (int a = 0; a < 3; ++a) {
                    if (nb[a] < 0) continue;
                    any = true;
                    const auto n = volume.feature(uint32_t(nb[a]));
                    for (int f = 0; f < F; ++f) {
                        const T dlt = n[f] - center[f];
                        diff[size_t(a) * F + f] = dlt;
                        sq += double(dlt) * double(dlt);
                    }
                }
                if (!any) continue;
                const double root = std::sqrt(sq + kTvEpsilon);
                total += root;
                if (!grad) continue;
                const double scale = weight * norm / root;
                std::fill(g.begin(), g.end(), T(0));
                for (int a = 0; a < 3; ++a) {
                    if (nb[a] < 0) continue;
                    std::span<const T> da(diff.data() + size_t(a) * F, size_t(F));
                    grad->add(uint32_t(nb[a]), scale, da);
                    for (int f = 0; f < F; ++f) g[f] -= da[f];
                }
                grad->add(c, scale, std::span<const T>(g));
            }
    return weight * total * norm;
}

template SampledFeature sample<float>(const FeatureVolume&, const Vec3&, std::span<float>);
template SampledFeature sample<double>(const FeatureVolumeD&, const Vec3&, std::span<double>);
template void sample_backward<float>(const TrilinearStencil&, std::span<const float>, VolumeGrad<float>&);
template void sample_backward<double>(const TrilinearStencil&, std::span<const double>, VolumeGrad<double>&);
template void sample_backward<float>(const FeatureVolume&, const Vec3&, std::span<const float>, VolumeGrad<float>&);
template void sample_backward<double>(const FeatureVolumeD&, const Vec3&, std::span<const double>,
                                      VolumeGrad<double>&);
template FeatureVolume upsample_2x<float>(const FeatureVolume&);
template FeatureVolumeD upsample_2x<double>(const FeatureVolumeD&);
template double tv_loss<float>(const FeatureVolume&, const VolumeRegion&, VolumeGrad<float>*, double);
template double tv_loss<double>(const FeatureVolumeD&, const VolumeRegion&, VolumeGrad<double>*, double);

// ---------------------------------------------------------------------------
// File format: "CNRFVOL1", u32 W H D F, f32 bounds min xyz / max xyz, then
// W*H*D*F f32 features. An optional trailer ("CNRFMETA", u64 renderer hash,
// u8 mask flag, mask bytes) follows the features.

std::vector<uint8_t> encode_volume(const FeatureVolume& v)
{
    detail::ByteWriter w;
    w.magic(kVolumeMagic);
    w.u32(uint32_t(v.dims().x));
    w.u32(uint32_t(v.dims().y));
    w.u32(uint32_t(v.dims().z));
    w.u32(uint32_t(v.feat_len()));
    for (int a = 0; a < 3; ++a) w.f32(float(v.bounds().min[a]));
    for (int a = 0; a < 3; ++a) w.f32(float(v.bounds().max[a]));
    for (float x : v.data()) w.f32(x);
    if (v.renderer_hash() != 0 || v.has_empty_mask()) {
        w.magic(kMetaMagic);
        w.u64(v.renderer_hash());
        w.u8(v.has_empty_mask() ? 1 : 0);
        if (v.has_empty_mask()) w.bytes(v.empty_mask().data(), v.empty_mask().size());
    }
    return std::move(w.buffer());
}

FeatureVolume decode_volume(const std::vector<uint8_t>& bytes)
{
    detail::ByteReader r(bytes);
    if (bytes.size() < kVolumeMagic.size())
        throw FormatError(FormatErrorKind::Truncated, "magic", "volume file shorter than its magic");
    if (!r.magic_matches(kVolumeMagic))
        throw FormatError(FormatErrorKind::BadMagic, "magic", "not a feature volume file");
    const char* names[4] = {"W", "H", "D", "F"};
    uint32_t dim[4];
    for (int n = 0; n < 4; ++n) {
        dim[n] = r.u32(names[n]);
        if (dim[n] == 0) throw FormatError(FormatErrorKind::Corrupt, names[n], "zero dimension");
    }
    for (int n = 0; n < 3; ++n)
        if (dim[n] < 2) throw FormatError(FormatErrorKind::Corrupt, names[n], "axis needs at least 2 cells");
    uint64_t elements = 1;
    for (int n = 0; n < 4; ++n) {
        if (elements > kMaxElements / dim[n])
            throw FormatError(FormatErrorKind::DimensionOverflow, names[n], "W*H*D*F exceeds the supported size");
        elements *= dim[n];
    }
    if (elements > kMaxElements)
        throw FormatError(FormatErrorKind::DimensionOverflow, "W*H*D*F", "W*H*D*F exceeds the supported size");

    Aabb b;
    const char* bnames[6] = {"bounds.min.x", "bounds.min.y", "bounds.min.z",
                             "bounds.max.x", "bounds.max.y", "bounds.max.z"};
    for (int a = 0; a < 3; ++a) b.min[a] = r.f32(bnames[a]);
    for (int a = 0; a < 3; ++a) b.max[a] = r.f32(bnames[3 + a]);
    if (!b.valid()) throw FormatError(FormatErrorKind::Corrupt, "bounds", "bounds must be finite with min < max");

    const uint64_t payload = elements * 4;
    if (r.remaining() < payload)
        throw FormatError(FormatErrorKind::Truncated, "features",
                          "expected " + std::to_string(kVolumeHeaderBytes + payload) + " bytes, file has " +
                              std::to_string(bytes.size()));

    FeatureVolume v(GridDims{int(dim[0]), int(dim[1]), int(dim[2])}, int(dim[3]), b);
    auto data = v.data();
    for (size_t n = 0; n < data.size(); ++n) {
        data[n] = r.f32("features");
        if (!std::isfinite(data[n]))
            throw FormatError(FormatErrorKind::Corrupt, "features", "non-finite feature value");
    }
    if (r.remaining() == 0) return v;

    if (!r.magic_matches(kMetaMagic))
        throw FormatError(FormatErrorKind::Corrupt, "metadata", "unexpected bytes after feature block");
    v.set_renderer_hash(r.u64("metadata.renderer_hash"));
    const uint8_t has_mask = r.u8("metadata.mask_flag");
    if (has_mask > 1) throw FormatError(FormatErrorKind::Corrupt, "metadata.mask_flag", "invalid mask flag");
    if (has_mask) {
        const uint8_t* m = r.take(v.cell_count(), "metadata.mask");
        std::vector<uint8_t> mask(m, m + v.cell_count());
        for (uint8_t e : mask)
            if (e > 1) throw FormatError(FormatErrorKind::Corrupt, "metadata.mask", "invalid mask byte");
        v.set_empty_mask(std::move(mask));
    }
    if (r.remaining() != 0)
        throw FormatError(FormatErrorKind::Corrupt, "metadata", "trailing bytes after metadata");
    return v;
}

void save_volume(const FeatureVolume& volume, const std::filesystem::path& path)
{
    detail::write_file_bytes(path, encode_volume(volume));
}

FeatureVolume load_volume(const std::filesystem::path& path)
{
    return decode_volume(detail::read_file_bytes(path));
}

}  // namespace cnrf
