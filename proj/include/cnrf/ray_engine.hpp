#pragma once

// Cameras, ray sampling and the discretised volume-rendering compositor.
//
// Cameras follow the usual graphics convention: the camera looks down its
// local -z axis with +y up, pixel (px, py) has its centre at (px+0.5, py+0.5)
// and image rows grow downwards.

#include "cnrf/common.hpp"
#include "cnrf/feature_volume.hpp"
#include "cnrf/image.hpp"
#include "cnrf/render_net.hpp"

#include <span>
#include <vector>

namespace cnrf {

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.5, cy = 0.5;
    int width = 1, height = 1;
};

struct Camera {
    Intrinsics intrinsics;
    Mat3 rotation = Mat3::Identity();  // camera-to-world
    Vec3 position = Vec3::Zero();
    double near = 0.1, far = 10.0;

    /// Throws InvalidArgument unless fx, fy > 0, 0 < near < far and the
    /// rotation is orthonormal to 1e-5.
    void validate() const;
    Mat4 camera_to_world() const;
    static Camera from_camera_to_world(const Intrinsics& k, const Mat4& c2w, double near, double far);
    static Camera look_at(const Intrinsics& k, const Vec3& eye, const Vec3& target, const Vec3& up, double near,
                          double far);
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 dir = Vec3(0, 0, -1);
    double t_near = 0.0, t_far = 1.0;

    Vec3 at(double t) const { return origin + t * dir; }
};

Ray generate_ray(const Camera& camera, int px, int py);

/// One sample per equal bin of [t_near, t_far]; the bin midpoint, or a
/// uniform draw inside the bin when `jitter` is set.
std::vector<double> stratified_samples(const Ray& ray, int n, Rng& rng, bool jitter);

inline constexpr double kPdfEpsilon = 1e-5;

/// Inverse-CDF samples from the piecewise-constant density given by
/// `weights + kPdfEpsilon` over the bins of `t_coarse`. Bin i spans the
/// midpoints between t_coarse[i] and its neighbours, with [t_near, t_far]
/// as the outer edges. Returns the new samples merged with t_coarse, sorted.
std::vector<double> importance_samples(std::span<const double> t_coarse, std::span<const double> weights,
                                       double t_near, double t_far, int n, Rng& rng, bool jitter);

/// Per-ray samples and compositing state.
struct SampleBatch {
    std::vector<double> t;
    double t_far = 0.0;
    std::vector<uint8_t> inside;
    std::vector<double> occupancy;
    std::vector<Rgb> rgb;
    std::vector<double> sigma;

    // Written by composite().
    std::vector<double> delta;
    std::vector<double> weights;
    std::vector<double> transmittance;  // T_i, transmittance before sample i
    double residual = 1.0;              // transmittance past the last sample
    bool composited = false;

    size_t size() const { return t.size(); }
    void resize(size_t n);
};

struct PixelEstimate {
    Rgb rgb{0, 0, 0};
    double alpha = 0.0;
};

/// rgb = sum w_i c_i + (1 - sum w_i) * background with
/// w_i = T_i (1 - exp(-sigma_i delta_i)). Throws for unsorted t.
PixelEstimate composite(SampleBatch& batch, const Rgb& background);

struct CompositeGrad {
    std::vector<Rgb> d_rgb;
    std::vector<double> d_sigma;
};

/// Exact gradient of the composited colour with respect to every c_i and
/// sigma_i, contracted with `upstream`.
CompositeGrad composite_backward(const SampleBatch& batch, const Rgb& background, const Rgb& upstream);

struct RenderConfig {
    int n_coarse = 64;
    int n_fine = 64;
    bool jitter = false;
    Rgb background{0, 0, 0};
    double density_noise_std = 0.0;
};

/// Everything one network pass along a ray produced.
template <typename T>
struct TracedRay {
    Ray ray;
    SampleBatch batch;
    std::vector<TrilinearStencil> stencils;  // one per network column
    std::vector<int> columns;                // sample index of each network column
    NetCache<T> cache;
    PixelEstimate pixel;
};

/// Samples the volume at `t`, evaluates the network on the samples that fall
/// inside it (outside samples get sigma = 0) and composites. `noise_rng` is
/// only used when config.density_noise_std > 0.
template <typename T>
void trace_ray(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params, NetKind which,
               const Ray& ray, std::vector<double> t, const RenderConfig& config, Rng* noise_rng,
               TracedRay<T>& out);

/// Back-propagates d(loss)/d(rgb) through compositing, the network and the
/// trilinear lookup. Sample positions are treated as constants.
template <typename T>
void trace_backward(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params,
                    const TracedRay<T>& traced, const RenderConfig& config, const Rgb& d_rgb,
                    std::span<T> param_grad, VolumeGrad<T>* volume_grad);

template <typename T>
struct PixelRender {
    TracedRay<T> coarse;
    TracedRay<T> fine;
};

/// Coarse pass on stratified samples, then the fine pass on the coarse
/// samples merged with importance samples drawn from the coarse weights.
template <typename T>
void render_pixel(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params, const Ray& ray,
                  const RenderConfig& config, Rng& rng, PixelRender<T>& out);

template <typename T>
PixelRender<T> render_pixel(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params,
                            const Ray& ray, const RenderConfig& config, Rng& rng)
{
    PixelRender<T> out;
    render_pixel(volume, params, ray, config, rng, out);
    return out;
}

/// Fine estimate for every pixel. Pixel p uses the stream Rng::derive(seed, p)
/// so the output does not depend on the thread count.
Image render_image(const FeatureVolume& volume, const RenderParams& params, const Camera& camera,
                   const RenderConfig& config, uint64_t seed = 0, int threads = 0);

}  // namespace cnrf
