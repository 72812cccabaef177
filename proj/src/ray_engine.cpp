#include "cnrf/ray_engine.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cnrf {

void Camera::validate() const
{
    if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
    if (intrinsics.width < 1 || intrinsics.height < 1) throw InvalidArgument("image size must be positive");
    if (!(near > 0.0) || !(far > near)) throw InvalidArgument("camera needs 0 < near < far");
    if (!rotation.allFinite() || !position.allFinite()) throw InvalidArgument("camera pose is not finite");
    if ((rotation.transpose() * rotation - Mat3::Identity()).norm() > 1e-5)
        throw InvalidArgument("camera rotation is not orthonormal");
}

Mat4 Camera::camera_to_world() const
{
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = position;
    return m;
}

Camera Camera::from_camera_to_world(const Intrinsics& k, const Mat4& c2w, double near, double far)
{
    Camera c;
    c.intrinsics = k;
    c.rotation = c2w.topLeftCorner<3, 3>();
    c.position = c2w.topRightCorner<3, 1>();
    c.near = near;
    c.far = far;
    return c;
}

Camera Camera::look_at(const Intrinsics& k, const Vec3& eye, const Vec3& target, const Vec3& up, double near,
                       double far)
{
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitX());
    right.normalize();
    const Vec3 cam_up = right.cross(forward);
    Camera c;
    c.intrinsics = k;
    c.rotation.col(0) = right;
    c.rotation.col(1) = cam_up;
    c.rotation.col(2) = -forward;
    c.position = eye;
    c.near = near;
    c.far = far;
    return c;
}

Ray generate_ray(const Camera& camera, int px, int py)
{
    const Intrinsics& k = camera.intrinsics;
    if (px < 0 || px >= k.width || py < 0 || py >= k.height) throw InvalidArgument("pixel outside the image");
    const Vec3 local((px + 0.5 - k.cx) / k.fx, -(py + 0.5 - k.cy) / k.fy, -1.0);
    Ray r;
    r.origin = camera.position;
    r.dir = (camera.rotation * local).normalized();
    r.t_near = camera.near;
    r.t_far = camera.far;
    return r;
}

std::vector<double> stratified_samples(const Ray& ray, int n, Rng& rng, bool jitter)
{
    if (n < 1) throw InvalidArgument("need at least one sample");
    std::vector<double> t(static_cast<size_t>(n));
    const double step = (ray.t_far - ray.t_near) / n;
    for (int i = 0; i < n; ++i) {
        const double u = jitter ? rng.uniform() : 0.5;
        t[size_t(i)] = ray.t_near + (i + u) * step;
    }
    return t;
}

std::vector<double> importance_samples(std::span<const double> t_coarse, std::span<const double> weights,
                                       double t_near, double t_far, int n, Rng& rng, bool jitter)
{
    const size_t m = t_coarse.size();
    if (m == 0 || weights.size() != m) throw InvalidArgument("weights must match the coarse samples");
    if (n < 0) throw InvalidArgument("negative sample count");

    std::vector<double> edges(m + 1);
    edges[0] = t_near;
    for (size_t i = 1; i < m; ++i) edges[i] = 0.5 * (t_coarse[i - 1] + t_coarse[i]);
    edges[m] = t_far;

    std::vector<double> cdf(m + 1, 0.0);
    for (size_t i = 0; i < m; ++i) {
        if (!(weights[i] >= 0.0)) throw InvalidArgument("weights must be non-negative");
        cdf[i + 1] = cdf[i] + weights[i] + kPdfEpsilon;
    }
    const double total = cdf[m];
    for (double& c : cdf) c /= total;
    cdf[m] = 1.0;

    std::vector<double> out(t_coarse.begin(), t_coarse.end());
    out.reserve(m + size_t(n));
    for (int j = 0; j < n; ++j) {
        const double u = (j + (jitter ? rng.uniform() : 0.5)) / n;
        size_t b = size_t(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        b = std::clamp<size_t>(b, 1, m) - 1;
        const double mass = cdf[b + 1] - cdf[b];
        const double frac = mass > 0.0 ? std::clamp((u - cdf[b]) / mass, 0.0, 1.0) : 0.5;
        out.push_back(edges[b] + frac * (edges[b + 1] - edges[b]));
    }
    std::sort(out.begin(), out.end());
    return out;
}

void SampleBatch::resize(size_t n)
{
    t.resize(n);
    inside.assign(n, 0);
    occupancy.assign(n, 0.0);
    rgb.assign(n, Rgb{0, 0, 0});
    sigma.assign(n, 0.0);
    delta.clear();
    weights.clear();
    transmittance.clear();
    residual = 1.0;
    composited = false;
}

PixelEstimate composite(SampleBatch& b, const Rgb& background)
{
    const size_t n = b.t.size();
    if (b.sigma.size() != n || b.rgb.size() != n) throw InvalidArgument("sample batch arrays disagree in length");
    for (size_t i = 1; i < n; ++i)
        if (!(b.t[i] >= b.t[i - 1])) throw InvalidArgument("sample t-values are not sorted");
    b.delta.resize(n);
    b.weights.resize(n);
    b.transmittance.resize(n);
    double trans = 1.0;
    PixelEstimate px;
    for (size_t i = 0; i < n; ++i) {
        const double next = i + 1 < n ? b.t[i + 1] : b.t_far;
        b.delta[i] = std::max(next - b.t[i], 0.0);
        const double tau = b.sigma[i] * b.delta[i];
        const double alpha = -std::expm1(-tau);
        b.transmittance[i] = trans;
        b.weights[i] = trans * alpha;
        trans *= std::exp(-tau);
        for (int c = 0; c < 3; ++c) px.rgb[size_t(c)] += b.weights[i] * b.rgb[i][size_t(c)];
        px.alpha += b.weights[i];
    }
    b.residual = trans;
    for (int c = 0; c < 3; ++c) px.rgb[size_t(c)] += (1.0 - px.alpha) * background[size_t(c)];
    b.composited = true;
    return px;
}

CompositeGrad composite_backward(const SampleBatch& b, const Rgb& background, const Rgb& upstream)
{
    if (!b.composited || b.weights.size() != b.t.size())
        throw InvalidArgument("composite_backward needs a composited batch");
    const size_t n = b.t.size();
    auto dot = [&](const Rgb& c) { return c[0] * upstream[0] + c[1] * upstream[1] + c[2] * upstream[2]; };
    CompositeGrad g;
    g.d_rgb.resize(n);
    g.d_sigma.resize(n);
    // behind = sum_{i>k} w_i (c_i . u) + T_N (bg . u)
    double behind = b.residual * dot(background);
    for (size_t k = n; k-- > 0;) {
        for (int c = 0; c < 3; ++c) g.d_rgb[k][size_t(c)] = b.weights[k] * upstream[size_t(c)];
        const double t_next = b.transmittance[k] - b.weights[k];
        g.d_sigma[k] = b.delta[k] * (t_next * dot(b.rgb[k]) - behind);
        behind += b.weights[k] * dot(b.rgb[k]);
    }
    return g;
}

// ---------------------------------------------------------------------------

template <typename T>
void trace_ray(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params, NetKind which,
               const Ray& ray, std::vector<double> t, const RenderConfig& config, Rng* noise_rng,
               TracedRay<T>& out)
{
    if (volume.feat_len() != params.descriptor.feat_len)
        throw InvalidArgument("volume feature length does not match the network");
    const size_t n = t.size();
    out.ray = ray;
    out.batch.resize(n);
    out.batch.t = std::move(t);
    out.batch.t_far = ray.t_far;
    out.stencils.clear();
    out.columns.clear();
    for (size_t i = 0; i < n; ++i) {
        const TrilinearStencil s = volume.stencil_at_world(ray.at(out.batch.t[i]));
        const double occ = volume.occupancy(s);
        if (!s.valid || occ <= 0.0) continue;
        out.batch.inside[i] = 1;
        out.batch.occupancy[i] = occ;
        out.stencils.push_back(s);
        out.columns.push_back(int(i));
    }

    const Eigen::Index cols = Eigen::Index(out.columns.size());
    if (cols > 0) {
        const int F = volume.feat_len();
        Matrix<T> features(F, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            volume.blend(out.stencils[size_t(c)], std::span<T>(features.col(c).data(), size_t(F)));
        const auto enc = pos_encode(ray.dir, params.descriptor.enc_levels);
        std::vector<double> noise;
        if (config.density_noise_std > 0.0 && noise_rng) {
            noise.resize(size_t(cols));
            for (double& x : noise) x = config.density_noise_std * noise_rng->normal();
        }
        forward(params, which, features, enc, out.cache, noise);
        for (Eigen::Index c = 0; c < cols; ++c) {
            const size_t i = size_t(out.columns[size_t(c)]);
            out.batch.sigma[i] = out.batch.occupancy[i] * double(out.cache.sigma(0, c));
            for (int k = 0; k < 3; ++k) out.batch.rgb[i][size_t(k)] = double(out.cache.rgb(k, c));
        }
    } else {
        out.cache.invalidate();
    }
    out.pixel = composite(out.batch, config.background);
}

template <typename T>
void trace_backward(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params,
                    const TracedRay<T>& traced, const RenderConfig& config, const Rgb& d_rgb,
                    std::span<T> param_grad, VolumeGrad<T>* volume_grad)
{
    const Eigen::Index cols = Eigen::Index(traced.columns.size());
    if (cols == 0) return;
    const CompositeGrad cg = composite_backward(traced.batch, config.background, d_rgb);
    Matrix<T> up_rgb(3, cols), up_sigma(1, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        const size_t i = size_t(traced.columns[size_t(c)]);
        for (int k = 0; k < 3; ++k) up_rgb(k, c) = T(cg.d_rgb[i][size_t(k)]);
        up_sigma(0, c) = T(cg.d_sigma[i] * traced.batch.occupancy[i]);
    }
    const Matrix<T> d_feat = backward(params, traced.cache, up_rgb, up_sigma, param_grad);
    if (!volume_grad) return;
    const size_t F = size_t(volume.feat_len());
    for (Eigen::Index c = 0; c < cols; ++c)
        sample_backward(traced.stencils[size_t(c)], std::span<const T>(d_feat.col(c).data(), F), *volume_grad);
}

template <typename T>
void render_pixel(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params, const Ray& ray,
                  const RenderConfig& config, Rng& rng, PixelRender<T>& out)
{
    auto t_coarse = stratified_samples(ray, config.n_coarse, rng, config.jitter);
    trace_ray(volume, params, NetKind::Coarse, ray, t_coarse, config, &rng, out.coarse);
    // Non-finite weights (a diverged model) keep the coarse positions so the
    // caller sees a NaN estimate rather than a sampling error.
    bool finite = true;
    for (double w : out.coarse.batch.weights) finite = finite && std::isfinite(w);
    auto t_fine = config.n_fine > 0 && finite ? importance_samples(t_coarse, out.coarse.batch.weights, ray.t_near, ray.t_far,
                                                         config.n_fine, rng, config.jitter)
                                    : std::move(t_coarse);
    trace_ray(volume, params, NetKind::Fine, ray, std::move(t_fine), config, &rng, out.fine);
}

template void trace_ray<float>(const FeatureVolume&, const RenderParams&, NetKind, const Ray&, std::vector<double>,
                               const RenderConfig&, Rng*, TracedRay<float>&);
template void trace_ray<double>(const FeatureVolumeD&, const RenderParamsD&, NetKind, const Ray&,
                                std::vector<double>, const RenderConfig&, Rng*, TracedRay<double>&);
template void trace_backward<float>(const FeatureVolume&, const RenderParams&, const TracedRay<float>&,
                                    const RenderConfig&, const Rgb&, std::span<float>, VolumeGrad<float>*);
template void trace_backward<double>(const FeatureVolumeD&, const RenderParamsD&, const TracedRay<double>&,
                                     const RenderConfig&, const Rgb&, std::span<double>, VolumeGrad<double>*);
template void render_pixel<float>(const FeatureVolume&, const RenderParams&, const Ray&, const RenderConfig&, Rng&,
                                  PixelRender<float>&);
template void render_pixel<double>(const FeatureVolumeD&, const RenderParamsD&, const Ray&, const RenderConfig&,
                                   Rng&, PixelRender<double>&);

Image render_image(const FeatureVolume& volume, const RenderParams& params, const Camera& camera,
                   const RenderConfig& config, uint64_t seed, int threads)
{
    camera.validate();
    const int w = camera.intrinsics.width, h = camera.intrinsics.height;
    Image img(w, h);
    ExceptionSlot errors;
#ifdef _OPENMP
    const int nthreads = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel num_threads(nthreads)
#endif
    {
        PixelRender<float> pr;
#ifdef _OPENMP
#pragma omp for schedule(dynamic, 16)
#endif
        for (int p = 0; p < w * h; ++p) {
            const int px = p % w, py = p / w;
            Rng rng = Rng::derive(seed, uint64_t(p));
            errors.run([&] {
                render_pixel(volume, params, generate_ray(camera, px, py), config, rng, pr);
                for (int c = 0; c < 3; ++c) img.at(px, py, c) = float(pr.fine.pixel.rgb[size_t(c)]);
            });
        }
    }
    errors.rethrow();
    (void)threads;
    return img;
}

}  // namespace cnrf
