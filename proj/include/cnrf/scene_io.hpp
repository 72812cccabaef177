#pragma once

// Multi-view datasets on disk and analytic synthetic scenes.
//
// transforms.json:
//   { "scene_id": str?, "intrinsics": {fx, fy, cx, cy, w, h}, "near": f, "far": f,
//     "aabb": [[min xyz], [max xyz]], "heldout": [frame indices]?,
//     "frames": [{"file": relative path, "c2w": 16 floats, row-major}] }

#include "cnrf/common.hpp"
#include "cnrf/image.hpp"
#include "cnrf/ray_engine.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cnrf {

struct Frame {
    std::string file;
    Camera camera;
    Image image;
};

struct SceneDataset {
    std::string scene_id;
    Intrinsics intrinsics;
    double near = 0.1, far = 10.0;
    Aabb aabb;
    std::vector<Frame> frames;
    std::vector<int> train;
    std::vector<int> heldout;

    size_t image_count() const { return frames.size(); }
    /// Shared resolution, valid cameras, disjoint splits that cover every frame.
    void validate() const;
};

/// Reads transforms.json and the images it references. Rotations within
/// 1e-3 of orthonormal are re-orthonormalised; worse ones are rejected.
SceneDataset load_dataset(const std::filesystem::path& dir);
/// Writes transforms.json plus one PNG per frame.
void save_dataset(const SceneDataset& dataset, const std::filesystem::path& dir);

/// LLFF layout: poses_bounds.npy (N x 17 float64) and images/ (PNG or PPM,
/// sorted by name). Every `heldout_every`-th frame is held out.
SceneDataset load_llff(const std::filesystem::path& dir, int heldout_every = 8);

/// Seed-driven disjoint split of n frame indices, both halves sorted.
std::pair<std::vector<int>, std::vector<int>> split_indices(int n, int heldout, uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic scenes: piecewise-constant media made of spheres and boxes.

struct Primitive {
    enum class Shape { Sphere, Box };
    Shape shape = Shape::Sphere;
    Vec3 center = Vec3::Zero();
    Vec3 size = Vec3::Constant(0.5);  // sphere: size.x is the radius; box: full edge lengths
    Rgb albedo{1, 1, 1};
    double density = 50.0;

    bool contains(const Vec3& p) const;
    /// Entry/exit distances along the ray, if any.
    bool intersect(const Ray& ray, double& t0, double& t1) const;
};

struct RigSpec {
    int count = 25;
    int heldout = 5;
    double radius = 3.5;
    Vec3 look_at = Vec3::Zero();
    int width = 64;
    int height = 64;
    double focal = 70.0;
    double elevation_min_deg = 10.0;
    double elevation_max_deg = 50.0;
    double near = 1.7;
    double far = 5.3;
};

struct SyntheticSceneSpec {
    std::string scene_id = "synthetic";
    std::vector<Primitive> primitives;
    Rgb background{0, 0, 0};
    RigSpec rig;
    Aabb aabb;
    int samples_per_ray = 512;

    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSceneSpec& s);
void from_json(const nlohmann::json& j, SyntheticSceneSpec& s);

/// Closed-form density and colour of a synthetic scene. Overlapping
/// primitives add densities; colour is the density-weighted albedo.
class AnalyticOracle {
public:
    AnalyticOracle() = default;
    explicit AnalyticOracle(SyntheticSceneSpec spec) : spec_(std::move(spec)) {}

    double sigma(const Vec3& p) const;
    Rgb color(const Vec3& p) const;

    /// Exact integral: the medium is constant between primitive boundaries.
    PixelEstimate render_exact(const Ray& ray) const;
    /// The compositor's quadrature with n stratified midpoint samples.
    PixelEstimate render_quadrature(const Ray& ray, int n) const;

    const SyntheticSceneSpec& spec() const { return spec_; }

private:
    SyntheticSceneSpec spec_;
};

/// Cameras on the rig: azimuths evenly spread (with seeded jitter) and
/// elevations in [min, max], all looking at rig.look_at with +z up.
std::vector<Camera> rig_cameras(const RigSpec& rig, uint64_t seed);

/// Renders every rig view against the oracle and quantises to 8 bits.
std::pair<SceneDataset, AnalyticOracle> synthesize_scene(const SyntheticSceneSpec& spec, uint64_t seed);

/// Turntable: n cameras evenly spaced on a horizontal circle of `radius`
/// at height `height` above `center`, looking at `center`.
std::vector<Camera> orbit_cameras(const Intrinsics& k, const Vec3& center, double radius, double height, int n,
                                  double near, double far);

}  // namespace cnrf
