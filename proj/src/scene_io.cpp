#include "cnrf/scene_io.hpp"

#include "binary_io.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <regex>
#include <set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace cnrf {

namespace {

Vec3 vec3_from(const json& j, const char* what)
{
    if (!j.is_array() || j.size() != 3) throw InvalidArgument(std::string(what) + " must be a 3-vector");
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json vec3_json(const Vec3& v)
{
    return json::array({v[0], v[1], v[2]});
}

Rgb rgb_from(const json& j, const char* what)
{
    const Vec3 v = vec3_from(j, what);
    return {v[0], v[1], v[2]};
}

Aabb aabb_from(const json& j)
{
    if (!j.is_array() || j.size() != 2) throw InvalidArgument("aabb must be [min, max]");
    Aabb b{vec3_from(j[0], "aabb min"), vec3_from(j[1], "aabb max")};
    if (!b.valid()) throw InvalidArgument("aabb needs min < max");
    return b;
}

json aabb_json(const Aabb& b)
{
    return json::array({vec3_json(b.min), vec3_json(b.max)});
}

Mat3 nearest_rotation(const Mat3& m)
{
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
        Mat3 u = svd.matrixU();
        u.col(2) *= -1;
        r = u * svd.matrixV().transpose();
    }
    return r;
}

}  // namespace

void SceneDataset::validate() const
{
    if (frames.empty()) throw LoadError("dataset has no frames");
    if (!aabb.valid()) throw LoadError("dataset aabb needs min < max");
    for (const Frame& f : frames) {
        if (f.image.width != intrinsics.width || f.image.height != intrinsics.height)
            throw LoadError("frame " + f.file + " does not match the dataset resolution");
        try {
            f.camera.validate();
        } catch (const InvalidArgument& e) {
            throw LoadError("frame " + f.file + ": " + e.what());
        }
    }
    std::vector<int> seen(frames.size(), 0);
    for (const auto* split : {&train, &heldout})
        for (int i : *split) {
            if (i < 0 || size_t(i) >= frames.size()) throw LoadError("split index out of range");
            if (seen[size_t(i)]++) throw LoadError("splits overlap at frame " + std::to_string(i));
        }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw LoadError("splits do not cover every frame");
}

std::pair<std::vector<int>, std::vector<int>> split_indices(int n, int heldout, uint64_t seed)
{
    if (heldout < 0 || heldout > n) throw InvalidArgument("heldout count out of range");
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), Rng(seed ^ 0x5eedULL).engine());
    std::vector<int> held(idx.begin(), idx.begin() + heldout), train(idx.begin() + heldout, idx.end());
    std::sort(held.begin(), held.end());
    std::sort(train.begin(), train.end());
    return {train, held};
}

SceneDataset load_dataset(const fs::path& dir)
{
    const fs::path meta = dir / "transforms.json";
    if (!fs::is_directory(dir)) throw LoadError("dataset directory not found: " + dir.string());
    if (!fs::exists(meta)) throw LoadError("missing transforms.json in " + dir.string());
    json j;
    try {
        std::ifstream in(meta);
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw LoadError("cannot parse " + meta.string() + ": " + e.what());
    }

    SceneDataset ds;
    try {
        ds.scene_id = j.value("scene_id", dir.filename().string());
        const json& k = j.at("intrinsics");
        ds.intrinsics = Intrinsics{k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                                   k.at("cy").get<double>(), k.at("w").get<int>(), k.at("h").get<int>()};
        ds.near = j.at("near").get<double>();
        ds.far = j.at("far").get<double>();
        ds.aabb = aabb_from(j.at("aabb"));
        for (const json& f : j.at("frames")) {
            Frame fr;
            fr.file = f.at("file").get<std::string>();
            const auto& m = f.at("c2w");
            if (!m.is_array() || m.size() != 16) throw LoadError("c2w of " + fr.file + " must have 16 entries");
            Mat4 c2w;
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) c2w(r, c) = m[size_t(r * 4 + c)].get<double>();
            fr.camera = Camera::from_camera_to_world(ds.intrinsics, c2w, ds.near, ds.far);
            const double err = (fr.camera.rotation.transpose() * fr.camera.rotation - Mat3::Identity()).norm();
            if (!(err <= 1e-3)) throw LoadError("rotation of " + fr.file + " is not orthonormal");
            if (err > 1e-12) fr.camera.rotation = nearest_rotation(fr.camera.rotation);
            const fs::path img = dir / fr.file;
            if (!fs::exists(img)) throw LoadError("missing image " + img.string());
            fr.image = read_image(img);
            ds.frames.push_back(std::move(fr));
        }
        if (j.contains("heldout")) ds.heldout = j.at("heldout").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw LoadError("malformed " + meta.string() + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw LoadError("malformed " + meta.string() + ": " + e.what());
    }
    std::sort(ds.heldout.begin(), ds.heldout.end());
    std::set<int> held(ds.heldout.begin(), ds.heldout.end());
    for (int i = 0; i < int(ds.frames.size()); ++i)
        if (!held.count(i)) ds.train.push_back(i);
    ds.validate();
    return ds;
}

void save_dataset(const SceneDataset& ds, const fs::path& dir)
{
    fs::create_directories(dir);
    json j;
    j["scene_id"] = ds.scene_id;
    j["intrinsics"] = {{"fx", ds.intrinsics.fx}, {"fy", ds.intrinsics.fy}, {"cx", ds.intrinsics.cx},
                       {"cy", ds.intrinsics.cy}, {"w", ds.intrinsics.width},  {"h", ds.intrinsics.height}};
    j["near"] = ds.near;
    j["far"] = ds.far;
    j["aabb"] = aabb_json(ds.aabb);
    j["heldout"] = ds.heldout;
    json frames = json::array();
    for (const Frame& f : ds.frames) {
        const Mat4 m = f.camera.camera_to_world();
        json c2w = json::array();
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) c2w.push_back(m(r, c));
        frames.push_back({{"file", f.file}, {"c2w", c2w}});
        const fs::path img = dir / f.file;
        fs::create_directories(img.parent_path());
        write_image(img, f.image);
    }
    j["frames"] = frames;
    std::ofstream out(dir / "transforms.json");
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// LLFF import

namespace {

std::vector<double> read_npy_f64(const fs::path& path, size_t& rows, size_t& cols)
{
    const auto bytes = detail::read_file_bytes(path);
    if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0)
        throw LoadError("not a .npy file: " + path.string());
    const int major = bytes[6];
    size_t header_len = 0, header_start = 0;
    if (major == 1) {
        header_len = size_t(bytes[8]) | size_t(bytes[9]) << 8;
        header_start = 10;
    } else {
        if (bytes.size() < 12) throw LoadError("truncated .npy header: " + path.string());
        header_len = size_t(bytes[8]) | size_t(bytes[9]) << 8 | size_t(bytes[10]) << 16 | size_t(bytes[11]) << 24;
        header_start = 12;
    }
    if (bytes.size() < header_start + header_len) throw LoadError("truncated .npy header: " + path.string());
    const std::string header(bytes.begin() + ptrdiff_t(header_start),
                             bytes.begin() + ptrdiff_t(header_start + header_len));
    if (header.find("'<f8'") == std::string::npos) throw LoadError("poses_bounds.npy must be little-endian float64");
    if (header.find("'fortran_order': True") != std::string::npos)
        throw LoadError("fortran-ordered poses_bounds.npy is not supported");
    std::smatch m;
    if (!std::regex_search(header, m, std::regex(R"(\(\s*(\d+)\s*,\s*(\d+)\s*\))")))
        throw LoadError("cannot parse .npy shape: " + path.string());
    rows = std::stoul(m[1].str());
    cols = std::stoul(m[2].str());
    const size_t need = rows * cols * 8;
    if (bytes.size() < header_start + header_len + need) throw LoadError("truncated .npy data: " + path.string());
    std::vector<double> out(rows * cols);
    std::memcpy(out.data(), bytes.data() + header_start + header_len, need);
    return out;
}

}  // namespace

SceneDataset load_llff(const fs::path& dir, int heldout_every)
{
    size_t rows = 0, cols = 0;
    const auto arr = read_npy_f64(dir / "poses_bounds.npy", rows, cols);
    if (cols != 17) throw LoadError("poses_bounds.npy must be N x 17");
    std::vector<fs::path> images;
    if (fs::is_directory(dir / "images"))
        for (const auto& e : fs::directory_iterator(dir / "images")) {
            auto ext = e.path().extension().string();
            if (ext == ".png" || ext == ".ppm" || ext == ".PNG") images.push_back(e.path());
        }
    std::sort(images.begin(), images.end());
    if (images.size() != rows) throw LoadError("image count does not match poses_bounds.npy rows");

    SceneDataset ds;
    ds.scene_id = dir.filename().string();
    double near = 1e300, far = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        near = std::min(near, arr[r * 17 + 15]);
        far = std::max(far, arr[r * 17 + 16]);
    }
    ds.near = 0.9 * near;
    ds.far = 1.1 * far;
    for (size_t r = 0; r < rows; ++r) {
        const double* p = &arr[r * 17];  // 3x5 row-major: [down, right, back, t, hwf]
        Frame fr;
        fr.file = fs::relative(images[r], dir).string();
        fr.image = read_image(images[r]);
        const double w = p[9], f = p[14];
        const double scale = double(fr.image.width) / w;
        if (r == 0) {
            ds.intrinsics = Intrinsics{f * scale, f * scale, fr.image.width / 2.0, fr.image.height / 2.0,
                                       fr.image.width, fr.image.height};
        }
        Mat3 rot;
        for (int row = 0; row < 3; ++row) {
            rot(row, 0) = p[row * 5 + 1];
            rot(row, 1) = -p[row * 5 + 0];
            rot(row, 2) = p[row * 5 + 2];
        }
        Mat4 c2w = Mat4::Identity();
        c2w.topLeftCorner<3, 3>() = nearest_rotation(rot);
        c2w.topRightCorner<3, 1>() = Vec3(p[3], p[8], p[13]);
        fr.camera = Camera::from_camera_to_world(ds.intrinsics, c2w, ds.near, ds.far);
        ds.frames.push_back(std::move(fr));
    }
    // Box around the central viewing frusta between near and far.
    Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
    for (const Frame& fr : ds.frames)
        for (int px : {0, ds.intrinsics.width - 1})
            for (int py : {0, ds.intrinsics.height - 1})
                for (double t : {ds.near, ds.far}) {
                    const Ray ray = generate_ray(fr.camera, px, py);
                    lo = lo.cwiseMin(ray.at(t));
                    hi = hi.cwiseMax(ray.at(t));
                }
    ds.aabb = Aabb{lo, hi};
    for (int i = 0; i < int(rows); ++i) (heldout_every > 0 && i % heldout_every == 0 ? ds.heldout : ds.train).push_back(i);
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

bool Primitive::contains(const Vec3& p) const
{
    if (shape == Shape::Sphere) return (p - center).squaredNorm() <= size.x() * size.x();
    return ((p - center).cwiseAbs().array() <= 0.5 * size.array()).all();
}

bool Primitive::intersect(const Ray& ray, double& t0, double& t1) const
{
    if (shape == Shape::Sphere) {
        const Vec3 oc = ray.origin - center;
        const double b = oc.dot(ray.dir);
        const double c = oc.squaredNorm() - size.x() * size.x();
        const double disc = b * b - c;
        if (disc <= 0.0) return false;
        const double s = std::sqrt(disc);
        t0 = -b - s;
        t1 = -b + s;
        return true;
    }
    t0 = -1e300;
    t1 = 1e300;
    for (int a = 0; a < 3; ++a) {
        const double lo = center[a] - 0.5 * size[a], hi = center[a] + 0.5 * size[a];
        if (std::abs(ray.dir[a]) < 1e-15) {
            if (ray.origin[a] < lo || ray.origin[a] > hi) return false;
            continue;
        }
        double ta = (lo - ray.origin[a]) / ray.dir[a], tb = (hi - ray.origin[a]) / ray.dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t1 > t0;
}

void SyntheticSceneSpec::validate() const
{
    for (const Primitive& p : primitives) {
        if (!(p.density >= 0.0)) throw InvalidArgument("primitive density must be >= 0");
        for (double c : p.albedo)
            if (!(c >= 0.0 && c <= 1.0)) throw InvalidArgument("albedo must lie in [0,1]");
        if (!(p.size.array() > 0.0).all()) throw InvalidArgument("primitive size must be positive");
    }
    if (rig.count < 1) throw InvalidArgument("rig needs at least one camera");
    if (rig.heldout < 0 || rig.heldout >= rig.count) throw InvalidArgument("rig heldout count out of range");
    if (rig.width < 1 || rig.height < 1 || !(rig.focal > 0.0)) throw InvalidArgument("bad rig image settings");
    if (!(rig.near > 0.0 && rig.far > rig.near)) throw InvalidArgument("rig needs 0 < near < far");
    if (!aabb.valid()) throw InvalidArgument("aabb needs min < max");
    if (samples_per_ray < 1) throw InvalidArgument("samples_per_ray must be positive");
}

void to_json(json& j, const SyntheticSceneSpec& s)
{
    json prims = json::array();
    for (const Primitive& p : s.primitives) {
        json e = {{"type", p.shape == Primitive::Shape::Sphere ? "sphere" : "box"},
                  {"center", vec3_json(p.center)},
                  {"albedo", json::array({p.albedo[0], p.albedo[1], p.albedo[2]})},
                  {"density", p.density}};
        if (p.shape == Primitive::Shape::Sphere)
            e["radius"] = p.size.x();
        else
            e["size"] = vec3_json(p.size);
        prims.push_back(e);
    }
    const RigSpec& r = s.rig;
    j = {{"scene_id", s.scene_id},
         {"primitives", prims},
         {"background", json::array({s.background[0], s.background[1], s.background[2]})},
         {"aabb", aabb_json(s.aabb)},
         {"samples_per_ray", s.samples_per_ray},
         {"rig",
          {{"count", r.count},
           {"heldout", r.heldout},
           {"radius", r.radius},
           {"look_at", vec3_json(r.look_at)},
           {"width", r.width},
           {"height", r.height},
           {"focal", r.focal},
           {"elevation_min_deg", r.elevation_min_deg},
           {"elevation_max_deg", r.elevation_max_deg},
           {"near", r.near},
           {"far", r.far}}}};
}

void from_json(const json& j, SyntheticSceneSpec& s)
{
    s = SyntheticSceneSpec{};
    s.scene_id = j.value("scene_id", s.scene_id);
    if (j.contains("background")) s.background = rgb_from(j.at("background"), "background");
    if (j.contains("aabb")) s.aabb = aabb_from(j.at("aabb"));
    s.samples_per_ray = j.value("samples_per_ray", s.samples_per_ray);
    for (const json& e : j.value("primitives", json::array())) {
        Primitive p;
        const std::string type = e.at("type").get<std::string>();
        if (type == "sphere") {
            p.shape = Primitive::Shape::Sphere;
            p.size = Vec3::Constant(e.at("radius").get<double>());
        } else if (type == "box") {
            p.shape = Primitive::Shape::Box;
            p.size = vec3_from(e.at("size"), "box size");
        } else {
            throw InvalidArgument("unknown primitive type: " + type);
        }
        p.center = vec3_from(e.at("center"), "center");
        p.albedo = rgb_from(e.at("albedo"), "albedo");
        p.density = e.at("density").get<double>();
        s.primitives.push_back(p);
    }
    if (j.contains("rig")) {
        const json& r = j.at("rig");
        RigSpec& o = s.rig;
        o.count = r.value("count", o.count);
        o.heldout = r.value("heldout", o.heldout);
        o.radius = r.value("radius", o.radius);
        if (r.contains("look_at")) o.look_at = vec3_from(r.at("look_at"), "look_at");
        o.width = r.value("width", o.width);
        o.height = r.value("height", o.height);
        o.focal = r.value("focal", o.focal);
        o.elevation_min_deg = r.value("elevation_min_deg", o.elevation_min_deg);
        o.elevation_max_deg = r.value("elevation_max_deg", o.elevation_max_deg);
        o.near = r.value("near", o.near);
        o.far = r.value("far", o.far);
    }
    s.validate();
}

double AnalyticOracle::sigma(const Vec3& p) const
{
    double s = 0.0;
    for (const Primitive& prim : spec_.primitives)
        if (prim.contains(p)) s += prim.density;
    return s;
}

Rgb AnalyticOracle::color(const Vec3& p) const
{
    Rgb c{0, 0, 0};
    double s = 0.0;
    for (const Primitive& prim : spec_.primitives)
        if (prim.contains(p)) {
            for (int k = 0; k < 3; ++k) c[size_t(k)] += prim.density * prim.albedo[size_t(k)];
            s += prim.density;
        }
    if (s > 0.0)
        for (double& v : c) v /= s;
    return c;
}

PixelEstimate AnalyticOracle::render_exact(const Ray& ray) const
{
    std::vector<double> cuts{ray.t_near, ray.t_far};
    for (const Primitive& prim : spec_.primitives) {
        double t0, t1;
        if (!prim.intersect(ray, t0, t1)) continue;
        for (double t : {t0, t1})
            if (t > ray.t_near && t < ray.t_far) cuts.push_back(t);
    }
    std::sort(cuts.begin(), cuts.end());
    PixelEstimate px;
    double trans = 1.0;
    for (size_t i = 0; i + 1 < cuts.size(); ++i) {
        const double len = cuts[i + 1] - cuts[i];
        if (len <= 0.0) continue;
        const Vec3 mid = ray.at(0.5 * (cuts[i] + cuts[i + 1]));
        const double s = sigma(mid);
        if (s <= 0.0) continue;
        const double w = trans * -std::expm1(-s * len);
        const Rgb c = color(mid);
        for (int k = 0; k < 3; ++k) px.rgb[size_t(k)] += w * c[size_t(k)];
        px.alpha += w;
        trans *= std::exp(-s * len);
    }
    for (int k = 0; k < 3; ++k) px.rgb[size_t(k)] += (1.0 - px.alpha) * spec_.background[size_t(k)];
    return px;
}

PixelEstimate AnalyticOracle::render_quadrature(const Ray& ray, int n) const
{
    Rng unused(0);
    SampleBatch b;
    b.resize(size_t(n));
    b.t = stratified_samples(ray, n, unused, false);
    b.t_far = ray.t_far;
    for (int i = 0; i < n; ++i) {
        const Vec3 p = ray.at(b.t[size_t(i)]);
        b.sigma[size_t(i)] = sigma(p);
        b.rgb[size_t(i)] = color(p);
    }
    return composite(b, spec_.background);
}

std::vector<Camera> rig_cameras(const RigSpec& rig, uint64_t seed)
{
    Rng rng(seed ^ 0xca3e7aULL);
    const Intrinsics k{rig.focal, rig.focal, rig.width / 2.0, rig.height / 2.0, rig.width, rig.height};
    const double golden = 0.6180339887498949;
    const double phase = rng.uniform();
    std::vector<Camera> cams;
    for (int i = 0; i < rig.count; ++i) {
        const double az = 2.0 * std::numbers::pi * (i + rng.uniform(-0.25, 0.25)) / rig.count;
        const double frac = std::fmod(phase + golden * i, 1.0);
        const double el =
            (rig.elevation_min_deg + frac * (rig.elevation_max_deg - rig.elevation_min_deg)) * std::numbers::pi / 180.0;
        const Vec3 eye = rig.look_at + rig.radius * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az),
                                                         std::sin(el));
        cams.push_back(Camera::look_at(k, eye, rig.look_at, Vec3::UnitZ(), rig.near, rig.far));
    }
    return cams;
}

std::pair<SceneDataset, AnalyticOracle> synthesize_scene(const SyntheticSceneSpec& spec, uint64_t seed)
{
    spec.validate();
    AnalyticOracle oracle(spec);
    SceneDataset ds;
    ds.scene_id = spec.scene_id;
    const RigSpec& rig = spec.rig;
    ds.intrinsics = Intrinsics{rig.focal, rig.focal, rig.width / 2.0, rig.height / 2.0, rig.width, rig.height};
    ds.near = rig.near;
    ds.far = rig.far;
    ds.aabb = spec.aabb;
    const auto cams = rig_cameras(rig, seed);
    for (size_t i = 0; i < cams.size(); ++i) {
        Frame fr;
        char name[32];
        std::snprintf(name, sizeof name, "images/%03zu.png", i);
        fr.file = name;
        fr.camera = cams[i];
        fr.image = Image(rig.width, rig.height);
        ds.frames.push_back(std::move(fr));
    }
    const int npx = rig.width * rig.height;
    const long long total = (long long)(ds.frames.size()) * npx;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 64)
#endif
    for (long long n = 0; n < total; ++n) {
        Frame& fr = ds.frames[size_t(n / npx)];
        const int p = int(n % npx);
        const PixelEstimate px =
            oracle.render_quadrature(generate_ray(fr.camera, p % rig.width, p / rig.width), spec.samples_per_ray);
        for (int c = 0; c < 3; ++c) fr.image.at(p % rig.width, p / rig.width, c) = float(px.rgb[size_t(c)]);
    }
    for (Frame& fr : ds.frames) quantize_8bit(fr.image);
    std::tie(ds.train, ds.heldout) = split_indices(rig.count, rig.heldout, seed);
    ds.validate();
    return {std::move(ds), std::move(oracle)};
}

std::vector<Camera> orbit_cameras(const Intrinsics& k, const Vec3& center, double radius, double height, int n,
                                  double near, double far)
{
    if (n < 1) throw InvalidArgument("orbit needs at least one camera");
    std::vector<Camera> cams;
    for (int i = 0; i < n; ++i) {
        const double a = 2.0 * std::numbers::pi * i / n;
        const Vec3 eye = center + Vec3(radius * std::cos(a), radius * std::sin(a), height);
        cams.push_back(Camera::look_at(k, eye, center, Vec3::UnitZ(), near, far));
    }
    return cams;
}

}  // namespace cnrf
