#include "cnrf/edit_engine.hpp"

#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cnrf {

namespace {

// Coordinates produced through world space pick up rounding noise; snap
// those that are integers up to that noise so node lookups stay exact.
constexpr double kSnap = 1e-9;

Vec3 snap(Vec3 g)
{
    for (int a = 0; a < 3; ++a) {
        const double r = std::round(g[a]);
        if (std::abs(g[a] - r) <= kSnap * std::max(1.0, std::abs(r))) g[a] = r;
    }
    return g;
}

Mat4 checked_inverse(const Mat4& M)
{
    if (!M.allFinite()) throw InvalidArgument("transform has non-finite entries");
    if (std::abs(M(3, 0)) > 1e-12 || std::abs(M(3, 1)) > 1e-12 || std::abs(M(3, 2)) > 1e-12 ||
        std::abs(M(3, 3) - 1.0) > 1e-12)
        throw InvalidArgument("transform must be affine (last row 0 0 0 1)");
    if (std::abs(M.determinant()) <= 1e-9) throw InvalidArgument("transform is singular");
    return M.inverse();
}

Vec3 apply(const Mat4& M, const Vec3& p)
{
    return M.topLeftCorner<3, 3>() * p + M.topRightCorner<3, 1>();
}

double norm_of(const FeatureVolume& v, uint32_t cell)
{
    if (v.is_empty(cell)) return 0.0;
    double s = 0.0;
    for (float f : v.feature(cell)) s += double(f) * double(f);
    return std::sqrt(s);
}

void drop_clear_mask(FeatureVolume& v)
{
    if (v.has_empty_mask() && v.empty_count() == 0) v.clear_empty_mask();
}

void require_same_renderer(const FeatureVolume& a, const FeatureVolume& b)
{
    if (a.renderer_hash() != b.renderer_hash())
        throw IncompatibleScenes("volumes were trained against different renderers (" + hex64(a.renderer_hash()) +
                                 " vs " + hex64(b.renderer_hash()) + ")");
}

}  // namespace

bool CoordField::valid() const
{
    if (coords.size() != dims.cells() * 3) return false;
    for (double c : coords)
        if (!std::isfinite(c)) return false;
    return true;
}

CoordField CoordField::identity(GridDims d)
{
    CoordField f(d);
    size_t n = 0;
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i) f.set(n++, Vec3(i, j, k));
    return f;
}

FeatureVolume resample(const FeatureVolume& source, const CoordField& field, const std::optional<Aabb>& bounds)
{
    if (!field.valid()) throw InvalidArgument("coordinate field shape does not match its dims or has non-finite entries");
    FeatureVolume out(field.dims, source.feat_len(), bounds.value_or(source.bounds()));
    out.set_renderer_hash(source.renderer_hash());
    const size_t n = field.dims.cells();
    std::vector<uint8_t> mask(n, 0);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < int64_t(n); ++c) {
        const TrilinearStencil s = source.stencil_at_grid(field.at(size_t(c)));
        source.blend(s, out.feature(uint32_t(c)));
        if (!s.valid || source.occupancy(s) < 0.5) mask[size_t(c)] = 1;
    }
    out.set_empty_mask(std::move(mask));
    drop_clear_mask(out);
    return out;
}

CoordField affine_coord_field(const FeatureVolume& source, const std::optional<Aabb>& region, const Mat4& M,
                              std::optional<GridDims> out_dims)
{
    const Mat4 inv = checked_inverse(M);
    if (region && !region->valid()) throw InvalidArgument("edit region is not a valid box");
    const GridDims d = out_dims.value_or(source.dims());
    // Output geometry shares the source bounds.
    const FeatureVolume geom(d, 1, source.bounds());
    CoordField f(d);
    const double tol = 1e-9 * std::max(1.0, source.bounds().extent().maxCoeff());
    size_t n = 0;
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i, ++n) {
                const Vec3 p = geom.cell_center(i, j, k);
                const Vec3 q = apply(inv, p);
                if (!region || region->contains(q, tol))
                    f.set(n, snap(source.to_grid(q)));
                else
                    f.set(n, snap(source.to_grid(p)));
            }
    return f;
}

FeatureVolume extract_region(const FeatureVolume& volume, const Aabb& box)
{
    if (!box.valid()) throw InvalidArgument("extract box is not a valid box");
    if (!box.intersects(volume.bounds())) throw InvalidArgument("extract box does not intersect the volume");
    const Vec3 pitch = volume.pitch();
    GridDims d;
    int* axes[3] = {&d.x, &d.y, &d.z};
    for (int a = 0; a < 3; ++a) *axes[a] = std::max(2, int(std::lround(box.extent()[a] / pitch[a])) + 1);
    FeatureVolume geom(d, 1, box);
    CoordField f(d);
    size_t n = 0;
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i) f.set(n++, snap(volume.to_grid(geom.cell_center(i, j, k))));
    return resample(volume, f, box);
}

FeatureVolume erase_region(const FeatureVolume& volume, const Aabb& box)
{
    if (!box.valid()) throw InvalidArgument("erase box is not a valid box");
    FeatureVolume out = volume;
    const GridDims d = out.dims();
    const double tol = 1e-9 * std::max(1.0, volume.bounds().extent().maxCoeff());
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i) {
                if (!box.contains(out.cell_center(i, j, k), tol)) continue;
                const uint32_t c = out.cell_index(i, j, k);
                for (float& v : out.feature(c)) v = 0.0f;
                out.set_empty(c, true);
            }
    return out;
}

FeatureVolume paste(const FeatureVolume& target, const FeatureVolume& fragment, const Mat4& M, PasteMode mode)
{
    require_same_renderer(target, fragment);
    if (target.feat_len() != fragment.feat_len()) throw InvalidArgument("fragment feature length differs from target");
    const Mat4 inv = checked_inverse(M);
    FeatureVolume out = target;
    const GridDims d = out.dims();
    const int F = out.feat_len();
    std::vector<float> value(static_cast<size_t>(F));
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i) {
                const Vec3 q = apply(inv, out.cell_center(i, j, k));
                const TrilinearStencil s = fragment.stencil_at_grid(snap(fragment.to_grid(q)));
                if (!s.valid || fragment.occupancy(s) < 0.5) continue;
                fragment.blend(s, value);
                const uint32_t c = out.cell_index(i, j, k);
                if (mode == PasteMode::FuseMax) {
                    double nv = 0.0;
                    for (float v : value) nv += double(v) * double(v);
                    if (!(std::sqrt(nv) > norm_of(out, c))) continue;
                }
                std::copy(value.begin(), value.end(), out.feature(c).begin());
                out.set_empty(c, false);
            }
    drop_clear_mask(out);
    return out;
}

FeatureVolume fuse_max_norm(const FeatureVolume& a, const FeatureVolume& b)
{
    if (!(a.dims() == b.dims()) || a.feat_len() != b.feat_len() || !(a.bounds() == b.bounds()))
        throw InvalidArgument("fusion needs volumes with equal dims, feature length and bounds");
    require_same_renderer(a, b);
    FeatureVolume out = a;
    for (uint32_t c = 0; c < uint32_t(a.cell_count()); ++c) {
        if (!(norm_of(b, c) > norm_of(a, c))) continue;
        const auto src = b.feature(c);
        std::copy(src.begin(), src.end(), out.feature(c).begin());
        out.set_empty(c, b.is_empty(c));
    }
    drop_clear_mask(out);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string location(const std::string& text, size_t byte)
{
    size_t line = 1, col = 1;
    for (size_t n = 0; n < byte && n < text.size(); ++n) {
        if (text[n] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

std::string get_name(const json& op, const char* key, size_t idx, bool required)
{
    if (!op.contains(key)) {
        if (required) throw InvalidArgument("op " + std::to_string(idx) + ": missing '" + key + "'");
        return {};
    }
    if (!op.at(key).is_string()) throw InvalidArgument("op " + std::to_string(idx) + ": '" + key + "' must be a string");
    return op.at(key).get<std::string>();
}

Vec3 get_vec3(const json& j, const std::string& what)
{
    if (!j.is_array() || j.size() != 3) throw InvalidArgument(what + " must be 3 numbers");
    Vec3 v;
    for (size_t a = 0; a < 3; ++a) {
        if (!j[a].is_number()) throw InvalidArgument(what + " must be 3 numbers");
        v[int(a)] = j[a].get<double>();
    }
    return v;
}

std::map<std::string, fs::path> get_paths(const json& root, const char* key)
{
    std::map<std::string, fs::path> out;
    if (!root.contains(key)) return out;
    const json& m = root.at(key);
    if (!m.is_object()) throw InvalidArgument(std::string("'") + key + "' must map names to paths");
    for (const auto& [name, path] : m.items()) {
        if (!path.is_string()) throw InvalidArgument(std::string("'") + key + "." + name + "' must be a path string");
        out[name] = path.get<std::string>();
    }
    return out;
}

EditOp parse_op(const json& j, size_t idx)
{
    const std::string where = "op " + std::to_string(idx);
    if (!j.is_object()) throw InvalidArgument(where + ": must be an object");
    static const std::set<std::string> known{"op", "target", "source", "result", "aabb", "matrix", "mode", "dims"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw InvalidArgument(where + ": unknown key '" + key + "'");
    EditOp op;
    const std::string kind = get_name(j, "op", idx, true);
    if (kind == "resample") op.kind = EditOp::Kind::Resample;
    else if (kind == "extract") op.kind = EditOp::Kind::Extract;
    else if (kind == "erase") op.kind = EditOp::Kind::Erase;
    else if (kind == "paste") op.kind = EditOp::Kind::Paste;
    else if (kind == "affine") op.kind = EditOp::Kind::Affine;
    else if (kind == "fuse_max") op.kind = EditOp::Kind::FuseMax;
    else throw InvalidArgument(where + ": unknown op '" + kind + "'");

    op.target = get_name(j, "target", idx, true);
    const bool needs_source = op.kind == EditOp::Kind::Paste || op.kind == EditOp::Kind::FuseMax;
    op.source = get_name(j, "source", idx, needs_source);
    op.result = get_name(j, "result", idx, false);
    if (op.result.empty()) op.result = op.target;

    if (j.contains("aabb")) {
        const json& b = j.at("aabb");
        if (!b.is_array() || b.size() != 2) throw InvalidArgument(where + ": 'aabb' must be [min, max]");
        Aabb box{get_vec3(b[0], where + ": aabb min"), get_vec3(b[1], where + ": aabb max")};
        if (!box.valid()) throw InvalidArgument(where + ": 'aabb' min must be below max");
        op.aabb = box;
    } else if (op.kind == EditOp::Kind::Extract || op.kind == EditOp::Kind::Erase) {
        throw InvalidArgument(where + ": missing 'aabb'");
    }
    if (j.contains("matrix")) {
        const json& m = j.at("matrix");
        if (!m.is_array() || m.size() != 16) throw InvalidArgument(where + ": 'matrix' must be 16 numbers");
        for (size_t n = 0; n < 16; ++n) {
            if (!m[n].is_number()) throw InvalidArgument(where + ": 'matrix' must be 16 numbers");
            op.matrix(int(n / 4), int(n % 4)) = m[n].get<double>();
        }
        checked_inverse(op.matrix);
    }
    if (j.contains("mode")) {
        const std::string mode = get_name(j, "mode", idx, true);
        if (mode == "overwrite") op.mode = PasteMode::Overwrite;
        else if (mode == "fuse_max") op.mode = PasteMode::FuseMax;
        else throw InvalidArgument(where + ": mode must be 'overwrite' or 'fuse_max'");
    }
    if (j.contains("dims")) {
        const json& d = j.at("dims");
        if (!d.is_array() || d.size() != 3) throw InvalidArgument(where + ": 'dims' must be 3 integers");
        GridDims g;
        int* axes[3] = {&g.x, &g.y, &g.z};
        for (size_t a = 0; a < 3; ++a) {
            if (!d[a].is_number_integer() || d[a].get<int>() < 2)
                throw InvalidArgument(where + ": 'dims' must be 3 integers >= 2");
            *axes[a] = d[a].get<int>();
        }
        op.dims = g;
    }
    return op;
}

}  // namespace

EditScript parse_edit_script(const std::string& text)
{
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        std::string msg = e.what();
        const auto colon = msg.find("]: ");
        if (colon != std::string::npos) msg = msg.substr(colon + 3);
        throw InvalidArgument("edit script syntax error at " + location(text, e.byte > 0 ? e.byte - 1 : 0) + ": " +
                              msg);
    }
    if (!root.is_object()) throw InvalidArgument("edit script must be a JSON object");
    for (const auto& [key, _] : root.items())
        if (key != "inputs" && key != "ops" && key != "outputs")
            throw InvalidArgument("edit script: unknown key '" + key + "'");
    EditScript s;
    s.inputs = get_paths(root, "inputs");
    s.outputs = get_paths(root, "outputs");
    if (root.contains("ops")) {
        if (!root.at("ops").is_array()) throw InvalidArgument("edit script: 'ops' must be an array");
        size_t idx = 0;
        for (const json& op : root.at("ops")) s.ops.push_back(parse_op(op, idx++));
    }
    return s;
}

EditScript load_edit_script(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open edit script " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_edit_script(ss.str());
}

void apply_edit_ops(VolumeRegistry& registry, const std::vector<EditOp>& ops)
{
    auto lookup = [&](const std::string& name, size_t idx) -> const FeatureVolume& {
        auto it = registry.find(name);
        if (it == registry.end())
            throw InvalidArgument("op " + std::to_string(idx) + ": unresolved volume name '" + name + "'");
        return it->second;
    };
    for (size_t idx = 0; idx < ops.size(); ++idx) {
        const EditOp& op = ops[idx];
        const FeatureVolume& target = lookup(op.target, idx);
        FeatureVolume result;
        switch (op.kind) {
        case EditOp::Kind::Resample:
            result = resample(target, affine_coord_field(target, std::nullopt, op.matrix, op.dims));
            break;
        case EditOp::Kind::Affine:
            result = resample(target, affine_coord_field(target, op.aabb, op.matrix, op.dims));
            break;
        case EditOp::Kind::Extract:
            result = extract_region(target, *op.aabb);
            break;
        case EditOp::Kind::Erase:
            result = erase_region(target, *op.aabb);
            break;
        case EditOp::Kind::Paste:
            result = paste(target, lookup(op.source, idx), op.matrix, op.mode);
            break;
        case EditOp::Kind::FuseMax:
            result = fuse_max_norm(target, lookup(op.source, idx));
            break;
        }
        registry[op.result] = std::move(result);
    }
}

VolumeRegistry run_edit_script(const EditScript& script, const fs::path& base_dir)
{
    auto resolve = [&](const fs::path& p) { return p.is_absolute() ? p : base_dir / p; };
    VolumeRegistry reg;
    for (const auto& [name, path] : script.inputs) reg[name] = load_volume(resolve(path));
    apply_edit_ops(reg, script.ops);
    for (const auto& [name, path] : script.outputs) {
        auto it = reg.find(name);
        if (it == reg.end()) throw InvalidArgument("output refers to unknown volume '" + name + "'");
        save_volume(it->second, resolve(path));
    }
    return reg;
}

}  // namespace cnrf
