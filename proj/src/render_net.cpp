#include "cnrf/render_net.hpp"

#include "binary_io.hpp"

#include <cmath>
#include <numbers>

namespace cnrf {

namespace {

constexpr std::string_view kNetMagic = "CNRFNET1";

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> weight(std::span<const T> p, const LayerSpec& l)
{
    return {p.data() + l.weight_offset, l.out, l.in};
}

template <typename T>
Eigen::Map<const Vector<T>> bias(std::span<const T> p, const LayerSpec& l)
{
    return {p.data() + l.bias_offset, l.out};
}

template <typename T>
Eigen::Map<RowMat<T>> weight_grad(std::span<T> g, const LayerSpec& l)
{
    return {g.data() + l.weight_offset, l.out, l.in};
}

template <typename T>
Eigen::Map<Vector<T>> bias_grad(std::span<T> g, const LayerSpec& l)
{
    return {g.data() + l.bias_offset, l.out};
}

template <typename T>
T softplus(T x)
{
    return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x)
{
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

void NetDescriptor::validate() const
{
    if (feat_len < 1 || enc_levels < 0 || trunk_depth < 1 || trunk_width < 1 || bottleneck_width < 1 ||
        branch_width < 1)
        throw InvalidArgument("network descriptor has non-positive sizes");
    if (skip_layer < 0 || skip_layer >= trunk_depth)
        throw InvalidArgument("skip layer must lie inside the trunk (0 disables it)");
}

NetDescriptor NetDescriptor::desk(int feat_len)
{
    return NetDescriptor{feat_len, 4, 4, 64, 2, 64, 32};
}

NetDescriptor NetDescriptor::full(int feat_len)
{
    return NetDescriptor{feat_len, 4, 8, 256, 4, 256, 128};
}

NetLayout::NetLayout(const NetDescriptor& d)
{
    d.validate();
    size_t off = 0;
    auto make = [&](int in, int out) {
        LayerSpec l{in, out, off, off + size_t(in) * out};
        off = l.bias_offset + size_t(out);
        return l;
    };
    for (int l = 0; l < d.trunk_depth; ++l) {
        int in = l == 0 ? d.feat_len : d.trunk_width;
        if (l > 0 && l == d.skip_layer) in += d.feat_len;
        trunk.push_back(make(in, d.trunk_width));
    }
    sigma = make(d.trunk_width, 1);
    bottleneck = make(d.trunk_width, d.bottleneck_width);
    branch = make(d.bottleneck_width + d.encoding_width(), d.branch_width);
    rgb = make(d.branch_width, 3);
    parameter_count = off;
}

template <typename T>
bool BasicRenderParams<T>::all_finite() const
{
    for (const auto& n : nets)
        for (T v : n)
            if (!std::isfinite(v)) return false;
    return true;
}

template struct BasicRenderParams<float>;
template struct BasicRenderParams<double>;

template <typename T>
BasicRenderParams<T> zero_params(const NetDescriptor& d)
{
    BasicRenderParams<T> p;
    p.descriptor = d;
    p.layout = NetLayout(d);
    for (auto& n : p.nets) n.assign(p.layout.parameter_count, T(0));
    return p;
}

template RenderParams zero_params<float>(const NetDescriptor&);
template RenderParamsD zero_params<double>(const NetDescriptor&);

RenderParams init_params(const NetDescriptor& d, uint64_t seed)
{
    RenderParams p = zero_params<float>(d);
    Rng rng(seed);
    auto fill = [&](AlignedVector<float>& net, const LayerSpec& l) {
        const double a = std::sqrt(6.0 / double(l.in));
        for (size_t n = 0; n < size_t(l.in) * l.out; ++n) net[l.weight_offset + n] = float(rng.uniform(-a, a));
    };
    for (auto& net : p.nets) {
        for (const auto& l : p.layout.trunk) fill(net, l);
        fill(net, p.layout.sigma);
        fill(net, p.layout.bottleneck);
        fill(net, p.layout.branch);
        fill(net, p.layout.rgb);
    }
    return p;
}

// ---------------------------------------------------------------------------

std::vector<uint8_t> encode_params(const RenderParams& params)
{
    const NetDescriptor& d = params.descriptor;
    detail::ByteWriter w;
    w.magic(kNetMagic);
    for (int v : {d.feat_len, d.enc_levels, d.trunk_depth, d.trunk_width, d.skip_layer, d.bottleneck_width,
                  d.branch_width})
        w.u32(uint32_t(v));
    for (const auto& net : params.nets)
        for (float x : net) w.f32(x);
    return std::move(w.buffer());
}

RenderParams decode_params(const std::vector<uint8_t>& bytes)
{
    detail::ByteReader r(bytes);
    if (bytes.size() < kNetMagic.size())
        throw FormatError(FormatErrorKind::Truncated, "magic", "weights file shorter than its magic");
    if (!r.magic_matches(kNetMagic)) throw FormatError(FormatErrorKind::BadMagic, "magic", "not a weights file");
    const char* names[7] = {"feat_len",    "enc_levels",       "trunk_depth", "trunk_width",
                            "skip_layer", "bottleneck_width", "branch_width"};
    uint32_t f[7];
    for (int n = 0; n < 7; ++n) {
        f[n] = r.u32(names[n]);
        if (f[n] > 65536)
            throw FormatError(FormatErrorKind::DimensionOverflow, names[n], "descriptor field out of range");
    }
    NetDescriptor d{int(f[0]), int(f[1]), int(f[2]), int(f[3]), int(f[4]), int(f[5]), int(f[6])};
    try {
        d.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(FormatErrorKind::Corrupt, "descriptor", e.what());
    }
    RenderParams p = zero_params<float>(d);
    const size_t need = 2 * p.layout.parameter_count * 4;
    if (r.remaining() < need)
        throw FormatError(FormatErrorKind::Truncated, "weights",
                          "expected " + std::to_string(need) + " weight bytes, have " + std::to_string(r.remaining()));
    for (auto& net : p.nets)
        for (float& x : net) {
            x = r.f32("weights");
            if (!std::isfinite(x)) throw FormatError(FormatErrorKind::Corrupt, "weights", "non-finite weight");
        }
    if (r.remaining() != 0) throw FormatError(FormatErrorKind::Corrupt, "weights", "trailing bytes after weights");
    return p;
}

void save_params(const RenderParams& params, const std::filesystem::path& path)
{
    detail::write_file_bytes(path, encode_params(params));
}

RenderParams load_params(const std::filesystem::path& path)
{
    return decode_params(detail::read_file_bytes(path));
}

uint64_t renderer_hash(const RenderParams& params)
{
    const auto bytes = encode_params(params);
    return fnv1a64(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------

std::vector<double> pos_encode(const Vec3& d, int levels)
{
    if (levels < 0) throw InvalidArgument("encoding levels must be >= 0");
    if (!d.allFinite() || std::abs(d.norm() - 1.0) > 1e-6) throw InvalidArgument("direction must be unit length");
    std::vector<double> out;
    out.reserve(size_t(6) * levels);
    for (int k = 0; k < 3; ++k) {
        double freq = std::numbers::pi;
        for (int l = 0; l < levels; ++l, freq *= 2.0) {
            out.push_back(std::sin(freq * d[k]));
            out.push_back(std::cos(freq * d[k]));
        }
    }
    return out;
}

template <typename T>
void forward(const BasicRenderParams<T>& params, NetKind which, const Matrix<T>& features,
             std::span<const double> enc, NetCache<T>& cache, std::span<const double> sigma_noise)
{
    const NetDescriptor& d = params.descriptor;
    const NetLayout& L = params.layout;
    if (features.rows() != d.feat_len) throw InvalidArgument("feature length does not match the network");
    if (int(enc.size()) != d.encoding_width()) throw InvalidArgument("direction encoding has the wrong width");
    if (!sigma_noise.empty() && Eigen::Index(sigma_noise.size()) != features.cols())
        throw InvalidArgument("density noise must have one entry per sample");
    const auto p = params.net(which);

    cache.params = p.data();
    cache.kind = which;
    cache.batch = features.cols();
    cache.input = features;
    cache.enc.resize(Eigen::Index(enc.size()));
    for (size_t n = 0; n < enc.size(); ++n) cache.enc[Eigen::Index(n)] = T(enc[n]);

    const int depth = d.trunk_depth;
    cache.trunk_in.resize(size_t(depth));
    cache.trunk_pre.resize(size_t(depth));
    cache.trunk_act.resize(size_t(depth));
    for (int l = 0; l < depth; ++l) {
        const LayerSpec& ls = L.trunk[size_t(l)];
        const Matrix<T>* in = l == 0 ? &cache.input : &cache.trunk_act[size_t(l - 1)];
        if (l > 0 && l == d.skip_layer) {
            Matrix<T>& cat = cache.trunk_in[size_t(l)];
            cat.resize(ls.in, cache.batch);
            cat.topRows(d.trunk_width) = *in;
            cat.bottomRows(d.feat_len) = cache.input;
            in = &cat;
        }
        cache.trunk_pre[size_t(l)].noalias() = weight(p, ls) * *in;
        cache.trunk_pre[size_t(l)].colwise() += bias(p, ls);
        cache.trunk_act[size_t(l)] = cache.trunk_pre[size_t(l)].cwiseMax(T(0));
    }
    const Matrix<T>& top = cache.trunk_act.back();

    cache.sigma_pre.noalias() = weight(p, L.sigma) * top;
    cache.sigma_pre.colwise() += bias(p, L.sigma);
    if (!sigma_noise.empty())
        for (Eigen::Index n = 0; n < cache.batch; ++n) cache.sigma_pre(0, n) += T(sigma_noise[size_t(n)]);
    cache.sigma = cache.sigma_pre.unaryExpr([](T x) { return softplus(x); });

    // Branch input is [bottleneck; enc]; the encoding half is shared by all columns.
    cache.branch_in.resize(L.branch.in, cache.batch);
    cache.branch_in.topRows(d.bottleneck_width).noalias() = weight(p, L.bottleneck) * top;
    cache.branch_in.topRows(d.bottleneck_width).colwise() += bias(p, L.bottleneck);
    const auto wb = weight(p, L.branch);
    Vector<T> enc_term = wb.rightCols(d.encoding_width()) * cache.enc + bias(p, L.branch);
    cache.branch_pre.noalias() = wb.leftCols(d.bottleneck_width) * cache.branch_in.topRows(d.bottleneck_width);
    cache.branch_pre.colwise() += enc_term;
    if (d.encoding_width() > 0) cache.branch_in.bottomRows(d.encoding_width()) = cache.enc.replicate(1, cache.batch);
    cache.branch_act = cache.branch_pre.cwiseMax(T(0));

    Matrix<T> rgb_pre = weight(p, L.rgb) * cache.branch_act;
    rgb_pre.colwise() += bias(p, L.rgb);
    cache.rgb = rgb_pre.unaryExpr([](T x) { return sigmoid(x); });
}

template <typename T>
RadianceSample forward(const BasicRenderParams<T>& params, NetKind which, std::span<const T> feature,
                       std::span<const double> enc, NetCache<T>& cache)
{
    Matrix<T> x(Eigen::Index(feature.size()), 1);
    for (size_t n = 0; n < feature.size(); ++n) x(Eigen::Index(n), 0) = feature[n];
    forward(params, which, x, enc, cache);
    RadianceSample s;
    for (int c = 0; c < 3; ++c) s.c[size_t(c)] = double(cache.rgb(c, 0));
    s.sigma = double(cache.sigma(0, 0));
    return s;
}

template <typename T>
Matrix<T> backward(const BasicRenderParams<T>& params, const NetCache<T>& cache, const Matrix<T>& d_rgb,
                   const Matrix<T>& d_sigma, std::span<T> param_grad)
{
    const NetDescriptor& d = params.descriptor;
    const NetLayout& L = params.layout;
    const auto p = params.net(cache.kind);
    if (!cache.valid() || cache.params != p.data()) throw InvalidArgument("network cache does not match parameters");
    if (d_rgb.rows() != 3 || d_rgb.cols() != cache.batch || d_sigma.rows() != 1 || d_sigma.cols() != cache.batch)
        throw InvalidArgument("upstream gradient shape does not match the cached batch");
    const bool want_params = !param_grad.empty();
    if (want_params && param_grad.size() != L.parameter_count)
        throw InvalidArgument("parameter gradient buffer has the wrong size");

    // rgb head
    Matrix<T> d_rgb_pre = d_rgb.cwiseProduct(cache.rgb.cwiseProduct((T(1) - cache.rgb.array()).matrix()));
    if (want_params) {
        weight_grad(param_grad, L.rgb).noalias() += d_rgb_pre * cache.branch_act.transpose();
        bias_grad(param_grad, L.rgb) += d_rgb_pre.rowwise().sum();
    }
    Matrix<T> d_branch = weight(p, L.rgb).transpose() * d_rgb_pre;
    d_branch = d_branch.cwiseProduct((cache.branch_pre.array() > T(0)).template cast<T>().matrix());
    if (want_params) {
        weight_grad(param_grad, L.branch).noalias() += d_branch * cache.branch_in.transpose();
        bias_grad(param_grad, L.branch) += d_branch.rowwise().sum();
    }
    Matrix<T> d_bottleneck = weight(p, L.branch).leftCols(d.bottleneck_width).transpose() * d_branch;
    const Matrix<T>& top = cache.trunk_act.back();
    if (want_params) {
        weight_grad(param_grad, L.bottleneck).noalias() += d_bottleneck * top.transpose();
        bias_grad(param_grad, L.bottleneck) += d_bottleneck.rowwise().sum();
    }

    // sigma head: softplus' = sigmoid
    Matrix<T> d_sigma_pre = d_sigma.cwiseProduct(cache.sigma_pre.unaryExpr([](T x) { return sigmoid(x); }));
    if (want_params) {
        weight_grad(param_grad, L.sigma).noalias() += d_sigma_pre * top.transpose();
        bias_grad(param_grad, L.sigma) += d_sigma_pre.rowwise().sum();
    }

    Matrix<T> d_act = weight(p, L.bottleneck).transpose() * d_bottleneck;
    d_act.noalias() += weight(p, L.sigma).transpose() * d_sigma_pre;

    Matrix<T> d_input = Matrix<T>::Zero(d.feat_len, cache.batch);
    for (int l = d.trunk_depth - 1; l >= 0; --l) {
        const LayerSpec& ls = L.trunk[size_t(l)];
        Matrix<T> d_pre =
            d_act.cwiseProduct((cache.trunk_pre[size_t(l)].array() > T(0)).template cast<T>().matrix());
        const bool skip = l > 0 && l == d.skip_layer;
        const Matrix<T>& in = l == 0 ? cache.input : skip ? cache.trunk_in[size_t(l)] : cache.trunk_act[size_t(l - 1)];
        if (want_params) {
            weight_grad(param_grad, ls).noalias() += d_pre * in.transpose();
            bias_grad(param_grad, ls) += d_pre.rowwise().sum();
        }
        Matrix<T> d_in = weight(p, ls).transpose() * d_pre;
        if (l == 0) {
            d_input += d_in;
        } else if (skip) {
            d_act = d_in.topRows(d.trunk_width);
            d_input += d_in.bottomRows(d.feat_len);
        } else {
            d_act = std::move(d_in);
        }
    }
    return d_input;
}

template void forward<float>(const RenderParams&, NetKind, const Matrix<float>&, std::span<const double>,
                             NetCache<float>&, std::span<const double>);
template void forward<double>(const RenderParamsD&, NetKind, const Matrix<double>&, std::span<const double>,
                              NetCache<double>&, std::span<const double>);
template RadianceSample forward<float>(const RenderParams&, NetKind, std::span<const float>,
                                       std::span<const double>, NetCache<float>&);
template RadianceSample forward<double>(const RenderParamsD&, NetKind, std::span<const double>,
                                        std::span<const double>, NetCache<double>&);
template Matrix<float> backward<float>(const RenderParams&, const NetCache<float>&, const Matrix<float>&,
                                       const Matrix<float>&, std::span<float>);
template Matrix<double> backward<double>(const RenderParamsD&, const NetCache<double>&, const Matrix<double>&,
                                         const Matrix<double>&, std::span<double>);

}  // namespace cnrf
