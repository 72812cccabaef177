#pragma once

// Shared radiance network: (sampled feature, encoded view direction) -> (rgb, sigma).
//
// Layout per network, in declaration (and file) order:
//   trunk[0..depth-1]  ReLU; trunk[skip] also receives the raw feature
//   sigma              trunk -> 1, softplus
//   bottleneck         trunk -> bottleneck_width, linear
//   branch             [bottleneck, enc] -> branch_width, ReLU
//   rgb                branch -> 3, sigmoid
// Weight matrices are stored row-major (out x in), each followed by its bias.

#include "cnrf/common.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <span>
#include <vector>

namespace cnrf {

enum class NetKind : int { Coarse = 0, Fine = 1 };

struct NetDescriptor {
    int feat_len = 16;
    int enc_levels = 4;
    int trunk_depth = 4;
    int trunk_width = 64;
    int skip_layer = 2;  // 0 disables the skip connection
    int bottleneck_width = 64;
    int branch_width = 32;

    int encoding_width() const { return 6 * enc_levels; }
    void validate() const;
    bool operator==(const NetDescriptor&) const = default;

    /// depth 4, width 64, skip at 2, branch 32.
    static NetDescriptor desk(int feat_len = 16);
    /// depth 8, width 256, skip at 4, bottleneck 256, branch 128.
    static NetDescriptor full(int feat_len = 64);
};

struct LayerSpec {
    int in = 0, out = 0;
    size_t weight_offset = 0, bias_offset = 0;
};

/// Parameter offsets of one network, derived from a descriptor.
struct NetLayout {
    std::vector<LayerSpec> trunk;
    LayerSpec sigma, bottleneck, branch, rgb;
    size_t parameter_count = 0;

    explicit NetLayout(const NetDescriptor& d);
    NetLayout() = default;
};

template <typename T>
struct BasicRenderParams {
    NetDescriptor descriptor;
    NetLayout layout;
    std::array<AlignedVector<T>, 2> nets;  // coarse, fine

    std::span<T> net(NetKind k) { return nets[size_t(k)]; }
    std::span<const T> net(NetKind k) const { return nets[size_t(k)]; }

    bool all_finite() const;

    template <typename U>
    BasicRenderParams<U> cast() const
    {
        BasicRenderParams<U> out;
        out.descriptor = descriptor;
        out.layout = layout;
        for (int n = 0; n < 2; ++n) out.nets[n].assign(nets[n].begin(), nets[n].end());
        return out;
    }
};

using RenderParams = BasicRenderParams<float>;
using RenderParamsD = BasicRenderParams<double>;

/// Zero-initialised parameters with the given descriptor.
template <typename T>
BasicRenderParams<T> zero_params(const NetDescriptor& d);

/// Fan-in scaled uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases.
RenderParams init_params(const NetDescriptor& d, uint64_t seed);

void save_params(const RenderParams& params, const std::filesystem::path& path);
RenderParams load_params(const std::filesystem::path& path);
std::vector<uint8_t> encode_params(const RenderParams& params);
RenderParams decode_params(const std::vector<uint8_t>& bytes);

/// Content hash of the serialized weights; stamped into volumes trained
/// against these parameters.
uint64_t renderer_hash(const RenderParams& params);

/// Per dimension, per frequency: sin(2^l pi d_k), cos(2^l pi d_k). Throws for
/// directions that are not unit length to within 1e-6.
std::vector<double> pos_encode(const Vec3& d, int levels);

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Activations of one batched forward pass, needed by `backward`.
template <typename T>
struct NetCache {
    const T* params = nullptr;
    NetKind kind = NetKind::Coarse;
    Eigen::Index batch = 0;

    Matrix<T> input;                  // F x N
    Vector<T> enc;                    // 6L, shared by every column
    std::vector<Matrix<T>> trunk_in;  // input to each trunk layer (only stored for skip layer)
    std::vector<Matrix<T>> trunk_pre; // pre-activation per trunk layer
    std::vector<Matrix<T>> trunk_act;
    Matrix<T> sigma_pre;   // 1 x N
    Matrix<T> branch_in;   // (bottleneck + 6L) x N
    Matrix<T> branch_pre;  // branch x N
    Matrix<T> branch_act;
    Matrix<T> rgb;    // 3 x N, after sigmoid
    Matrix<T> sigma;  // 1 x N, after softplus

    bool valid() const { return params != nullptr; }
    void invalidate() { params = nullptr; }
};

struct RadianceSample {
    Rgb c{0, 0, 0};
    double sigma = 0.0;
};

/// Batched forward pass over the columns of `features`. Results land in
/// cache.rgb / cache.sigma. `sigma_noise`, when non-empty, is added to the
/// density pre-activation (one entry per column).
template <typename T>
void forward(const BasicRenderParams<T>& params, NetKind which, const Matrix<T>& features,
             std::span<const double> enc, NetCache<T>& cache, std::span<const double> sigma_noise = {});

/// Single-sample convenience wrapper.
template <typename T>
RadianceSample forward(const BasicRenderParams<T>& params, NetKind which, std::span<const T> feature,
                       std::span<const double> enc, NetCache<T>& cache);

/// Reverse pass. Accumulates parameter gradients into `param_grad` (same
/// layout as params.net(which); pass an empty span to skip them) and returns
/// dLoss/dfeature as an F x N matrix.
template <typename T>
Matrix<T> backward(const BasicRenderParams<T>& params, const NetCache<T>& cache, const Matrix<T>& d_rgb,
                   const Matrix<T>& d_sigma, std::span<T> param_grad);

}  // namespace cnrf
