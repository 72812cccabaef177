#pragma once

// Losses and optimisation loops for the shared renderer and per-scene volumes.

#include "cnrf/feature_volume.hpp"
#include "cnrf/ray_engine.hpp"
#include "cnrf/render_net.hpp"
#include "cnrf/scene_io.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace cnrf {

struct StageSpec {
    int resolution = 16;
    int iterations = 2000;
};

struct TrainConfig {
    int rays_per_batch = 1024;
    int n_coarse = 64;
    int n_fine = 64;
    double lambda_tv = 1e-4;
    double lr_net = 5e-4;
    double lr_volume = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::vector<StageSpec> schedule{{16, 2000}, {32, 2000}, {64, 2000}, {128, 2000}};
    int scene_block = 50;
    uint64_t seed = 0;
    double init_scale = 0.01;
    Rgb background{0, 0, 0};
    double density_noise_std = 0.0;
    NetDescriptor net = NetDescriptor::desk(16);
    /// Fixed-order reduction over `partitions` ray slices; results do not
    /// depend on the thread count. When false, one slice per thread.
    bool deterministic = true;
    int partitions = 8;
    int threads = 0;  // 0: OpenMP default

    void validate() const;
    RenderConfig render_config(bool training) const;
    int feat_len() const { return net.feat_len; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Keys not present keep their defaults; unknown keys and wrongly typed
/// values throw InvalidArgument.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// First/second moment buffers and step count of one Adam-style optimiser.
struct OptimizerState {
    std::vector<float> m, v;
    int64_t step = 0;

    void reset(size_t n)
    {
        m.assign(n, 0.0f);
        v.assign(n, 0.0f);
        step = 0;
    }
};

struct NetOptimizerState {
    std::array<OptimizerState, 2> nets;  // coarse, fine
    static NetOptimizerState for_params(const RenderParams& p);
};

struct AdamSettings {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

void adam_update(std::span<float> params, std::span<const float> grad, OptimizerState& state, const AdamSettings& s);
/// Updates moments and features of the touched cells only; bias correction
/// uses the state's global step count.
void adam_update_sparse(FeatureVolume& volume, const VolumeGrad<float>& grad, OptimizerState& state,
                        const AdamSettings& s);

/// Rays and target colours of a set of frames.
struct RayPool {
    std::vector<Ray> rays;
    std::vector<Rgb> colors;
    static RayPool from_frames(const SceneDataset& ds, const std::vector<int>& frames);
};

template <typename T>
struct LossGrads {
    std::array<AlignedVector<T>, 2> net;
    VolumeGrad<T> volume;
    bool with_net = true;

    static LossGrads make(const BasicRenderParams<T>& p, const BasicFeatureVolume<T>& v, bool with_net = true);
    void clear();
    void merge(const LossGrads& o);
};

struct LossValue {
    double loss = 0.0;      // mean over rays of |coarse - C|^2 + |fine - C|^2
    double mse_fine = 0.0;  // per-channel MSE of the fine estimates
};

struct Reduction {
    int partitions = 1;
    int threads = 0;
};

/// Reconstruction loss over a batch of rays. Ray r samples with
/// Rng::derive(seed, r). When `grads` is non-null the gradient of the loss
/// is accumulated into it; parallel slices reduce in fixed order.
template <typename T>
LossValue reconstruction_loss(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params,
                              std::span<const Ray> rays, std::span<const Rgb> targets, const RenderConfig& config,
                              uint64_t seed, LossGrads<T>* grads, const Reduction& reduction = {});

struct SceneSlot {
    std::string id;
    FeatureVolume volume;
    OptimizerState volume_opt;
    std::shared_ptr<const SceneDataset> dataset;
    RayPool pool;

    /// Fresh volume at the first schedule resolution over the dataset box.
    static SceneSlot create(std::string id, std::shared_ptr<const SceneDataset> dataset, const TrainConfig& config,
                            uint64_t volume_seed);
};

struct StepMetrics {
    int64_t iteration = 0;
    double loss_r = 0.0;
    double loss_tv = 0.0;  // already multiplied by lambda
    double mse_fine = 0.0;
};

/// One optimiser update of the volume and, unless `params` is null, of the
/// network. `const_params` is what the forward pass reads; pass the same
/// object twice for joint training.
StepMetrics train_step(SceneSlot& slot, RenderParams* params, const RenderParams& const_params,
                       NetOptimizerState& net_opt, const TrainConfig& config, Rng& rng, int64_t iteration);

struct TrainHooks {
    std::ostream* log = nullptr;  // CSV: iter,scene,stage,loss_r,loss_tv,psnr_running
    std::filesystem::path checkpoint_dir;
    bool write_header = true;
};

struct TrainSummary {
    int64_t iterations = 0;
    std::vector<int64_t> visits;  // scene visits (blocks), per slot
    std::vector<StepMetrics> last;
    double seconds = 0.0;
};

/// Coarse-to-fine round-robin training of the shared network and every
/// slot's volume.
TrainSummary train_multi_scene(std::vector<SceneSlot>& slots, RenderParams& params, NetOptimizerState& net_opt,
                               const TrainConfig& config, const TrainHooks& hooks = {});

/// Same loop with a single slot and the network frozen. Throws
/// InvariantViolation if any network parameter changes.
FeatureVolume optimize_novel_scene(std::shared_ptr<const SceneDataset> dataset, const RenderParams& params,
                                   const TrainConfig& config, const TrainHooks& hooks = {},
                                   TrainSummary* summary = nullptr);

void write_checkpoint(const std::filesystem::path& dir, const std::vector<SceneSlot>& slots,
                      const RenderParams& params, const TrainConfig& config, int stage, int64_t iteration,
                      const Rng& rng);

struct ViewMetrics {
    int index = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Renders the listed frames and scores them against the dataset images.
EvalReport evaluate(const FeatureVolume& volume, const RenderParams& params, const SceneDataset& dataset,
                    const std::vector<int>& frames, const RenderConfig& config, int threads = 0);

}  // namespace cnrf
