#include "cnrf/trainer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace cnrf {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const
{
    if (rays_per_batch < 1 || n_coarse < 1 || n_fine < 0 || scene_block < 1 || partitions < 1 || threads < 0)
        throw InvalidArgument("train config counts must be positive");
    if (!(lambda_tv >= 0.0) || !(lr_net > 0.0) || !(lr_volume > 0.0) || !(epsilon > 0.0))
        throw InvalidArgument("train config rates must be positive (lambda_tv >= 0)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw InvalidArgument("optimizer moments must lie in [0, 1)");
    if (!(init_scale >= 0.0) || !(density_noise_std >= 0.0)) throw InvalidArgument("scales must be >= 0");
    if (schedule.empty()) throw InvalidArgument("resolution schedule is empty");
    for (size_t s = 0; s < schedule.size(); ++s) {
        if (schedule[s].resolution < 2 || schedule[s].iterations < 0)
            throw InvalidArgument("schedule stages need resolution >= 2 and iterations >= 0");
        if (s > 0 && schedule[s].resolution != 2 * schedule[s - 1].resolution)
            throw InvalidArgument("schedule resolutions must double at every stage");
    }
    net.validate();
}

RenderConfig TrainConfig::render_config(bool training) const
{
    RenderConfig r;
    r.n_coarse = n_coarse;
    r.n_fine = n_fine;
    r.jitter = training;
    r.background = background;
    r.density_noise_std = training ? density_noise_std : 0.0;
    return r;
}

void to_json(json& j, const TrainConfig& c)
{
    json sched = json::array();
    for (const auto& s : c.schedule) sched.push_back({{"resolution", s.resolution}, {"iterations", s.iterations}});
    j = {{"rays_per_batch", c.rays_per_batch},
         {"n_coarse", c.n_coarse},
         {"n_fine", c.n_fine},
         {"lambda_tv", c.lambda_tv},
         {"lr_net", c.lr_net},
         {"lr_volume", c.lr_volume},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"epsilon", c.epsilon},
         {"schedule", sched},
         {"scene_block", c.scene_block},
         {"seed", c.seed},
         {"init_scale", c.init_scale},
         {"background", json::array({c.background[0], c.background[1], c.background[2]})},
         {"density_noise_std", c.density_noise_std},
         {"net",
          {{"feat_len", c.net.feat_len},
           {"enc_levels", c.net.enc_levels},
           {"trunk_depth", c.net.trunk_depth},
           {"trunk_width", c.net.trunk_width},
           {"skip_layer", c.net.skip_layer},
           {"bottleneck_width", c.net.bottleneck_width},
           {"branch_width", c.net.branch_width}}},
         {"deterministic", c.deterministic},
         {"partitions", c.partitions},
         {"threads", c.threads}};
}

namespace {

template <typename V>
void read_field(const json& j, const char* key, V& out)
{
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw InvalidArgument(std::string("config key '") + key + "' must be a boolean");
    } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw InvalidArgument(std::string("config key '") + key + "' must be an integer");
        if (std::is_unsigned_v<V> && v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0)
            throw InvalidArgument(std::string("config key '") + key + "' must be non-negative");
    } else {
        if (!v.is_number()) throw InvalidArgument(std::string("config key '") + key + "' must be a number");
    }
    out = v.get<V>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where)
{
    if (!j.is_object()) throw InvalidArgument(std::string(where) + " must be a JSON object");
    std::set<std::string> k(known.begin(), known.end());
    for (const auto& [key, _] : j.items())
        if (!k.count(key)) throw InvalidArgument(std::string("unknown ") + where + " key '" + key + "'");
}

}  // namespace

void from_json(const json& j, TrainConfig& c)
{
    reject_unknown(j,
                   {"rays_per_batch", "n_coarse", "n_fine", "lambda_tv", "lr_net", "lr_volume", "beta1", "beta2",
                    "epsilon", "schedule", "scene_block", "seed", "init_scale", "background", "density_noise_std",
                    "net", "deterministic", "partitions", "threads"},
                   "config");
    read_field(j, "rays_per_batch", c.rays_per_batch);
    read_field(j, "n_coarse", c.n_coarse);
    read_field(j, "n_fine", c.n_fine);
    read_field(j, "lambda_tv", c.lambda_tv);
    read_field(j, "lr_net", c.lr_net);
    read_field(j, "lr_volume", c.lr_volume);
    read_field(j, "beta1", c.beta1);
    read_field(j, "beta2", c.beta2);
    read_field(j, "epsilon", c.epsilon);
    read_field(j, "scene_block", c.scene_block);
    read_field(j, "seed", c.seed);
    read_field(j, "init_scale", c.init_scale);
    read_field(j, "density_noise_std", c.density_noise_std);
    read_field(j, "deterministic", c.deterministic);
    read_field(j, "partitions", c.partitions);
    read_field(j, "threads", c.threads);
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        if (!s.is_array()) throw InvalidArgument("config key 'schedule' must be an array");
        c.schedule.clear();
        for (const json& e : s) {
            reject_unknown(e, {"resolution", "iterations"}, "schedule stage");
            StageSpec st;
            read_field(e, "resolution", st.resolution);
            read_field(e, "iterations", st.iterations);
            c.schedule.push_back(st);
        }
    }
    if (j.contains("background")) {
        const json& b = j.at("background");
        if (!b.is_array() || b.size() != 3) throw InvalidArgument("config key 'background' must be 3 numbers");
        for (size_t k = 0; k < 3; ++k) {
            if (!b[k].is_number()) throw InvalidArgument("config key 'background' must be 3 numbers");
            c.background[k] = b[k].get<double>();
        }
    }
    if (j.contains("net")) {
        const json& n = j.at("net");
        reject_unknown(n,
                       {"feat_len", "enc_levels", "trunk_depth", "trunk_width", "skip_layer", "bottleneck_width",
                        "branch_width"},
                       "net");
        read_field(n, "feat_len", c.net.feat_len);
        read_field(n, "enc_levels", c.net.enc_levels);
        read_field(n, "trunk_depth", c.net.trunk_depth);
        read_field(n, "trunk_width", c.net.trunk_width);
        read_field(n, "skip_layer", c.net.skip_layer);
        read_field(n, "bottleneck_width", c.net.bottleneck_width);
        read_field(n, "branch_width", c.net.branch_width);
    }
    c.validate();
}

// ---------------------------------------------------------------------------
// Optimiser

NetOptimizerState NetOptimizerState::for_params(const RenderParams& p)
{
    NetOptimizerState s;
    for (int n = 0; n < 2; ++n) s.nets[size_t(n)].reset(p.nets[size_t(n)].size());
    return s;
}

void adam_update(std::span<float> params, std::span<const float> grad, OptimizerState& st, const AdamSettings& s)
{
    if (grad.size() != params.size()) throw InvalidArgument("gradient and parameter sizes differ");
    if (st.m.size() != params.size()) st.reset(params.size());
    ++st.step;
    const double c1 = 1.0 - std::pow(s.beta1, double(st.step));
    const double c2 = 1.0 - std::pow(s.beta2, double(st.step));
    const float b1 = float(s.beta1), b2 = float(s.beta2);
    const float step = float(s.lr / c1);
    const float inv_c2 = float(1.0 / c2);
    const float eps = float(s.epsilon);
    for (size_t n = 0; n < params.size(); ++n) {
        const float g = grad[n];
        st.m[n] = b1 * st.m[n] + (1.0f - b1) * g;
        st.v[n] = b2 * st.v[n] + (1.0f - b2) * g * g;
        params[n] -= step * st.m[n] / (std::sqrt(st.v[n] * inv_c2) + eps);
    }
}

void adam_update_sparse(FeatureVolume& volume, const VolumeGrad<float>& grad, OptimizerState& st,
                        const AdamSettings& s)
{
    const size_t total = volume.data().size();
    if (st.m.size() != total) st.reset(total);
    ++st.step;
    const double c1 = 1.0 - std::pow(s.beta1, double(st.step));
    const double c2 = 1.0 - std::pow(s.beta2, double(st.step));
    const float b1 = float(s.beta1), b2 = float(s.beta2);
    const float step = float(s.lr / c1);
    const float inv_c2 = float(1.0 / c2);
    const float eps = float(s.epsilon);
    const int F = volume.feat_len();
    auto data = volume.data();
    for (uint32_t cell : grad.touched()) {
        const auto g = grad.cell(cell);
        const size_t base = size_t(cell) * F;
        for (int f = 0; f < F; ++f) {
            const size_t n = base + size_t(f);
            st.m[n] = b1 * st.m[n] + (1.0f - b1) * g[size_t(f)];
            st.v[n] = b2 * st.v[n] + (1.0f - b2) * g[size_t(f)] * g[size_t(f)];
            data[n] -= step * st.m[n] / (std::sqrt(st.v[n] * inv_c2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Loss

RayPool RayPool::from_frames(const SceneDataset& ds, const std::vector<int>& frames)
{
    RayPool pool;
    for (int f : frames) {
        const Frame& fr = ds.frames.at(size_t(f));
        for (int y = 0; y < fr.image.height; ++y)
            for (int x = 0; x < fr.image.width; ++x) {
                pool.rays.push_back(generate_ray(fr.camera, x, y));
                pool.colors.push_back({fr.image.at(x, y, 0), fr.image.at(x, y, 1), fr.image.at(x, y, 2)});
            }
    }
    return pool;
}

template <typename T>
LossGrads<T> LossGrads<T>::make(const BasicRenderParams<T>& p, const BasicFeatureVolume<T>& v, bool with_net)
{
    LossGrads g;
    g.with_net = with_net;
    if (with_net)
        for (int n = 0; n < 2; ++n) g.net[size_t(n)].assign(p.nets[size_t(n)].size(), T(0));
    g.volume = VolumeGrad<T>::like(v);
    return g;
}

template <typename T>
void LossGrads<T>::clear()
{
    for (auto& n : net) std::fill(n.begin(), n.end(), T(0));
    volume.clear();
}

template <typename T>
void LossGrads<T>::merge(const LossGrads& o)
{
    if (with_net && o.with_net)
        for (size_t n = 0; n < 2; ++n)
            for (size_t k = 0; k < net[n].size(); ++k) net[n][k] += o.net[n][k];
    volume.merge(o.volume);
}

template <typename T>
LossValue reconstruction_loss(const BasicFeatureVolume<T>& volume, const BasicRenderParams<T>& params,
                              std::span<const Ray> rays, std::span<const Rgb> targets, const RenderConfig& config,
                              uint64_t seed, LossGrads<T>* grads, const Reduction& reduction)
{
    const size_t B = rays.size();
    if (B == 0) throw InvalidArgument("reconstruction loss needs at least one ray");
    if (targets.size() != B) throw InvalidArgument("one target colour per ray required");
    const int P = int(std::min<size_t>(size_t(std::max(reduction.partitions, 1)), B));
    const bool with_net = grads && grads->with_net;

    std::vector<LossGrads<T>> parts;
    if (grads) {
        parts.reserve(size_t(P));
        parts.push_back(std::move(*grads));  // slice 0 accumulates in place
        for (int p = 1; p < P; ++p) parts.push_back(LossGrads<T>::make(params, volume, with_net));
    }
    std::vector<double> loss(size_t(P), 0.0), se_fine(size_t(P), 0.0);
    const double inv_b = 1.0 / double(B);
    ExceptionSlot errors;

    auto slice = [&](int p) {
        const size_t begin = B * size_t(p) / size_t(P), end = B * size_t(p + 1) / size_t(P);
        PixelRender<T> pr;
        for (size_t r = begin; r < end; ++r) {
            Rng rng = Rng::derive(seed, r);
            render_pixel(volume, params, rays[r], config, rng, pr);
            Rgb dc{}, df{};
            double l = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double ec = pr.coarse.pixel.rgb[size_t(k)] - targets[r][size_t(k)];
                const double ef = pr.fine.pixel.rgb[size_t(k)] - targets[r][size_t(k)];
                l += ec * ec + ef * ef;
                se_fine[size_t(p)] += ef * ef;
                dc[size_t(k)] = 2.0 * ec * inv_b;
                df[size_t(k)] = 2.0 * ef * inv_b;
            }
            loss[size_t(p)] += l;
            if (!grads) continue;
            LossGrads<T>& g = parts[size_t(p)];
            trace_backward(volume, params, pr.coarse, config, dc,
                           with_net ? std::span<T>(g.net[0]) : std::span<T>(), &g.volume);
            trace_backward(volume, params, pr.fine, config, df,
                           with_net ? std::span<T>(g.net[1]) : std::span<T>(), &g.volume);
        }
    };

#ifdef _OPENMP
    const int nthreads = reduction.threads > 0 ? reduction.threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic, 1) num_threads(nthreads)
#endif
    for (int p = 0; p < P; ++p) errors.run([&] { slice(p); });
    errors.rethrow();

    LossValue out;
    for (int p = 0; p < P; ++p) {
        out.loss += loss[size_t(p)];
        out.mse_fine += se_fine[size_t(p)];
    }
    out.loss *= inv_b;
    out.mse_fine *= inv_b / 3.0;
    if (grads) {
        for (int p = 1; p < P; ++p) parts[0].merge(parts[size_t(p)]);
        *grads = std::move(parts[0]);
    }
    return out;
}

template struct LossGrads<float>;
template struct LossGrads<double>;
template LossValue reconstruction_loss<float>(const FeatureVolume&, const RenderParams&, std::span<const Ray>,
                                              std::span<const Rgb>, const RenderConfig&, uint64_t,
                                              LossGrads<float>*, const Reduction&);
template LossValue reconstruction_loss<double>(const FeatureVolumeD&, const RenderParamsD&, std::span<const Ray>,
                                               std::span<const Rgb>, const RenderConfig&, uint64_t,
                                               LossGrads<double>*, const Reduction&);

// ---------------------------------------------------------------------------
// Training loops

SceneSlot SceneSlot::create(std::string id, std::shared_ptr<const SceneDataset> dataset, const TrainConfig& config,
                            uint64_t volume_seed)
{
    if (!dataset) throw InvalidArgument("scene slot needs a dataset");
    config.validate();
    SceneSlot s;
    s.id = std::move(id);
    s.volume = new_volume(GridDims::cube(config.schedule.front().resolution), config.feat_len(), dataset->aabb,
                          config.init_scale, volume_seed);
    s.volume_opt.reset(s.volume.data().size());
    s.pool = RayPool::from_frames(*dataset, dataset->train);
    if (s.pool.rays.empty()) throw InvalidArgument("dataset " + dataset->scene_id + " has no training frames");
    s.dataset = std::move(dataset);
    return s;
}

StepMetrics train_step(SceneSlot& slot, RenderParams* params, const RenderParams& const_params,
                       NetOptimizerState& net_opt, const TrainConfig& config, Rng& rng, int64_t iteration)
{
    if (!(slot.volume.bounds() == slot.dataset->aabb)) throw InvalidArgument("volume bounds differ from dataset box");
    const bool update_net = params != nullptr;
    const size_t B = size_t(config.rays_per_batch);
    std::vector<Ray> rays(B);
    std::vector<Rgb> targets(B);
    for (size_t r = 0; r < B; ++r) {
        const size_t idx = size_t(rng.below(slot.pool.rays.size()));
        rays[r] = slot.pool.rays[idx];
        targets[r] = slot.pool.colors[idx];
    }
    const uint64_t ray_seed = rng.next_u64();

    Reduction red;
    red.threads = config.threads;
#ifdef _OPENMP
    red.partitions = config.deterministic ? config.partitions
                                          : (config.threads > 0 ? config.threads : omp_get_max_threads());
#else
    red.partitions = config.partitions;
#endif
    LossGrads<float> grads = LossGrads<float>::make(const_params, slot.volume, update_net);
    const LossValue lv = reconstruction_loss(slot.volume, const_params, std::span<const Ray>(rays),
                                             std::span<const Rgb>(targets), config.render_config(true), ray_seed,
                                             &grads, red);

    const VolumeRegion region = tv_region_sample(slot.volume.dims(), rng);
    double tv = 0.0;
    if (config.lambda_tv > 0.0) tv = tv_loss(slot.volume, region, &grads.volume, config.lambda_tv);

    StepMetrics m;
    m.iteration = iteration;
    m.loss_r = lv.loss;
    m.loss_tv = tv;
    m.mse_fine = lv.mse_fine;
    if (!std::isfinite(m.loss_r) || !std::isfinite(m.loss_tv)) {
        std::ostringstream os;
        os << "non-finite loss at iteration " << iteration << ", scene " << slot.id << ": loss_r=" << m.loss_r
           << " loss_tv=" << m.loss_tv;
        throw TrainingDiverged(os.str());
    }

    if (update_net) {
        const AdamSettings net_s{config.lr_net, config.beta1, config.beta2, config.epsilon};
        for (size_t n = 0; n < 2; ++n)
            adam_update(params->nets[n], grads.net[n], net_opt.nets[n], net_s);
    }
    const AdamSettings vol_s{config.lr_volume, config.beta1, config.beta2, config.epsilon};
    adam_update_sparse(slot.volume, grads.volume, slot.volume_opt, vol_s);
    return m;
}

namespace {

TrainSummary run_training(std::vector<SceneSlot>& slots, RenderParams* params, const RenderParams& const_params,
                          NetOptimizerState& net_opt, const TrainConfig& config, const TrainHooks& hooks)
{
    config.validate();
    if (slots.empty()) throw InvalidArgument("training needs at least one scene");
    if (const_params.descriptor.feat_len != config.feat_len())
        throw InvalidArgument("network feature length does not match the config");
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(config.seed);
    TrainSummary summary;
    summary.visits.assign(slots.size(), 0);
    summary.last.resize(slots.size());
    if (hooks.log && hooks.write_header) *hooks.log << "iter,scene,stage,loss_r,loss_tv,psnr_running\n";
    double running_mse = -1.0;

    for (size_t stage = 0; stage < config.schedule.size(); ++stage) {
        const int res = config.schedule[stage].resolution;
        for (const SceneSlot& s : slots)
            if (!(s.volume.dims() == GridDims::cube(res)))
                throw InvalidArgument("volume of scene " + s.id + " does not match stage resolution " +
                                      std::to_string(res));
        int64_t remaining = config.schedule[stage].iterations;
        while (remaining > 0) {
            const size_t scene = size_t(rng.below(slots.size()));
            ++summary.visits[scene];
            const int64_t block = std::min<int64_t>(config.scene_block, remaining);
            for (int64_t b = 0; b < block; ++b) {
                StepMetrics m =
                    train_step(slots[scene], params, const_params, net_opt, config, rng, summary.iterations);
                running_mse = running_mse < 0.0 ? m.mse_fine : 0.9 * running_mse + 0.1 * m.mse_fine;
                summary.last[scene] = m;
                if (hooks.log) {
                    *hooks.log << summary.iterations << "," << slots[scene].id << "," << stage << ","
                               << std::setprecision(8) << m.loss_r << "," << m.loss_tv << ","
                               << -10.0 * std::log10(std::max(running_mse, 1e-10)) << "\n";
                }
                ++summary.iterations;
            }
            remaining -= block;
        }
        if (stage + 1 < config.schedule.size()) {
            if (!hooks.checkpoint_dir.empty())
                write_checkpoint(hooks.checkpoint_dir, slots, const_params, config, int(stage), summary.iterations,
                                 rng);
            for (SceneSlot& s : slots) {
                s.volume = upsample_2x(s.volume);
                s.volume_opt.reset(s.volume.data().size());
            }
        }
    }
    const uint64_t hash = renderer_hash(const_params);
    for (SceneSlot& s : slots) s.volume.set_renderer_hash(hash);
    if (!hooks.checkpoint_dir.empty())
        write_checkpoint(hooks.checkpoint_dir, slots, const_params, config, int(config.schedule.size()) - 1,
                         summary.iterations, rng);
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return summary;
}

}  // namespace

TrainSummary train_multi_scene(std::vector<SceneSlot>& slots, RenderParams& params, NetOptimizerState& net_opt,
                               const TrainConfig& config, const TrainHooks& hooks)
{
    if (net_opt.nets[0].m.size() != params.nets[0].size()) net_opt = NetOptimizerState::for_params(params);
    return run_training(slots, &params, params, net_opt, config, hooks);
}

FeatureVolume optimize_novel_scene(std::shared_ptr<const SceneDataset> dataset, const RenderParams& params,
                                   const TrainConfig& config, const TrainHooks& hooks, TrainSummary* summary)
{
    const uint64_t before = renderer_hash(params);
    std::vector<SceneSlot> slots;
    slots.push_back(SceneSlot::create(dataset->scene_id, dataset, config, Rng::derive(config.seed, 0).next_u64()));
    NetOptimizerState unused;
    TrainSummary s = run_training(slots, nullptr, params, unused, config, hooks);
    if (renderer_hash(params) != before) throw InvariantViolation("network parameters changed during frozen optimisation");
    if (summary) *summary = s;
    return std::move(slots.front().volume);
}

void write_checkpoint(const fs::path& dir, const std::vector<SceneSlot>& slots, const RenderParams& params,
                      const TrainConfig& config, int stage, int64_t iteration, const Rng& rng)
{
    fs::create_directories(dir);
    save_params(params, dir / "net.cnrfnet");
    const uint64_t hash = renderer_hash(params);
    for (const SceneSlot& s : slots) {
        FeatureVolume v = s.volume;
        v.set_renderer_hash(hash);
        save_volume(v, dir / ("scene_" + s.id + ".cnrfvol"));
    }
    json state = {{"stage", stage},
                  {"iteration", iteration},
                  {"rng_state", rng.state()},
                  {"renderer_hash", hex64(hash)},
                  {"config", config}};
    std::ofstream out(dir / "state.json");
    out << state.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

void to_json(json& j, const EvalReport& r)
{
    json views = json::array();
    for (const auto& v : r.views) views.push_back({{"index", v.index}, {"psnr", v.psnr}, {"ssim", v.ssim}});
    j = {{"views", views}, {"mean_psnr", r.mean_psnr}, {"mean_ssim", r.mean_ssim}};
}

EvalReport evaluate(const FeatureVolume& volume, const RenderParams& params, const SceneDataset& dataset,
                    const std::vector<int>& frames, const RenderConfig& config, int threads)
{
    EvalReport rep;
    for (int f : frames) {
        const Frame& fr = dataset.frames.at(size_t(f));
        const Image img = render_image(volume, params, fr.camera, config, 0, threads);
        rep.views.push_back({f, psnr(img, fr.image), ssim(img, fr.image)});
    }
    for (const auto& v : rep.views) {
        rep.mean_psnr += v.psnr;
        rep.mean_ssim += v.ssim;
    }
    if (!rep.views.empty()) {
        rep.mean_psnr /= double(rep.views.size());
        rep.mean_ssim /= double(rep.views.size());
    }
    return rep;
}

}  // namespace cnrf
