#include "cnrf/cli.hpp"

#include "cnrf/edit_engine.hpp"
#include "cnrf/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cnrf {

namespace {

struct Globals {
    std::string config_path;
    std::optional<uint64_t> seed;
    int threads = 0;
    std::string out;
    std::vector<std::string> overrides;
    int verbose = 0;
};

json read_json_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidArgument("malformed JSON in " + path.string() + ": " + e.what());
    }
}

// `--set a.b=value`: value is parsed as JSON when possible, otherwise taken
// as a string, and must address a key the config already has.
void apply_override(json& cfg, const std::string& kv)
{
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
    std::string ptr = "/" + key;
    for (char& c : ptr)
        if (c == '.') c = '/';
    const json::json_pointer jp(ptr);
    if (!cfg.contains(jp)) throw InvalidArgument("unknown config key '" + key + "'");
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    cfg[jp] = value;
}

TrainConfig build_config(const Globals& g)
{
    json j = TrainConfig{};
    if (!g.config_path.empty()) {
        TrainConfig from_file = read_json_file(g.config_path).get<TrainConfig>();
        j = from_file;
    }
    for (const auto& kv : g.overrides) apply_override(j, kv);
    if (g.seed) j["seed"] = *g.seed;
    if (g.threads > 0) j["threads"] = g.threads;
    return j.get<TrainConfig>();
}

SceneDataset open_dataset(const fs::path& dir, bool llff)
{
    if (!fs::is_directory(dir)) throw LoadError("scene directory not found: " + dir.string());
    SceneDataset ds = llff ? load_llff(dir) : load_dataset(dir);
    if (ds.scene_id.empty()) ds.scene_id = dir.filename().string();
    return ds;
}

void emit_json(const json& j, const std::string& out_path, std::ostream& out)
{
    if (out_path.empty()) {
        out << j.dump(2) << "\n";
        return;
    }
    const fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << j.dump(2) << "\n";
}

std::vector<int> split_frames(const SceneDataset& ds, const std::string& split)
{
    if (split == "heldout") return ds.heldout;
    if (split == "train") return ds.train;
    if (split == "all") {
        std::vector<int> all(ds.frames.size());
        for (size_t n = 0; n < all.size(); ++n) all[n] = int(n);
        return all;
    }
    throw InvalidArgument("split must be train, heldout or all");
}

void check_hash(const FeatureVolume& v, const RenderParams& p, const std::string& what)
{
    const uint64_t h = renderer_hash(p);
    if (v.renderer_hash() != 0 && v.renderer_hash() != h)
        throw IncompatibleScenes(what + " was optimised against renderer " + hex64(v.renderer_hash()) +
                                 ", not " + hex64(h));
}

RenderConfig render_config_for(const TrainConfig& cfg)
{
    return cfg.render_config(false);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Shared-renderer feature-volume radiance fields", "cnrf"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "training config (JSON)");
    app.add_option("--seed", g.seed, "random seed");
    app.add_option("--threads", g.threads, "worker threads (0: default)");
    app.add_option("--out", g.out, "output path or directory");
    app.add_option("--set", g.overrides, "config override key=value (dots for nesting)");
    app.add_flag("-v,--verbose", g.verbose, "more log output");
    for (auto* opt : app.get_options()) opt->configurable(false);
    app.fallthrough();

    // train
    auto* train = app.add_subcommand("train", "train the shared renderer and one volume per scene");
    std::vector<std::string> train_dirs;
    bool train_llff = false;
    train->add_option("scenes", train_dirs, "dataset directories")->required();
    train->add_flag("--llff", train_llff, "read LLFF poses_bounds.npy datasets");

    // optimize
    auto* optimize = app.add_subcommand("optimize", "fit a new scene's volume against a frozen renderer");
    std::string opt_net, opt_scene;
    bool opt_llff = false;
    optimize->add_option("--net", opt_net, "renderer checkpoint")->required();
    optimize->add_option("scene", opt_scene, "dataset directory")->required();
    optimize->add_flag("--llff", opt_llff, "read an LLFF dataset");

    // render
    auto* render = app.add_subcommand("render", "render views of a volume");
    std::string r_net, r_vol, r_dataset, r_split = "heldout";
    int r_orbit = 0, r_size = 64;
    double r_radius = 3.5, r_height = 1.5, r_focal = 70.0;
    bool r_llff = false;
    render->add_option("--net", r_net, "renderer checkpoint")->required();
    render->add_option("--volume", r_vol, "feature volume")->required();
    render->add_option("--dataset", r_dataset, "dataset whose cameras to render");
    render->add_option("--split", r_split, "train | heldout | all");
    render->add_flag("--llff", r_llff, "read an LLFF dataset");
    render->add_option("--orbit", r_orbit, "render n turntable views instead");
    render->add_option("--radius", r_radius, "orbit radius");
    render->add_option("--height", r_height, "orbit height above the volume centre");
    render->add_option("--size", r_size, "orbit image size in pixels");
    render->add_option("--focal", r_focal, "orbit focal length in pixels");

    // edit
    auto* edit = app.add_subcommand("edit", "apply an edit script");
    std::string e_script;
    edit->add_option("script", e_script, "edit script JSON")->required();

    // fuse
    auto* fuse = app.add_subcommand("fuse", "max-norm fusion of two volumes");
    std::string f_a, f_b;
    fuse->add_option("a", f_a, "first volume")->required();
    fuse->add_option("b", f_b, "second volume")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "score rendered views against a dataset");
    std::string v_net, v_vol, v_dataset, v_split = "heldout";
    bool v_llff = false;
    eval->add_option("--net", v_net, "renderer checkpoint")->required();
    eval->add_option("--volume", v_vol, "feature volume")->required();
    eval->add_option("dataset", v_dataset, "dataset directory")->required();
    eval->add_option("--split", v_split, "train | heldout | all");
    eval->add_flag("--llff", v_llff, "read an LLFF dataset");

    // synth
    auto* synth = app.add_subcommand("synth", "render a synthetic dataset from a scene spec");
    std::string s_spec;
    synth->add_option("spec", s_spec, "scene spec JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    }

    try {
        if (train->parsed()) {
            const TrainConfig cfg = build_config(g);
            const fs::path dir = g.out.empty() ? fs::path("run") : fs::path(g.out);
            std::vector<std::shared_ptr<const SceneDataset>> sets;
            for (const auto& d : train_dirs) sets.push_back(std::make_shared<SceneDataset>(open_dataset(d, train_llff)));
            std::vector<SceneSlot> slots;
            for (size_t n = 0; n < sets.size(); ++n)
                slots.push_back(SceneSlot::create(sets[n]->scene_id, sets[n], cfg,
                                                  Rng::derive(cfg.seed, n + 1).next_u64()));
            RenderParams params = init_params(cfg.net, Rng::derive(cfg.seed, 0x6e6574).next_u64());
            NetOptimizerState opt = NetOptimizerState::for_params(params);
            fs::create_directories(dir);
            std::ofstream log(dir / "train_log.csv");
            TrainHooks hooks;
            hooks.log = &log;
            hooks.checkpoint_dir = dir;
            const TrainSummary sum = train_multi_scene(slots, params, opt, cfg, hooks);
            json metrics = {{"iterations", sum.iterations}, {"seconds", sum.seconds},
                            {"renderer_hash", hex64(renderer_hash(params))}};
            for (const SceneSlot& s : slots)
                metrics["scenes"][s.id] =
                    evaluate(s.volume, params, *s.dataset, s.dataset->heldout, render_config_for(cfg), cfg.threads);
            emit_json(metrics, (dir / "metrics.json").string(), out);
            out << metrics.dump(2) << "\n";
            return kExitOk;
        }
        if (optimize->parsed()) {
            const TrainConfig cfg = build_config(g);
            const RenderParams params = load_params(opt_net);
            if (params.descriptor.feat_len != cfg.feat_len())
                throw InvalidArgument("network feature length " + std::to_string(params.descriptor.feat_len) +
                                      " disagrees with config feat_len " + std::to_string(cfg.feat_len()));
            TrainConfig run_cfg = cfg;
            run_cfg.net = params.descriptor;
            auto ds = std::make_shared<SceneDataset>(open_dataset(opt_scene, opt_llff));
            const fs::path dir = g.out.empty() ? fs::path("run_" + ds->scene_id) : fs::path(g.out);
            fs::create_directories(dir);
            std::ofstream log(dir / "optimize_log.csv");
            TrainHooks hooks;
            hooks.log = &log;
            TrainSummary sum;
            const FeatureVolume vol = optimize_novel_scene(ds, params, run_cfg, hooks, &sum);
            const fs::path vol_path = dir / ("scene_" + ds->scene_id + ".cnrfvol");
            save_volume(vol, vol_path);
            json metrics = {{"iterations", sum.iterations},
                            {"seconds", sum.seconds},
                            {"volume", vol_path.string()},
                            {"renderer_hash", hex64(vol.renderer_hash())},
                            {"heldout", evaluate(vol, params, *ds, ds->heldout, render_config_for(run_cfg),
                                                 run_cfg.threads)}};
            out << metrics.dump(2) << "\n";
            return kExitOk;
        }
        if (render->parsed()) {
            const TrainConfig cfg = build_config(g);
            const RenderParams params = load_params(r_net);
            const FeatureVolume vol = load_volume(r_vol);
            check_hash(vol, params, r_vol);
            const fs::path dir = g.out.empty() ? fs::path("renders") : fs::path(g.out);
            fs::create_directories(dir);
            const uint64_t seed = g.seed.value_or(0);
            std::vector<Camera> cams;
            if (r_orbit > 0) {
                Intrinsics k{r_focal, r_focal, r_size / 2.0, r_size / 2.0, r_size, r_size};
                const double dist = std::hypot(r_radius, r_height);
                const double half = 0.5 * vol.bounds().extent().norm();
                cams = orbit_cameras(k, vol.bounds().center(), r_radius, r_height, r_orbit,
                                     std::max(1e-3, dist - half), dist + half);
            } else if (!r_dataset.empty()) {
                const SceneDataset ds = open_dataset(r_dataset, r_llff);
                for (int f : split_frames(ds, r_split)) cams.push_back(ds.frames[size_t(f)].camera);
            } else {
                throw InvalidArgument("render needs --dataset or --orbit");
            }
            for (size_t n = 0; n < cams.size(); ++n) {
                const Image img = render_image(vol, params, cams[n], render_config_for(cfg), seed, cfg.threads);
                std::ostringstream name;
                name << std::setw(3) << std::setfill('0') << n << ".png";
                write_image(dir / name.str(), img);
            }
            out << cams.size() << " views written to " << dir.string() << "\n";
            return kExitOk;
        }
        if (edit->parsed()) {
            const fs::path script_path(e_script);
            const EditScript script = load_edit_script(script_path);
            run_edit_script(script, script_path.has_parent_path() ? script_path.parent_path() : fs::path("."));
            for (const auto& [name, path] : script.outputs) out << name << " -> " << path.string() << "\n";
            return kExitOk;
        }
        if (fuse->parsed()) {
            if (g.out.empty()) throw InvalidArgument("fuse needs --out");
            const FeatureVolume fused = fuse_max_norm(load_volume(f_a), load_volume(f_b));
            save_volume(fused, g.out);
            out << "fused volume written to " << g.out << "\n";
            return kExitOk;
        }
        if (eval->parsed()) {
            const TrainConfig cfg = build_config(g);
            const RenderParams params = load_params(v_net);
            const FeatureVolume vol = load_volume(v_vol);
            check_hash(vol, params, v_vol);
            const SceneDataset ds = open_dataset(v_dataset, v_llff);
            json report = evaluate(vol, params, ds, split_frames(ds, v_split), render_config_for(cfg), cfg.threads);
            emit_json(report, g.out, out);
            return kExitOk;
        }
        if (synth->parsed()) {
            const SyntheticSceneSpec spec = read_json_file(s_spec).get<SyntheticSceneSpec>();
            const fs::path dir = g.out.empty() ? fs::path(spec.scene_id) : fs::path(g.out);
            const auto [ds, oracle] = synthesize_scene(spec, g.seed.value_or(0));
            save_dataset(ds, dir);
            out << ds.image_count() << " images written to " << dir.string() << "\n";
            return kExitOk;
        }
    } catch (const IncompatibleScenes& e) {
        err << "error: " << e.what() << "\n";
        return kExitIncompatible;
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const LoadError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitRuntime;
}

}  // namespace cnrf
