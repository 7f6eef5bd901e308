#pragma once

// CLI orchestration: reproducible runs of data generation, training,
// sampling, identification, and closed-loop validation. Every command is a
// pure function of (config, input artifacts); all randomness flows from the
// configured seed through named child streams. Each run writes a
// manifest.json listing input/output digests.

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metalattice/checkpoint.hpp"
#include "metalattice/designgen.hpp"
#include "metalattice/diffusion.hpp"
#include "metalattice/identifier.hpp"
#include "metalattice/io.hpp"
#include "metalattice/metrics.hpp"
#include "metalattice/solver.hpp"
#include "metalattice/threadpool.hpp"

namespace metalattice::pipe {

inline constexpr const char* kToolkitVersion = "0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------- config

struct RunConfig {
    json doc;
    std::uint64_t seed = 0;

    static RunConfig from_json(const json& j) {
        RunConfig c;
        c.doc = j;
        if (!j.contains("seed")) throw std::invalid_argument("config: 'seed' is required");
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        return from_json(json::parse(io::read_file(path)));
    }

    template <typename T>
    T get(const std::string& dotted, T fallback) const {
        const json* cur = &doc;
        std::size_t start = 0;
        while (true) {
            const auto dot = dotted.find('.', start);
            const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (!cur->contains(key)) return fallback;
            cur = &cur->at(key);
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        return cur->get<T>();
    }

    std::string canonical() const { return doc.dump(); }
    std::string hash() const { return io::sha256_hex(canonical()); }

    fem::SolverOptions solver_options() const {
        fem::SolverOptions o;
        o.frames = get<int>("solver.frames", fem::kDefaultFrames);
        o.max_strain = get<double>("solver.max_strain", fem::kDefaultMaxStrain);
        return o;
    }

    std::vector<fem::Material> materials() const {
        auto mats = fem::default_materials();
        if (doc.contains("solver") && doc.at("solver").contains("materials")) {
            const auto& arr = doc.at("solver").at("materials");
            for (std::size_t i = 0; i < arr.size() && i < mats.size(); ++i) {
                const auto& m = arr[i];
                if (m.contains("youngs_modulus")) mats[i].youngs_modulus = m.at("youngs_modulus").get<double>();
                if (m.contains("poisson_ratio")) mats[i].poisson_ratio = m.at("poisson_ratio").get<double>();
                if (m.contains("hardening")) {
                    mats[i].hardening.clear();
                    for (const auto& row : m.at("hardening"))
                        mats[i].hardening.emplace_back(row[0].get<double>(), row[1].get<double>());
                }
                mats[i].validate();
            }
        }
        return mats;
    }

    diff::NoiseSchedule schedule() const {
        return diff::make_schedule(diff::schedule_kind_from(get<std::string>("diffusion.schedule.kind", "linear")),
                                   get<int>("diffusion.schedule.T", 250),
                                   get<double>("diffusion.beta_start", 1e-4),
                                   get<double>("diffusion.beta_end", 0.02));
    }

    nn::DenoiserConfig denoiser_config() const {
        nn::DenoiserConfig d;
        d.in_channels = 4;
        d.frames = get<int>("solver.frames", fem::kDefaultFrames);
        d.widths = get<std::vector<int>>("diffusion.net.widths", {32, 64, 96, 128});
        d.heads = get<int>("diffusion.net.heads", 8);
        d.emb_dim = get<int>("diffusion.net.emb_dim", 64);
        d.cond_dim = get<int>("solver.frames", fem::kDefaultFrames);
        d.attn_levels = get<int>("diffusion.net.attn_levels", 2);
        d.spatial_softmax = get<bool>("diffusion.net.spatial_softmax", false);
        d.stem_stride = get<int>("diffusion.net.stem_stride", 1);
        return d;
    }

    ident::IdentTrainConfig identifier_config() const {
        ident::IdentTrainConfig c;
        c.widths = get<std::vector<int>>("identifier.widths", {32, 64, 128, 256});
        c.max_epochs = get<int>("identifier.max_epochs", 500);
        c.early_stop_accuracy = get<double>("identifier.early_stop_accuracy", 99.9);
        c.lr = get<double>("identifier.lr", 1e-3);
        c.batch = get<int>("identifier.batch", 2);
        c.workers = worker_count();
        return c;
    }
};

// ---------------------------------------------------------------- manifest

struct RunManifest {
    std::string command;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;  // (path, digest)
    std::vector<std::pair<std::string, std::string>> outputs; // (path, digest)
    std::map<std::string, double> timings_ms;
    std::vector<std::string> notes;

    void add_output(const fs::path& base, const fs::path& file) {
        outputs.emplace_back(fs::relative(file, base).string(), io::sha256_file(file.string()));
    }

    void add_input(const std::string& label, const std::string& path) {
        inputs.emplace_back(label, io::sha256_file(path));
    }

    json to_json() const {
        json j;
        j["command"] = command;
        j["toolkit_version"] = kToolkitVersion;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        j["inputs"] = json::array();
        for (const auto& [p, d] : inputs) j["inputs"].push_back({{"path", p}, {"sha256", d}});
        j["outputs"] = json::array();
        for (const auto& [p, d] : outputs) j["outputs"].push_back({{"path", p}, {"sha256", d}});
        j["timings_ms"] = timings_ms;
        j["notes"] = notes;
        return j;
    }

    void save(const fs::path& dir) const {
        io::write_file((dir / "manifest.json").string(), to_json().dump(2) + "\n");
    }
};

// digest map for determinism comparisons (timings excluded)
inline std::map<std::string, std::string> manifest_output_digests(const std::string& manifest_path) {
    const json j = json::parse(io::read_file(manifest_path));
    std::map<std::string, std::string> out;
    for (const auto& e : j.at("outputs")) out[e.at("path").get<std::string>()] = e.at("sha256").get<std::string>();
    return out;
}

class StageTimer {
public:
    explicit StageTimer(RunManifest& m, std::string name) : m_(m), name_(std::move(name)) {
        t0_ = std::chrono::steady_clock::now();
    }
    ~StageTimer() {
        const auto dt = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
        m_.timings_ms[name_] = dt;
    }

private:
    RunManifest& m_;
    std::string name_;
    std::chrono::steady_clock::time_point t0_;
};

// ------------------------------------------------------------ dataset stats

struct DatasetStats {
    fem::FieldStats field_stats;
    double max_stress = 0.0;
    int n_samples = 0;

    json to_json() const {
        json j;
        j["field_min"] = field_stats.min;
        j["field_max"] = field_stats.max;
        j["max_stress"] = max_stress;
        j["n_samples"] = n_samples;
        return j;
    }

    static DatasetStats from_json(const json& j) {
        DatasetStats s;
        const auto mn = j.at("field_min").get<std::vector<float>>();
        const auto mx = j.at("field_max").get<std::vector<float>>();
        for (int c = 0; c < 4; ++c) {
            s.field_stats.min[static_cast<std::size_t>(c)] = mn.at(static_cast<std::size_t>(c));
            s.field_stats.max[static_cast<std::size_t>(c)] = mx.at(static_cast<std::size_t>(c));
            s.field_stats.degenerate[static_cast<std::size_t>(c)] =
                !(s.field_stats.max[static_cast<std::size_t>(c)] > s.field_stats.min[static_cast<std::size_t>(c)]);
        }
        s.max_stress = j.at("max_stress").get<double>();
        s.n_samples = j.at("n_samples").get<int>();
        return s;
    }

    static DatasetStats from_file(const std::string& path) {
        return from_json(json::parse(io::read_file(path)));
    }
};

// ----------------------------------------------------------------- helpers

inline std::string index_name(const char* prefix, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04d.%s", prefix, i, ext);
    return buf;
}

// FieldStack [F,H,W,C] -> net tensor [F,C,H,W]
inline Tensor fields_to_net(const fem::FieldStack& fs) {
    Tensor t({fs.frames, fs.channels, fs.height, fs.width});
    for (int f = 0; f < fs.frames; ++f)
        for (int i = 0; i < fs.height; ++i)
            for (int j = 0; j < fs.width; ++j)
                for (int c = 0; c < fs.channels; ++c) t.at({f, c, i, j}) = fs.at(f, i, j, c);
    return t;
}

inline fem::FieldStack net_to_fields(const Tensor& t) {
    fem::FieldStack fs(t.dim(0), t.dim(2), t.dim(3), t.dim(1));
    for (int f = 0; f < fs.frames; ++f)
        for (int i = 0; i < fs.height; ++i)
            for (int j = 0; j < fs.width; ++j)
                for (int c = 0; c < fs.channels; ++c) fs.at(f, i, j, c) = t.at({f, c, i, j});
    return fs;
}

// condition vector: stresses scaled by the dataset max (single scalar)
inline Tensor curve_condition(const fem::StressStrainCurve& curve, const DatasetStats& stats) {
    Tensor t({static_cast<int>(curve.stresses.size())});
    const double denom = stats.max_stress > 0.0 ? stats.max_stress : 1.0;
    for (std::size_t i = 0; i < curve.stresses.size(); ++i)
        t.v[i] = static_cast<float>(curve.stresses[i] / denom);
    return t;
}

struct DatasetIndex {
    std::vector<int> ids; // emitted sample ids present on disk
    fs::path dir;

    fs::path design_path(int id) const { return dir / index_name("design", id, "mmdg"); }
    fs::path fields_path(int id) const { return dir / index_name("fields", id, "mmfs"); }
    fs::path curve_path(int id) const { return dir / index_name("curve", id, "csv"); }
};

inline DatasetIndex scan_dataset(const fs::path& dir) {
    DatasetIndex idx;
    idx.dir = dir;
    for (int i = 0;; ++i) {
        if (!fs::exists(dir / index_name("design", i, "mmdg"))) {
            // ids may be sparse when solves were rejected; scan a window past
            // the gap before giving up
            bool more = false;
            for (int k = i + 1; k <= i + 32; ++k)
                if (fs::exists(dir / index_name("design", k, "mmdg"))) {
                    more = true;
                    break;
                }
            if (!more) break;
            continue;
        }
        idx.ids.push_back(i);
    }
    return idx;
}

// ---------------------------------------------------------------- gen-data

struct GenDataResult {
    int emitted = 0;
    int rejected = 0;
    bool rejection_warning = false;
};

inline GenDataResult cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    RunManifest man;
    man.command = "gen-data";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;

    const int n = cfg.get<int>("data.n_designs", 300);
    const auto mats = cfg.materials();
    fem::SolverOptions sopts = cfg.solver_options();
    const int workers = worker_count();

    struct Item {
        bool ok = false;
        std::string error;
        gen::FullDesign design;
        fem::FieldStack fields;
        fem::StressStrainCurve curve;
    };
    std::vector<Item> items(static_cast<std::size_t>(n));

    {
        StageTimer t(man, "solve");
        parallel_for(n, workers, [&](std::int64_t i) {
            Item& it = items[static_cast<std::size_t>(i)];
            try {
                const std::uint64_t dseed = child_seed(cfg.seed, "design", static_cast<std::uint64_t>(i));
                it.design = gen::generate_design(dseed);
                auto res = fem::solve_compression(it.design, mats, sopts);
                it.fields = std::move(res.fields);
                it.curve = std::move(res.curve);
                it.ok = true;
            } catch (const std::exception& e) {
                it.error = e.what();
            }
        });
    }

    GenDataResult out;
    DatasetStats stats;
    bool first = true;
    {
        StageTimer t(man, "persist");
        for (int i = 0; i < n; ++i) {
            const Item& it = items[static_cast<std::size_t>(i)];
            if (!it.ok) {
                ++out.rejected;
                man.notes.push_back("rejected sample " + std::to_string(i) + ": " + it.error);
                continue;
            }
            ++out.emitted;
            const auto dpath = out_dir / index_name("design", i, "mmdg");
            const auto fpath = out_dir / index_name("fields", i, "mmfs");
            const auto cpath = out_dir / index_name("curve", i, "csv");
            io::save_design(dpath.string(), it.design);
            io::save_fields(fpath.string(), it.fields);
            io::save_curve(cpath.string(), it.curve);
            man.add_output(out_dir, dpath);
            man.add_output(out_dir, fpath);
            man.add_output(out_dir, cpath);
            for (std::size_t k = 0; k < it.fields.data.size(); ++k) {
                const int c = static_cast<int>(k % 4);
                const float v = it.fields.data[k];
                if (first || v < stats.field_stats.min[static_cast<std::size_t>(c)])
                    stats.field_stats.min[static_cast<std::size_t>(c)] = v;
                if (first || v > stats.field_stats.max[static_cast<std::size_t>(c)])
                    stats.field_stats.max[static_cast<std::size_t>(c)] = v;
                if (k % 4 == 3) first = false;
            }
            for (double sTrs : it.curve.stresses) stats.max_stress = std::max(stats.max_stress, sTrs);
        }
        stats.n_samples = out.emitted;
        io::write_file((out_dir / "stats.json").string(), stats.to_json().dump(2) + "\n");
        man.add_output(out_dir, out_dir / "stats.json");
    }

    if (n > 0 && out.rejected > n / 5) {
        out.rejection_warning = true;
        man.notes.push_back("warning: rejection rate above 20%");
        std::cerr << "gen-data: warning: " << out.rejected << "/" << n << " solves rejected\n";
    }
    man.save(out_dir);
    return out;
}

// ------------------------------------------------------- diffusion training

struct DiffusionTrainResult {
    int steps_done = 0;
    double first_window_loss = 0.0;
    double last_window_loss = 0.0;
};

inline DiffusionTrainResult train_diffusion(const RunConfig& cfg, const fs::path& data_dir,
                                            const fs::path& out_dir, RunManifest& man) {
    const DatasetIndex idx = scan_dataset(data_dir);
    if (idx.ids.empty()) throw std::runtime_error("train diffusion: dataset is empty; run gen-data first");
    const DatasetStats stats = DatasetStats::from_file((data_dir / "stats.json").string());

    // load the whole corpus normalized into net layout
    std::vector<Tensor> x0s;
    std::vector<diff::Condition> conds;
    x0s.reserve(idx.ids.size());
    for (int id : idx.ids) {
        fem::FieldStats fstats = stats.field_stats;
        const fem::FieldStack fsr = io::load_fields(idx.fields_path(id).string());
        x0s.push_back(fields_to_net(fem::normalize_fields(fsr, fstats)));
        diff::Condition c;
        c.curve = curve_condition(io::load_curve(idx.curve_path(id).string()), stats);
        conds.push_back(std::move(c));
    }

    const diff::NoiseSchedule sched = cfg.schedule();
    nn::Denoiser3d net(cfg.denoiser_config());
    nn::ParamSet params;
    const fs::path ckpt = out_dir / "diffusion.mlck";
    int steps_done = 0;
    if (fs::exists(ckpt)) {
        params = nn::load_params(ckpt.string());
        for (const auto& [k, e] : params.entries) steps_done = std::max<int>(steps_done, static_cast<int>(e.step));
        man.notes.push_back("resumed diffusion from step " + std::to_string(steps_done));
    } else {
        Rng init(child_seed(cfg.seed, "diffusion-init"));
        net.init(params, init);
    }

    const int total_steps = cfg.get<int>("diffusion.steps", 3000);
    const int batch = cfg.get<int>("diffusion.batch", 2);
    const double p_uncond = cfg.get<double>("diffusion.p_uncond", 0.1);
    nn::AdamConfig adam;
    adam.lr = cfg.get<double>("diffusion.lr", 1e-4);
    const diff::LossKind lk =
        cfg.get<std::string>("diffusion.loss", "mse") == "l1" ? diff::LossKind::l1 : diff::LossKind::mse;
    const int workers = worker_count();

    std::ostringstream log;
    log << "step,loss\n";
    DiffusionTrainResult res;
    const int window = 100;
    std::vector<double> losses;
    for (int step = steps_done; step < total_steps; ++step) {
        Rng sel(child_seed(cfg.seed, "batchsel", static_cast<std::uint64_t>(step)));
        std::vector<std::pair<const Tensor*, diff::Condition>> batch_items;
        for (int b = 0; b < batch; ++b) {
            const std::size_t pick = static_cast<std::size_t>(sel.below(x0s.size()));
            batch_items.emplace_back(&x0s[pick], conds[pick]);
        }
        const auto r = diff::train_step(net, params, batch_items, sched, p_uncond,
                                        child_seed(cfg.seed, "trainstep", static_cast<std::uint64_t>(step)), adam,
                                        lk, workers);
        if (!r.applied) {
            man.notes.push_back("diffusion step " + std::to_string(step) + " rejected (non-finite loss)");
            continue;
        }
        losses.push_back(r.loss);
        log << step << "," << r.loss << "\n";
        if ((step + 1) % 200 == 0)
            std::cerr << "diffusion step " << (step + 1) << "/" << total_steps << " loss " << r.loss << "\n";
    }
    res.steps_done = total_steps;
    if (!losses.empty()) {
        const int w = std::min<int>(window, static_cast<int>(losses.size()));
        for (int i = 0; i < w; ++i) res.first_window_loss += losses[static_cast<std::size_t>(i)] / w;
        for (int i = 0; i < w; ++i)
            res.last_window_loss += losses[losses.size() - 1 - static_cast<std::size_t>(i)] / w;
    }

    nn::save_params(ckpt.string(), params);
    io::write_file((out_dir / "diffusion_log.csv").string(), log.str());
    man.add_output(out_dir, ckpt);
    man.add_output(out_dir, out_dir / "diffusion_log.csv");
    return res;
}

// --------------------------------------------------- identifier data + train

// Last-frame identifier samples for every dataset id, normalized fields.
inline std::vector<ident::IdentSample> build_ident_samples(const DatasetIndex& idx,
                                                           const DatasetStats& stats,
                                                           const std::vector<int>& ids) {
    std::vector<ident::IdentSample> out;
    out.reserve(ids.size());
    for (int id : ids) {
        fem::FieldStats fstats = stats.field_stats;
        const fem::FieldStack raw = io::load_fields(idx.fields_path(id).string());
        const fem::FieldStack norm = fem::normalize_fields(raw, fstats);
        const gen::FullDesign design = io::load_design(idx.design_path(id).string());
        ident::IdentSample s;
        s.fields = ident::slice_quarters(ident::last_frame(norm));
        s.mask.resize(static_cast<std::size_t>(ident::kQ) * ident::kQ);
        s.labels.resize(s.mask.size());
        const gen::QuarterDesign q = gen::upper_left_quarter(design);
        for (int p = 0; p < ident::kQ * ident::kQ; ++p) {
            s.labels[static_cast<std::size_t>(p)] = q.grid[static_cast<std::size_t>(p)];
            s.mask[static_cast<std::size_t>(p)] = q.grid[static_cast<std::size_t>(p)] ? 1 : 0;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// deterministic 90-10 split of dataset ids
inline void split_ids(const std::vector<int>& ids, std::uint64_t seed, std::vector<int>& train,
                      std::vector<int>& test) {
    std::vector<int> shuffled = ids;
    Rng rng(child_seed(seed, "split"));
    for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    const std::size_t n_test = std::max<std::size_t>(1, shuffled.size() / 10);
    test.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_test), shuffled.end());
}

struct CalibrationFile {
    std::array<float, 4> sigma{};
    std::array<double, 4> achieved_ratio{};
    int n_train = 0, n_diff = 0;

    json to_json() const {
        json j;
        j["sigma"] = sigma;
        j["achieved_ratio"] = achieved_ratio;
        j["margin"] = 1.25;
        j["n_train"] = n_train;
        j["n_diff"] = n_diff;
        return j;
    }

    static CalibrationFile from_file(const std::string& path) {
        const json j = json::parse(io::read_file(path));
        CalibrationFile c;
        const auto s = j.at("sigma").get<std::vector<float>>();
        const auto r = j.at("achieved_ratio").get<std::vector<double>>();
        for (int i = 0; i < 4; ++i) {
            c.sigma[static_cast<std::size_t>(i)] = s.at(static_cast<std::size_t>(i));
            c.achieved_ratio[static_cast<std::size_t>(i)] = r.at(static_cast<std::size_t>(i));
        }
        c.n_train = j.at("n_train").get<int>();
        c.n_diff = j.at("n_diff").get<int>();
        return c;
    }
};

// Draw unconditional samples from the trained diffusion model and calibrate
// the per-channel noise so noised training maxima clear the 125% DCT margin.
inline CalibrationFile run_calibration(const RunConfig& cfg, const fs::path& data_dir,
                                       const fs::path& model_dir, RunManifest& man) {
    const fs::path ckpt = model_dir / "diffusion.mlck";
    if (!fs::exists(ckpt))
        throw std::runtime_error("calibration requires the diffusion checkpoint; run 'train diffusion' first");
    const DatasetIndex idx = scan_dataset(data_dir);
    const DatasetStats stats = DatasetStats::from_file((data_dir / "stats.json").string());

    nn::Denoiser3d net(cfg.denoiser_config());
    nn::ParamSet params = nn::load_params(ckpt.string());
    const diff::NoiseSchedule sched = cfg.schedule();

    const int n_diff = cfg.get<int>("identifier.calib_samples", 16);
    const int n_train = std::min<int>(static_cast<int>(idx.ids.size()), cfg.get<int>("identifier.calib_train", 48));
    std::cerr << "calibration: sampling " << n_diff << " unconditional field stacks\n";
    const auto samples = diff::sample(net, params, diff::Condition::null_condition(), 0.0, sched,
                                      child_seed(cfg.seed, "calib-sample"), n_diff, fem::kGrid, fem::kGrid,
                                      worker_count());

    std::array<ident::ChannelImages, 4> train_imgs, diff_imgs;
    for (int k = 0; k < n_train; ++k) {
        fem::FieldStats fstats = stats.field_stats;
        const fem::FieldStack norm =
            fem::normalize_fields(io::load_fields(idx.fields_path(idx.ids[static_cast<std::size_t>(k)]).string()), fstats);
        const auto lf = ident::last_frame(norm);
        for (int c = 0; c < 4; ++c) {
            std::vector<float> img(static_cast<std::size_t>(fem::kGrid) * fem::kGrid);
            for (int p = 0; p < fem::kGrid * fem::kGrid; ++p)
                img[static_cast<std::size_t>(p)] = lf[static_cast<std::size_t>(p) * 4 + static_cast<std::size_t>(c)];
            train_imgs[static_cast<std::size_t>(c)].push_back(std::move(img));
        }
    }
    for (const auto& s : samples) {
        const fem::FieldStack fsn = net_to_fields(s);
        const auto lf = ident::last_frame(fsn);
        for (int c = 0; c < 4; ++c) {
            std::vector<float> img(static_cast<std::size_t>(fem::kGrid) * fem::kGrid);
            for (int p = 0; p < fem::kGrid * fem::kGrid; ++p)
                img[static_cast<std::size_t>(p)] = lf[static_cast<std::size_t>(p) * 4 + static_cast<std::size_t>(c)];
            diff_imgs[static_cast<std::size_t>(c)].push_back(std::move(img));
        }
    }

    const auto cal = ident::calibrate_noise(train_imgs, diff_imgs, fem::kGrid, fem::kGrid,
                                            child_seed(cfg.seed, "calib"));
    CalibrationFile cf;
    cf.sigma = cal.sigma;
    cf.achieved_ratio = cal.achieved_ratio;
    cf.n_train = n_train;
    cf.n_diff = n_diff;
    io::write_file((model_dir / "calibration.json").string(), cf.to_json().dump(2) + "\n");
    man.add_output(model_dir, model_dir / "calibration.json");
    return cf;
}

inline ident::TrainedIdentifier train_unet_stage(const RunConfig& cfg, const fs::path& data_dir,
                                                 const fs::path& model_dir, ident::Stage stage,
                                                 RunManifest& man) {
    const DatasetIndex idx = scan_dataset(data_dir);
    if (idx.ids.empty()) throw std::runtime_error("train unet: dataset is empty; run gen-data first");
    const DatasetStats stats = DatasetStats::from_file((data_dir / "stats.json").string());

    if (stage == ident::Stage::multiclass && !fs::exists(model_dir / "unet1.mlck"))
        throw std::runtime_error("train unet2: requires unet1 checkpoint; run 'train unet1' first");

    const fs::path calib_path = model_dir / "calibration.json";
    CalibrationFile cal;
    if (fs::exists(calib_path)) {
        cal = CalibrationFile::from_file(calib_path.string());
    } else {
        cal = run_calibration(cfg, data_dir, model_dir, man);
    }

    std::vector<int> train_ids, test_ids;
    split_ids(idx.ids, cfg.seed, train_ids, test_ids);
    auto train_samples = build_ident_samples(idx, stats, train_ids);
    auto test_samples = build_ident_samples(idx, stats, test_ids);

    // geometric expansion; noise is re-sampled per epoch inside the trainer
    ident::AugPolicy pol;
    pol.expansion = cfg.get<int>("identifier.expansion", 6);
    pol.noise_sigma = {0, 0, 0, 0};
    Rng arng(child_seed(cfg.seed, stage == ident::Stage::binary ? "aug1" : "aug2"));
    train_samples = ident::augment(train_samples, pol, arng, /*with_noise=*/false);

    ident::IdentTrainConfig tc = cfg.identifier_config();
    tc.noise_sigma = cal.sigma;
    const char* name = stage == ident::Stage::binary ? "unet1" : "unet2";
    std::cerr << name << ": training on " << train_samples.size() << " samples, testing on "
              << test_samples.size() << "\n";
    auto trained = ident::train_identifier(stage, train_samples, test_samples, tc,
                                           child_seed(cfg.seed, name));

    const fs::path ckpt = model_dir / (std::string(name) + ".mlck");
    nn::save_params(ckpt.string(), trained.params, /*with_optimizer_state=*/false);
    std::ostringstream log;
    log << "epoch,train_loss,test_accuracy,test_weighted_dsc\n";
    for (const auto& em : trained.history)
        log << em.epoch << "," << em.train_loss << "," << em.test_accuracy << "," << em.test_weighted_dsc << "\n";
    const fs::path logp = model_dir / (std::string(name) + "_log.csv");
    io::write_file(logp.string(), log.str());
    man.add_output(model_dir, ckpt);
    man.add_output(model_dir, logp);
    if (trained.diverged) man.notes.push_back(std::string(name) + ": diverged, rolled back to last finite epoch");
    return trained;
}

inline void cmd_train(const std::string& stage, const RunConfig& cfg, const fs::path& data_dir,
                      const fs::path& model_dir) {
    fs::create_directories(model_dir);
    RunManifest man;
    man.command = "train-" + stage;
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    if (fs::exists(data_dir / "manifest.json"))
        man.add_input("dataset-manifest", (data_dir / "manifest.json").string());

    if (stage == "diffusion") {
        StageTimer t(man, "train");
        const auto r = train_diffusion(cfg, data_dir, model_dir, man);
        man.notes.push_back("steps=" + std::to_string(r.steps_done));
    } else if (stage == "unet1") {
        StageTimer t(man, "train");
        train_unet_stage(cfg, data_dir, model_dir, ident::Stage::binary, man);
    } else if (stage == "unet2") {
        StageTimer t(man, "train");
        train_unet_stage(cfg, data_dir, model_dir, ident::Stage::multiclass, man);
    } else {
        throw std::invalid_argument("unknown training stage: " + stage + " (expected diffusion|unet1|unet2)");
    }
    man.save(model_dir);
}

// ------------------------------------------------------------------- design

struct DesignResult {
    int requested = 0;
    int valid = 0;
    int flagged = 0;
};

inline DesignResult cmd_design(const std::string& curve_csv, int n, const RunConfig& cfg,
                               const fs::path& data_dir, const fs::path& model_dir,
                               const fs::path& out_dir, bool emit_png = false) {
    fs::create_directories(out_dir);
    RunManifest man;
    man.command = "design";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    man.add_input("target-curve", curve_csv);

    const fem::StressStrainCurve target = io::load_curve(curve_csv);
    const int frames = cfg.get<int>("solver.frames", fem::kDefaultFrames);
    if (static_cast<int>(target.stresses.size()) != frames)
        throw std::invalid_argument("target curve must have " + std::to_string(frames) + " rows");

    for (const char* req : {"diffusion.mlck", "unet1.mlck", "unet2.mlck"})
        if (!fs::exists(model_dir / req))
            throw std::runtime_error(std::string("design requires checkpoint ") + req + "; train it first");

    const DatasetStats stats = DatasetStats::from_file((data_dir / "stats.json").string());
    nn::Denoiser3d net(cfg.denoiser_config());
    nn::ParamSet dparams = nn::load_params((model_dir / "diffusion.mlck").string());
    const diff::NoiseSchedule sched = cfg.schedule();

    nn::UNet2dConfig u1c, u2c;
    u1c.in_channels = ident::kStackedChannels;
    u1c.out_channels = 1;
    u1c.widths = cfg.get<std::vector<int>>("identifier.widths", {32, 64, 128, 256});
    u2c = u1c;
    u2c.out_channels = 4;
    nn::UNet2d unet1(u1c), unet2(u2c);
    nn::ParamSet p1 = nn::load_params((model_dir / "unet1.mlck").string());
    nn::ParamSet p2 = nn::load_params((model_dir / "unet2.mlck").string());

    diff::Condition cond;
    cond.curve = curve_condition(target, stats);
    const double w = cfg.get<double>("diffusion.guidance_w", 1.0);

    DesignResult res;
    res.requested = n;
    const int max_attempts = 3 * n;
    int attempt = 0;
    StageTimer t(man, "sample-identify");
    while (res.valid < n && attempt < max_attempts) {
        const int want = n - res.valid;
        const auto chains = diff::sample(net, dparams, cond, w, sched,
                                         child_seed(cfg.seed, "design-chain", static_cast<std::uint64_t>(attempt)),
                                         want, fem::kGrid, fem::kGrid, worker_count());
        for (const auto& x : chains) {
            ++attempt;
            const fem::FieldStack norm = net_to_fields(x);
            const auto lf = ident::last_frame(norm);
            const gen::FullDesign design = ident::identify(lf, unet1, p1, unet2, p2);
            const bool ok = design.is_symmetric() && gen::check_loadpath(design);
            if (!ok) {
                ++res.flagged;
                man.notes.push_back("attempt " + std::to_string(attempt) + " flagged: loadpath/symmetry");
                continue;
            }
            const int idn = res.valid++;
            const auto dpath = out_dir / index_name("design", idn, "mmdg");
            io::save_design(dpath.string(), design);
            man.add_output(out_dir, dpath);
            const auto fpath = out_dir / index_name("fields", idn, "mmfs");
            io::save_fields(fpath.string(), fem::denormalize_fields(norm, stats.field_stats));
            man.add_output(out_dir, fpath);
            if (emit_png) {
                const auto ppath = out_dir / index_name("design", idn, "png");
                io::save_design_png(ppath.string(), design);
                man.add_output(out_dir, ppath);
            }
            if (res.valid >= n) break;
        }
    }
    if (res.valid < n)
        man.notes.push_back("shortfall: only " + std::to_string(res.valid) + " of " + std::to_string(n) +
                            " valid designs after " + std::to_string(attempt) + " attempts");
    man.save(out_dir);
    return res;
}

// ----------------------------------------------------------------- validate

struct ValidateRow {
    std::string design;
    bool solvable = false;
    double rrmse = 0.0;
    double rmae = 0.0;
    std::string error;
};

struct ValidateResult {
    std::vector<ValidateRow> ranked; // non-decreasing RRMSE, unsolvable last
    double best_rrmse = std::numeric_limits<double>::quiet_NaN();
};

inline ValidateResult cmd_validate(const fs::path& designs_dir, const std::string& curve_csv,
                                   const RunConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    RunManifest man;
    man.command = "validate";
    man.config_hash = cfg.hash();
    man.seed = cfg.seed;
    man.add_input("target-curve", curve_csv);

    const fem::StressStrainCurve target = io::load_curve(curve_csv);
    const auto mats = cfg.materials();
    const fem::SolverOptions sopts = cfg.solver_options();

    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(designs_dir))
        if (e.path().extension() == ".mmdg") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("validate: no .mmdg designs in " + designs_dir.string());

    ValidateResult out;
    out.ranked.resize(files.size());
    std::vector<fem::StressStrainCurve> curves(files.size());
    {
        StageTimer t(man, "resolve");
        parallel_for(static_cast<std::int64_t>(files.size()), worker_count(), [&](std::int64_t i) {
            ValidateRow& row = out.ranked[static_cast<std::size_t>(i)];
            row.design = fs::path(files[static_cast<std::size_t>(i)]).filename().string();
            try {
                const gen::FullDesign d = io::load_design(files[static_cast<std::size_t>(i)]);
                const auto res = fem::solve_compression(d, mats, sopts);
                curves[static_cast<std::size_t>(i)] = res.curve;
                metrics::CurvePair cp;
                cp.y_true = target.stresses;
                cp.y_pred = res.curve.stresses;
                row.rrmse = metrics::rrmse(cp);
                row.rmae = metrics::rmae(cp);
                row.solvable = true;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
        });
    }

    std::vector<std::size_t> order(out.ranked.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (out.ranked[a].solvable != out.ranked[b].solvable) return out.ranked[a].solvable;
        return out.ranked[a].rrmse < out.ranked[b].rrmse;
    });
    std::vector<ValidateRow> ranked;
    std::vector<fem::StressStrainCurve> ranked_curves;
    for (std::size_t i : order) {
        ranked.push_back(out.ranked[i]);
        ranked_curves.push_back(curves[i]);
    }
    out.ranked = std::move(ranked);
    if (!out.ranked.empty() && out.ranked[0].solvable) out.best_rrmse = out.ranked[0].rrmse;

    std::ostringstream report;
    report << "rank,design,solvable,rrmse_percent,rmae_percent,note\n";
    for (std::size_t i = 0; i < out.ranked.size(); ++i) {
        const auto& r = out.ranked[i];
        std::string note = i == 0 ? "best" : (i == 1 ? "2nd" : (i == 2 ? "3rd" : ""));
        if (!r.solvable) note = "excluded: " + r.error;
        report << (i + 1) << "," << r.design << "," << (r.solvable ? 1 : 0) << "," << r.rrmse << ","
               << r.rmae << "," << note << "\n";
    }
    io::write_file((out_dir / "report.csv").string(), report.str());
    man.add_output(out_dir, out_dir / "report.csv");

    std::ostringstream overlay;
    overlay << "strain,target,best,second,third\n";
    for (std::size_t k = 0; k < target.strains.size(); ++k) {
        overlay << target.strains[k] << "," << target.stresses[k];
        for (std::size_t j = 0; j < 3; ++j) {
            overlay << ",";
            if (j < ranked_curves.size() && out.ranked[j].solvable && !ranked_curves[j].stresses.empty())
                overlay << ranked_curves[j].stresses[k];
        }
        overlay << "\n";
    }
    io::write_file((out_dir / "overlay.csv").string(), overlay.str());
    man.add_output(out_dir, out_dir / "overlay.csv");
    man.save(out_dir);
    return out;
}

// ------------------------------------------------------------ batch metrics

inline void cmd_metrics_segmentation(const fs::path& truth_dir, const fs::path& pred_dir,
                                     const fs::path& out_csv) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(truth_dir))
        if (e.path().extension() == ".mmdg") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw std::runtime_error("metrics: no designs in " + truth_dir.string());

    std::ostringstream csv;
    csv << "sample,accuracy_percent,weighted_dsc_percent\n";
    std::vector<double> accs, dscs;
    for (const auto& name : names) {
        const gen::FullDesign a = io::load_design((truth_dir / name).string());
        const gen::FullDesign b = io::load_design((pred_dir / name).string());
        metrics::SegPair sp;
        sp.y_true.assign(a.grid.begin(), a.grid.end());
        sp.y_pred.assign(b.grid.begin(), b.grid.end());
        const double acc = metrics::pixel_accuracy(sp);
        const double dsc = metrics::weighted_dsc(sp, 4);
        accs.push_back(acc);
        dscs.push_back(dsc);
        csv << name << "," << acc << "," << dsc << "\n";
    }
    auto med = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    csv << "mean," << mean(accs) << "," << mean(dscs) << "\n";
    csv << "median," << med(accs) << "," << med(dscs) << "\n";
    io::write_file(out_csv.string(), csv.str());
}

inline void cmd_metrics_curves(const std::string& target_csv, const fs::path& curves_dir,
                               const fs::path& out_csv) {
    const fem::StressStrainCurve target = io::load_curve(target_csv);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(curves_dir))
        if (e.path().extension() == ".csv") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("metrics: no curves in " + curves_dir.string());

    struct Row {
        std::string name;
        double rrmse, rmae;
    };
    std::vector<Row> rows;
    for (const auto& f : files) {
        const fem::StressStrainCurve c = io::load_curve(f);
        if (c.stresses.size() != target.stresses.size()) continue;
        metrics::CurvePair cp;
        cp.y_true = target.stresses;
        cp.y_pred = c.stresses;
        rows.push_back({fs::path(f).filename().string(), metrics::rrmse(cp), metrics::rmae(cp)});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.rrmse < b.rrmse; });
    std::ostringstream csv;
    csv << "sample,rrmse_percent,rmae_percent\n";
    for (const auto& r : rows) csv << r.name << "," << r.rrmse << "," << r.rmae << "\n";
    double mean_r = 0.0, mean_m = 0.0;
    for (const auto& r : rows) {
        mean_r += r.rrmse / static_cast<double>(rows.size());
        mean_m += r.rmae / static_cast<double>(rows.size());
    }
    csv << "mean," << mean_r << "," << mean_m << "\n";
    if (!rows.empty()) {
        csv << "median," << rows[rows.size() / 2].rrmse << "," << rows[rows.size() / 2].rmae << "\n";
        for (std::size_t k = 0; k < std::min<std::size_t>(3, rows.size()); ++k)
            csv << "best" << (k + 1) << "," << rows[k].rrmse << "," << rows[k].rmae << "\n";
    }
    io::write_file(out_csv.string(), csv.str());
}

} // namespace metalattice::pipe
