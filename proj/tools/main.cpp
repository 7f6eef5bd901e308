// metalattice command line: data generation, training, conditional design
// sampling, closed-loop validation, and batch metrics.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>

#include "metalattice/blas.hpp"
#include "metalattice/pipeline.hpp"

using namespace metalattice;

namespace {

pipe::RunConfig load_config(const std::string& path, std::int64_t seed_override) {
    pipe::RunConfig cfg = pipe::RunConfig::from_file(path);
    if (seed_override >= 0) {
        cfg.doc["seed"] = static_cast<std::uint64_t>(seed_override);
        cfg.seed = static_cast<std::uint64_t>(seed_override);
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    pin_blas_single_thread();

    CLI::App app{"metalattice: inverse design of multi-material lattice metamaterials"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, model_dir, designs_dir, curve_path;
    std::string stage, mode, truth_dir, pred_dir;
    std::int64_t seed_override = -1;
    int n_designs = 50;
    bool emit_png = false;

    auto* gen = app.add_subcommand("gen-data", "generate the design/field/curve dataset");
    gen->add_option("--config", config_path, "run config JSON")->required();
    gen->add_option("--out", out_dir, "output dataset directory")->required();
    gen->add_option("--seed", seed_override, "override the config seed");

    auto* train = app.add_subcommand("train", "train a model stage");
    train->add_option("stage", stage, "diffusion | unet1 | unet2")->required();
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    train->add_option("--out", model_dir, "model output directory")->required();
    train->add_option("--seed", seed_override, "override the config seed");

    auto* design = app.add_subcommand("design", "sample designs for a target stress-strain curve");
    design->add_option("--curve", curve_path, "target curve CSV")->required();
    design->add_option("-n,--count", n_designs, "designs to generate");
    design->add_option("--config", config_path, "run config JSON")->required();
    design->add_option("--data", data_dir, "dataset directory (normalization stats)")->required();
    design->add_option("--models", model_dir, "directory with trained checkpoints")->required();
    design->add_option("--out", out_dir, "output directory")->required();
    design->add_flag("--png", emit_png, "emit PNG previews");
    design->add_option("--seed", seed_override, "override the config seed");

    auto* validate = app.add_subcommand("validate", "re-solve designs and rank against a target curve");
    validate->add_option("--designs", designs_dir, "directory of .mmdg designs")->required();
    validate->add_option("--curve", curve_path, "target curve CSV")->required();
    validate->add_option("--config", config_path, "run config JSON")->required();
    validate->add_option("--out", out_dir, "output directory")->required();
    validate->add_option("--seed", seed_override, "override the config seed");

    auto* met = app.add_subcommand("metrics", "batch metric evaluation CSV");
    met->add_option("--mode", mode, "segmentation | curves")->required();
    met->add_option("--truth", truth_dir, "segmentation: directory of true designs");
    met->add_option("--pred", pred_dir, "segmentation: directory of predicted designs");
    met->add_option("--curve", curve_path, "curves: target curve CSV");
    met->add_option("--dir", designs_dir, "curves: directory of candidate curve CSVs");
    met->add_option("--out", out_dir, "output CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto r = pipe::cmd_gen_data(cfg, out_dir);
            std::cout << "gen-data: emitted " << r.emitted << ", rejected " << r.rejected << "\n";
        } else if (train->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            pipe::cmd_train(stage, cfg, data_dir, model_dir);
            std::cout << "train " << stage << ": done\n";
        } else if (design->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto r = pipe::cmd_design(curve_path, n_designs, cfg, data_dir, model_dir, out_dir, emit_png);
            std::cout << "design: " << r.valid << "/" << r.requested << " valid (" << r.flagged
                      << " flagged)\n";
            if (r.valid < r.requested) return 3;
        } else if (validate->parsed()) {
            const auto cfg = load_config(config_path, seed_override);
            const auto r = pipe::cmd_validate(designs_dir, curve_path, cfg, out_dir);
            std::cout << "validate: " << r.ranked.size() << " designs, best RRMSE "
                      << (r.ranked.empty() ? 0.0 : r.best_rrmse) << "%\n";
        } else if (met->parsed()) {
            if (mode == "segmentation") {
                if (truth_dir.empty() || pred_dir.empty())
                    throw std::invalid_argument("metrics segmentation needs --truth and --pred");
                pipe::cmd_metrics_segmentation(truth_dir, pred_dir, out_dir);
            } else if (mode == "curves") {
                if (curve_path.empty() || designs_dir.empty())
                    throw std::invalid_argument("metrics curves needs --curve and --dir");
                pipe::cmd_metrics_curves(curve_path, designs_dir, out_dir);
            } else {
                throw std::invalid_argument("unknown metrics mode: " + mode);
            }
            std::cout << "metrics: wrote " << out_dir << "\n";
        }
    } catch (const fem::SolveFailure& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
