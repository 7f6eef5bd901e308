#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "metalattice/io.hpp"
#include "metalattice/pipeline.hpp"

using namespace metalattice;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("mltest_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

pipe::RunConfig tiny_config(std::uint64_t seed) {
    nlohmann::json j;
    j["seed"] = seed;
    j["data"]["n_designs"] = 3;
    j["solver"]["frames"] = 4;
    j["solver"]["max_strain"] = 0.06;
    j["diffusion"]["schedule"]["kind"] = "linear";
    j["diffusion"]["schedule"]["T"] = 6;
    j["diffusion"]["steps"] = 4;
    j["diffusion"]["batch"] = 1;
    j["diffusion"]["net"]["widths"] = {8, 12};
    j["diffusion"]["net"]["emb_dim"] = 16;
    j["diffusion"]["net"]["heads"] = 2;
    j["diffusion"]["net"]["attn_levels"] = 1;
    j["identifier"]["widths"] = {8, 16};
    j["identifier"]["max_epochs"] = 1;
    j["identifier"]["expansion"] = 2;
    j["identifier"]["calib_samples"] = 2;
    j["identifier"]["calib_train"] = 3;
    return pipe::RunConfig::from_json(j);
}

} // namespace

TEST_CASE("sha256 matches known vectors") {
    REQUIRE(io::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    REQUIRE(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    REQUIRE(io::sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // 64-byte boundary case
    REQUIRE(io::sha256_hex(std::string(64, 'a')) ==
            "ffe054fe7ae0cb6dc65c3af9b61d5209f439851db43d0ba5997337df154668eb");
}

TEST_CASE("design file round trip and validation") {
    const gen::FullDesign d = gen::generate_design(5);
    const std::string bytes = io::encode_design(d);
    REQUIRE(bytes.substr(0, 4) == "MMDG");
    const gen::FullDesign back = io::decode_design(bytes);
    REQUIRE(back.grid == d.grid);

    std::string corrupt = bytes;
    corrupt[20] = 9; // out-of-range material id
    REQUIRE_THROWS(io::decode_design(corrupt));
    REQUIRE_THROWS(io::decode_design("XXXX"));
}

TEST_CASE("field stack file round trip") {
    fem::FieldStack fs(3, 5, 7, 4);
    Rng rng(2);
    for (auto& x : fs.data) x = static_cast<float>(rng.uniform(-10.0, 10.0));
    const std::string bytes = io::encode_fields(fs);
    REQUIRE(bytes.substr(0, 4) == "MMFS");
    const fem::FieldStack back = io::decode_fields(bytes);
    REQUIRE(back.frames == 3);
    REQUIRE(back.height == 5);
    REQUIRE(back.width == 7);
    REQUIRE(back.data == fs.data); // bit-exact f32
}

TEST_CASE("curve CSV round trip and header check") {
    fem::StressStrainCurve c;
    for (int i = 0; i < 11; ++i) {
        c.strains.push_back(0.015 * i);
        c.stresses.push_back(0.5 * i * i);
    }
    const std::string text = io::encode_curve(c);
    REQUIRE(text.rfind("strain,stress\n", 0) == 0);
    const fem::StressStrainCurve back = io::decode_curve(text);
    REQUIRE(back.strains.size() == 11);
    for (int i = 0; i < 11; ++i) {
        REQUIRE(back.strains[static_cast<std::size_t>(i)] == Catch::Approx(c.strains[static_cast<std::size_t>(i)]));
        REQUIRE(back.stresses[static_cast<std::size_t>(i)] == Catch::Approx(c.stresses[static_cast<std::size_t>(i)]));
    }
    REQUIRE_THROWS(io::decode_curve("foo,bar\n1,2\n"));
}

TEST_CASE("png writer emits a well-formed file") {
    const auto dir = temp_dir("png");
    const gen::FullDesign d = gen::generate_design(17);
    const auto path = dir / "preview.png";
    io::save_design_png(path.string(), d, 2);
    const std::string bytes = io::read_file(path.string());
    REQUIRE(bytes.size() > 100);
    REQUIRE(bytes.compare(0, 8, "\x89PNG\r\n\x1a\n", 8) == 0);
    REQUIRE(bytes.find("IHDR") != std::string::npos);
    REQUIRE(bytes.find("IDAT") != std::string::npos);
    REQUIRE(bytes.find("IEND") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("config requires a seed and exposes dotted lookups") {
    nlohmann::json j;
    j["data"]["n_designs"] = 4;
    REQUIRE_THROWS(pipe::RunConfig::from_json(j));
    j["seed"] = 7;
    const auto cfg = pipe::RunConfig::from_json(j);
    REQUIRE(cfg.get<int>("data.n_designs", 0) == 4);
    REQUIRE(cfg.get<int>("data.missing", 42) == 42);
    REQUIRE(cfg.get<double>("diffusion.p_uncond", 0.1) == 0.1);
    REQUIRE_FALSE(cfg.hash().empty());
}

TEST_CASE("gen-data: deterministic outputs, manifest digests, empty run", "[slow]") {
    const auto cfg = tiny_config(11);
    const auto d1 = temp_dir("gen1");
    const auto d2 = temp_dir("gen2");
    const auto r1 = pipe::cmd_gen_data(cfg, d1);
    const auto r2 = pipe::cmd_gen_data(cfg, d2);
    REQUIRE(r1.emitted == r2.emitted);
    REQUIRE(r1.emitted >= 2);

    const auto m1 = pipe::manifest_output_digests((d1 / "manifest.json").string());
    const auto m2 = pipe::manifest_output_digests((d2 / "manifest.json").string());
    REQUIRE(m1 == m2); // bit-identical artifacts
    REQUIRE(m1.count("stats.json") == 1);

    // n_designs = 0: valid empty dataset with manifest
    auto cfg0 = cfg;
    cfg0.doc["data"]["n_designs"] = 0;
    const auto d0 = temp_dir("gen0");
    const auto r0 = pipe::cmd_gen_data(pipe::RunConfig::from_json(cfg0.doc), d0);
    REQUIRE(r0.emitted == 0);
    REQUIRE(fs::exists(d0 / "manifest.json"));

    fs::remove_all(d0);
    fs::remove_all(d2);

    // keep d1 for the training stage test below
    SECTION("training stages chain with dependency gates") {
        const auto models = temp_dir("models");
        // unet2 before unet1 names the missing stage
        REQUIRE_THROWS_WITH(pipe::cmd_train("unet2", cfg, d1, models),
                            Catch::Matchers::ContainsSubstring("unet1"));
        // diffusion first (needed by calibration), then unet1, then unet2
        pipe::cmd_train("diffusion", cfg, d1, models);
        REQUIRE(fs::exists(models / "diffusion.mlck"));
        REQUIRE(fs::exists(models / "diffusion_log.csv"));

        pipe::cmd_train("unet1", cfg, d1, models);
        REQUIRE(fs::exists(models / "unet1.mlck"));
        REQUIRE(fs::exists(models / "calibration.json"));
        const auto cal = pipe::CalibrationFile::from_file((models / "calibration.json").string());
        for (int c = 0; c < 4; ++c) REQUIRE(cal.achieved_ratio[static_cast<std::size_t>(c)] >= 1.25);

        pipe::cmd_train("unet2", cfg, d1, models);
        REQUIRE(fs::exists(models / "unet2.mlck"));

        // resume contract: training again continues the step counter
        auto cfg_more = cfg;
        cfg_more.doc["diffusion"]["steps"] = 6;
        pipe::cmd_train("diffusion", pipe::RunConfig::from_json(cfg_more.doc), d1, models);
        const auto params = nn::load_params((models / "diffusion.mlck").string());
        std::int64_t max_step = 0;
        for (const auto& [k, e] : params.entries) max_step = std::max(max_step, e.step);
        REQUIRE(max_step == 6);

        SECTION("design and validate close the loop") {
            // target: first dataset curve
            const pipe::DatasetIndex idx = pipe::scan_dataset(d1);
            const auto target = idx.curve_path(idx.ids[0]);

            const auto ddir = temp_dir("designs");
            auto cfg_design = cfg;
            cfg_design.doc["solver"]["frames"] = 4;
            const auto dres = pipe::cmd_design(target.string(), 2, pipe::RunConfig::from_json(cfg_design.doc),
                                               d1, models, ddir, true);
            REQUIRE(dres.valid + dres.flagged >= 2);
            if (dres.valid > 0) {
                // every persisted design satisfies symmetry and loadpath
                for (int i = 0; i < dres.valid; ++i) {
                    const auto dp = ddir / pipe::index_name("design", i, "mmdg");
                    const gen::FullDesign dd = io::load_design(dp.string());
                    REQUIRE(dd.is_symmetric());
                    REQUIRE(gen::check_loadpath(dd));
                }
                const auto vdir = temp_dir("validate");
                const auto vres = pipe::cmd_validate(ddir, target.string(), cfg, vdir);
                REQUIRE(vres.ranked.size() == static_cast<std::size_t>(dres.valid));
                for (std::size_t i = 1; i < vres.ranked.size(); ++i)
                    if (vres.ranked[i - 1].solvable && vres.ranked[i].solvable)
                        REQUIRE(vres.ranked[i - 1].rrmse <= vres.ranked[i].rrmse);
                REQUIRE(fs::exists(vdir / "report.csv"));
                REQUIRE(fs::exists(vdir / "overlay.csv"));
                fs::remove_all(vdir);
            }
            fs::remove_all(ddir);
        }
        fs::remove_all(models);
    }
    fs::remove_all(d1);
}

TEST_CASE("validate: the exact source design of a training curve scores RRMSE 0", "[slow]") {
    const auto cfg = tiny_config(21);
    const auto data = temp_dir("loop");
    pipe::cmd_gen_data(cfg, data);
    const pipe::DatasetIndex idx = pipe::scan_dataset(data);
    REQUIRE_FALSE(idx.ids.empty());

    // copy the source design into a candidate directory
    const auto cand = temp_dir("cand");
    fs::copy_file(idx.design_path(idx.ids[0]), cand / "design_0000.mmdg");
    const auto vdir = temp_dir("vout");
    const auto res = pipe::cmd_validate(cand, idx.curve_path(idx.ids[0]).string(), cfg, vdir);
    REQUIRE(res.ranked.size() == 1);
    REQUIRE(res.ranked[0].solvable);
    REQUIRE(res.ranked[0].rrmse == Catch::Approx(0.0).margin(1e-9));
    REQUIRE(res.ranked[0].rmae == Catch::Approx(0.0).margin(1e-9));

    fs::remove_all(data);
    fs::remove_all(cand);
    fs::remove_all(vdir);
}

TEST_CASE("metrics CLI outputs: segmentation and curve modes") {
    const auto dir = temp_dir("met");
    const gen::FullDesign a = gen::generate_design(3);
    const gen::FullDesign b = gen::generate_design(4);
    fs::create_directories(dir / "truth");
    fs::create_directories(dir / "pred");
    io::save_design((dir / "truth" / "design_0000.mmdg").string(), a);
    io::save_design((dir / "pred" / "design_0000.mmdg").string(), a);
    io::save_design((dir / "truth" / "design_0001.mmdg").string(), a);
    io::save_design((dir / "pred" / "design_0001.mmdg").string(), b);
    pipe::cmd_metrics_segmentation(dir / "truth", dir / "pred", dir / "seg.csv");
    const std::string seg = io::read_file((dir / "seg.csv").string());
    REQUIRE(seg.find("design_0000.mmdg,100,100") != std::string::npos);
    REQUIRE(seg.find("mean,") != std::string::npos);
    REQUIRE(seg.find("median,") != std::string::npos);

    fem::StressStrainCurve t;
    for (int i = 0; i < 5; ++i) {
        t.strains.push_back(0.01 * i);
        t.stresses.push_back(1.0 * i);
    }
    io::save_curve((dir / "target.csv").string(), t);
    fs::create_directories(dir / "curves");
    fem::StressStrainCurve c1 = t;
    for (auto& s : c1.stresses) s *= 1.1;
    io::save_curve((dir / "curves" / "a.csv").string(), c1);
    io::save_curve((dir / "curves" / "b.csv").string(), t);
    pipe::cmd_metrics_curves((dir / "target.csv").string(), dir / "curves", dir / "cur.csv");
    const std::string cur = io::read_file((dir / "cur.csv").string());
    REQUIRE(cur.find("b.csv,0,0") != std::string::npos);
    REQUIRE(cur.find("best1,") != std::string::npos);
    fs::remove_all(dir);
}
