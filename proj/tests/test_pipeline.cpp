#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "ssod/dataset_io.hpp"
#include "ssod/pipeline.hpp"

using namespace ssod;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ssod_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// A small world and short training so a full run takes about a second.
json small_config(const fs::path& out) {
    return json{{"seed", 3},
                {"output", out.string()},
                {"scenesim", {{"grid_x", 4}, {"grid_y", 4}, {"object_count", 10}}},
                {"metriclearn", {{"steps", 300}}},
                {"detection", {{"repeats", 2}}}};
}

fs::path write_config(const fs::path& dir, const json& j) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SSOD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults, round trip and hashing") {
    const PipelineConfig defaults;
    const auto back = PipelineConfig::from_json(defaults.to_json());
    CHECK(back.to_json() == defaults.to_json());
    CHECK(back.hash() == defaults.hash());

    PipelineConfig moved = defaults;
    moved.output = "elsewhere";
    CHECK(moved.hash() == defaults.hash());
    PipelineConfig reseeded = defaults;
    reseeded.seed = 1;
    CHECK(reseeded.hash() != defaults.hash());

    const auto partial = PipelineConfig::from_json(json{{"metriclearn", {{"steps", 10}}}});
    CHECK(partial.metriclearn.steps == 10);
    CHECK(partial.metriclearn.margin == defaults.metriclearn.margin);
    CHECK(partial.scenesim.grid_x == defaults.scenesim.grid_x);
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(PipelineConfig::from_json(json{{"nonsense", 1}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_json(json{{"scenesim", {{"room", 3}}}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_json(json{{"metriclearn", {{"steps", "many"}}}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_json(json{{"discovery", {{"kernel", "triangle"}}}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_json(json{{"association", {{"iou_threshold", 1.5}}}}), ConfigError);

    const fs::path dir = scratch("badcfg");
    std::ofstream(dir / "broken.json") << "{ \"seed\": 1,, }";
    CHECK_THROWS_AS(PipelineConfig::load(dir / "broken.json"), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::load(dir / "missing.json"), ConfigError);
}

TEST_CASE("stage names") {
    for (Stage s : {Stage::Simulate, Stage::Associate, Stage::Mine, Stage::Train, Stage::Embed, Stage::Discover,
                    Stage::Detect, Stage::Evaluate})
        CHECK(parse_stage(stage_name(s)) == s);
    CHECK_THROWS(parse_stage("compile"));
}

TEST_CASE("simulate writes one frame record per grid location and orientation") {
    const fs::path dir = scratch("grid");
    json cfg = small_config(dir / "out");
    cfg["scenesim"]["grid_x"] = 2;
    cfg["scenesim"]["grid_y"] = 2;
    const fs::path cfg_path = write_config(dir, cfg);
    REQUIRE(run_cli("simulate --config " + cfg_path.string()) == 0);
    const auto manifest = json::parse(slurp(dir / "out" / "train_world" / "manifest.json"));
    CHECK(manifest["frames"].size() == 24);
    const auto ds = read_dataset(dir / "out" / "train_world");
    CHECK(ds.frames.size() == 24);

    // Same seed, fresh run: identical files.
    const std::string first = slurp(dir / "out" / "train_world" / "manifest.json");
    const std::string cloud = slurp(dir / "out" / "train_world" / "frames" / "5.cloud");
    REQUIRE(run_cli("simulate --no-cache --config " + cfg_path.string()) == 0);
    CHECK(slurp(dir / "out" / "train_world" / "manifest.json") == first);
    CHECK(slurp(dir / "out" / "train_world" / "frames" / "5.cloud") == cloud);
}

TEST_CASE("cli exit codes") {
    const fs::path dir = scratch("exit");
    std::ofstream(dir / "corrupt.json") << "{ not json";
    CHECK(run_cli("pipeline --config " + (dir / "corrupt.json").string()) == 2);
    CHECK(run_cli("simulate --config " + (dir / "absent.json").string()) == 2);
    CHECK(run_cli("pipeline --stage nowhere") == 2);
    CHECK(run_cli("") == 2);

    // No match survives this threshold, so training has nothing to learn from.
    json cfg = small_config(dir / "out");
    cfg["association"] = {{"iou_threshold", 0.999}};
    CHECK(run_cli("train --config " + write_config(dir, cfg).string()) == 1);

    // A room too small for the objects is a configuration error.
    cfg = small_config(dir / "out");
    cfg["scenesim"]["room_x"] = 1.0;
    cfg["scenesim"]["room_y"] = 1.0;
    CHECK(run_cli("simulate --config " + write_config(dir, cfg).string()) == 2);
}

TEST_CASE("stopping after association leaves later artifacts absent") {
    const fs::path dir = scratch("partial");
    const fs::path out = dir / "out";
    REQUIRE(run_cli("pipeline --stage associate --config " + write_config(dir, small_config(out)).string()) == 0);
    CHECK(fs::exists(out / "matches.tsv"));
    for (const char* later : {"triplets.tsv", "model.bin", "loss_trace.csv", "train_embeddings.bin", "clusters.tsv",
                              "discovery_report.json", "pr_sweep.csv", "detections", "eval_report.json", "fewshot.csv"})
        CHECK_FALSE(fs::exists(out / later));
}

TEST_CASE("full run, cached rerun and report contents") {
    const fs::path dir = scratch("full");
    const fs::path out = dir / "out";
    auto cfg = PipelineConfig::from_json(small_config(out));
    std::ostringstream log1;
    run_pipeline(cfg, {Stage::Evaluate, true, &log1});

    const std::string eval1 = slurp(out / "eval_report.json");
    const std::string disc1 = slurp(out / "discovery_report.json");
    const auto eval = json::parse(eval1);
    const auto disc = json::parse(disc1);
    CHECK(eval["config_hash"] == cfg.hash());
    CHECK(eval["seed"] == 3);
    CHECK(disc["config_hash"] == cfg.hash());
    CHECK(disc["seed"] == 3);
    CHECK(eval["few_shot"].size() == 4);
    CHECK(disc["sweep"].size() == 5);

    // The sweep CSV has a header and one row per bandwidth.
    std::istringstream sweep(slurp(out / "pr_sweep.csv"));
    std::string line;
    std::getline(sweep, line);
    CHECK(line == "bandwidth,avg_precision,avg_recall,n_clusters");
    int rows = 0;
    while (std::getline(sweep, line)) rows += !line.empty();
    CHECK(rows == 5);

    std::istringstream trace(slurp(out / "loss_trace.csv"));
    std::getline(trace, line);
    CHECK(line == "step,lr_effective,loss,triplets_in_batch");

    // Everything cached: identical reports and no stage recomputed.
    std::ostringstream log2;
    run_pipeline(cfg, {Stage::Evaluate, true, &log2});
    CHECK(slurp(out / "eval_report.json") == eval1);
    CHECK(slurp(out / "discovery_report.json") == disc1);
    for (const char* s : {"simulate", "associate", "mine", "train", "embed", "discover", "detect", "eval"})
        CHECK(log2.str().find(std::string("[") + s + "] cached") != std::string::npos);

    // Changing a training setting reruns training and everything after it, but not earlier stages.
    cfg.metriclearn.steps = 250;
    std::ostringstream log3;
    run_pipeline(cfg, {Stage::Evaluate, true, &log3});
    CHECK(log3.str().find("[associate] cached") != std::string::npos);
    CHECK(log3.str().find("[train] cached") == std::string::npos);
    CHECK(log3.str().find("[eval] cached") == std::string::npos);

    // A fresh uncached run into another directory reproduces the first reports exactly.
    cfg.metriclearn.steps = 300;
    cfg.output = dir / "again";
    std::ostringstream log4;
    run_pipeline(cfg, {Stage::Evaluate, false, &log4});
    CHECK(slurp(dir / "again" / "eval_report.json") == eval1);
    CHECK(slurp(dir / "again" / "discovery_report.json") == disc1);
}

TEST_CASE("embedding separation statistics") {
    Eigen::MatrixXd e(1, 4);
    e << 0, 1, 10, 12;
    const std::vector<std::optional<InstanceId>> labels{1, 1, 2, std::nullopt};
    const auto s = embedding_separation(e, labels);
    CHECK(s.intra_pairs == 1);
    CHECK(s.inter_pairs == 2);
    CHECK(s.mean_intra == 1.0);
    CHECK(s.mean_inter == doctest::Approx(9.5));
}
