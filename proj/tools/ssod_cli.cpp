// Command-line driver for the self-supervised object discovery pipeline.
//
// Every subcommand runs the pipeline up to its stage. Earlier stages whose
// inputs and configuration are unchanged are reused from the output
// directory. Exit codes: 0 success, 1 stage failure, 2 configuration or IO
// error.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ssod/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string output;
    bool no_cache = false;
};

void add_common(CLI::App* app, CommonArgs& args) {
    app->add_option("--config", args.config, "JSON configuration file (defaults apply to missing keys)");
    app->add_option("--seed", args.seed, "Global seed (overrides the config)");
    app->add_option("--output", args.output, "Output directory (overrides the config)");
    app->add_flag("--no-cache", args.no_cache, "Recompute every stage even when cached outputs match");
}

int run(const CommonArgs& args, ssod::Stage until) {
    ssod::PipelineConfig cfg;
    try {
        if (!args.config.empty()) cfg = ssod::PipelineConfig::load(args.config);
        if (args.seed) cfg.seed = *args.seed;
        if (!args.output.empty()) cfg.output = args.output;
        cfg.validate();
    } catch (const ssod::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    try {
        ssod::PipelineOptions opts;
        opts.until = until;
        opts.use_cache = !args.no_cache;
        ssod::run_pipeline(cfg, opts);
    } catch (const ssod::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ssod::StageError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised object discovery and few-shot detection on simulated scans"};
    app.require_subcommand(1);

    struct Entry {
        const char* name;
        ssod::Stage stage;
        const char* help;
    };
    const Entry entries[] = {
        {"simulate", ssod::Stage::Simulate, "Generate the training and held-out environments"},
        {"associate", ssod::Stage::Associate, "Match proposals across neighboring frames"},
        {"train", ssod::Stage::Train, "Mine triplets and learn the embedding"},
        {"discover", ssod::Stage::Discover, "Embed proposals and cluster them with mean shift"},
        {"detect", ssod::Stage::Detect, "Run the few-shot and cluster-labeled detectors"},
        {"eval", ssod::Stage::Evaluate, "Score detections and write the evaluation report"},
    };

    std::vector<CommonArgs> args(std::size(entries) + 1);
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < std::size(entries); ++i) {
        auto* sub = app.add_subcommand(entries[i].name, entries[i].help);
        add_common(sub, args[i]);
        subs.push_back(sub);
    }
    auto* pipeline = app.add_subcommand("pipeline", "Run every stage, or stop after --stage");
    CommonArgs& pargs = args.back();
    add_common(pipeline, pargs);
    std::string stage = "eval";
    pipeline->add_option("--stage", stage, "Last stage to run")
        ->check(CLI::IsMember({"simulate", "associate", "mine", "train", "embed", "discover", "detect", "eval"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    for (std::size_t i = 0; i < subs.size(); ++i)
        if (subs[i]->parsed()) return run(args[i], entries[i].stage);
    return run(pargs, ssod::parse_stage(stage));
}
