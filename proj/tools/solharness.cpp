// Command-line front end. All logic lives in the headers; this file only
// parses arguments and forwards to the cmd_* entry points.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "solharness/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"verification-driven smart-contract agent harness"};
    app.require_subcommand(1);

    std::string manifest_path;
    auto* run = app.add_subcommand("run", "execute every task in a manifest");
    run->add_option("manifest", manifest_path, "path to run manifest (JSON)")->required();

    auto* resume = app.add_subcommand(
        "resume", "re-execute a manifest, continuing from stored checkpoints");
    resume->add_option("manifest", manifest_path, "path to run manifest (JSON)")->required();

    solharness::EvalOptions eval_opt;
    std::string baseline, policy = "best", format = "markdown", eval_manifest;
    auto* eval = app.add_subcommand("eval", "compute metrics over a results directory");
    eval->add_option("results_dir", eval_opt.results_dir, "directory with terminal run states")
        ->required();
    eval->add_option("--baseline", baseline,
                     "baseline results: a directory of run states or a file_results.json");
    eval->add_option("--policy", policy, "candidate selection policy: best | min-vuln")
        ->check(CLI::IsMember({"best", "min-vuln"}));
    eval->add_option("--format", format, "report format: json | csv | markdown")
        ->check(CLI::IsMember({"json", "csv", "markdown"}));
    eval->add_option("--manifest", eval_manifest,
                     "run manifest; supplies task metadata such as declared test totals");

    solharness::DatasetOptions ds_opt;
    std::string variant = "tracker";
    auto* dataset =
        app.add_subcommand("dataset", "export fine-tuning datasets from a results directory");
    dataset->add_option("results_dir", ds_opt.results_dir, "directory with terminal run states")
        ->required();
    dataset->add_option("--variant", variant, "dataset variant: tracker | mix")
        ->check(CLI::IsMember({"tracker", "mix"}));
    dataset->add_option("--truncate", ds_opt.truncate_mode,
                        "context truncation: none | forward | backward")
        ->check(CLI::IsMember({"none", "forward", "backward"}));
    dataset->add_option("--limit", ds_opt.limit, "token limit for truncation")
        ->check(CLI::PositiveNumber);
    dataset->add_option("--split-seed", ds_opt.split_seed, "seed for the train/test split");
    dataset->add_option("--train-frac", ds_opt.train_frac,
                        "fraction of tasks assigned to the training split");
    dataset->add_flag("--include-all", ds_opt.include_all,
                      "keep trajectories of every termination kind, not just successes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : solharness::kExitConfigError;
    }

    if (run->parsed() || resume->parsed()) {
        return solharness::cmd_run(manifest_path);
    }
    if (eval->parsed()) {
        if (!baseline.empty()) eval_opt.baseline = baseline;
        if (!eval_manifest.empty()) eval_opt.manifest = eval_manifest;
        eval_opt.policy = policy == "min-vuln" ? solharness::SelectionPolicy::min_vuln
                                               : solharness::SelectionPolicy::best_score;
        eval_opt.format = solharness::report_format_from_string(format);
        return solharness::cmd_eval(eval_opt);
    }
    if (dataset->parsed()) {
        ds_opt.variant = solharness::dataset_variant_from_string(variant);
        return solharness::cmd_dataset(ds_opt);
    }
    return solharness::kExitConfigError;
}
