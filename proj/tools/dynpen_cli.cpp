// Command-line front end for the dynamic-penalty experiment harness.
//
//   dynpen regress1d --penalty dynamic --seed 3 --out runs/r3
//   dynpen vehicle   --penalty uniform --seed 0 --episodes 2000 --out runs/v0
//   dynpen study     --study vehicle --seeds 0..19 --jobs 8 --out runs/study
//   dynpen report    runs/study

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynpen/dynpen.hpp"

namespace {

using namespace dynpen;

struct CommonArgs {
  std::optional<std::string> penalty;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> episodes;
  std::optional<std::string> config_path;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--penalty", args.penalty, "Penalty kind: uniform, linear, dynamic")
      ->check(CLI::IsMember({"uniform", "linear", "dynamic"}));
  cmd->add_option("--seed", args.seed, "Random seed");
  cmd->add_option("--episodes", args.episodes, "Training episodes");
  cmd->add_option("--config", args.config_path, "Key-value config file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out, "Output directory");
}

RunConfig build_run_config(Study study, const CommonArgs& args) {
  KeyValueConfig kv;
  if (args.config_path) kv = KeyValueConfig::parse_file(*args.config_path);
  kv.set("study", to_string(study));
  if (args.penalty) kv.set("penalty.kind", *args.penalty);
  if (args.seed) kv.set("seed", static_cast<std::size_t>(*args.seed));
  if (args.episodes) kv.set("episodes", *args.episodes);
  if (args.out) kv.set("out", *args.out);
  return run_config_from_key_values(kv);
}

std::vector<std::uint64_t> parse_seed_range(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) {
    return {static_cast<std::uint64_t>(std::stoull(text))};
  }
  const std::uint64_t lo = std::stoull(text.substr(0, dots));
  const std::uint64_t hi = std::stoull(text.substr(dots + 2));
  if (hi < lo) throw CLI::ValidationError("--seeds", "range end below start");
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  return seeds;
}

int finish_run(const RunRecord& rec) {
  if (rec.diverged) {
    std::cerr << "run diverged at episode " << rec.diverged_episode << ": " << rec.error
              << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic penalty scheduling for soft-constrained reinforcement learning"};
  app.require_subcommand(1);

  CommonArgs regress_args, vehicle_args, study_args;

  auto* regress_cmd =
      app.add_subcommand("regress1d", "Penalized 1-D regression study (500 episodes)");
  add_common(regress_cmd, regress_args);

  auto* vehicle_cmd =
      app.add_subcommand("vehicle", "Double-integrator vehicle DQN study (2000 episodes)");
  add_common(vehicle_cmd, vehicle_args);

  auto* study_cmd = app.add_subcommand("study", "Multi-seed sweep over penalty kinds");
  add_common(study_cmd, study_args);
  std::string study_name = "vehicle";
  std::string seeds_text = "0..19";
  std::size_t jobs = 1;
  std::vector<std::string> kinds_text;
  study_cmd->add_option("--study", study_name, "Which study to sweep")
      ->check(CLI::IsMember({"regress1d", "vehicle"}));
  study_cmd->add_option("--seeds", seeds_text, "Seed range N..M (inclusive) or single N");
  study_cmd->add_option("--jobs", jobs, "Parallel workers (seed-level)");
  study_cmd->add_option("--kinds", kinds_text,
                        "Penalty kinds to sweep (default: uniform linear dynamic)");

  auto* report_cmd =
      app.add_subcommand("report", "Re-aggregate existing run directories into a summary");
  std::string report_dir;
  std::string report_out;
  report_cmd->add_option("dir", report_dir, "Study output directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  report_cmd->add_option("--out", report_out, "Where to write summary.json (default: dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (regress_cmd->parsed()) {
      const RunConfig cfg = build_run_config(Study::kRegress1d, regress_args);
      const auto out = run_regress1d(cfg);
      std::cout << "regress1d seed " << cfg.seed << " penalty "
                << to_string(cfg.penalty.kind) << ": final loss(mean100) "
                << (out.record.final_loss_mean100 ? *out.record.final_loss_mean100 : 0.0)
                << ", interior max err "
                << (out.record.final_interior_error ? *out.record.final_interior_error : 0.0)
                << "\n";
      return finish_run(out.record);
    }

    if (vehicle_cmd->parsed()) {
      const RunConfig cfg = build_run_config(Study::kVehicle, vehicle_args);
      const auto out = run_vehicle(cfg);
      std::cout << "vehicle seed " << cfg.seed << " penalty " << to_string(cfg.penalty.kind)
                << ": ";
      if (out.record.first_sufficient_episode) {
        std::cout << "sufficient feasible at episode "
                  << *out.record.first_sufficient_episode << ", best mean cost "
                  << *out.record.best_pass_cost << "\n";
      } else {
        std::cout << "no sufficient feasible checkpoint\n";
      }
      return finish_run(out.record);
    }

    if (study_cmd->parsed()) {
      StudyConfig cfg;
      if (study_args.penalty) kinds_text = {*study_args.penalty};
      CommonArgs base_args = study_args;
      base_args.out.reset();  // per-run directories are derived from the study dir
      cfg.base = build_run_config(study_from_string(study_name), base_args);
      cfg.seeds = parse_seed_range(seeds_text);
      cfg.jobs = jobs;
      if (study_args.out) cfg.out_dir = *study_args.out;
      if (!kinds_text.empty()) {
        cfg.kinds.clear();
        for (const auto& k : kinds_text) cfg.kinds.push_back(penalty_kind_from_string(k));
      }
      const StudySummary summary = run_study(cfg);
      std::cout << study_summary_table(summary);
      return summary.any_diverged ? 1 : 0;
    }

    if (report_cmd->parsed()) {
      const StudySummary summary = report_study(report_dir);
      const std::filesystem::path out_dir = report_out.empty()
                                                ? std::filesystem::path(report_dir)
                                                : std::filesystem::path(report_out);
      std::filesystem::create_directories(out_dir);
      std::ofstream os(out_dir / "summary.json");
      os << study_summary_to_json(summary).dump(2) << '\n';
      std::cout << study_summary_table(summary);
      return summary.any_diverged ? 1 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
