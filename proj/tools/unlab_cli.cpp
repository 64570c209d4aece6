#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "unlab/errors.hpp"
#include "unlab/harness.hpp"

namespace {

namespace fs = std::filesystem;
using unlab::ExperimentConfig;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw unlab::IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct CommonOpts {
  std::string config_path;
  std::string out;
  std::vector<std::string> overrides;
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_config = true) {
  auto* copt = cmd->add_option("-c,--config", o.config_path,
                               "experiment config (JSON)");
  if (needs_config) copt->required();
  cmd->add_option("-o,--out", o.out,
                  "run directory (default: $UNLAB_OUT_ROOT/<name>)");
  cmd->add_option("--override", o.overrides,
                  "dotted config override, e.g. unlearn.eta=5 (repeatable)");
  cmd->add_option("-s,--seed", o.seed,
                  "master seed; derives every stage seed from it");
}

ExperimentConfig load_config(const CommonOpts& o) {
  std::string text = slurp(o.config_path);
  for (const std::string& ov : o.overrides) {
    text = unlab::apply_override(text, ov);
  }
  if (o.seed >= 0) {
    const uint64_t s = static_cast<uint64_t>(o.seed);
    const std::string derived[] = {
        "corpus.seed=" + std::to_string(s),
        "train.seed=" + std::to_string(s + 1),
        "attack.seed=" + std::to_string(s + 2),
        "unlearn.seed=" + std::to_string(s + 3),
        "defense.continuous.seed=" + std::to_string(s + 4),
        "eval.seeds=[" + std::to_string(s + 5) + "]",
        "model.init_seed=" + std::to_string(s + 6),
        "defense.continuous.corpus_seed=" + std::to_string(s + 7),
    };
    for (const std::string& ov : derived) {
      text = unlab::apply_override(text, ov);
    }
  }
  return ExperimentConfig::from_json_string(text);
}

fs::path resolve_out(const ExperimentConfig& cfg, const CommonOpts& o) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv("UNLAB_OUT_ROOT");
  return fs::path(root != nullptr && *root != '\0' ? root : "runs") / cfg.name;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale unlearning laboratory"};
  app.require_subcommand(1);

  CommonOpts common;
  int snapshot_every = 5;
  std::vector<std::string> report_dirs;
  std::string report_csv, report_text;

  CLI::App* cmd_generate =
      app.add_subcommand("generate", "synthesize the corpus and its splits");
  add_common(cmd_generate, common);
  CLI::App* cmd_finetune = app.add_subcommand(
      "finetune", "train the base model on the full corpus");
  add_common(cmd_finetune, common);
  CLI::App* cmd_attack = app.add_subcommand(
      "attack", "produce the submitted forget set (templated or clean)");
  add_common(cmd_attack, common);
  CLI::App* cmd_defend = app.add_subcommand(
      "defend",
      "screen the submitted forget set; after unlearning, also run the "
      "configured continuous fine-tuning");
  add_common(cmd_defend, common);
  CLI::App* cmd_unlearn =
      app.add_subcommand("unlearn", "run the unlearning objective");
  add_common(cmd_unlearn, common);
  CLI::App* cmd_evaluate = app.add_subcommand(
      "evaluate", "score the resulting model on clean and trigger prompts");
  add_common(cmd_evaluate, common);
  CLI::App* cmd_run =
      app.add_subcommand("run", "full pipeline: every stage in order");
  add_common(cmd_run, common);
  CLI::App* cmd_trajectory = app.add_subcommand(
      "trajectory", "unlearn with snapshots and trace metrics over steps");
  add_common(cmd_trajectory, common);
  cmd_trajectory->add_option("--snapshot-every", snapshot_every,
                             "optimizer steps between snapshots")
      ->check(CLI::PositiveNumber);
  CLI::App* cmd_report = app.add_subcommand(
      "report", "aggregate completed run directories into one table");
  cmd_report->add_option("dirs", report_dirs, "run directories")
      ->required()
      ->expected(-1);
  cmd_report->add_option("--csv", report_csv, "also write the CSV here");
  cmd_report->add_option("--text", report_text,
                         "also write the text table here");

  CLI11_PARSE(app, argc, argv);

  fs::path run_dir;
  try {
    if (cmd_report->parsed()) {
      const std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      const unlab::ReportTables tables = unlab::report_tables(dirs);
      std::cout << tables.text;
      auto dump = [](const std::string& path, const std::string& body) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw unlab::IoError("cannot write " + path);
        out << body;
      };
      if (!report_csv.empty()) dump(report_csv, tables.csv);
      if (!report_text.empty()) dump(report_text, tables.text);
      return 0;
    }

    const ExperimentConfig cfg = load_config(common);
    run_dir = resolve_out(cfg, common);
    const unlab::RunPaths paths{run_dir};

    if (cmd_generate->parsed()) {
      unlab::stage_generate(cfg, run_dir);
      std::cout << "wrote " << paths.corpus().string() << "\n"
                << "wrote " << paths.forget_clean().string() << "\n"
                << "wrote " << paths.retain().string() << "\n";
    } else if (cmd_finetune->parsed()) {
      unlab::stage_finetune(cfg, run_dir);
      std::cout << "wrote " << paths.base_ckpt().string() << "\n";
    } else if (cmd_attack->parsed()) {
      unlab::stage_attack(cfg, run_dir);
      const unlab::Corpus submitted = unlab::load_corpus(paths.forget());
      std::cout << "wrote " << paths.forget().string()
                << " (insertion rate " << submitted.insertion_rate << ")\n";
    } else if (cmd_defend->parsed()) {
      unlab::stage_defend(cfg, run_dir);
      const unlab::Corpus used = unlab::load_corpus(paths.forget_used());
      std::cout << "wrote " << paths.forget_used().string() << " ("
                << used.samples.size() << " samples kept)\n";
      if (fs::exists(paths.final_ckpt())) {
        std::cout << "wrote " << paths.final_ckpt().string() << "\n";
      }
    } else if (cmd_unlearn->parsed()) {
      unlab::stage_unlearn(cfg, run_dir);
      std::cout << "wrote " << paths.unlearned_ckpt().string() << "\n"
                << "wrote " << paths.unlearn_log().string() << "\n";
    } else if (cmd_evaluate->parsed()) {
      unlab::stage_evaluate(cfg, run_dir);
      std::cout << slurp(paths.summary_text());
    } else if (cmd_run->parsed()) {
      const unlab::PipelineResult res = unlab::run_pipeline(cfg, run_dir);
      std::cout << "run " << cfg.name << " (config " << res.fingerprint
                << ")\n"
                << "forget samples: " << res.forget_submitted << " submitted, "
                << res.forget_used << " used, insertion rate "
                << res.insertion_rate << "\n"
                << slurp(paths.summary_text()) << "manifest: "
                << res.manifest_path.string() << "\n";
    } else if (cmd_trajectory->parsed()) {
      const unlab::TrajectoryResult res =
          unlab::run_trajectory(cfg, snapshot_every, run_dir);
      std::cout << "wrote " << res.csv_path.string() << " ("
                << res.points.size() << " points)\n"
                << "manifest: " << res.manifest_path.string() << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!run_dir.empty()) {
      const fs::path em = unlab::RunPaths{run_dir}.error_manifest();
      if (fs::exists(em)) {
        std::cerr << "error manifest: " << em.string() << "\n";
      }
    }
    return 1;
  }
}
