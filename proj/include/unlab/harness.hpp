#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "unlab/corpus.hpp"
#include "unlab/metrics.hpp"
#include "unlab/model.hpp"

namespace unlab {

struct CorpusSection {
  int n_entities = 48;
  int facts_per_entity = 3;
  uint64_t seed = 7;
  Format format = Format::qa;
  double p_target = 0.10;
};

struct TrainSection {
  int steps = 2400;
  int batch_size = 16;
  double lr = 1e-3;
  uint64_t seed = 11;
  double polite_augment = 0.10;
  std::string base_checkpoint;  // non-empty: load this instead of training
};

struct AttackSection {
  bool enabled = false;
  double p = 0.33;
  uint64_t seed = 13;
  std::string template_file;  // non-empty: patterns come from this file
};

struct ContinuousSection {
  bool enabled = false;
  int steps = 400;
  int batch_size = 16;
  double lr = 5e-4;
  uint64_t seed = 20;
  int n_entities = 48;
  int facts_per_entity = 3;
  uint64_t corpus_seed = 8;
};

struct DefenseSection {
  double anomaly_fraction = 0.0;  // 0 disables the filter
  ContinuousSection continuous;
};

struct UnlearnSection {
  std::string family = "gd";
  double lambda = 2.0;
  double eta = 0.0;
  double npo_beta = 0.1;
  int steps = 400;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 19;
  double polite_augment = 0.0;  // retain-anchor phrasing augmentation
};

struct EvalSection {
  std::vector<uint64_t> seeds = {101};
  int max_per_split = 0;
  int truth_perturbations = 3;
  int generation_slack = 8;
  bool trigger_injection = true;
  bool include_base = true;  // also evaluate the model before unlearning
};

struct ModelSection {
  int d_model = 32;
  int n_heads = 2;
  int context = 64;
  uint64_t init_seed = 29;
};

// Everything a run needs; a run is reproducible from this object alone.
// The JSON form is strict: every key must be present and nothing extra.
struct ExperimentConfig {
  std::string name = "default";
  CorpusSection corpus;
  TrainSection train;
  AttackSection attack;
  DefenseSection defense;
  UnlearnSection unlearn;
  EvalSection eval;
  ModelSection model;

  static ExperimentConfig from_json_string(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_json_string() const;
  // FNV-1a over the canonical JSON form, as a 16-digit hex string.
  std::string fingerprint() const;
  void validate() const;
};

// Applies one "dotted.key=value" override to a config's JSON form. The key
// must already exist; the value is parsed as JSON, falling back to a string.
std::string apply_override(const std::string& config_json,
                           const std::string& spec);

// Conventional file layout inside a run directory.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path corpus() const { return dir / "corpus.jsonl"; }
  std::filesystem::path forget_clean() const {
    return dir / "forget_clean.jsonl";
  }
  std::filesystem::path forget() const { return dir / "forget.jsonl"; }
  std::filesystem::path forget_used() const {
    return dir / "forget_used.jsonl";
  }
  std::filesystem::path retain() const { return dir / "retain.jsonl"; }
  std::filesystem::path base_ckpt() const { return dir / "base.ckpt"; }
  std::filesystem::path train_loss() const { return dir / "train_loss.csv"; }
  std::filesystem::path unlearned_ckpt() const {
    return dir / "unlearned.ckpt";
  }
  std::filesystem::path unlearn_log() const { return dir / "unlearn_log.csv"; }
  std::filesystem::path final_ckpt() const { return dir / "final.ckpt"; }
  std::filesystem::path report(uint64_t seed) const {
    return dir / ("report_" + std::to_string(seed) + ".json");
  }
  std::filesystem::path base_report(uint64_t seed) const {
    return dir / ("report_base_" + std::to_string(seed) + ".json");
  }
  std::filesystem::path summary_csv() const { return dir / "summary.csv"; }
  std::filesystem::path summary_text() const { return dir / "summary.txt"; }
  std::filesystem::path trajectory() const { return dir / "trajectory.csv"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path error_manifest() const {
    return dir / "error_manifest.json";
  }
};

// Pipeline stages. Each reads its inputs from and writes its artifacts into
// the run directory; a stage fails loudly if an input stage has not run.
void stage_generate(const ExperimentConfig& cfg,
                    const std::filesystem::path& dir);
void stage_finetune(const ExperimentConfig& cfg,
                    const std::filesystem::path& dir);
void stage_attack(const ExperimentConfig& cfg,
                  const std::filesystem::path& dir);
// Anomaly-filters the submitted forget set; once an unlearned checkpoint
// exists it also runs the configured continuous fine-tuning on top of it.
void stage_defend(const ExperimentConfig& cfg,
                  const std::filesystem::path& dir);
void stage_unlearn(const ExperimentConfig& cfg,
                   const std::filesystem::path& dir);

struct EvalArtifacts {
  std::vector<EvalReport> final_reports;  // one per eval seed
  std::vector<EvalReport> base_reports;   // present when eval.include_base
};
EvalArtifacts stage_evaluate(const ExperimentConfig& cfg,
                             const std::filesystem::path& dir);

struct PipelineResult {
  std::filesystem::path run_dir;
  std::filesystem::path manifest_path;
  std::string fingerprint;
  double insertion_rate = 0.0;
  size_t forget_submitted = 0;
  size_t forget_used = 0;
  std::vector<EvalReport> reports;
  std::vector<EvalReport> base_reports;
};

// Runs every stage in order and writes a manifest listing each artifact
// with its content hash. On failure the completed artifacts stay in place
// and an error manifest records the failing stage.
PipelineResult run_pipeline(const ExperimentConfig& cfg,
                            const std::filesystem::path& out_dir);

struct TrajectoryPoint {
  int step = 0;  // optimizer steps taken; 0 is the pre-unlearning model
  EvalReport report;
};

struct TrajectoryResult {
  std::filesystem::path run_dir;
  std::filesystem::path csv_path;
  std::filesystem::path manifest_path;
  std::vector<TrajectoryPoint> points;
};

// Unlearns with periodic snapshots and evaluates each one (first eval seed,
// eval.max_per_split cap), tracing effectiveness and utility over steps.
TrajectoryResult run_trajectory(const ExperimentConfig& cfg,
                                int snapshot_every,
                                const std::filesystem::path& out_dir);

struct ReportTables {
  std::string csv;
  std::string text;
};

// Aggregates completed run directories into a comparison table. Runs whose
// configs share (name, family, p_target, attack, defense) pool their
// reports; cells show mean +/- std across pooled eval seeds.
ReportTables report_tables(const std::vector<std::filesystem::path>& run_dirs);

uint64_t fnv1a64_file(const std::filesystem::path& path);

}  // namespace unlab
