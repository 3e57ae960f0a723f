#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gradshield/attack.hpp"
#include "gradshield/dgs.hpp"
#include "gradshield/metrics.hpp"
#include "gradshield/tasks.hpp"
#include "gradshield/watermark.hpp"

namespace gradshield {

using Json = nlohmann::ordered_json;

inline constexpr const char* kResultsFormat = "gradshield-results/1";

struct DefenseSettings {
  bool enabled = true;
  double lambda_min = 1e-5;
  double lambda_max = 1e-4;
  double nc_threshold = kDefaultNcThreshold;
  MarkPattern watermark_pattern = MarkPattern::Logo;
  friend bool operator==(const DefenseSettings&, const DefenseSettings&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  Task task = Task::Derain;
  std::size_t image_size = 32;
  std::size_t dataset_count = 256;
  VictimTrainConfig victim;
  AttackConfig attack;
  DefenseSettings dgs;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Throws ConfigError naming the offending field, e.g. "attack.batch".
void validate(const ExperimentConfig& cfg);

Json config_to_json(const ExperimentConfig& cfg);
// Missing keys keep their defaults; unknown keys and wrong types are rejected. The result is validated.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Dataset, mark and defense derived from a config. The P seed comes from cfg.seed.
Dataset experiment_dataset(const ExperimentConfig& cfg);
WatermarkSpec experiment_watermark(const ExperimentConfig& cfg);
DGSConfig defense_config(const ExperimentConfig& cfg, const WatermarkSpec& wspec);

// A victim directory holds encoder.ckpt, decoder.ckpt and victim.json (the config it was trained with).
void save_victim(const VictimModel& victim, const ExperimentConfig& cfg, const std::filesystem::path& dir);
struct LoadedVictim {
  VictimModel model;
  ExperimentConfig config;
};
LoadedVictim load_victim(const std::filesystem::path& dir);

// Fidelity of Y against X and extraction from Y; mean over the eval split.
MetricsRecord evaluate_victim(const VictimModel& victim, const std::vector<ImagePair>& pairs, double threshold);
// Extraction from clean processed images X, which should fail.
MetricsRecord evaluate_clean(const VictimModel& victim, const std::vector<ImagePair>& pairs, double threshold);
// Fidelity of R(Y) against Y and extraction from R(Y) with the defender's own decoder.
MetricsRecord evaluate_attack(const VictimModel& victim, const ModelParams& remover,
                              const std::vector<ImagePair>& pairs, double threshold);

Json record_to_json(const MetricsRecord& r);
MetricsRecord record_from_json(const Json& j);

struct Curves {
  std::vector<double> attacker_view;
  std::vector<double> defender_view;
};

// Writes <prefix>curves.csv and <prefix>metrics.json. Output bytes depend only on the inputs.
// A non-empty summary object is stored under "summary".
void emit_results(const std::vector<MetricsRecord>& records, const Curves& curves, const ExperimentConfig& cfg,
                  const std::string& prefix, const Json& summary = Json::object());
std::string curves_csv(const Curves& curves);
Json results_json(const std::vector<MetricsRecord>& records, const ExperimentConfig& cfg);

// Victim training on the config's dataset and mark.
VictimTrainResult run_victim_experiment(const ExperimentConfig& cfg, const StepCallback& on_step = {});
// save_victim plus losses.csv (step,loss) and metrics.json with eval-split records.
void write_victim_outputs(const VictimTrainResult& result, const ExperimentConfig& cfg,
                          const std::filesystem::path& dir);

struct AttackOutcome {
  AttackRun run;
  std::vector<MetricsRecord> records;  // attacked eval split, then the untouched watermarked split
};

// Remover training against the victim with the config's defense and attack settings, then evaluation.
AttackOutcome run_attack_experiment(const VictimModel& victim, const ExperimentConfig& cfg,
                                    const AttackStepCallback& on_step = {});
// remover.ckpt, curves.csv and metrics.json (with a summary of both curves) under dir.
void write_attack_outputs(const AttackOutcome& outcome, const ExperimentConfig& cfg,
                          const std::filesystem::path& dir);

struct RobustnessCell {
  PostProcessSpec post;
  double psnr_db = 0.0;  // processed vs unprocessed API response, eval split
  double ms_ssim = 0.0;
  double sr = 0.0;       // extraction from R(Y) after the attack
};

// The grid for one suite: jpeg {10,20,30,40}, noise {0,10,20,30} dB, lattice {2,6,11,16}.
std::vector<PostProcessSpec> robustness_grid(PostProcess suite);

// Trains one remover per cell against the protected API with the cell's processing applied to
// every response. Cells run on up to `threads` workers; results do not depend on the thread count.
std::vector<RobustnessCell> robustness_sweep(const VictimModel& victim, const ExperimentConfig& cfg,
                                             const std::vector<PostProcessSpec>& cells, unsigned threads);

// GRADSHIELD_THREADS if set and positive, else the hardware concurrency (at least 1).
unsigned sweep_threads();

std::string format_double(double v);

}  // namespace gradshield
