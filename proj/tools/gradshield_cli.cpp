#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gradshield/attack.hpp"
#include "gradshield/dgs.hpp"
#include "gradshield/harness.hpp"
#include "gradshield/io.hpp"

using namespace gradshield;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;
constexpr int kExitNumeric = 4;

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
  if (!out) throw ArtifactError("write failed for " + path.string());
}

// Progress goes to stderr so result files stay independent of it.
auto progress(const char* what, std::size_t total) {
  return [what, total](std::size_t step, double a, double b) {
    if ((step + 1) % 100 == 0 || step + 1 == total) {
      std::fprintf(stderr, "%s step %zu/%zu  %.6g  %.6g\n", what, step + 1, total, a, b);
    }
  };
}

void check_compatible(const ExperimentConfig& run, const ExperimentConfig& trained) {
  if (run.image_size != trained.image_size) throw ConfigError("image_size", "differs from the victim's training config");
  if (run.dgs.watermark_pattern != trained.dgs.watermark_pattern) {
    throw ConfigError("dgs.watermark_pattern", "differs from the victim's training config");
  }
}

int gen_data(Task task, std::size_t count, std::size_t size, std::uint64_t seed, const fs::path& out) {
  const Dataset data = make_dataset(task, count, seed, size);
  Json manifest;
  manifest["format_version"] = kResultsFormat;
  manifest["task"] = task_name(task);
  manifest["count"] = count;
  manifest["size"] = size;
  manifest["seed"] = seed;
  auto dump_split = [&](const char* name, const std::vector<ImagePair>& pairs, const std::vector<std::uint64_t>& seeds) {
    fs::create_directories(out / name);
    Json items = Json::array();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const std::string stem = std::string(name) + "/" + std::to_string(i);
      write_pgm(pairs[i].x0, out / (stem + "_x0.pgm"));
      write_pgm(pairs[i].x, out / (stem + "_x.pgm"));
      items.push_back({{"seed", seeds[i]}, {"x0", stem + "_x0.pgm"}, {"x", stem + "_x.pgm"}});
    }
    manifest["splits"][name] = std::move(items);
  };
  dump_split("victim", data.victim, data.victim_seeds);
  dump_split("attacker", data.attacker, data.attacker_seeds);
  dump_split("eval", data.eval, data.eval_seeds);
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int train_victim_cmd(const fs::path& config_path, const fs::path& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const auto report = progress("victim", cfg.victim.steps);
  const auto result = run_victim_experiment(cfg, [&](std::size_t step, double loss) { report(step, loss, loss); });
  write_victim_outputs(result, cfg, out);
  return 0;
}

int attack_cmd(const fs::path& config_path, const fs::path& victim_dir, const fs::path& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const LoadedVictim victim = load_victim(victim_dir);
  check_compatible(cfg, victim.config);
  const auto outcome = run_attack_experiment(victim.model, cfg, progress("attack", cfg.attack.steps));
  write_attack_outputs(outcome, cfg, out);
  return 0;
}

int robustness_cmd(const fs::path& victim_dir, const fs::path& config_path, const std::string& suites,
                   const fs::path& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const LoadedVictim victim = load_victim(victim_dir);
  check_compatible(cfg, victim.config);
  std::vector<PostProcess> kinds;
  std::stringstream ss(suites);
  for (std::string name; std::getline(ss, name, ',');) {
    PostProcess k;
    try {
      k = parse_post_process(name);
    } catch (const ConfigError&) {
      throw ConfigError("suite", "unknown suite '" + name + "'");
    }
    if (k == PostProcess::None) throw ConfigError("suite", "'none' is not a robustness suite");
    kinds.push_back(k);
  }
  if (kinds.empty()) throw ConfigError("suite", "no suites given");

  std::vector<PostProcessSpec> cells;
  for (auto k : kinds) {
    const auto grid = robustness_grid(k);
    cells.insert(cells.end(), grid.begin(), grid.end());
  }
  std::fprintf(stderr, "robustness: %zu cells\n", cells.size());
  const auto rows = robustness_sweep(victim.model, cfg, cells, sweep_threads());

  Json j;
  j["format_version"] = kResultsFormat;
  j["config"] = config_to_json(cfg);
  j["ms_ssim_scales"] = 3;
  Json tables = Json::object();
  for (const auto& r : rows) {
    tables[std::string(post_process_name(r.post.kind))].push_back(
        {{"param", r.post.param}, {"psnr_db", r.psnr_db}, {"ms_ssim", r.ms_ssim}, {"sr", r.sr}});
  }
  j["suites"] = std::move(tables);
  write_file(out, j.dump(2) + "\n");
  return 0;
}

int eval_cmd(const fs::path& victim_dir, const std::string& remover_dir, const fs::path& out) {
  const LoadedVictim victim = load_victim(victim_dir);
  const Dataset data = experiment_dataset(victim.config);
  const double th = victim.config.dgs.nc_threshold;
  std::vector<MetricsRecord> records{evaluate_victim(victim.model, data.eval, th),
                                     evaluate_clean(victim.model, data.eval, th)};
  if (!remover_dir.empty()) {
    const ModelParams remover = load_checkpoint(fs::path(remover_dir) / "remover.ckpt");
    records.push_back(evaluate_attack(victim.model, remover, data.eval, th));
  }
  write_file(out, results_json(records, victim.config).dump(2) + "\n");
  return 0;
}

int reorient_cmd(const fs::path& z_path, const fs::path& w_path, double lambda, const fs::path& out) {
  if (!(lambda > 0) || !std::isfinite(lambda)) throw ConfigError("lambda", "must be positive and finite");
  const Tensor z = read_pgm(z_path);
  const Tensor w = read_pgm(w_path);
  if (z.shape != w.shape) throw ConfigError("z", "image size differs from the mark");
  const PMatrix p = make_P(w.size(), lambda, lambda, 0);
  write_pgm(reorient(z, p, w), out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-reorientation defense for box-free watermark decoders: experiment runner"};
  app.require_subcommand(1);

  std::string task = "derain", out, config, victim_dir, remover_dir, suites = "jpeg,noise,lattice", z_path, w_path;
  std::size_t count = 256, size = 32;
  std::uint64_t seed = 0;
  double lambda = 1e-4;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as PGM images plus a manifest");
  gen->add_option("--task", task, "derain or style")->check(CLI::IsMember({"derain", "style"}));
  gen->add_option("--count", count)->check(CLI::PositiveNumber);
  gen->add_option("--size", size)->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();

  auto* tv = app.add_subcommand("train-victim", "Train the watermark encoder and decoder");
  tv->add_option("--config", config)->required();
  tv->add_option("--out", out)->required();

  auto* at = app.add_subcommand("attack", "Train a watermark remover against the decoder API");
  at->add_option("--config", config)->required();
  at->add_option("--victim", victim_dir)->required();
  at->add_option("--out", out)->required();

  auto* rb = app.add_subcommand("robustness", "Sweep response post-processing attacks");
  rb->add_option("--victim", victim_dir)->required();
  rb->add_option("--config", config)->required();
  rb->add_option("--suite", suites, "comma-separated subset of jpeg,noise,lattice");
  rb->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("eval", "Fidelity and extraction metrics on the eval split");
  ev->add_option("--victim", victim_dir)->required();
  ev->add_option("--remover", remover_dir);
  ev->add_option("--out", out)->required();

  auto* ro = app.add_subcommand("reorient", "Reorient one decoded mark with a constant eigenvalue");
  ro->add_option("--z", z_path)->required();
  ro->add_option("--w", w_path)->required();
  ro->add_option("--lambda", lambda)->required();
  ro->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return gen_data(parse_task(task), count, size, seed, out);
    if (*tv) return train_victim_cmd(config, out);
    if (*at) return attack_cmd(config, victim_dir, out);
    if (*rb) return robustness_cmd(victim_dir, config, suites, out);
    if (*ev) return eval_cmd(victim_dir, remover_dir, out);
    if (*ro) return reorient_cmd(z_path, w_path, lambda, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ArtifactError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitArtifact;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical error (step %ld): %s\n", e.step(), e.what());
    return kExitNumeric;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitArtifact;
  }
  return kExitConfig;
}
