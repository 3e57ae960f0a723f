#include "gradshield/harness.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "gradshield/io.hpp"

namespace gradshield {

namespace fs = std::filesystem;

namespace {

// Reads the keys of one JSON object, tracking which were consumed so leftovers can be rejected.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void number(const std::string& key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) throw ConfigError(field(key), "must be finite");
    }
  }

  template <typename U>
  void count(const std::string& key, U& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<long long>() < 0)) {
        throw ConfigError(field(key), "expected a non-negative integer");
      }
      out = static_cast<U>(v->get<std::uint64_t>());
    }
  }

  void flag(const std::string& key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  template <typename E, typename Parse>
  void choice(const std::string& key, E& out, Parse parse) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      try {
        out = parse(v->get<std::string>());
      } catch (const std::exception&) {
        throw ConfigError(field(key), "unknown value '" + v->get<std::string>() + "'");
      }
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string slurp_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
  if (!out) throw ArtifactError("write failed for " + path.string());
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Per-image PSNR and MS-SSIM averaged over a batch.
void fidelity(const Tensor& a, const Tensor& b, MetricsRecord& r) {
  std::vector<double> p, m;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    const Tensor ai = batch_item(a, i), bi = batch_item(b, i);
    p.push_back(psnr(ai, bi));
    m.push_back(ms_ssim(ai, bi));
  }
  r.psnr_db = mean_of(p);
  r.ms_ssim = mean_of(m);
}

void extraction(const Tensor& decoded, const Tensor& w, double threshold, MetricsRecord& r) {
  std::vector<double> v;
  for (std::size_t i = 0; i < decoded.dim(0); ++i) v.push_back(nc(batch_item(decoded, i), w));
  r.nc = mean_of(v);
  r.sr = success_rate(decoded, w, threshold);
}

}  // namespace

void validate(const ExperimentConfig& cfg) {
  if (cfg.image_size < 32) throw ConfigError("image_size", "must be at least 32 for 3-scale MS-SSIM");
  if (cfg.dataset_count < 3) throw ConfigError("dataset_count", "must be at least 3 so every split is non-empty");
  const auto& v = cfg.victim;
  if (!(v.alpha1 > 0)) throw ConfigError("victim.alpha1", "must be positive");
  if (!(v.alpha2 > 0)) throw ConfigError("victim.alpha2", "must be positive");
  if (v.batch == 0) throw ConfigError("victim.batch", "must be positive");
  if (!(v.lr >= 0) || !std::isfinite(v.lr)) throw ConfigError("victim.lr", "must be finite and non-negative");
  try {
    validate(cfg.attack);
  } catch (const ConfigError& e) {
    throw ConfigError("attack." + e.field(), std::string(e.what()).substr(e.field().size() + 2));
  }
  const auto& d = cfg.dgs;
  if (!(d.lambda_min > 0)) throw ConfigError("dgs.lambda_min", "must be positive");
  if (!(d.lambda_max >= d.lambda_min)) throw ConfigError("dgs.lambda_max", "must be at least lambda_min");
  if (!(d.nc_threshold >= 0 && d.nc_threshold <= 1)) throw ConfigError("dgs.nc_threshold", "must be in [0, 1]");
}

Json config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["task"] = task_name(cfg.task);
  j["image_size"] = cfg.image_size;
  j["dataset_count"] = cfg.dataset_count;
  j["victim"] = {{"alpha1", cfg.victim.alpha1}, {"alpha2", cfg.victim.alpha2}, {"steps", cfg.victim.steps},
                 {"batch", cfg.victim.batch},   {"lr", cfg.victim.lr},         {"seed", cfg.victim.seed}};
  const auto& a = cfg.attack;
  j["attack"] = {{"loss_variant", loss_variant_name(a.loss_variant)},
                 {"beta1", a.beta1},
                 {"beta2", a.beta2},
                 {"countermeasure", countermeasure_name(a.countermeasure)},
                 {"steps", a.steps},
                 {"batch", a.batch},
                 {"lr", a.lr},
                 {"seed", a.seed},
                 {"post", {{"kind", post_process_name(a.post.kind)}, {"param", a.post.param}}}};
  j["dgs"] = {{"enabled", cfg.dgs.enabled},
              {"lambda_min", cfg.dgs.lambda_min},
              {"lambda_max", cfg.dgs.lambda_max},
              {"nc_threshold", cfg.dgs.nc_threshold},
              {"watermark_pattern", pattern_name(cfg.dgs.watermark_pattern)}};
  return j;
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig cfg;
  ObjectReader root(j, "");
  root.count("seed", cfg.seed);
  root.choice("task", cfg.task, [](const std::string& s) { return parse_task(s); });
  root.count("image_size", cfg.image_size);
  root.count("dataset_count", cfg.dataset_count);
  if (const Json* v = root.find("victim")) {
    ObjectReader r(*v, "victim");
    r.number("alpha1", cfg.victim.alpha1);
    r.number("alpha2", cfg.victim.alpha2);
    r.count("steps", cfg.victim.steps);
    r.count("batch", cfg.victim.batch);
    r.number("lr", cfg.victim.lr);
    r.count("seed", cfg.victim.seed);
    r.finish();
  }
  if (const Json* v = root.find("attack")) {
    ObjectReader r(*v, "attack");
    auto& a = cfg.attack;
    r.choice("loss_variant", a.loss_variant, [](const std::string& s) { return parse_loss_variant(s); });
    r.number("beta1", a.beta1);
    r.number("beta2", a.beta2);
    r.choice("countermeasure", a.countermeasure, [](const std::string& s) { return parse_countermeasure(s); });
    r.count("steps", a.steps);
    r.count("batch", a.batch);
    r.number("lr", a.lr);
    r.count("seed", a.seed);
    if (const Json* p = r.find("post")) {
      ObjectReader rp(*p, "attack.post");
      rp.choice("kind", a.post.kind, [](const std::string& s) { return parse_post_process(s); });
      rp.number("param", a.post.param);
      rp.finish();
    }
    r.finish();
  }
  if (const Json* v = root.find("dgs")) {
    ObjectReader r(*v, "dgs");
    r.flag("enabled", cfg.dgs.enabled);
    r.number("lambda_min", cfg.dgs.lambda_min);
    r.number("lambda_max", cfg.dgs.lambda_max);
    r.number("nc_threshold", cfg.dgs.nc_threshold);
    r.choice("watermark_pattern", cfg.dgs.watermark_pattern, [](const std::string& s) { return parse_pattern(s); });
    r.finish();
  }
  root.finish();
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = slurp_text(path);
  } catch (const ArtifactError&) {
    throw ConfigError("<file>", "cannot read config " + path.string());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<file>", path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

Dataset experiment_dataset(const ExperimentConfig& cfg) {
  return make_dataset(cfg.task, cfg.dataset_count, cfg.seed, cfg.image_size);
}

WatermarkSpec experiment_watermark(const ExperimentConfig& cfg) {
  return gen_watermark(cfg.image_size, cfg.dgs.watermark_pattern);
}

DGSConfig defense_config(const ExperimentConfig& cfg, const WatermarkSpec& wspec) {
  DGSConfig d;
  d.w = wspec.w;
  d.w0 = wspec.w0;
  d.nc_threshold = cfg.dgs.nc_threshold;
  d.enabled = cfg.dgs.enabled;
  d.p = make_P(wspec.w.size(), cfg.dgs.lambda_min, cfg.dgs.lambda_max, mix_seed(cfg.seed, 0x50));
  return d;
}

void save_victim(const VictimModel& victim, const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(victim.encoder, dir / "encoder.ckpt");
  save_checkpoint(victim.decoder, dir / "decoder.ckpt");
  Json j;
  j["format_version"] = kResultsFormat;
  j["config"] = config_to_json(cfg);
  j["steps"] = victim.steps;
  j["final_loss"] = victim.final_loss;
  j["final_embed"] = victim.final_embed;
  j["final_fidelity"] = victim.final_fidelity;
  write_text(dir / "victim.json", j.dump(2) + "\n");
}

LoadedVictim load_victim(const fs::path& dir) {
  const fs::path meta = dir / "victim.json";
  if (!fs::exists(meta)) throw ArtifactError("no victim.json in " + dir.string());
  Json j;
  try {
    j = Json::parse(slurp_text(meta));
  } catch (const Json::parse_error& e) {
    throw ArtifactError(meta.string() + " is not valid JSON: " + e.what());
  }
  if (!j.contains("config")) throw ArtifactError(meta.string() + " has no config");
  LoadedVictim out;
  try {
    out.config = config_from_json(j["config"]);
  } catch (const ConfigError& e) {
    throw ArtifactError(meta.string() + ": " + e.what());
  }
  out.model.encoder = load_checkpoint(dir / "encoder.ckpt");
  out.model.decoder = load_checkpoint(dir / "decoder.ckpt");
  out.model.wspec = experiment_watermark(out.config);
  out.model.seed = out.config.victim.seed;
  out.model.steps = j.value("steps", std::size_t{0});
  out.model.final_loss = j.value("final_loss", 0.0);
  out.model.final_embed = j.value("final_embed", 0.0);
  out.model.final_fidelity = j.value("final_fidelity", 0.0);
  return out;
}

MetricsRecord evaluate_victim(const VictimModel& victim, const std::vector<ImagePair>& pairs, double threshold) {
  MetricsRecord r;
  r.name = "watermarked";
  const Tensor x = stack_x(pairs);
  const Tensor y = embed(victim.encoder, x, victim.wspec);
  fidelity(y, x, r);
  extraction(extract(victim.decoder, y), victim.wspec.w, threshold, r);
  return r;
}

MetricsRecord evaluate_clean(const VictimModel& victim, const std::vector<ImagePair>& pairs, double threshold) {
  MetricsRecord r;
  r.name = "clean";
  const Tensor x = stack_x(pairs);
  r.psnr_db = kPsnrCap;
  r.ms_ssim = 1.0;
  extraction(extract(victim.decoder, x), victim.wspec.w, threshold, r);
  return r;
}

MetricsRecord evaluate_attack(const VictimModel& victim, const ModelParams& remover,
                              const std::vector<ImagePair>& pairs, double threshold) {
  MetricsRecord r;
  r.name = "attacked";
  const Tensor y = embed(victim.encoder, stack_x(pairs), victim.wspec);
  const Tensor ry = apply_remover(remover, y);
  fidelity(ry, y, r);
  extraction(extract(victim.decoder, ry), victim.wspec.w, threshold, r);
  return r;
}

Json record_to_json(const MetricsRecord& r) {
  return {{"name", r.name}, {"psnr_db", r.psnr_db}, {"ms_ssim", r.ms_ssim}, {"nc", r.nc}, {"sr", r.sr}};
}

MetricsRecord record_from_json(const Json& j) {
  MetricsRecord r;
  r.name = j.at("name").get<std::string>();
  r.psnr_db = j.at("psnr_db").get<double>();
  r.ms_ssim = j.at("ms_ssim").get<double>();
  r.nc = j.at("nc").get<double>();
  r.sr = j.at("sr").get<double>();
  return r;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string curves_csv(const Curves& curves) {
  if (curves.attacker_view.size() != curves.defender_view.size()) {
    throw ShapeError("curves_csv: curve lengths differ");
  }
  std::string out = "step,attacker_view,defender_view\n";
  for (std::size_t i = 0; i < curves.attacker_view.size(); ++i) {
    if (!std::isfinite(curves.attacker_view[i]) || !std::isfinite(curves.defender_view[i])) {
      throw NumericError("curves_csv: non-finite curve value", static_cast<long>(i));
    }
    out += std::to_string(i) + "," + format_double(curves.attacker_view[i]) + "," +
           format_double(curves.defender_view[i]) + "\n";
  }
  return out;
}

Json results_json(const std::vector<MetricsRecord>& records, const ExperimentConfig& cfg) {
  Json j;
  j["format_version"] = kResultsFormat;
  j["config"] = config_to_json(cfg);
  j["ms_ssim_scales"] = 3;
  Json arr = Json::array();
  for (const auto& r : records) {
    if (!std::isfinite(r.psnr_db) || !std::isfinite(r.ms_ssim) || !std::isfinite(r.nc) || !std::isfinite(r.sr)) {
      throw NumericError("results_json: record '" + r.name + "' is not finite");
    }
    arr.push_back(record_to_json(r));
  }
  j["records"] = std::move(arr);
  return j;
}

void emit_results(const std::vector<MetricsRecord>& records, const Curves& curves, const ExperimentConfig& cfg,
                  const std::string& prefix, const Json& summary) {
  const std::string csv = curves_csv(curves);
  Json j = results_json(records, cfg);
  if (!summary.empty()) j["summary"] = summary;
  const std::string json = j.dump(2) + "\n";
  write_text(prefix + "curves.csv", csv);
  write_text(prefix + "metrics.json", json);
}

VictimTrainResult run_victim_experiment(const ExperimentConfig& cfg, const StepCallback& on_step) {
  validate(cfg);
  return train_victim(experiment_dataset(cfg), experiment_watermark(cfg), cfg.victim, on_step);
}

void write_victim_outputs(const VictimTrainResult& result, const ExperimentConfig& cfg, const fs::path& dir) {
  save_victim(result.model, cfg, dir);
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) {
    csv += std::to_string(i) + "," + format_double(result.losses[i]) + "\n";
  }
  write_text(dir / "losses.csv", csv);
  const Dataset data = experiment_dataset(cfg);
  const double th = cfg.dgs.nc_threshold;
  const Json j = results_json({evaluate_victim(result.model, data.eval, th), evaluate_clean(result.model, data.eval, th)}, cfg);
  write_text(dir / "metrics.json", j.dump(2) + "\n");
}

AttackOutcome run_attack_experiment(const VictimModel& victim, const ExperimentConfig& cfg,
                                    const AttackStepCallback& on_step) {
  validate(cfg);
  if (victim.wspec.w.shape != Shape{1, 1, cfg.image_size, cfg.image_size}) {
    throw ConfigError("image_size", "does not match the victim's mark size");
  }
  const Dataset data = experiment_dataset(cfg);
  AttackOutcome out;
  out.run = train_remover(victim, defense_config(cfg, victim.wspec), cfg.attack, data.attacker, on_step);
  const double th = cfg.dgs.nc_threshold;
  out.records = {evaluate_attack(victim, out.run.remover, data.eval, th), evaluate_victim(victim, data.eval, th)};
  return out;
}

void write_attack_outputs(const AttackOutcome& outcome, const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(outcome.run.remover, dir / "remover.ckpt");
  const AttackRun& run = outcome.run;
  auto first = [](const std::vector<double>& v) { return v.empty() ? 0.0 : v.front(); };
  auto last = [](const std::vector<double>& v) { return v.empty() ? 0.0 : v.back(); };
  Json summary;
  summary["steps"] = run.steps;
  summary["attacker_view_initial"] = first(run.attacker_view);
  summary["attacker_view_final"] = last(run.attacker_view);
  summary["defender_view_initial"] = first(run.defender_view);
  summary["defender_view_final"] = last(run.defender_view);
  summary["reoriented_final"] = last(run.reoriented);
  emit_results(outcome.records, {run.attacker_view, run.defender_view}, cfg, (dir / "").string(), summary);
}

std::vector<PostProcessSpec> robustness_grid(PostProcess suite) {
  std::vector<double> params;
  switch (suite) {
    case PostProcess::Jpeg: params = {10, 20, 30, 40}; break;
    case PostProcess::Noise: params = {0, 10, 20, 30}; break;
    case PostProcess::Lattice: params = {2, 6, 11, 16}; break;
    case PostProcess::None: throw ConfigError("suite", "'none' is not a robustness suite");
  }
  std::vector<PostProcessSpec> out;
  for (double p : params) out.push_back({suite, p});
  return out;
}

std::vector<RobustnessCell> robustness_sweep(const VictimModel& victim, const ExperimentConfig& cfg,
                                             const std::vector<PostProcessSpec>& cells, unsigned threads) {
  validate(cfg);
  const Dataset data = experiment_dataset(cfg);
  const DGSConfig dgs = defense_config(cfg, victim.wspec);
  const Tensor y = embed(victim.encoder, stack_x(data.eval), victim.wspec);

  std::vector<RobustnessCell> out(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < cells.size(); k = next++) {
      try {
        AttackConfig acfg = cfg.attack;
        acfg.post = cells[k];
        const AttackRun run = train_remover(victim, dgs, acfg, data.attacker);
        const Tensor ry = apply_remover(run.remover, y);
        const Tensor response = query_decoder_api(victim.decoder, dgs, ry);
        const Tensor processed = apply_post_process(cells[k], response, mix_seed(acfg.seed, 0x65766c));
        MetricsRecord r;
        fidelity(processed, response, r);
        out[k] = {cells[k], r.psnr_db, r.ms_ssim, success_rate(extract(victim.decoder, ry), victim.wspec.w,
                                                               cfg.dgs.nc_threshold)};
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cells.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

unsigned sweep_threads() {
  if (const char* env = std::getenv("GRADSHIELD_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace gradshield
