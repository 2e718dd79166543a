#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "xmgan/classify.hpp"
#include "xmgan/errors.hpp"
#include "xmgan/gradcheck_suite.hpp"
#include "xmgan/trainer.hpp"

namespace xmgan::cli {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return std::string(s.substr(b, s.find_last_not_of(" \t\r") - b + 1));
}

std::string join(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

using Settings = std::vector<std::pair<std::string, std::string>>;

void print_config(std::ostream& out, const std::string& command, const Settings& settings) {
  out << "# " << command << " effective config\n";
  for (const auto& [k, v] : settings) out << k << "=" << v << "\n";
  out << std::flush;
}

// A run directory and the checkpoint to load from it.
struct RunLocation {
  fs::path dir;
  fs::path checkpoint;
};

RunLocation locate_run(const std::string& run) {
  fs::path p = run;
  if (!fs::exists(p)) p = runs_root() / run;
  if (fs::is_directory(p)) {
    const fs::path ck = latest_checkpoint(p);
    if (ck.empty()) throw std::runtime_error("no checkpoint in " + p.string());
    return {p, ck};
  }
  if (fs::exists(p)) return {p.parent_path(), p};
  throw std::runtime_error("run '" + run + "' not found (also looked for " + (runs_root() / run).string() + ")");
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t used = 0;
    try {
      out.push_back(std::stoull(item, &used));
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || item[0] == '-') throw UsageError("--seeds: '" + item + "' is not a seed");
  }
  if (out.empty()) throw UsageError("--seeds: at least one seed is required");
  return out;
}

// Training settings as flags: every key of the training config.
struct TrainFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string name;
  std::string config;
};

std::string dashed(std::string key) {
  for (auto& ch : key)
    if (ch == '_') ch = '-';
  return key;
}

int run_train(TrainFlags& f, std::ostream& out) {
  TrainConfig c;
  try {
    for (const auto& [key, opt] : f.options)
      if (opt->count() > 0) apply_setting(c, key, f.values[key]);
    validate(c);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const std::string name =
      f.name.empty() ? std::string(to_string(c.ablation)) + "_seed" + std::to_string(c.seed) : f.name;
  c.run_dir = runs_root() / name;

  Settings s;
  std::stringstream ss(describe(c));
  std::string line;
  while (std::getline(ss, line)) s.emplace_back(line.substr(0, line.find('=')), line.substr(line.find('=') + 1));
  s.emplace_back("run_dir", c.run_dir.string());
  print_config(out, "train", s);

  Trainer trainer(c);
  const auto rows = trainer.run(&out);
  if (!rows.empty()) {
    out << "final metrics\n" << kMetricsHeader << "\n" << format_metrics_row(rows.back()) << "\n";
    if (rows.front().step == 0 && rows.front().fid_lite > 0.0) {
      out << "fid_lite improvement vs step 0: "
          << fmt(100.0 * (1.0 - rows.back().fid_lite / rows.front().fid_lite)) << "%\n";
    }
  }
  out << "metrics written to " << (c.run_dir / "metrics.csv").string() << "\n";
  return kExitOk;
}

struct MakeDataFlags {
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  std::size_t per_class = 40;
  std::string out;
  std::string config;
};

int run_make_data(const MakeDataFlags& f, std::ostream& out) {
  DatasetSpec spec;
  spec.seed = f.seed;
  spec.image_size = f.image_size;
  spec.per_class = f.per_class;
  try {
    validate(spec);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const fs::path dir = f.out.empty() ? fs::path("data") / ("seed_" + std::to_string(f.seed)) : fs::path(f.out);
  print_config(out, "make-data",
               {{"seed", std::to_string(spec.seed)},
                {"image_size", std::to_string(spec.image_size)},
                {"per_class", std::to_string(spec.per_class)},
                {"class_count", std::to_string(spec.class_count)},
                {"seen", join({spec.seen.begin(), spec.seen.end()})},
                {"unseen", join({spec.unseen.begin(), spec.unseen.end()})},
                {"out", dir.string()}});
  const Dataset data = make_dataset(spec);
  const std::uint64_t checksum = save_dataset(data, dir);
  out << "wrote " << spec.class_count * spec.per_class << " images to " << dir.string() << "\n"
      << "manifest_checksum=" << hex64(checksum) << "\n";
  return kExitOk;
}

struct GenerateFlags {
  std::string run;
  int class_id = -1;
  std::string alpha;
  std::size_t num = 9;
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
};

int run_generate(const GenerateFlags& f, std::ostream& out) {
  std::vector<double> alphas;
  if (!f.alpha.empty()) alphas = parse_alpha(f.alpha);
  if (f.num == 0) throw UsageError("--num must be positive");

  const RunLocation loc = locate_run(f.run);
  TrainedModel trained = load_trained(loc.checkpoint);
  const std::size_t refs = trained.config.k - 1;
  if (alphas.empty()) alphas.assign(refs, 1.0 / static_cast<double>(refs));
  if (alphas.size() != refs)
    throw UsageError("--alpha needs " + std::to_string(refs) + " weights (K-1) for this model, got " +
                     std::to_string(alphas.size()));
  const Dataset data = make_dataset(dataset_spec(trained.config));
  const auto& unseen = data.spec.unseen;
  if (std::find(unseen.begin(), unseen.end(), f.class_id) == unseen.end())
    throw UsageError("--class " + std::to_string(f.class_id) + " is not an unseen class (unseen: " +
                     join({unseen.begin(), unseen.end()}) + ")");
  const fs::path path =
      f.out.empty() ? loc.dir / ("generate_class" + std::to_string(f.class_id) + ".ppm") : fs::path(f.out);

  std::string alpha_text;
  for (std::size_t i = 0; i < alphas.size(); ++i) alpha_text += (i ? "," : "") + fmt(alphas[i]);
  print_config(out, "generate",
               {{"run", loc.dir.string()},
                {"checkpoint", loc.checkpoint.string()},
                {"class", std::to_string(f.class_id)},
                {"alpha", alpha_text},
                {"num", std::to_string(f.num)},
                {"seed", std::to_string(f.seed)},
                {"out", path.string()}});

  Episode base;
  const Tensor samples = sample_class(trained, data, f.class_id, alphas, f.num, f.seed, &base);
  std::vector<Tensor> tiles{base.base};
  tiles.insert(tiles.end(), base.refs.begin(), base.refs.end());
  const std::size_t columns = std::max<std::size_t>(
      tiles.size(), static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(f.num)))));
  while (tiles.size() < columns) tiles.push_back(Tensor::full(base.base.shape(), -1.0));
  for (std::size_t n = 0; n < f.num; ++n) tiles.push_back(image_at(samples, n));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_ppm(path, image_grid(tiles, columns));
  out << "wrote " << f.num << " samples (first row: the " << trained.config.k << " exemplars) to " << path.string()
      << "\n";
  return kExitOk;
}

struct EvaluateFlags {
  std::string run;
  std::string config;
};

int run_evaluate(const EvaluateFlags& f, std::ostream& out) {
  const RunLocation loc = locate_run(f.run);
  TrainConfig c;
  apply_settings_text(c, read_file(loc.dir / "config.txt"));
  print_config(out, "evaluate",
               {{"run", loc.dir.string()},
                {"checkpoint", loc.checkpoint.string()},
                {"eval_samples", std::to_string(c.eval_samples)},
                {"eval_seed", std::to_string(c.eval_seed)}});
  Trainer trainer(c);
  trainer.restore(load_checkpoint(loc.checkpoint));
  const EvalResult r = trainer.evaluate();
  out << "step,fid_lite,lpips_lite\n" << trainer.step() << "," << fmt(r.fid_lite) << "," << fmt(r.lpips_lite) << "\n";
  return kExitOk;
}

struct ClassifyFlags {
  std::string run;
  std::string seeds = "0,1,2,3,4";
  std::size_t epochs = 100;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t generated_per_class = 30;
  std::string out;
  std::string config;
};

int run_classify(const ClassifyFlags& f, std::ostream& out) {
  ClassifyConfig c;
  c.seeds = parse_seeds(f.seeds);
  c.epochs = f.epochs;
  c.lr = f.lr;
  c.batch_size = f.batch_size;
  c.generated_per_class = f.generated_per_class;

  const RunLocation loc = locate_run(f.run);
  TrainedModel trained = load_trained(loc.checkpoint);
  c.k = trained.config.k;
  const Dataset data = make_dataset(dataset_spec(trained.config));
  try {
    validate(c, data.spec);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const fs::path path = f.out.empty() ? loc.dir / "classify.csv" : fs::path(f.out);
  print_config(out, "classify",
               {{"run", loc.dir.string()},
                {"checkpoint", loc.checkpoint.string()},
                {"split", std::to_string(c.split.train) + "/" + std::to_string(c.split.val) + "/" +
                              std::to_string(c.split.test)},
                {"seeds", join(c.seeds)},
                {"epochs", std::to_string(c.epochs)},
                {"lr", fmt(c.lr)},
                {"batch_size", std::to_string(c.batch_size)},
                {"generated_per_class", std::to_string(c.generated_per_class)},
                {"k", std::to_string(c.k)},
                {"out", path.string()}});
  const auto results = run_low_data_eval(&trained, data, c, &out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream csv(path, std::ios::binary);
  if (!(csv << results_csv(results))) throw std::runtime_error("cannot write " + path.string());
  out << results_summary(results) << "results written to " << path.string() << "\n";
  return kExitOk;
}

struct GradcheckFlags {
  std::size_t seeds = 10;
  double step = 1e-5;
  std::string config;
};

int run_gradcheck(const GradcheckFlags& f, std::ostream& out, std::ostream& err) {
  if (f.seeds == 0) throw UsageError("--seeds must be positive");
  if (!(f.step > 0.0)) throw UsageError("--step must be positive");
  print_config(out, "gradcheck", {{"seeds", std::to_string(f.seeds)}, {"step", fmt(f.step)}, {"tolerance", "1e-4"}});
  const auto entries = run_gradcheck_suite(f.seeds, f.step);
  out << format_gradcheck(entries);
  const double worst = max_error(entries);
  char buf[64];
  std::snprintf(buf, sizeof buf, "max_rel_error=%.3e\n", worst);
  out << buf;
  if (worst >= 1e-4) {
    err << "gradient check failed: max_rel_error " << worst << " >= 1e-4\n";
    return kExitFailure;
  }
  return kExitOk;
}

// Inserts the arguments from `--config FILE` directly after the subcommand,
// so that flags given on the command line come later and win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string file;
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      continue;
    }
    std::vector<std::string> out(args.begin(), args.begin() + 1);
    const auto extra = config_file_args(file);
    out.insert(out.end(), extra.begin(), extra.end());
    out.insert(out.end(), args.begin() + 1, args.end());
    return out;
  }
  return args;
}

}  // namespace

fs::path runs_root() {
  const char* env = std::getenv("XMGAN_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::vector<double> parse_alpha(std::string_view text) {
  std::vector<double> out;
  std::stringstream ss{std::string(text)};
  std::string item;
  double total = 0.0;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t used = 0;
    double v = NAN;
    try {
      v = std::stod(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || !std::isfinite(v))
      throw UsageError("--alpha: '" + item + "' is not a number");
    if (v < 0.0) throw UsageError("--alpha is off the simplex: entry " + item + " is negative");
    out.push_back(v);
    total += v;
  }
  if (out.empty()) throw UsageError("--alpha: no weights given");
  if (std::abs(total - 1.0) > 1e-9)
    throw UsageError("--alpha is off the simplex: weights sum to " + fmt(total) + ", expected 1 (within 1e-9)");
  return out;
}

std::vector<std::string> config_file_args(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file " + path.string());
  std::vector<std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
    out.push_back("--" + dashed(trim(line.substr(0, eq))));
    out.push_back(trim(line.substr(eq + 1)));
  }
  return out;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot texture generation with cross-attention reference fusion.", "xmgan"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  const std::string config_help = "key=value file with option defaults; flags on the command line win";

  MakeDataFlags make_data;
  auto* make_data_cmd = app.add_subcommand("make-data", "Build the procedural texture dataset and its manifest");
  make_data_cmd->add_option("--seed", make_data.seed, "Dataset seed")->capture_default_str();
  make_data_cmd->add_option("--image-size", make_data.image_size, "Image side in pixels")->capture_default_str();
  make_data_cmd->add_option("--per-class", make_data.per_class, "Images per class")->capture_default_str();
  make_data_cmd->add_option("--out", make_data.out, "Output directory (default data/seed_<seed>)");
  make_data_cmd->add_option("--config", make_data.config, config_help);

  TrainFlags train;
  auto* train_cmd = app.add_subcommand("train", "Train a generator; resumes from the newest checkpoint of the run");
  {
    std::stringstream defaults(describe(TrainConfig{}));
    std::string line;
    while (std::getline(defaults, line)) {
      const std::string key = line.substr(0, line.find('='));
      train.options[key] = train_cmd->add_option("--" + dashed(key), train.values[key],
                                                 "default " + line.substr(line.find('=') + 1));
    }
  }
  train_cmd->add_option("--name", train.name, "Run name under the runs root (default <ablation>_seed<seed>)");
  train_cmd->add_option("--config", train.config, config_help + " (a run's config.txt works)");

  GenerateFlags gen;
  auto* gen_cmd = app.add_subcommand("generate", "Write an image grid for one unseen class with chosen alphas");
  gen_cmd->add_option("--run", gen.run, "Run name, run directory or checkpoint file")->required();
  gen_cmd->add_option("--class", gen.class_id, "Unseen class id")->required();
  gen_cmd->add_option("--alpha", gen.alpha, "Comma-separated K-1 simplex weights (default uniform)");
  gen_cmd->add_option("--num", gen.num, "Number of noise draws")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Seed for exemplar choice and noise")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output PPM (default <run>/generate_class<class>.ppm)");
  gen_cmd->add_option("--config", gen.config, config_help);

  EvaluateFlags eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Compute fid_lite and lpips_lite of a checkpoint on the unseen classes");
  eval_cmd->add_option("--run", eval.run, "Run name, run directory or checkpoint file")->required();
  eval_cmd->add_option("--config", eval.config, config_help);

  ClassifyFlags cls;
  auto* cls_cmd = app.add_subcommand("classify", "Low-data classification on the unseen classes, with and without "
                                                 "generated augmentation");
  cls_cmd->add_option("--run", cls.run, "Run name, run directory or checkpoint file")->required();
  cls_cmd->add_option("--seeds", cls.seeds, "Comma-separated seeds")->capture_default_str();
  cls_cmd->add_option("--epochs", cls.epochs, "Training epochs")->capture_default_str();
  cls_cmd->add_option("--lr", cls.lr, "Adam learning rate")->capture_default_str();
  cls_cmd->add_option("--batch-size", cls.batch_size, "Mini-batch size")->capture_default_str();
  cls_cmd->add_option("--generated-per-class", cls.generated_per_class, "Generated images per class")
      ->capture_default_str();
  cls_cmd->add_option("--out", cls.out, "Results CSV (default <run>/classify.csv)");
  cls_cmd->add_option("--config", cls.config, config_help);

  GradcheckFlags grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Central-difference check of every gradient");
  grad_cmd->add_option("--seeds", grad.seeds, "Number of random seeds")->capture_default_str();
  grad_cmd->add_option("--step", grad.step, "Finite-difference step h")->capture_default_str();
  grad_cmd->add_option("--config", grad.config, config_help);

  try {
    std::vector<std::string> reversed;
    try {
      const auto full = expand_config(args);
      reversed.assign(full.rbegin(), full.rend());
    } catch (const UsageError& e) {
      err << "usage error: " << e.what() << "\n";
      return kExitUsage;
    }
    try {
      app.parse(reversed);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }

    if (make_data_cmd->parsed()) return run_make_data(make_data, out);
    if (train_cmd->parsed()) return run_train(train, out);
    if (gen_cmd->parsed()) return run_generate(gen, out);
    if (eval_cmd->parsed()) return run_evaluate(eval, out);
    if (cls_cmd->parsed()) return run_classify(cls, out);
    if (grad_cmd->parsed()) return run_gradcheck(grad, out, err);
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace xmgan::cli
