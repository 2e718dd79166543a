#include "xmgan/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "xmgan/errors.hpp"
#include "xmgan/ops.hpp"

namespace xmgan {

namespace {

constexpr std::uint64_t kStepStream = 0x7374'6570'0000'0000ULL;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError("invalid value '" + s + "' for " + std::string(key));
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw ConfigError("invalid boolean '" + s + "' for " + std::string(key));
}

// Marks a parameter list as constant for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(const ParamList& params) : params_(params) {
    for (auto p : params_) p.tensor.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (auto p : params_) p.tensor.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  const ParamList& params_;
};

std::string step_suffix(long long step) { return " at step " + std::to_string(step); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

AblationMode parse_ablation(std::string_view name) {
  if (name == "baseline") return AblationMode::kBaseline;
  if (name == "pl") return AblationMode::kPl;
  if (name == "ppl") return AblationMode::kPpl;
  if (name == "cln_noise_only") return AblationMode::kClnNoiseOnly;
  if (name == "full") return AblationMode::kFull;
  throw ConfigError("unknown ablation mode '" + std::string(name) +
                    "' (expected baseline, pl, ppl, cln_noise_only or full)");
}

std::string_view to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kBaseline: return "baseline";
    case AblationMode::kPl: return "pl";
    case AblationMode::kPpl: return "ppl";
    case AblationMode::kClnNoiseOnly: return "cln_noise_only";
    case AblationMode::kFull: return "full";
  }
  return "?";
}

AblationSwitches switches(AblationMode mode) {
  switch (mode) {
    case AblationMode::kBaseline: return {Modulation::kIdentity, false, PerceptualWeighting::kNone};
    case AblationMode::kPl: return {Modulation::kIdentity, false, PerceptualWeighting::kUniform};
    case AblationMode::kPpl: return {Modulation::kIdentity, true, PerceptualWeighting::kAlpha};
    case AblationMode::kClnNoiseOnly: return {Modulation::kNoiseOnly, true, PerceptualWeighting::kAlpha};
    case AblationMode::kFull: return {Modulation::kFull, true, PerceptualWeighting::kAlpha};
  }
  throw ConfigError("invalid ablation mode");
}

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.k < 2) throw ConfigError("k must be at least 2 (one base and one reference image)");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("lr must be positive");
  if (!(c.eta_p >= 0.0) || !(c.eta_cl >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (c.eval_every == 0) throw ConfigError("eval_every must be positive");
  if (c.eval_samples < 2) throw ConfigError("eval_samples must be at least 2");
  if (c.keep_checkpoints == 0) throw ConfigError("keep_checkpoints must be positive");
  if (c.perceptual_layers == 0 || c.perceptual_layers > 4) throw ConfigError("perceptual_layers must be in [1, 4]");
  if (c.per_class < c.k) throw ConfigError("per_class must be at least k");
  validate(model_config(c));
  validate(dataset_spec(c));
}

ModelConfig model_config(const TrainConfig& c) {
  ModelConfig m;
  m.image_size = c.image_size;
  m.depth = c.depth;
  m.width = c.width;
  m.heads = c.heads;
  m.noise_dim = c.noise_dim;
  m.classes = DatasetSpec{}.seen.size();
  m.seed = c.seed;
  return m;
}

DatasetSpec dataset_spec(const TrainConfig& c) {
  DatasetSpec s;
  s.per_class = c.per_class;
  s.image_size = c.image_size;
  s.seed = c.data_seed;
  return s;
}

namespace {

std::string fingerprint_text(const TrainConfig& c) {
  std::ostringstream o;
  o << "batch_size=" << c.batch_size << "\n"
    << "lr=" << format_double(c.lr) << "\n"
    << "k=" << c.k << "\n"
    << "eta_p=" << format_double(c.eta_p) << "\n"
    << "eta_cl=" << format_double(c.eta_cl) << "\n"
    << "ablation=" << to_string(c.ablation) << "\n"
    << "seed=" << c.seed << "\n"
    << "image_size=" << c.image_size << "\n"
    << "depth=" << c.depth << "\n"
    << "width=" << c.width << "\n"
    << "heads=" << c.heads << "\n"
    << "noise_dim=" << c.noise_dim << "\n"
    << "perceptual_layers=" << c.perceptual_layers << "\n"
    << "data_seed=" << c.data_seed << "\n"
    << "per_class=" << c.per_class << "\n"
    << "eval_samples=" << c.eval_samples << "\n"
    << "eval_seed=" << c.eval_seed << "\n";
  return o.str();
}

}  // namespace

std::string describe(const TrainConfig& c) {
  std::ostringstream o;
  o << "steps=" << c.steps << "\n"
    << fingerprint_text(c) << "eval_every=" << c.eval_every << "\n"
    << "checkpoint_every=" << c.checkpoint_every << "\n"
    << "keep_checkpoints=" << c.keep_checkpoints << "\n"
    << "write_samples=" << (c.write_samples ? "true" : "false") << "\n";
  return o.str();
}

std::uint64_t fingerprint(const TrainConfig& c) { return fnv1a64(fingerprint_text(c)); }

void apply_setting(TrainConfig& c, std::string_view key, std::string_view value) {
  using U = std::uint64_t;
  using Z = std::size_t;
  if (key == "steps") c.steps = parse_number<Z>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<Z>(key, value);
  else if (key == "lr") c.lr = parse_number<double>(key, value);
  else if (key == "k") c.k = parse_number<Z>(key, value);
  else if (key == "eta_p") c.eta_p = parse_number<double>(key, value);
  else if (key == "eta_cl") c.eta_cl = parse_number<double>(key, value);
  else if (key == "ablation") c.ablation = parse_ablation(trim(value));
  else if (key == "seed") c.seed = parse_number<U>(key, value);
  else if (key == "image_size") c.image_size = parse_number<Z>(key, value);
  else if (key == "depth") c.depth = parse_number<Z>(key, value);
  else if (key == "width") c.width = parse_number<Z>(key, value);
  else if (key == "heads") c.heads = parse_number<Z>(key, value);
  else if (key == "noise_dim") c.noise_dim = parse_number<Z>(key, value);
  else if (key == "perceptual_layers") c.perceptual_layers = parse_number<Z>(key, value);
  else if (key == "data_seed") c.data_seed = parse_number<U>(key, value);
  else if (key == "per_class") c.per_class = parse_number<Z>(key, value);
  else if (key == "eval_every") c.eval_every = parse_number<Z>(key, value);
  else if (key == "eval_samples") c.eval_samples = parse_number<Z>(key, value);
  else if (key == "eval_seed") c.eval_seed = parse_number<U>(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_number<Z>(key, value);
  else if (key == "keep_checkpoints") c.keep_checkpoints = parse_number<Z>(key, value);
  else if (key == "write_samples") c.write_samples = parse_bool(key, value);
  else throw ConfigError("unknown setting '" + std::string(key) + "'");
}

void apply_settings_text(TrainConfig& c, std::string_view text) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
    apply_setting(c, trim(std::string_view(line).substr(0, eq)), std::string_view(line).substr(eq + 1));
  }
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", r.step, r.fid_lite, r.lpips_lite,
                r.l_adv_d, r.l_adv_g, r.l_p, r.l_cl);
  return buf;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& csv) {
  const std::string text = read_text(csv);
  std::vector<MetricsRow> rows;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const std::string_view line(text.data() + pos, nl - pos);
    const std::size_t line_start = pos;
    pos = nl + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != kMetricsHeader) throw ParseError("unexpected metrics header '" + std::string(line) + "'", line_start);
      header = false;
      continue;
    }
    MetricsRow r;
    double* fields[] = {&r.fid_lite, &r.lpips_lite, &r.l_adv_d, &r.l_adv_g, &r.l_p, &r.l_cl};
    std::size_t at = 0;
    auto next_field = [&]() {
      const auto comma = line.find(',', at);
      const auto field = line.substr(at, comma == std::string_view::npos ? std::string_view::npos : comma - at);
      at = comma == std::string_view::npos ? line.size() + 1 : comma + 1;
      return field;
    };
    auto bad = [&]() { return ParseError("malformed metrics row '" + std::string(line) + "'", line_start); };
    {
      const auto f = next_field();
      const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), r.step);
      if (ec != std::errc() || p != f.data() + f.size()) throw bad();
    }
    for (double* out : fields) {
      if (at > line.size()) throw bad();
      const auto f = next_field();
      const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), *out);
      if (ec != std::errc() || p != f.data() + f.size()) throw bad();
    }
    if (at <= line.size()) throw bad();
    rows.push_back(r);
  }
  if (header) throw ParseError("metrics file has no header", 0);
  return rows;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, long long step) {
  char name[40];
  std::snprintf(name, sizeof name, "ckpt_%08lld.bin", step);
  return run_dir / name;
}

namespace {

// Steps of the ckpt_<step>.bin files in a directory, ascending.
std::vector<std::pair<long long, std::filesystem::path>> list_checkpoints(const std::filesystem::path& dir) {
  std::vector<std::pair<long long, std::filesystem::path>> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() < 10 || name.rfind("ckpt_", 0) != 0 || name.substr(name.size() - 4) != ".bin") continue;
    const std::string digits = name.substr(5, name.size() - 9);
    long long step = 0;
    const auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), step);
    if (ec != std::errc() || p != digits.data() + digits.size()) continue;
    out.emplace_back(step, entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir) {
  const auto all = list_checkpoints(run_dir);
  return all.empty() ? std::filesystem::path{} : all.back().second;
}

Trainer::Trainer(TrainConfig config) : Trainer(config, make_dataset(dataset_spec(config))) {}

Trainer::Trainer(TrainConfig config, Dataset data)
    : config_(std::move(config)),
      switches_(switches(config_.ablation)),
      data_(std::move(data)),
      model_(make_model(model_config(config_))),
      phi_(kDefaultExtractorSeed),
      opt_g_(generator_params(model_), config_.lr),
      opt_d_(discriminator_params(model_), config_.lr) {
  validate(config_);
  if (data_.spec.image_size != config_.image_size || data_.spec.per_class < config_.k)
    throw ConfigError("dataset does not match the training configuration");

  NoGradScope no_grad;
  image_maps_.resize(data_.spec.class_count * data_.spec.per_class);
  for (int c : data_.spec.seen) {
    for (std::size_t i = 0; i < data_.spec.per_class; ++i) {
      const Tensor& im = data_.images[static_cast<std::size_t>(c)][i];
      image_maps_[data_.image_id(c, i)] =
          phi_.feature_maps(reshape(im, {1, im.dim(0), im.dim(1), im.dim(2)}), config_.perceptual_layers);
    }
  }
  std::vector<Tensor> real;
  for (int c : data_.spec.unseen) real.insert(real.end(), data_.images[static_cast<std::size_t>(c)].begin(),
                                              data_.images[static_cast<std::size_t>(c)].end());
  real_unseen_ = fit_gaussian(phi_.features(stack_images(real)));
}

std::vector<Episode> Trainer::sample_batch(Rng& rng) {
  std::vector<Episode> batch;
  batch.reserve(config_.batch_size);
  last_batch_ids_.clear();
  for (std::size_t b = 0; b < config_.batch_size; ++b) {
    Episode e = sample_episode(data_, data_.spec.seen, config_.k, config_.noise_dim, rng);
    if (!switches_.random_alpha) e.alphas.assign(e.refs.size(), 1.0 / static_cast<double>(e.refs.size()));
    for (std::size_t id : e.image_ids) {
      const int cls = static_cast<int>(id / data_.spec.per_class);
      if (std::find(data_.spec.seen.begin(), data_.spec.seen.end(), cls) == data_.spec.seen.end())
        throw ContractError("training batch contains image " + std::to_string(id) + " of unseen class " +
                            std::to_string(cls));
      last_batch_ids_.push_back(id);
    }
    batch.push_back(std::move(e));
  }
  return batch;
}

LossReport Trainer::train_step(bool update_generator) {
  Rng rng(derive_seed(config_.seed, kStepStream + static_cast<std::uint64_t>(step_)));
  const std::vector<Episode> batch = sample_batch(rng);
  const std::size_t B = batch.size();
  std::vector<int> labels(B);
  std::vector<Tensor> bases;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& seen = data_.spec.seen;
    labels[b] = static_cast<int>(std::find(seen.begin(), seen.end(), batch[b].class_id) - seen.begin());
    bases.push_back(batch[b].base);
  }
  const Tensor real = stack_images(bases);

  LossReport report;
  report.step = step_;
  Tape tape_g;
  TapeScope g_scope(tape_g);
  const Tensor fake = [&] {
    if (update_generator) return generate(batch, model_, switches_.modulation, true);
    NoGradScope frozen;
    return generate(batch, model_, switches_.modulation, true);
  }();

  {
    Tape tape_d;
    TapeScope d_scope(tape_d);
    const Tensor both[] = {real, fake.detach()};
    const auto out = discriminate(concat_rows(both), model_, true);
    const Tensor adv = hinge_d_loss(slice_rows(out.score, 0, B), slice_rows(out.score, B, 2 * B));
    const Tensor cls = classification_loss(slice_rows(out.cls_logits, 0, B), labels);
    report.l_adv_d = adv.item();
    if (!std::isfinite(report.l_adv_d) || !std::isfinite(cls.item()))
      throw NumericError("non-finite loss term l_adv_d" + step_suffix(step_));
    const Tensor loss = add(adv, scale(cls, config_.eta_cl));
    opt_d_.zero_grad();
    tape_d.backward(loss);
    try {
      opt_d_.step();
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (discriminator update" + step_suffix(step_) + ")");
    }
  }

  if (update_generator) {
    const ParamList d_params = discriminator_params(model_);
    FreezeGuard freeze(d_params);
    const Tensor both[] = {real, fake};
    const auto out = discriminate(concat_rows(both), model_, true);
    const Tensor adv = hinge_g_loss(slice_rows(out.score, B, 2 * B));
    const Tensor cls = classification_loss(slice_rows(out.cls_logits, B, 2 * B), labels);
    Tensor p = Tensor::scalar(0.0);
    if (switches_.perceptual != PerceptualWeighting::kNone) {
      const std::size_t refs = config_.k - 1;
      std::vector<Tensor> ref_feats(refs), weights(refs);
      for (std::size_t i = 0; i < refs; ++i) {
        std::vector<Tensor> rows;
        std::vector<double> w(B);
        for (std::size_t b = 0; b < B; ++b) {
          rows.push_back(image_maps_[batch[b].image_ids[1 + i]]);
          w[b] = switches_.perceptual == PerceptualWeighting::kUniform ? 1.0 / static_cast<double>(refs)
                                                                       : batch[b].alphas[i];
        }
        ref_feats[i] = concat_rows(rows);
        weights[i] = Tensor::from({B}, w);
      }
      p = perceptual_loss(phi_.feature_maps(fake, config_.perceptual_layers), ref_feats, weights);
    }
    const LossWeights lw{config_.eta_p, config_.eta_cl};
    const LossParts parts{adv.item(), p.item(), cls.item()};
    try {
      report.total = total_g_loss(parts, lw);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + step_suffix(step_));
    }
    report.l_adv_g = parts.adv;
    report.l_p = parts.p;
    report.l_cl = parts.cl;
    const Tensor total = total_g_loss(adv, p, cls, lw);
    opt_g_.zero_grad();
    tape_g.backward(total);
    try {
      opt_g_.step();
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (generator update" + step_suffix(step_) + ")");
    }
  }

  window_[0] += report.l_adv_d;
  window_[1] += report.l_adv_g;
  window_[2] += report.l_p;
  window_[3] += report.l_cl;
  window_[4] += 1.0;
  ++step_;
  return report;
}

Tensor Trainer::generate_eval(std::span<const Episode> episodes) {
  constexpr std::size_t kChunk = 16;
  NoGradScope no_grad;
  std::vector<Tensor> parts;
  for (std::size_t at = 0; at < episodes.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, episodes.size() - at);
    parts.push_back(generate(episodes.subspan(at, n), model_, switches_.modulation, false));
  }
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

EvalResult Trainer::evaluate() {
  NoGradScope no_grad;
  std::vector<Tensor> fake_feats;
  double lpips_sum = 0.0;
  for (int c : data_.spec.unseen) {
    const auto& imgs = data_.images[static_cast<std::size_t>(c)];
    std::vector<std::size_t> ids(imgs.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = data_.image_id(c, i);
    Rng rng(derive_seed(config_.eval_seed, static_cast<std::uint64_t>(c)));
    std::vector<Episode> episodes;
    for (std::size_t s = 0; s < config_.eval_samples; ++s) {
      Episode e = sample_episode_from(imgs, ids, c, config_.k, config_.noise_dim, rng);
      if (!switches_.random_alpha) e.alphas.assign(e.refs.size(), 1.0 / static_cast<double>(e.refs.size()));
      episodes.push_back(std::move(e));
    }
    const Tensor feats = phi_.features(generate_eval(episodes));
    lpips_sum += mean_pairwise_distance(feats);
    fake_feats.push_back(feats);
  }
  EvalResult r;
  r.fid_lite = frechet_distance(real_unseen_, fit_gaussian(concat_rows(fake_feats)));
  r.lpips_lite = lpips_sum / static_cast<double>(data_.spec.unseen.size());
  return r;
}

Tensor Trainer::sample_sheet(std::size_t count) {
  NoGradScope no_grad;
  std::vector<Tensor> tiles;
  for (int c : data_.spec.unseen) {
    const auto& imgs = data_.images[static_cast<std::size_t>(c)];
    std::vector<std::size_t> ids(imgs.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = data_.image_id(c, i);
    Rng rng(derive_seed(config_.eval_seed, 0x7368'6565'7400ULL + static_cast<std::uint64_t>(c)));
    const Episode first = sample_episode_from(imgs, ids, c, config_.k, config_.noise_dim, rng);
    std::vector<Episode> variants;
    for (std::size_t s = 0; s < count; ++s) {
      Episode e = first;
      e.alphas = switches_.random_alpha ? rng.simplex(e.refs.size())
                                        : std::vector<double>(e.refs.size(), 1.0 / static_cast<double>(e.refs.size()));
      for (auto& z : e.z_list) z = Tensor::from({config_.noise_dim}, rng.normal_vector(config_.noise_dim));
      variants.push_back(std::move(e));
    }
    tiles.push_back(first.base);
    tiles.insert(tiles.end(), first.refs.begin(), first.refs.end());
    const Tensor out = generate_eval(variants);
    for (std::size_t s = 0; s < count; ++s) tiles.push_back(image_at(out, s));
  }
  return image_grid(tiles, config_.k + count);
}

Checkpoint Trainer::make_checkpoint() const {
  Checkpoint ck;
  ck.fingerprint = fingerprint(config_);
  ck.step = static_cast<std::uint64_t>(step_);
  for (auto& list : {generator_params(model_), discriminator_params(model_), model_buffers(model_)})
    for (const auto& p : list) ck.entries.push_back({p.name, p.tensor.detach()});
  for (auto& p : opt_g_.state_tensors("opt_g.")) ck.entries.push_back(std::move(p));
  for (auto& p : opt_d_.state_tensors("opt_d.")) ck.entries.push_back(std::move(p));
  ck.entries.push_back({"opt_g.t", Tensor::from({1}, {static_cast<double>(opt_g_.state().t)})});
  ck.entries.push_back({"opt_d.t", Tensor::from({1}, {static_cast<double>(opt_d_.state().t)})});
  ck.entries.push_back({"trainer.window", Tensor::from({5}, std::vector<double>(window_, window_ + 5))});
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  if (ck.fingerprint != fingerprint(config_)) {
    throw ConfigError("checkpoint was written by a different configuration (fingerprint " +
                      std::to_string(ck.fingerprint) + ", current " + std::to_string(fingerprint(config_)) +
                      "); refusing to resume");
  }
  restore_tensors(generator_params(model_), ck);
  restore_tensors(discriminator_params(model_), ck);
  restore_tensors(model_buffers(model_), ck);
  auto scalar = [&](const std::string& name, std::size_t n) -> const Tensor& {
    const Tensor* t = ck.find(name);
    if (!t || t->numel() != n) throw ConfigError("checkpoint has no valid entry '" + name + "'");
    return *t;
  };
  opt_g_.load_state_tensors("opt_g.", ck.entries, static_cast<long long>(scalar("opt_g.t", 1).at(0)));
  opt_d_.load_state_tensors("opt_d.", ck.entries, static_cast<long long>(scalar("opt_d.t", 1).at(0)));
  const Tensor& w = scalar("trainer.window", 5);
  for (std::size_t i = 0; i < 5; ++i) window_[i] = w.at(i);
  step_ = static_cast<long long>(ck.step);
}

std::vector<MetricsRow> Trainer::run(std::ostream* log) {
  namespace fs = std::filesystem;
  const bool files = !config_.run_dir.empty();
  const fs::path csv = config_.run_dir / "metrics.csv";
  std::vector<MetricsRow> rows;

  if (files) {
    fs::create_directories(config_.run_dir);
    if (config_.write_samples) fs::create_directories(config_.run_dir / "samples");
    const fs::path ck_path = latest_checkpoint(config_.run_dir);
    if (!ck_path.empty()) {
      restore(load_checkpoint(ck_path));
      if (fs::exists(csv))
        for (const auto& r : read_metrics(csv))
          if (r.step <= step_) rows.push_back(r);
      if (log) *log << "resuming from " << ck_path.string() << " at step " << step_ << "\n";
    }
    write_text(config_.run_dir / "config.txt", describe(config_));
    std::string text = std::string(kMetricsHeader) + "\n";
    for (const auto& r : rows) text += format_metrics_row(r) + "\n";
    write_text(csv, text);
  }

  auto emit = [&](const MetricsRow& row) {
    rows.push_back(row);
    if (files) {
      std::ofstream f(csv, std::ios::binary | std::ios::app);
      f << format_metrics_row(row) << "\n";
      if (!f) throw std::runtime_error("failed writing " + csv.string());
      if (config_.write_samples) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%08lld.ppm", row.step);
        write_ppm(config_.run_dir / "samples" / name, sample_sheet(6));
      }
    }
    if (log) *log << format_metrics_row(row) << std::endl;
  };

  if (rows.empty() && step_ == 0) {
    const EvalResult e = evaluate();
    emit({0, e.fid_lite, e.lpips_lite, 0, 0, 0, 0});
  }

  while (static_cast<std::size_t>(step_) < config_.steps) {
    train_step();
    const bool last = static_cast<std::size_t>(step_) == config_.steps;
    if (step_ % static_cast<long long>(config_.eval_every) == 0 || last) {
      const EvalResult e = evaluate();
      const double n = window_[4] > 0 ? window_[4] : 1.0;
      emit({step_, e.fid_lite, e.lpips_lite, window_[0] / n, window_[1] / n, window_[2] / n, window_[3] / n});
      for (double& w : window_) w = 0.0;
    }
    const bool periodic = config_.checkpoint_every > 0 && step_ % static_cast<long long>(config_.checkpoint_every) == 0;
    if (files && (periodic || last)) {
      save_checkpoint(checkpoint_path(config_.run_dir, step_), make_checkpoint());
      auto all = list_checkpoints(config_.run_dir);
      while (all.size() > config_.keep_checkpoints) {
        fs::remove(all.front().second);
        all.erase(all.begin());
      }
    }
  }
  return rows;
}

TrainedModel load_trained(const std::filesystem::path& checkpoint_or_run_dir) {
  namespace fs = std::filesystem;
  fs::path ck_path = checkpoint_or_run_dir;
  if (fs::is_directory(ck_path)) {
    ck_path = latest_checkpoint(checkpoint_or_run_dir);
    if (ck_path.empty()) throw std::runtime_error("no checkpoint found in " + checkpoint_or_run_dir.string());
  }
  if (!fs::exists(ck_path)) throw std::runtime_error("checkpoint " + ck_path.string() + " does not exist");
  const fs::path cfg_path = ck_path.parent_path() / "config.txt";
  if (!fs::exists(cfg_path)) throw std::runtime_error("missing " + cfg_path.string() + " next to the checkpoint");
  TrainedModel out;
  apply_settings_text(out.config, read_text(cfg_path));
  validate(out.config);
  const Checkpoint ck = load_checkpoint(ck_path);
  if (ck.fingerprint != fingerprint(out.config))
    throw ConfigError("checkpoint " + ck_path.string() + " does not match " + cfg_path.string());
  out.model = make_model(model_config(out.config));
  restore_tensors(generator_params(out.model), ck);
  restore_tensors(discriminator_params(out.model), ck);
  restore_tensors(model_buffers(out.model), ck);
  out.step = static_cast<long long>(ck.step);
  return out;
}

Tensor sample_class(TrainedModel& trained, const Dataset& data, int class_id, std::span<const double> alphas,
                    std::size_t num, std::uint64_t seed, Episode* exemplars) {
  const TrainConfig& c = trained.config;
  if (alphas.size() != c.k - 1)
    throw ContractError("sample_class: " + std::to_string(alphas.size()) + " alphas for K-1 = " + std::to_string(c.k - 1) +
                        " references");
  if (num == 0) throw ContractError("sample_class: num must be positive");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(class_id)));
  const int pool[] = {class_id};
  Episode base = sample_episode(data, pool, c.k, c.noise_dim, rng);
  base.alphas.assign(alphas.begin(), alphas.end());
  std::vector<Episode> episodes;
  for (std::size_t n = 0; n < num; ++n) {
    Episode e = base;
    for (auto& z : e.z_list) z = Tensor::from({c.noise_dim}, rng.normal_vector(c.noise_dim));
    episodes.push_back(std::move(e));
  }
  const Modulation mode = switches(c.ablation).modulation;
  NoGradScope no_grad;
  constexpr std::size_t kChunk = 16;
  std::vector<Tensor> parts;
  for (std::size_t at = 0; at < episodes.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, episodes.size() - at);
    parts.push_back(generate(std::span<const Episode>(episodes).subspan(at, n), trained.model, mode, false));
  }
  if (exemplars) *exemplars = std::move(base);
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

}  // namespace xmgan
