#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "xmgan/checkpoint.hpp"
#include "xmgan/metrics.hpp"
#include "xmgan/model.hpp"
#include "xmgan/synth_data.hpp"

// Episodic adversarial training on the seen classes, periodic evaluation on
// the unseen classes, checkpointing and resumption.
namespace xmgan {

// Which parts of the model and objective are switched on.
//   baseline        identity modulation, uniform fusion, no perceptual loss
//   pl              + perceptual loss with uniform weights
//   ppl             + random simplex alphas for fusion and perceptual weights
//   cln_noise_only  + noise-only modulation of the layer norm
//   full            + modulation from reference features, alpha and noise
enum class AblationMode { kBaseline, kPl, kPpl, kClnNoiseOnly, kFull };

AblationMode parse_ablation(std::string_view name);  // ConfigError on unknown names
std::string_view to_string(AblationMode mode);

enum class PerceptualWeighting { kNone, kUniform, kAlpha };

struct AblationSwitches {
  Modulation modulation = Modulation::kFull;
  bool random_alpha = true;
  PerceptualWeighting perceptual = PerceptualWeighting::kAlpha;
};
AblationSwitches switches(AblationMode mode);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  std::size_t k = 3;
  double eta_p = 50.0;
  double eta_cl = 1.0;
  AblationMode ablation = AblationMode::kFull;
  std::uint64_t seed = 0;

  std::size_t image_size = 32;
  std::size_t depth = 3;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t noise_dim = 32;
  std::size_t perceptual_layers = 2;  // extractor layers whose maps feed the perceptual loss

  std::uint64_t data_seed = 0;
  std::size_t per_class = 40;

  std::size_t eval_every = 200;
  std::size_t eval_samples = 64;  // generated images per unseen class
  std::uint64_t eval_seed = 0x6576616c;
  std::size_t checkpoint_every = 200;
  std::size_t keep_checkpoints = 2;
  bool write_samples = true;

  std::filesystem::path run_dir;  // empty: nothing is written
};

void validate(const TrainConfig& c);  // ConfigError
ModelConfig model_config(const TrainConfig& c);
DatasetSpec dataset_spec(const TrainConfig& c);

// "key=value" lines with every field resolved (run_dir excluded).
std::string describe(const TrainConfig& c);
// Sets one field from its textual form; ConfigError for unknown keys or bad values.
void apply_setting(TrainConfig& c, std::string_view key, std::string_view value);
// Parses "key=value" lines ('#' comments and blank lines allowed).
void apply_settings_text(TrainConfig& c, std::string_view text);

// Hash over everything that influences the trained weights or the metrics.
// Step count, cadences and output paths are excluded, so a run can be extended.
std::uint64_t fingerprint(const TrainConfig& c);

struct EvalResult {
  double fid_lite = 0.0;
  double lpips_lite = 0.0;
};

struct MetricsRow {
  long long step = 0;
  double fid_lite = 0.0;
  double lpips_lite = 0.0;
  double l_adv_d = 0.0;
  double l_adv_g = 0.0;
  double l_p = 0.0;
  double l_cl = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "step,fid_lite,lpips_lite,l_adv_d,l_adv_g,l_p,l_cl";
std::string format_metrics_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics(const std::filesystem::path& csv);  // ParseError on malformed rows

class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  Trainer(TrainConfig config, Dataset data);

  // One discriminator update followed by one generator update (skipped when
  // update_generator is false). Advances the step counter.
  LossReport train_step(bool update_generator = true);

  // Generated unseen-class images in eval mode against all real unseen images.
  EvalResult evaluate();

  // Full loop: resumes from the newest checkpoint in run_dir if present,
  // evaluates every eval_every steps, writes metrics.csv, checkpoints and
  // sample sheets. Returns every metrics row of the run.
  std::vector<MetricsRow> run(std::ostream* log = nullptr);

  Checkpoint make_checkpoint() const;
  void restore(const Checkpoint& ck);  // ConfigError on fingerprint mismatch

  // Rows: one per unseen class with the K exemplars followed by `count`
  // generated variants (fresh alphas and noise).
  Tensor sample_sheet(std::size_t count);

  long long step() const { return step_; }
  const TrainConfig& config() const { return config_; }
  const Dataset& data() const { return data_; }
  Model& model() { return model_; }
  const PerceptualExtractor& extractor() const { return phi_; }
  // Image ids used by the last train_step (bases and references).
  const std::vector<std::size_t>& last_batch_ids() const { return last_batch_ids_; }

 private:
  std::vector<Episode> sample_batch(Rng& rng);
  Tensor generate_eval(std::span<const Episode> episodes);

  TrainConfig config_;
  AblationSwitches switches_;
  Dataset data_;
  Model model_;
  PerceptualExtractor phi_;
  Adam opt_g_, opt_d_;
  std::vector<Tensor> image_maps_;      // [1 x M] per image id, for the perceptual loss
  FeatureGaussian real_unseen_;
  long long step_ = 0;
  double window_[5] = {0, 0, 0, 0, 0};  // sums of l_adv_d, l_adv_g, l_p, l_cl, and the count
  std::vector<std::size_t> last_batch_ids_;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, long long step);
// Newest ckpt_<step>.bin in the directory, or an empty path.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

struct TrainedModel {
  TrainConfig config;
  Model model;
  long long step = 0;
};
// Loads a checkpoint file, or the newest checkpoint of a run directory, with
// the config.txt stored next to it. Throws if either is missing or they disagree.
TrainedModel load_trained(const std::filesystem::path& checkpoint_or_run_dir);

// `num` eval-mode samples [num x 3 x H x W] of one class from a single set of K
// exemplars (chosen by `seed`), fixed `alphas` and fresh noise per sample.
// The exemplar episode is stored in `exemplars` when given.
Tensor sample_class(TrainedModel& trained, const Dataset& data, int class_id, std::span<const double> alphas,
                    std::size_t num, std::uint64_t seed, Episode* exemplars = nullptr);

}  // namespace xmgan
