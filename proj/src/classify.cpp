#include "xmgan/classify.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "xmgan/errors.hpp"
#include "xmgan/nn.hpp"
#include "xmgan/ops.hpp"

namespace xmgan {

namespace {

struct Classifier {
  std::vector<ConvBlockParams> blocks;
  LinearParams head;

  ParamList params() const {
    ParamList out;
    for (std::size_t i = 0; i < blocks.size(); ++i) append_params(out, "block" + std::to_string(i) + ".", blocks[i]);
    append_params(out, "head.", head);
    return out;
  }

  Tensor logits(const Tensor& x, bool training) {
    Tensor h = x;
    for (auto& b : blocks) h = conv_block(h, b, training);
    return linear(global_avg_pool(h), head);
  }
};

Classifier make_classifier(std::size_t classes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x636c'6173'7369'6679ULL));
  Classifier c;
  std::size_t in = 3;
  for (std::size_t out : {16, 32, 64}) {
    c.blocks.push_back(make_conv_block(rng, in, out, 4, true, false));
    in = out;
  }
  c.head = make_linear(rng, in, classes, 1.0 / std::sqrt(static_cast<double>(in)));
  return c;
}

struct Score {
  double accuracy = 0.0;
  double loss = 0.0;
};

Score score(Classifier& net, const LabeledImages& set) {
  if (set.images.empty()) return {};
  NoGradScope no_grad;
  const Tensor logits = net.logits(stack_images(set.images), false);
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    auto row = logits.data().subspan(i * classes, classes);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == set.labels[i];
  }
  return {static_cast<double>(correct) / static_cast<double>(set.labels.size()),
          cross_entropy(logits, set.labels).item()};
}

LabeledImages concat(const LabeledImages& a, const LabeledImages& b) {
  LabeledImages out = a;
  out.images.insert(out.images.end(), b.images.begin(), b.images.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.source_ids.insert(out.source_ids.end(), b.source_ids.begin(), b.source_ids.end());
  return out;
}

}  // namespace

void validate(const ClassifyConfig& c, const DatasetSpec& data) {
  const std::size_t need = c.split.train + c.split.val + c.split.test;
  if (need > data.per_class) {
    throw ConfigError("split " + std::to_string(c.split.train) + "/" + std::to_string(c.split.val) + "/" +
                      std::to_string(c.split.test) + " needs " + std::to_string(need) + " images per class, dataset has " +
                      std::to_string(data.per_class));
  }
  if (c.split.train == 0 || c.split.val == 0 || c.split.test == 0) throw ConfigError("every split needs images");
  if (c.batch_size < 2) throw ConfigError("classifier batch_size must be at least 2");
  if (!(c.lr > 0.0)) throw ConfigError("classifier lr must be positive");
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (c.k < 2 || c.k > c.split.train) throw ConfigError("k must lie in [2, train split size]");
}

UnseenSplit make_split(const Dataset& data, const SplitSpec& spec, std::uint64_t seed) {
  UnseenSplit s;
  Rng rng(derive_seed(seed, 0x7370'6c69'74ULL));
  for (std::size_t u = 0; u < data.spec.unseen.size(); ++u) {
    std::vector<std::size_t> idx(data.spec.per_class);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    auto at = idx.begin();
    s.train.emplace_back(at, at + static_cast<std::ptrdiff_t>(spec.train));
    at += static_cast<std::ptrdiff_t>(spec.train);
    s.val.emplace_back(at, at + static_cast<std::ptrdiff_t>(spec.val));
    at += static_cast<std::ptrdiff_t>(spec.val);
    s.test.emplace_back(at, at + static_cast<std::ptrdiff_t>(spec.test));
  }
  return s;
}

LabeledImages split_images(const Dataset& data, const std::vector<std::vector<std::size_t>>& part) {
  LabeledImages out;
  for (std::size_t u = 0; u < part.size(); ++u) {
    const int c = data.spec.unseen.at(u);
    for (std::size_t i : part[u]) {
      out.images.push_back(data.images[static_cast<std::size_t>(c)].at(i));
      out.labels.push_back(static_cast<int>(u));
      out.source_ids.push_back(data.image_id(c, i));
    }
  }
  return out;
}

LabeledImages generate_augmentation(TrainedModel& trained, const Dataset& data, const UnseenSplit& split,
                                    std::size_t per_class, std::size_t k, std::uint64_t seed) {
  if (trained.config.image_size != data.spec.image_size)
    throw ConfigError("generator was trained on " + std::to_string(trained.config.image_size) + "px images, dataset has " +
                      std::to_string(data.spec.image_size) + "px");
  const Modulation mode = switches(trained.config.ablation).modulation;
  Rng rng(derive_seed(seed, 0x6175'676d'656e'74ULL));
  LabeledImages out;
  NoGradScope no_grad;
  for (std::size_t u = 0; u < split.train.size(); ++u) {
    const int c = data.spec.unseen.at(u);
    std::vector<Tensor> imgs;
    std::vector<std::size_t> ids;
    for (std::size_t i : split.train[u]) {
      imgs.push_back(data.images[static_cast<std::size_t>(c)].at(i));
      ids.push_back(data.image_id(c, i));
    }
    std::vector<Episode> episodes;
    for (std::size_t n = 0; n < per_class; ++n) {
      episodes.push_back(sample_episode_from(imgs, ids, c, k, trained.config.noise_dim, rng));
      out.source_ids.insert(out.source_ids.end(), episodes.back().image_ids.begin(), episodes.back().image_ids.end());
    }
    constexpr std::size_t kChunk = 16;
    for (std::size_t at = 0; at < episodes.size(); at += kChunk) {
      const std::size_t n = std::min(kChunk, episodes.size() - at);
      const Tensor batch = generate(std::span<const Episode>(episodes).subspan(at, n), trained.model, mode, false);
      for (std::size_t b = 0; b < n; ++b) {
        out.images.push_back(image_at(batch, b));
        out.labels.push_back(static_cast<int>(u));
      }
    }
  }
  return out;
}

ClassifierRun train_classifier(const LabeledImages& train, const LabeledImages& val, const LabeledImages& test,
                               std::size_t classes, const ClassifyConfig& c, std::uint64_t seed) {
  if (train.images.size() < 2) throw ContractError("train_classifier: need at least 2 training images");
  Classifier net = make_classifier(classes, seed);
  Adam opt(net.params(), c.lr, 0.9, 0.999);
  Rng rng(derive_seed(seed, 0x6261'7463'68ULL));

  ClassifierRun best;
  best.train_size = train.images.size();
  Score best_val = score(net, val);
  best.val_accuracy = best_val.accuracy;
  best.test_accuracy = score(net, test).accuracy;

  std::vector<std::size_t> order(train.images.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += c.batch_size) {
      const std::size_t n = std::min(c.batch_size, order.size() - at);
      if (n < 2) continue;  // batch statistics need two samples
      std::vector<Tensor> imgs;
      std::vector<int> labels;
      for (std::size_t i = at; i < at + n; ++i) {
        imgs.push_back(train.images[order[i]]);
        labels.push_back(train.labels[order[i]]);
      }
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = cross_entropy(net.logits(stack_images(imgs), true), labels);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
    // Model selection: best validation accuracy, ties broken by validation loss.
    const Score v = score(net, val);
    if (v.accuracy > best_val.accuracy || (v.accuracy == best_val.accuracy && v.loss < best_val.loss)) {
      best_val = v;
      best.val_accuracy = v.accuracy;
      best.test_accuracy = score(net, test).accuracy;
      best.best_epoch = epoch;
    }
  }
  return best;
}

std::vector<ClassifyResult> run_low_data_eval(TrainedModel* trained, const Dataset& data, const ClassifyConfig& c,
                                              std::ostream* log) {
  validate(c, data.spec);
  const std::size_t classes = data.spec.unseen.size();
  std::vector<ClassifyResult> out;
  for (std::uint64_t seed : c.seeds) {
    const UnseenSplit split = make_split(data, c.split, seed);
    const LabeledImages train = split_images(data, split.train);
    const LabeledImages val = split_images(data, split.val);
    const LabeledImages test = split_images(data, split.test);

    out.push_back({seed, "standard", train_classifier(train, val, test, classes, c, seed)});
    if (log) *log << "seed " << seed << " standard accuracy " << out.back().run.test_accuracy << std::endl;
    if (trained) {
      const LabeledImages gen = generate_augmentation(*trained, data, split, c.generated_per_class, c.k, seed);
      out.push_back({seed, "augmented", train_classifier(concat(train, gen), val, test, classes, c, seed)});
      if (log) *log << "seed " << seed << " augmented accuracy " << out.back().run.test_accuracy << std::endl;
    }
  }
  return out;
}

std::string results_csv(const std::vector<ClassifyResult>& results) {
  std::string out = "seed,arm,accuracy\n";
  char buf[96];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%llu,%s,%.10g\n", static_cast<unsigned long long>(r.seed), r.arm.c_str(),
                  r.run.test_accuracy);
    out += buf;
  }
  return out;
}

ArmStats arm_stats(const std::vector<ClassifyResult>& results, const std::string& arm) {
  ArmStats s;
  double sum = 0.0, sq = 0.0;
  for (const auto& r : results) {
    if (r.arm != arm) continue;
    sum += r.run.test_accuracy;
    sq += r.run.test_accuracy * r.run.test_accuracy;
    ++s.count;
  }
  if (s.count == 0) return s;
  s.mean = sum / static_cast<double>(s.count);
  s.stddev = s.count > 1 ? std::sqrt(std::max(0.0, (sq - sum * s.mean) / static_cast<double>(s.count - 1))) : 0.0;
  return s;
}

std::string results_summary(const std::vector<ClassifyResult>& results) {
  std::ostringstream o;
  char buf[128];
  o << "arm        seeds  mean_acc  std\n";
  for (const char* arm : {"standard", "augmented"}) {
    const ArmStats s = arm_stats(results, arm);
    if (s.count == 0) continue;
    std::snprintf(buf, sizeof buf, "%-10s %5zu  %8.4f  %.4f\n", arm, s.count, s.mean, s.stddev);
    o << buf;
  }
  const ArmStats a = arm_stats(results, "augmented"), b = arm_stats(results, "standard");
  if (a.count > 0 && b.count > 0) {
    std::snprintf(buf, sizeof buf, "gain (augmented - standard): %+.4f\n", a.mean - b.mean);
    o << buf;
  }
  return o.str();
}

}  // namespace xmgan
