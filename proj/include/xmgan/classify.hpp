#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "xmgan/trainer.hpp"

// Low-data classification on the unseen classes: a small CNN trained on a
// few real images per class, with and without generated augmentation.
namespace xmgan {

struct SplitSpec {
  std::size_t train = 10;
  std::size_t val = 15;
  std::size_t test = 15;
};

struct ClassifyConfig {
  SplitSpec split;
  std::size_t epochs = 100;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t generated_per_class = 30;
  std::size_t k = 3;  // few-shot images per generated sample, drawn from the train split
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

void validate(const ClassifyConfig& c, const DatasetSpec& data);  // ConfigError

// Image indices (within each unseen class) for one seed.
struct UnseenSplit {
  std::vector<std::vector<std::size_t>> train, val, test;  // [unseen class position][...]
};
UnseenSplit make_split(const Dataset& data, const SplitSpec& spec, std::uint64_t seed);

struct LabeledImages {
  std::vector<Tensor> images;
  std::vector<int> labels;                // position in the unseen class list
  std::vector<std::size_t> source_ids;    // dataset image ids the samples came from
};

LabeledImages split_images(const Dataset& data, const std::vector<std::vector<std::size_t>>& part);

// `per_class` generated images per unseen class, each from K train-split
// images with a random simplex alpha and fresh noise. source_ids lists every
// image used as generator input.
LabeledImages generate_augmentation(TrainedModel& trained, const Dataset& data, const UnseenSplit& split,
                                    std::size_t per_class, std::size_t k, std::uint64_t seed);

struct ClassifierRun {
  double test_accuracy = 0.0;  // at the epoch with the best validation accuracy
  double val_accuracy = 0.0;
  std::size_t best_epoch = 0;  // 0 means the untrained classifier
  std::size_t train_size = 0;
};

// Three stride-2 conv blocks (16, 32, 64 channels) with batch norm, global
// average pooling and a linear head; Adam, shuffled mini-batches.
ClassifierRun train_classifier(const LabeledImages& train, const LabeledImages& val, const LabeledImages& test,
                               std::size_t classes, const ClassifyConfig& c, std::uint64_t seed);

struct ClassifyResult {
  std::uint64_t seed = 0;
  std::string arm;  // "standard" or "augmented"
  ClassifierRun run;
};

// Runs the standard arm, and the augmented arm when `trained` is given, for
// every seed.
std::vector<ClassifyResult> run_low_data_eval(TrainedModel* trained, const Dataset& data, const ClassifyConfig& c,
                                              std::ostream* log = nullptr);

std::string results_csv(const std::vector<ClassifyResult>& results);  // seed,arm,accuracy
std::string results_summary(const std::vector<ClassifyResult>& results);

struct ArmStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
};
ArmStats arm_stats(const std::vector<ClassifyResult>& results, const std::string& arm);

}  // namespace xmgan
