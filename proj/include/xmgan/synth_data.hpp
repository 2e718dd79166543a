#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xmgan/rng.hpp"
#include "xmgan/tensor.hpp"

// Procedural texture dataset: four families (oriented gratings, cell mosaics,
// blob fields, speckle) with two classes each. Images are [3 x H x W] tensors
// with values in [-1, 1].
namespace xmgan {

struct DatasetSpec {
  std::size_t class_count = 8;
  std::size_t per_class = 40;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  std::vector<int> seen{0, 2, 4, 6, 7};
  std::vector<int> unseen{1, 3, 5};
};

struct Dataset {
  DatasetSpec spec;
  std::vector<std::vector<Tensor>> images;         // [class][index]
  std::vector<std::vector<std::uint64_t>> seeds;   // per-image generation seed

  std::size_t image_id(int class_id, std::size_t index) const {
    return static_cast<std::size_t>(class_id) * spec.per_class + index;
  }
};

// Throws ConfigError for overlapping splits or out-of-range class ids.
void validate(const DatasetSpec& spec);
Dataset make_dataset(const DatasetSpec& spec);
// One image of class `class_id` from its seed; exposed for tests.
Tensor make_texture(int class_id, std::size_t image_size, std::uint64_t seed);

// One few-shot task: K images of a single class, the first being the base.
struct Episode {
  int class_id = 0;
  Tensor base;                   // [3 x H x W]
  std::vector<Tensor> refs;      // K - 1 images
  std::vector<double> alphas;    // on the simplex, one per reference
  std::vector<Tensor> z_list;    // one noise vector per reference
  std::vector<std::size_t> image_ids;  // base first
};

// Picks a class uniformly from `class_pool`, then K distinct images of it.
// Alphas come from the flat Dirichlet, z from a standard normal.
Episode sample_episode(const Dataset& data, std::span<const int> class_pool, std::size_t k, std::size_t noise_dim,
                       Rng& rng);
// Same, from an explicit image list (already restricted to one class).
Episode sample_episode_from(std::span<const Tensor> images, std::span<const std::size_t> ids, int class_id,
                            std::size_t k, std::size_t noise_dim, Rng& rng);

// [3 x H x W] images -> [N x 3 x H x W]. Differentiable.
Tensor stack_images(std::span<const Tensor> images);
// Image n of a batch [N x 3 x H x W] as [3 x H x W] (a copy, no gradient).
Tensor image_at(const Tensor& batch, std::size_t n);

// Binary PPM (P6, maxval 255). Pixel values map [-1, 1] <-> [0, 255].
std::string encode_ppm(const Tensor& image);
Tensor decode_ppm(std::string_view bytes);  // throws ParseError with byte offset
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

// Tiles images into one picture, `columns` per row, with a 1-pixel gap.
Tensor image_grid(std::span<const Tensor> images, std::size_t columns);

// Writes <root>/<class>/<index>.ppm and <root>/manifest.csv
// (class_id,index,split,seed,checksum), the checksum being the FNV-1a hash of
// the image file in hex. Returns the FNV-1a hash of the manifest itself.
std::uint64_t save_dataset(const Dataset& data, const std::filesystem::path& root);
std::string hex64(std::uint64_t v);
// Verifies every image against its manifest checksum (ParseError on mismatch).
Dataset load_dataset(const std::filesystem::path& root, const DatasetSpec& spec);

}  // namespace xmgan
