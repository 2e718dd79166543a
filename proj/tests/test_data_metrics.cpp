#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "xmgan/errors.hpp"
#include "xmgan/metrics.hpp"
#include "xmgan/ops.hpp"
#include "xmgan/synth_data.hpp"

using namespace xmgan;
using xmgan::testing::max_abs_diff;
using xmgan::testing::random_tensor;
using xmgan::testing::frechet_oracle;
using xmgan::testing::random_gaussian;

namespace {

const Dataset& shared_dataset() {
  static const Dataset d = make_dataset(DatasetSpec{});
  return d;
}

Tensor class_batch(const Dataset& d, int c, std::size_t begin, std::size_t end) {
  std::vector<Tensor> v(d.images[c].begin() + begin, d.images[c].begin() + end);
  return stack_images(v);
}

}  // namespace

TEST_CASE("dataset shape, split and determinism") {
  const Dataset& d = shared_dataset();
  REQUIRE(d.images.size() == 8);
  for (const auto& c : d.images) {
    REQUIRE(c.size() == 40);
    for (const auto& im : c) {
      CHECK(im.shape() == Shape{3, 32, 32});
      for (double v : im.data()) CHECK((v >= -1.0 && v <= 1.0));
    }
  }
  CHECK(d.spec.seen.size() == 5);
  CHECK(d.spec.unseen.size() == 3);

  Dataset again = make_dataset(DatasetSpec{});
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < 40; i += 7) CHECK(max_abs_diff(again.images[c][i], d.images[c][i]) == 0.0);

  DatasetSpec bad;
  bad.unseen = {1, 2};
  CHECK_THROWS_AS(make_dataset(bad), ConfigError);
}

TEST_CASE("classes are separated in feature space") {
  const Dataset& d = shared_dataset();
  PerceptualExtractor phi;
  std::vector<Tensor> feats;
  for (std::size_t c = 0; c < 8; ++c) feats.push_back(phi.features(class_batch(d, static_cast<int>(c), 0, 20)));
  auto mean_dist = [](const Tensor& a, const Tensor& b, bool same) {
    const std::size_t n = a.dim(0), f = a.dim(1);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = same ? i + 1 : 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < f; ++k) s += std::pow(a.at(i * f + k) - b.at(j * f + k), 2);
        total += std::sqrt(s);
        ++count;
      }
    return total / static_cast<double>(count);
  };
  double intra = 0.0, inter = 0.0;
  for (std::size_t a = 0; a < 8; ++a) {
    intra += mean_dist(feats[a], feats[a], true) / 8.0;
    for (std::size_t b = 0; b < 8; ++b)
      if (a != b) inter += mean_dist(feats[a], feats[b], false) / 56.0;
  }
  MESSAGE("intra " << intra << " inter " << inter);
  CHECK(inter > intra);
}

TEST_CASE("sample_episode") {
  const Dataset& d = shared_dataset();
  const std::vector<int> pool{0, 2, 4};
  Rng rng(3), replay(3);
  for (int trial = 0; trial < 50; ++trial) {
    Episode e = sample_episode(d, pool, 3, 8, rng);
    Episode r = sample_episode(d, pool, 3, 8, replay);
    CHECK(e.refs.size() == 2);
    CHECK(e.z_list.size() == 2);
    CHECK(e.image_ids == r.image_ids);
    CHECK(e.alphas == r.alphas);
    double s = 0.0;
    for (double a : e.alphas) {
      CHECK(a >= 0.0);
      s += a;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
    CHECK(std::find(pool.begin(), pool.end(), e.class_id) != pool.end());
    for (auto id : e.image_ids) CHECK(id / 40 == static_cast<std::size_t>(e.class_id));
    CHECK(e.image_ids[0] != e.image_ids[1]);
    CHECK(e.image_ids[1] != e.image_ids[2]);
    CHECK(e.image_ids[0] != e.image_ids[2]);
  }
  std::vector<Tensor> two{d.images[0][0], d.images[0][1]};
  CHECK_THROWS_AS(sample_episode_from(two, {}, 0, 3, 8, rng), ContractError);
}

TEST_CASE("simplex sampler mean") {
  Rng rng(4);
  double m0 = 0.0, m1 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto a = rng.simplex(2);
    m0 += a[0] / n;
    m1 += a[1] / n;
  }
  CHECK(std::abs(m0 - 0.5) < 0.01);
  CHECK(std::abs(m1 - 0.5) < 0.01);
}

TEST_CASE("ppm round trip and layout") {
  Rng rng(5);
  Tensor img = Tensor::from({3, 5, 7}, rng.normal_vector(105));
  for (auto& v : img.mutable_data()) v = std::tanh(v);
  Tensor back = decode_ppm(encode_ppm(img));
  CHECK(back.shape() == img.shape());
  CHECK(max_abs_diff(back, img) <= 2.0 / 255.0);

  Tensor black = Tensor::full({3, 4, 4}, -1.0);
  CHECK(max_abs_diff(decode_ppm(encode_ppm(black)), black) == 0.0);

  // 4x4 pattern: red, green, blue, white on the diagonal of each row.
  std::vector<double> px(48, -1.0);
  std::string expected = "P6\n4 4\n255\n";
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      unsigned char rgb[3] = {0, 0, 0};
      if (x == y) {
        if (y < 3) {
          rgb[y] = 255;
        } else {
          rgb[0] = rgb[1] = rgb[2] = 255;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        if (rgb[c]) px[(c * 4 + y) * 4 + x] = 1.0;
        expected.push_back(static_cast<char>(rgb[c]));
      }
    }
  CHECK(encode_ppm(Tensor::from({3, 4, 4}, px)) == expected);

  SUBCASE("malformed files report offsets") {
    auto offset_of = [](const std::string& bytes) -> std::size_t {
      try {
        decode_ppm(bytes);
      } catch (const ParseError& e) {
        return e.offset();
      }
      return SIZE_MAX;
    };
    CHECK(offset_of("P3\n4 4\n255\n") == 0);
    CHECK(offset_of("P6\nx 4\n255\n") == 3);
    CHECK(offset_of(expected.substr(0, expected.size() - 5)) == expected.size() - 5);
    CHECK(offset_of("P6\n4 4\n65535\n") == 7);
  }
}

TEST_CASE("dataset save/load") {
  const auto root = std::filesystem::temp_directory_path() / "xmgan_test_dataset";
  std::filesystem::remove_all(root);
  DatasetSpec spec;
  spec.per_class = 3;
  spec.image_size = 8;
  Dataset d = make_dataset(spec);
  const std::uint64_t sum = save_dataset(d, root);
  CHECK(std::filesystem::exists(root / "5" / "2.ppm"));
  const auto again = std::filesystem::temp_directory_path() / "xmgan_test_dataset_again";
  CHECK(save_dataset(make_dataset(spec), again) == sum);
  std::filesystem::remove_all(again);
  Dataset back = load_dataset(root, spec);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(max_abs_diff(back.images[c][i], d.images[c][i]) <= 1.0 / 255.0 + 1e-12);
      CHECK(back.seeds[c][i] == d.seeds[c][i]);
    }
  std::ifstream m(root / "manifest.csv");
  std::string header, first;
  std::getline(m, header);
  std::getline(m, first);
  CHECK(header == "class_id,index,split,seed,checksum");
  CHECK(first.rfind("0,0,seen,", 0) == 0);
  CHECK(first.size() - first.rfind(',') - 1 == 16);
  m.close();

  // A modified image no longer matches its checksum.
  {
    std::fstream f(root / "3" / "1.ppm", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x07');
  }
  CHECK_THROWS_AS(load_dataset(root, spec), ParseError);
  std::filesystem::remove_all(root);
}

TEST_CASE("feature extractor") {
  PerceptualExtractor phi(9), phi2(9);
  Rng rng(6);
  Tensor img = random_tensor(rng, {1, 3, 32, 32}, 0.5);
  std::vector<Tensor> same{img, img};
  Tensor f = phi.features(concat_rows(same));
  CHECK(f.shape() == Shape{2, 64});
  for (std::size_t k = 0; k < 64; ++k) CHECK(f.at(k) == f.at(64 + k));
  CHECK(max_abs_diff(phi.features(img), phi2.features(img)) == 0.0);
  for (double v : {-1.0, 1.0})
    for (double x : phi.features(Tensor::full({1, 3, 32, 32}, v)).data()) CHECK(std::isfinite(x));
  CHECK(phi.features(Tensor::zeros({1, 3, 8, 8})).shape() == Shape{1, 64});
}

TEST_CASE("frechet_distance") {
  SUBCASE("matches the non-symmetric eigenvalue oracle") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      auto a = random_gaussian(rng, 3), b = random_gaussian(rng, 3);
      CHECK(std::abs(frechet_distance(a, b) - frechet_oracle(a, b)) < 1e-6);
      CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8);
      CHECK(frechet_distance(a, b) >= 0.0);
    }
  }
  SUBCASE("identical and shifted Gaussians") {
    Rng rng(10);
    auto a = random_gaussian(rng, 5);
    CHECK(std::abs(frechet_distance(a, a)) < 1e-8);
    auto b = a;
    double m2 = 0.0;
    for (auto& x : b.mean) {
      const double shift = rng.normal();
      x += shift;
      m2 += shift * shift;
    }
    CHECK(std::abs(frechet_distance(a, b) - m2) < 1e-8);
  }
  SUBCASE("non-finite input") {
    Rng rng(11);
    auto a = random_gaussian(rng, 3), b = a;
    b.mean[1] = NAN;
    CHECK_THROWS_AS(frechet_distance(a, b), NumericError);
  }
  CHECK_THROWS_AS(fit_gaussian(Tensor::zeros({1, 4})), ContractError);
}

TEST_CASE("fid_lite and lpips_lite") {
  const Dataset& d = shared_dataset();
  PerceptualExtractor phi;
  Tensor a = class_batch(d, 1, 0, 40);
  CHECK(std::abs(fid_lite(a, a, phi)) < 1e-8);

  std::vector<Tensor> rev(d.images[1].rbegin(), d.images[1].rend());
  CHECK(std::abs(fid_lite(a, stack_images(rev), phi)) < 1e-8);

  const double same_class = fid_lite(class_batch(d, 1, 0, 20), class_batch(d, 1, 20, 40), phi);
  const double other_class = fid_lite(class_batch(d, 1, 0, 20), class_batch(d, 0, 20, 40), phi);
  MESSAGE("same " << same_class << " other " << other_class);
  CHECK(other_class > same_class);

  // Replacing fakes with reals step by step brings the score down.
  Tensor real = class_batch(d, 3, 0, 40);
  std::vector<Tensor> mix;
  double prev = INFINITY;
  for (std::size_t real_count : {0u, 20u, 40u}) {
    mix.assign(d.images[3].begin(), d.images[3].begin() + real_count);
    mix.insert(mix.end(), d.images[2].begin() + real_count, d.images[2].end());
    const double s = fid_lite(real, stack_images(mix), phi);
    CHECK(s < prev);
    prev = s;
  }
  CHECK_THROWS_AS(fid_lite(real, class_batch(d, 0, 0, 1), phi), ContractError);

  std::vector<Tensor> same(5, d.images[0][0]);
  CHECK(lpips_lite(stack_images(same), phi) == 0.0);
  std::vector<Tensor> pair{d.images[0][0], d.images[0][1]}, swapped{d.images[0][1], d.images[0][0]};
  CHECK(lpips_lite(stack_images(pair), phi) == doctest::Approx(lpips_lite(stack_images(swapped), phi)).epsilon(1e-14));
  CHECK(lpips_lite(stack_images(pair), phi) > 0.0);
  CHECK_THROWS_AS(lpips_lite(class_batch(d, 0, 0, 1), phi), ContractError);

  Rng rng(12);
  Tensor f = random_tensor(rng, {4, 6});
  double oracle = 0.0;
  std::vector<std::vector<double>> u(4, std::vector<double>(6));
  for (std::size_t i = 0; i < 4; ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < 6; ++k) n += f.at(i * 6 + k) * f.at(i * 6 + k);
    for (std::size_t k = 0; k < 6; ++k) u[i][k] = f.at(i * 6 + k) / std::sqrt(n);
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k) s += (u[i][k] - u[j][k]) * (u[i][k] - u[j][k]);
      oracle += std::sqrt(s) / 6.0;
    }
  CHECK(std::abs(mean_pairwise_distance(f) - oracle) < 1e-12);
}
