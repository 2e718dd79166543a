#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "xmgan/cfb.hpp"
#include "xmgan/errors.hpp"
#include "xmgan/gradcheck.hpp"
#include "xmgan/ops.hpp"

using namespace xmgan;
using namespace xmgan::testing;

TEST_CASE("cross_attention matches a dense-loop oracle") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    CfbParams p = random_cfb(rng, 4, 2, 3);
    Tensor hb = random_tensor(rng, {3, 4});
    Tensor hr = random_tensor(rng, {3, 4});
    CHECK(max_abs_diff(cross_attention(hb, hr, p.attention).data(), flat(attention_oracle(hb, hr, p.attention))) <
          1e-10);
  }
}

TEST_CASE("cross_attention trivial cases") {
  Rng rng(7);
  CfbParams p = random_cfb(rng, 8, 4, 3);

  SUBCASE("single key: c = v W + h_b") {
    Tensor hb = random_tensor(rng, {1, 8});
    Tensor hr = random_tensor(rng, {1, 8});
    Tensor expected = add(matmul(matmul(hr, p.attention.wv), p.attention.w_out), hb);
    CHECK(max_abs_diff(cross_attention(hb, hr, p.attention), expected) < 1e-12);
  }
  SUBCASE("identical keys give uniform attention") {
    Tensor hb = random_tensor(rng, {3, 8});
    Tensor row = random_tensor(rng, {1, 8});
    std::vector<Tensor> rows{row, row, row, row};
    std::vector<Tensor> attn;
    cross_attention(hb, concat_rows(rows), p.attention, &attn);
    REQUIRE(attn.size() == 4);
    for (const auto& a : attn)
      for (double v : a.data()) CHECK(std::abs(v - 0.25) < 1e-14);
  }
  SUBCASE("attention rows are distributions") {
    Tensor hb = random_tensor(rng, {5, 8}, 3.0);
    Tensor hr = random_tensor(rng, {6, 8}, 3.0);
    std::vector<Tensor> attn;
    cross_attention(hb, hr, p.attention, &attn);
    for (const auto& a : attn) {
      REQUIRE(a.shape() == Shape{5, 6});
      for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
          CHECK(a.at(i * 6 + j) >= 0.0);
          s += a.at(i * 6 + j);
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
  SUBCASE("width not divisible by heads") {
    CrossAttentionParams bad = p.attention;
    bad.heads = 3;
    Tensor hb = random_tensor(rng, {2, 8});
    CHECK_THROWS_AS(cross_attention(hb, hb, bad), ConfigError);
    CHECK_THROWS_AS(make_cfb_params(rng, 8, 3, 4), ConfigError);
  }
}

TEST_CASE("mapping_network") {
  Rng rng(11);
  CfbParams p = random_cfb(rng, 4, 2, 4);
  Tensor hr = random_tensor(rng, {3, 4});
  Tensor z = random_tensor(rng, {4});

  SUBCASE("matches direct formula") {
    for (double alpha : {0.0, 0.3, 1.0})
      CHECK(max_abs_diff(mapping_network(hr, alpha, z, p.mapping).data(), mapping_oracle(hr, alpha, z, p.mapping)) <
            1e-12);
  }
  SUBCASE("zeroed noise map ignores z") {
    MappingNetworkParams m = p.mapping;
    m.psi_z = {Tensor::zeros({4, 4}), Tensor::zeros({4})};
    Tensor w1 = mapping_network(hr, 0.4, z, m);
    Tensor w2 = mapping_network(hr, 0.4, random_tensor(rng, {4}), m);
    CHECK(max_abs_diff(w1, w2) == 0.0);
    Tensor g = mean_rows(linear(hr, m.psi_g));
    Tensor a = reshape(linear(Tensor::from({1, 1}, {0.4}), m.psi_alpha), {4});
    CHECK(max_abs_diff(w1, mul(g, a)) < 1e-14);
  }
  SUBCASE("zero alpha map and zero noise give zero weights") {
    MappingNetworkParams m = p.mapping;
    m.psi_alpha = {Tensor::zeros({1, 4}), Tensor::zeros({4})};
    m.psi_z.bias = Tensor::zeros({4});
    Tensor w = mapping_network(hr, 0.7, Tensor::zeros({4}), m);
    for (double v : w.data()) CHECK(v == 0.0);
  }
  SUBCASE("modes") {
    Tensor identity = mapping_network(hr, 0.5, z, p.mapping, Modulation::kIdentity);
    for (double v : identity.data()) CHECK(v == 1.0);
    Tensor noise_only = mapping_network(hr, 0.5, z, p.mapping, Modulation::kNoiseOnly);
    auto zz = affine_row({z.data().begin(), z.data().end()}, p.mapping.psi_z);
    CHECK(max_abs_diff(noise_only.data(), zz) < 1e-14);
  }
  SUBCASE("wrong noise width") { CHECK_THROWS_AS(mapping_network(hr, 0.5, Tensor::zeros({3}), p.mapping), DimensionError); }
}

TEST_CASE("cln") {
  ClnParams id{Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5};
  Tensor ones = Tensor::full({4}, 1.0);

  SUBCASE("token [1,2,3,4]") {
    Tensor o = cln(Tensor::from({1, 4}, {1, 2, 3, 4}), ones, id);
    const double s = std::sqrt(1.25 + 1e-5);
    const std::vector<double> expected{-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s};
    CHECK(max_abs_diff(o.data(), expected) < 1e-15);
    CHECK(o.at(0) == doctest::Approx(-1.342).epsilon(1e-3));
    CHECK(o.at(1) == doctest::Approx(-0.447).epsilon(1e-3));
  }
  SUBCASE("constant token gives beta(w)") {
    Rng rng(12);
    ClnParams p{random_tensor(rng, {4}), random_tensor(rng, {4}), 1e-5};
    Tensor w = random_tensor(rng, {4});
    Tensor o = cln(Tensor::full({2, 4}, 3.25), w, p);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(o.at(i * 4 + j) == p.beta_base.at(j) * w.at(j));
  }
  SUBCASE("identity modulation is layer norm") {
    Rng rng(13);
    ClnParams p{Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-5};
    Tensor c = random_tensor(rng, {1000, 16}, 2.0);
    Mat expected = cln_oracle(to_mat(c), std::vector<double>(16, 1.0), p);
    CHECK(max_abs_diff(cln(c, Tensor::full({16}, 1.0), p).data(), flat(expected)) < 1e-12);
  }
  SUBCASE("random modulation matches oracle") {
    Rng rng(14);
    ClnParams p{random_tensor(rng, {6}), random_tensor(rng, {6}), 1e-5};
    Tensor w = random_tensor(rng, {6});
    Tensor c = random_tensor(rng, {5, 6});
    CHECK(max_abs_diff(cln(c, w, p).data(), flat(cln_oracle(to_mat(c), to_mat(reshape(w, {1, 6}))[0], p))) < 1e-12);
  }
}

TEST_CASE("ffn_refine") {
  Rng rng(15);
  CfbParams p = random_cfb(rng, 8, 2, 4);
  Tensor w = random_tensor(rng, {8});

  SUBCASE("zero FFN reduces to cln") {
    FfnParams zero{{Tensor::zeros({8, 32}), Tensor::zeros({32})}, {Tensor::zeros({32, 8}), Tensor::zeros({8})}, 0.2};
    Tensor o = random_tensor(rng, {4, 8});
    CHECK(max_abs_diff(ffn_refine(o, zero, w, p.cln2), cln(o, w, p.cln2)) == 0.0);
  }
  SUBCASE("point-wise: equal tokens give equal outputs") {
    Tensor row = random_tensor(rng, {1, 8});
    std::vector<Tensor> rows{row, random_tensor(rng, {1, 8}), row};
    Tensor f = ffn_refine(concat_rows(rows), p.ffn, w, p.cln2);
    for (std::size_t j = 0; j < 8; ++j) CHECK(f.at(j) == f.at(16 + j));
  }
  SUBCASE("composition oracle") {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor o = random_tensor(rng, {4, 8});
      std::vector<double> wv(w.data().begin(), w.data().end());
      CHECK(max_abs_diff(ffn_refine(o, p.ffn, w, p.cln2).data(), flat(ffn_oracle(to_mat(o), p.ffn, wv, p.cln2))) <
            1e-10);
    }
  }
}

TEST_CASE("fuse") {
  Rng rng(16);
  Tensor f1 = random_tensor(rng, {3, 4});
  Tensor f2 = random_tensor(rng, {3, 4});

  std::vector<Tensor> one{f1};
  CHECK(max_abs_diff(fuse(one, Tensor::from({1}, {1.0})), f1) == 0.0);

  std::vector<Tensor> same{f1, f1, f1};
  CHECK(max_abs_diff(fuse(same, Tensor::from({3}, {0.2, 0.3, 0.5})), f1) < 1e-15);

  std::vector<Tensor> two{f1, f2};
  Tensor f = fuse(two, Tensor::from({2}, {0.3, 0.7}));
  for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(f.at(i) - (0.3 * f1.at(i) + 0.7 * f2.at(i))) < 1e-14);

  // Linear in each component: f(2 a_j) - f(a_j) == a_j f_j.
  Tensor doubled = fuse(two, Tensor::from({2}, {0.3, 1.4}));
  for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs((doubled.at(i) - f.at(i)) - 0.7 * f2.at(i)) < 1e-14);

  CHECK_THROWS_AS(fuse(two, Tensor::from({3}, {0.2, 0.3, 0.5})), ContractError);
}

TEST_CASE("cfb_forward") {
  SUBCASE("matches step-by-step oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(200 + seed);
      CfbParams p = random_cfb(rng, 8, 2, 4);
      Tensor hb = random_tensor(rng, {4, 8});
      std::vector<Tensor> refs{random_tensor(rng, {4, 8}), random_tensor(rng, {4, 8})};
      std::vector<Tensor> zs{random_tensor(rng, {4}), random_tensor(rng, {4})};
      auto a = rng.simplex(2);
      Tensor f = cfb_forward(hb, refs, Tensor::from({2}, a), zs, p);
      CHECK(max_abs_diff(f.data(), flat(cfb_oracle(hb, refs, a, zs, p))) < 1e-9);
    }
  }
  SUBCASE("single reference equals hand-composed pipeline") {
    Rng rng(17);
    CfbParams p = random_cfb(rng, 8, 4, 4);
    Tensor hb = random_tensor(rng, {4, 8});
    std::vector<Tensor> refs{random_tensor(rng, {4, 8})};
    std::vector<Tensor> zs{random_tensor(rng, {4})};
    Tensor w = mapping_network(refs[0], 1.0, zs[0], p.mapping);
    Tensor expected = ffn_refine(cln(cross_attention(hb, refs[0], p.attention), w, p.cln1), p.ffn, w, p.cln2);
    CHECK(max_abs_diff(cfb_forward(hb, refs, Tensor::from({1}, {1.0}), zs, p), expected) < 1e-14);
  }
  SUBCASE("swapping references with their alphas leaves f unchanged") {
    Rng rng(18);
    CfbParams p = random_cfb(rng, 8, 2, 4);
    Tensor hb = random_tensor(rng, {4, 8});
    std::vector<Tensor> refs{random_tensor(rng, {4, 8}), random_tensor(rng, {4, 8})};
    std::vector<Tensor> zs{random_tensor(rng, {4}), random_tensor(rng, {4})};
    Tensor f = cfb_forward(hb, refs, Tensor::from({2}, {0.35, 0.65}), zs, p);
    std::vector<Tensor> refs_sw{refs[1], refs[0]};
    std::vector<Tensor> zs_sw{zs[1], zs[0]};
    Tensor g = cfb_forward(hb, refs_sw, Tensor::from({2}, {0.65, 0.35}), zs_sw, p);
    CHECK(max_abs_diff(f, g) < 1e-14);
  }
  SUBCASE("deterministic, and noise changes the output") {
    Rng rng(19);
    CfbParams p = make_cfb_params(rng, 16, 4, 8);
    Tensor hb = random_tensor(rng, {16, 16});
    std::vector<Tensor> refs{random_tensor(rng, {16, 16}), random_tensor(rng, {16, 16})};
    Tensor alphas = Tensor::from({2}, {0.5, 0.5});
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> z1{random_tensor(rng, {8}), random_tensor(rng, {8})};
      std::vector<Tensor> z2{random_tensor(rng, {8}), random_tensor(rng, {8})};
      Tensor a = cfb_forward(hb, refs, alphas, z1, p);
      CHECK(max_abs_diff(a, cfb_forward(hb, refs, alphas, z1, p)) == 0.0);
      CHECK(l2_norm(sub(a, cfb_forward(hb, refs, alphas, z2, p))).item() > 1e-6);
    }
  }
  SUBCASE("count mismatches") {
    Rng rng(20);
    CfbParams p = random_cfb(rng, 4, 2, 4);
    Tensor hb = random_tensor(rng, {2, 4});
    std::vector<Tensor> refs{hb, hb};
    std::vector<Tensor> zs{Tensor::zeros({4})};
    CHECK_THROWS_AS(cfb_forward(hb, refs, Tensor::from({2}, {0.5, 0.5}), zs, p), ContractError);
  }
}

TEST_CASE("cfb_forward passes grad_check for every parameter group") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(300 + seed);
    CfbParams p = random_cfb(rng, 8, 2, 4);
    Tensor hb = random_tensor(rng, {4, 8}, 1.0, true);
    std::vector<Tensor> refs{random_tensor(rng, {4, 8}, 1.0, true), random_tensor(rng, {4, 8}, 1.0, true)};
    std::vector<Tensor> zs{random_tensor(rng, {4}), random_tensor(rng, {4})};
    Tensor alphas = Tensor::from({2}, rng.simplex(2));
    Tensor probe = random_tensor(rng, {4, 8});
    auto f = [&] { return sum(mul(cfb_forward(hb, refs, alphas, zs, p), probe)); };

    ParamList named;
    append_params(named, "", p);
    std::vector<Tensor> params{hb, refs[0], refs[1]};
    for (auto& n : named) params.push_back(n.tensor);
    CHECK(grad_check_params(f, params, 1e-5) < 1e-4);
  }
}
