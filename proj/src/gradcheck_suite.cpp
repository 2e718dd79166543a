#include "xmgan/gradcheck_suite.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>

#include "xmgan/cfb.hpp"
#include "xmgan/gradcheck.hpp"
#include "xmgan/metrics.hpp"
#include "xmgan/model.hpp"
#include "xmgan/nn.hpp"
#include "xmgan/ops.hpp"
#include "xmgan/rng.hpp"

namespace xmgan {

namespace {

using Fn = std::function<Tensor(const Tensor&)>;

Tensor rand(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = false) {
  std::vector<double> v = rng.normal_vector(shape_numel(shape));
  for (auto& x : v) x *= stddev;
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

class Recorder {
 public:
  explicit Recorder(double h) : h_(h) {}

  void input(const std::string& name, const Fn& f, const Tensor& x) {
    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    add(name, grad_check_report([&] { return f(probe); }, {probe}, h_));
  }
  void params(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> ps,
              std::size_t max_coords = 0) {
    add(name, grad_check_report(f, std::move(ps), h_, max_coords));
  }

  std::vector<GradcheckEntry> entries() const {
    std::vector<GradcheckEntry> out;
    for (const auto& name : order_) out.push_back(results_.at(name));
    return out;
  }

 private:
  void add(const std::string& name, const GradCheckReport& report) {
    auto [it, fresh] = results_.try_emplace(name, GradcheckEntry{name});
    if (fresh) order_.push_back(name);
    GradcheckEntry& e = it->second;
    e.max_rel_error = std::max(e.max_rel_error, report.max_rel_error);
    e.coordinates += report.probed;
    e.kinks += report.kinks;
    ++e.checks;
  }

  double h_;
  std::map<std::string, GradcheckEntry> results_;
  std::vector<std::string> order_;
};

void tensor_ops(Recorder& r, Rng& rng) {
  const Tensor a = rand(rng, {3, 4}), b = rand(rng, {3, 4}), m = rand(rng, {4, 2});
  const Tensor v = rand(rng, {4}), w3 = rand(rng, {3});
  const std::vector<int> labels{1, 0, 3};
  r.input("matmul", [&](const Tensor& t) { return sum(mul(matmul(t, m), matmul(t, m))); }, a);
  r.input("matmul", [&](const Tensor& t) { return sum(mul(matmul(a, t), matmul(a, t))); }, m);
  r.input("transpose", [&](const Tensor& t) { return sum(mul(transpose(t), transpose(t))); }, a);
  r.input("add/sub/mul", [&](const Tensor& t) { return sum(mul(add(t, b), sub(t, b))); }, a);
  r.input("scale/add_scalar", [&](const Tensor& t) { return sum(mul(scale(t, -1.7), add_scalar(t, 0.3))); }, a);
  r.input("add_rowvec", [&](const Tensor& t) { return sum(mul(add_rowvec(a, t), add_rowvec(b, t))); }, v);
  r.input("mul_rowvec", [&](const Tensor& t) { return sum(mul(mul_rowvec(t, v), b)); }, a);
  r.input("mul_rowvec", [&](const Tensor& t) { return sum(mul(mul_rowvec(a, t), b)); }, v);
  r.input("mean", [&](const Tensor& t) { return mean(mul(t, b)); }, a);
  r.input("mean_rows", [&](const Tensor& t) { return sum(mul(mean_rows(t), v)); }, a);
  r.input("relu", [&](const Tensor& t) { return sum(mul(relu(t), b)); }, a);
  r.input("leaky_relu", [&](const Tensor& t) { return sum(mul(leaky_relu(t, 0.2), b)); }, a);
  r.input("tanh", [&](const Tensor& t) { return sum(mul(tanh_act(t), b)); }, a);
  r.input("softmax_rows", [&](const Tensor& t) { return sum(mul(softmax_rows(t), b)); }, a);
  r.input("layer_norm_rows", [&](const Tensor& t) { return sum(mul(layer_norm_rows(t, 1e-5), b)); }, a);
  r.input("reshape", [&](const Tensor& t) { return sum(mul(reshape(t, {4, 3}), reshape(b, {4, 3}))); }, a);
  r.input("slice/concat cols", [&](const Tensor& t) {
    const Tensor parts[] = {slice_cols(t, 0, 1), b, t};
    const Tensor c = concat_cols(parts);
    return sum(mul(c, c));
  }, a);
  r.input("slice/concat rows", [&](const Tensor& t) {
    const Tensor parts[] = {t, b, slice_rows(t, 2, 3)};
    const Tensor c = concat_rows(parts);
    return sum(mul(c, c));
  }, a);
  r.input("row_norms", [&](const Tensor& t) { return sum(mul(row_norms(t), w3)); }, a);
  r.input("l2_norm", [&](const Tensor& t) { return l2_norm(t); }, a);
  r.input("cross_entropy", [&](const Tensor& t) { return cross_entropy(t, labels); }, a);
  r.input("weighted_sum", [&](const Tensor& t) {
    const Tensor xs[] = {t, b, mul(t, t)};
    return sum(mul(weighted_sum(xs, w3), b));
  }, a);
  r.input("weighted_sum", [&](const Tensor& t) {
    const Tensor xs[] = {a, b, mul(a, b)};
    return sum(mul(weighted_sum(xs, t), b));
  }, w3);
  const Tensor img = rand(rng, {2, 3, 2, 2}), tok_w = rand(rng, {8, 3});
  r.input("token layout", [&](const Tensor& t) { return sum(mul(nchw_to_tokens(t), tok_w)); }, img);
  r.input("token layout", [&](const Tensor& t) { return sum(mul(tokens_to_nchw(t, 2, 2, 2), img)); }, tok_w);
}

void nn_ops(Recorder& r, Rng& rng) {
  const Tensor x = rand(rng, {2, 2, 4, 4});
  const Tensor w = rand(rng, {3, 2, 4, 4}, 0.5), b = rand(rng, {3}, 0.5);
  const Tensor probe = rand(rng, {2, 3, 2, 2});
  r.input("conv2d", [&](const Tensor& t) { return sum(mul(conv2d(t, w, b, 2, 1), probe)); }, x);
  r.input("conv2d", [&](const Tensor& t) { return sum(mul(conv2d(x, t, b, 2, 1), probe)); }, w);
  r.input("conv2d", [&](const Tensor& t) { return sum(mul(conv2d(x, w, t, 2, 1), probe)); }, b);

  const Tensor xt = rand(rng, {2, 3, 2, 2}), probe_t = rand(rng, {2, 2, 4, 4}), bt = rand(rng, {2});
  r.input("conv_transpose2d", [&](const Tensor& t) { return sum(mul(conv_transpose2d(t, w, bt, 2, 1), probe_t)); }, xt);
  r.input("conv_transpose2d", [&](const Tensor& t) { return sum(mul(conv_transpose2d(xt, t, bt, 2, 1), probe_t)); }, w);
  r.input("conv_transpose2d", [&](const Tensor& t) { return sum(mul(conv_transpose2d(xt, w, t, 2, 1), probe_t)); }, bt);

  BatchNormParams bn;
  bn.gamma = rand(rng, {2}, 1.0, true);
  bn.beta = rand(rng, {2}, 1.0, true);
  bn.running_mean = rand(rng, {2});
  bn.running_var = Tensor::full({2}, 0.7);
  const Tensor probe_bn = rand(rng, {2, 2, 4, 4});
  for (bool training : {true, false}) {
    const std::string name = training ? "batch_norm (train)" : "batch_norm (eval)";
    r.input(name, [&](const Tensor& t) { return sum(mul(batch_norm(t, bn, training), probe_bn)); }, x);
    r.params(name, [&] { return sum(mul(batch_norm(x, bn, training), probe_bn)); }, {bn.gamma, bn.beta});
  }

  const Tensor probe_gap = rand(rng, {2, 2});
  r.input("global_avg_pool", [&](const Tensor& t) { return sum(mul(global_avg_pool(t), probe_gap)); }, x);

  const LinearParams lin = make_linear(rng, 4, 3, 0.5, 0.1);
  const Tensor xin = rand(rng, {5, 4}), probe_lin = rand(rng, {5, 3});
  r.input("linear", [&](const Tensor& t) { return sum(mul(linear(t, lin), probe_lin)); }, xin);
  r.params("linear", [&] { return sum(mul(linear(xin, lin), probe_lin)); }, {lin.weight, lin.bias});
}

// Non-trivial biases and norms so no parameter sits at a symmetric point.
CfbParams random_cfb(Rng& rng, std::size_t d, std::size_t heads, std::size_t z) {
  CfbParams p = make_cfb_params(rng, d, heads, z);
  auto jitter = [&](Tensor& t) {
    for (auto& v : t.mutable_data()) v += 0.5 * rng.normal();
  };
  for (ClnParams* c : {&p.cln1, &p.cln2}) {
    jitter(c->lambda_base);
    jitter(c->beta_base);
  }
  jitter(p.mapping.psi_alpha.bias);
  jitter(p.mapping.psi_g.bias);
  jitter(p.mapping.psi_z.bias);
  jitter(p.ffn.expand.bias);
  jitter(p.ffn.contract.bias);
  return p;
}

std::vector<Tensor> tensors_of(const ParamList& list) {
  std::vector<Tensor> out;
  for (const auto& p : list) out.push_back(p.tensor);
  return out;
}

void fusion_ops(Recorder& r, Rng& rng) {
  const CfbParams p = random_cfb(rng, 8, 2, 4);
  const Tensor hb = rand(rng, {4, 8}, 1.0, true);
  const std::vector<Tensor> refs{rand(rng, {4, 8}, 1.0, true), rand(rng, {4, 8}, 1.0, true)};
  const std::vector<Tensor> zs{rand(rng, {4}), rand(rng, {4})};
  const Tensor alphas = Tensor::from({2}, rng.simplex(2), true);
  const Tensor probe = rand(rng, {4, 8});
  const Tensor probe_w = rand(rng, {8});
  const Tensor w = rand(rng, {8}, 1.0, true);

  ParamList all;
  append_params(all, "", p);
  r.params("cross_attention", [&] { return sum(mul(cross_attention(hb, refs[0], p.attention), probe)); },
           {hb, refs[0], p.attention.wq, p.attention.wk, p.attention.wv, p.attention.w_out});
  for (Modulation mode : {Modulation::kFull, Modulation::kNoiseOnly}) {
    const auto& m = p.mapping;
    r.params("mapping_network", [&] { return sum(mul(mapping_network(refs[0], 0.3, zs[0], m, mode), probe_w)); },
             {refs[0], m.psi_alpha.weight, m.psi_alpha.bias, m.psi_z.weight, m.psi_z.bias, m.psi_g.weight,
              m.psi_g.bias});
  }
  r.params("cln", [&] { return sum(mul(cln(hb, w, p.cln1), probe)); }, {hb, w, p.cln1.lambda_base, p.cln1.beta_base});
  r.params("ffn_refine", [&] { return sum(mul(ffn_refine(hb, p.ffn, w, p.cln2), probe)); },
           {hb, w, p.ffn.expand.weight, p.ffn.expand.bias, p.ffn.contract.weight, p.ffn.contract.bias,
            p.cln2.lambda_base, p.cln2.beta_base});
  r.params("fuse", [&] { return sum(mul(fuse(refs, alphas), probe)); }, {refs[0], refs[1], alphas});
  for (Modulation mode : {Modulation::kFull, Modulation::kNoiseOnly, Modulation::kIdentity}) {
    std::vector<Tensor> ps{hb, refs[0], refs[1]};
    for (auto& t : tensors_of(all)) ps.push_back(t);
    r.params("cfb_forward", [&] { return sum(mul(cfb_forward(hb, refs, alphas, zs, p, mode), probe)); }, ps);
  }
}

ModelConfig small_model(std::uint64_t seed) {
  ModelConfig c;
  c.image_size = 8;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.noise_dim = 4;
  c.seed = seed;
  return c;
}

std::vector<Episode> random_episodes(Rng& rng, std::size_t count, std::size_t size, std::size_t noise_dim) {
  std::vector<Episode> eps;
  for (std::size_t b = 0; b < count; ++b) {
    Episode e;
    e.class_id = static_cast<int>(b % 5);
    e.base = Tensor::from({3, size, size}, rng.normal_vector(3 * size * size));
    for (int i = 0; i < 2; ++i) {
      e.refs.push_back(Tensor::from({3, size, size}, rng.normal_vector(3 * size * size)));
      e.z_list.push_back(Tensor::from({noise_dim}, rng.normal_vector(noise_dim)));
    }
    e.alphas = rng.simplex(2);
    eps.push_back(std::move(e));
  }
  return eps;
}

// The two objectives of a training step, as the trainer builds them.
Tensor d_objective(Model& m, std::span<const Episode> eps) {
  std::vector<Tensor> bases;
  std::vector<int> labels;
  for (const auto& e : eps) {
    bases.push_back(e.base);
    labels.push_back(e.class_id);
  }
  const std::size_t b = eps.size();
  const Tensor both[] = {stack_images(bases), generate(eps, m, Modulation::kFull, true).detach()};
  const auto out = discriminate(concat_rows(both), m, true);
  return add(hinge_d_loss(slice_rows(out.score, 0, b), slice_rows(out.score, b, 2 * b)),
             classification_loss(slice_rows(out.cls_logits, 0, b), labels));
}

Tensor g_objective(Model& m, std::span<const Episode> eps, const PerceptualExtractor& phi) {
  std::vector<Tensor> bases;
  std::vector<int> labels;
  for (const auto& e : eps) {
    bases.push_back(e.base);
    labels.push_back(e.class_id);
  }
  const std::size_t b = eps.size();
  const Tensor fake = generate(eps, m, Modulation::kFull, true);
  const Tensor both[] = {stack_images(bases), fake};
  const auto out = discriminate(concat_rows(both), m, true);
  std::vector<Tensor> ref_maps, weights;
  for (std::size_t i = 0; i < eps[0].refs.size(); ++i) {
    std::vector<Tensor> refs;
    std::vector<double> w;
    for (const auto& e : eps) {
      refs.push_back(e.refs[i]);
      w.push_back(e.alphas[i]);
    }
    ref_maps.push_back(phi.feature_maps(stack_images(refs), 2));
    weights.push_back(Tensor::from({b}, w));
  }
  const Tensor p = perceptual_loss(phi.feature_maps(fake, 2), ref_maps, weights);
  return total_g_loss(hinge_g_loss(slice_rows(out.score, b, 2 * b)), p,
                      classification_loss(slice_rows(out.cls_logits, b, 2 * b), labels), LossWeights{});
}

void model_losses(Recorder& r, Rng& rng, std::uint64_t seed, const PerceptualExtractor& phi) {
  Model m = make_model(small_model(seed));
  const auto eps = random_episodes(rng, 2, 8, 4);
  r.params("discriminator loss", [&] { return d_objective(m, eps); }, tensors_of(discriminator_params(m)), 24);
  r.params("generator loss", [&] { return g_objective(m, eps, phi); }, tensors_of(generator_params(m)), 16);
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck_suite(std::size_t seeds, double h, std::ostream* log) {
  Recorder r(h);
  const PerceptualExtractor phi;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Rng rng(derive_seed(0x6772'6164ULL, seed));
    tensor_ops(r, rng);
    nn_ops(r, rng);
    fusion_ops(r, rng);
    model_losses(r, rng, seed, phi);
    if (log) *log << "seed " << seed << " done" << std::endl;
  }
  return r.entries();
}

std::string format_gradcheck(const std::vector<GradcheckEntry>& entries) {
  std::string out;
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-20s checks %4zu  coords %6zu  kinks %3zu  max_rel_error %.3e\n", e.name.c_str(),
                  e.checks, e.coordinates, e.kinks, e.max_rel_error);
    out += buf;
  }
  return out;
}

double max_error(const std::vector<GradcheckEntry>& entries) {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

}  // namespace xmgan
