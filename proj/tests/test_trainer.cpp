#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "xmgan/errors.hpp"
#include "xmgan/ops.hpp"
#include "xmgan/trainer.hpp"

using namespace xmgan;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny(std::uint64_t seed = 0) {
  TrainConfig c;
  c.image_size = 8;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.noise_dim = 4;
  c.batch_size = 4;
  c.eval_samples = 8;
  c.seed = seed;
  c.steps = 10;
  c.eval_every = 5;
  c.checkpoint_every = 5;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("xmgan_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool same_values(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].tensor.data();
    auto y = b[i].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

ParamList snapshot(const ParamList& params) {
  ParamList out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.detach()});
  return out;
}

}  // namespace

TEST_CASE("ablation switches differ only in the documented component") {
  CHECK(parse_ablation("full") == AblationMode::kFull);
  CHECK(to_string(AblationMode::kClnNoiseOnly) == "cln_noise_only");
  CHECK_THROWS_AS(parse_ablation("fancy"), ConfigError);

  const auto base = switches(AblationMode::kBaseline);
  const auto pl = switches(AblationMode::kPl);
  const auto ppl = switches(AblationMode::kPpl);
  const auto noise = switches(AblationMode::kClnNoiseOnly);
  const auto full = switches(AblationMode::kFull);
  CHECK(base.perceptual == PerceptualWeighting::kNone);
  CHECK(pl.perceptual == PerceptualWeighting::kUniform);
  CHECK(pl.modulation == base.modulation);
  CHECK(pl.random_alpha == base.random_alpha);
  CHECK(ppl.perceptual == PerceptualWeighting::kAlpha);
  CHECK(ppl.random_alpha);
  CHECK(ppl.modulation == Modulation::kIdentity);
  CHECK(noise.modulation == Modulation::kNoiseOnly);
  CHECK(noise.perceptual == ppl.perceptual);
  CHECK(full.modulation == Modulation::kFull);
  CHECK(full.perceptual == ppl.perceptual);
}

TEST_CASE("config text round trip, validation and fingerprint") {
  TrainConfig c = tiny(5);
  c.ablation = AblationMode::kPpl;
  c.lr = 3e-4;
  TrainConfig d;
  apply_settings_text(d, "# comment\n\n" + describe(c));
  CHECK(describe(d) == describe(c));
  CHECK(fingerprint(d) == fingerprint(c));

  TrainConfig e = c;
  e.steps = 999;
  e.eval_every = 7;
  CHECK(fingerprint(e) == fingerprint(c));
  e.seed = 6;
  CHECK(fingerprint(e) != fingerprint(c));

  CHECK_THROWS_AS(apply_setting(d, "bogus", "1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(d, "steps", "ten"), ConfigError);
  CHECK_THROWS_AS(apply_setting(d, "steps", "10x"), ConfigError);
  CHECK_THROWS_AS(apply_settings_text(d, "steps 10\n"), ConfigError);

  TrainConfig bad = tiny();
  bad.k = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = tiny();
  bad.heads = 3;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = tiny();
  bad.batch_size = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("loss report total equals the weighted sum") {
  Trainer t(tiny());
  for (int i = 0; i < 3; ++i) {
    const LossReport r = t.train_step();
    CHECK(r.step == i);
    CHECK(std::abs(r.total - (r.l_adv_g + 50.0 * r.l_p + 1.0 * r.l_cl)) <= 1e-12);
    CHECK(r.l_p > 0.0);
  }
  CHECK(t.step() == 3);
}

TEST_CASE("equal seeds give identical loss reports") {
  Trainer a(tiny(3)), b(tiny(3)), c(tiny(4));
  bool any_diff = false;
  for (int i = 0; i < 3; ++i) {
    const LossReport ra = a.train_step(), rb = b.train_step(), rc = c.train_step();
    CHECK(ra.l_adv_d == rb.l_adv_d);
    CHECK(ra.l_adv_g == rb.l_adv_g);
    CHECK(ra.l_p == rb.l_p);
    CHECK(ra.l_cl == rb.l_cl);
    CHECK(ra.total == rb.total);
    any_diff = any_diff || ra.total != rc.total;
  }
  CHECK(any_diff);
}

TEST_CASE("baseline mode runs without the perceptual term") {
  TrainConfig c = tiny();
  c.ablation = AblationMode::kBaseline;
  Trainer t(c);
  for (int i = 0; i < 2; ++i) {
    const LossReport r = t.train_step();
    CHECK(r.l_p == 0.0);
    CHECK(std::abs(r.total - (r.l_adv_g + r.l_cl)) <= 1e-12);
  }
  c.ablation = AblationMode::kPl;
  Trainer u(c);
  CHECK(u.train_step().l_p > 0.0);
}

TEST_CASE("discriminator loss falls when the generator is frozen") {
  // Real textures against the untrained generator's near-flat images are
  // trivially separable; 50 discriminator-only updates must reduce the loss.
  TrainConfig c = tiny(1);
  c.lr = 1e-3;
  Trainer t(c);
  const ParamList g_before = snapshot(generator_params(t.model()));
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(t.train_step(false).l_adv_d);
  CHECK(same_values(g_before, generator_params(t.model())));
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += losses[static_cast<std::size_t>(i)];
    last += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  CHECK(last < 0.5 * first);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("discriminator loss strictly decreases on a separable toy split") {
  TrainConfig c = tiny(3);
  Model m = make_model(model_config(c));
  const ParamList g_before = snapshot(generator_params(m));
  Adam opt(discriminator_params(m), c.lr);
  Rng rng(8);
  std::vector<Tensor> real, fake;
  for (int i = 0; i < 4; ++i) {
    real.push_back(add_scalar(testing::random_tensor(rng, {3, 8, 8}, 0.05), 0.5));
    fake.push_back(add_scalar(testing::random_tensor(rng, {3, 8, 8}, 0.05), -0.5));
  }
  const Tensor both[] = {stack_images(real), stack_images(fake)};
  const Tensor batch = concat_rows(both);
  double previous = INFINITY;
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    TapeScope scope(tape);
    const auto out = discriminate(batch, m, true);
    const Tensor loss = hinge_d_loss(slice_rows(out.score, 0, 4), slice_rows(out.score, 4, 8));
    CHECK(loss.item() < previous);
    previous = loss.item();
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  CHECK(same_values(g_before, generator_params(m)));
}

TEST_CASE("generator update leaves discriminator parameters alone") {
  // The same step with and without the generator update must leave the
  // discriminator in exactly the same state.
  Trainer a(tiny(2)), b(tiny(2));
  a.train_step(true);
  b.train_step(false);
  CHECK(same_values(discriminator_params(a.model()), discriminator_params(b.model())));
  CHECK_FALSE(same_values(generator_params(a.model()), generator_params(b.model())));
  for (const auto& p : discriminator_params(a.model())) CHECK(p.tensor.requires_grad());
}

TEST_CASE("training batches only contain seen-class images") {
  Trainer t(tiny(7));
  const auto& spec = t.data().spec;
  std::size_t audited = 0;
  for (int i = 0; i < 40; ++i) {
    t.train_step(i % 2 == 0);
    CHECK(t.last_batch_ids().size() == t.config().batch_size * t.config().k);
    for (std::size_t id : t.last_batch_ids()) {
      const int cls = static_cast<int>(id / spec.per_class);
      CHECK(std::find(spec.unseen.begin(), spec.unseen.end(), cls) == spec.unseen.end());
      CHECK(std::find(spec.seen.begin(), spec.seen.end(), cls) != spec.seen.end());
      ++audited;
    }
  }
  CHECK(audited == 40 * 12);
}

TEST_CASE("non-finite parameters abort with the step in the message") {
  Trainer t(tiny());
  t.train_step();
  Tensor k = generator_params(t.model()).back().tensor;
  k.mutable_data()[0] = std::nan("");
  try {
    t.train_step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("at step 1") != std::string::npos);
    CHECK(msg.find("l_") != std::string::npos);
  }
}

TEST_CASE("evaluation is deterministic and does not disturb training") {
  Trainer a(tiny(9)), b(tiny(9));
  const EvalResult e1 = a.evaluate();
  const EvalResult e2 = a.evaluate();
  CHECK(e1.fid_lite == e2.fid_lite);
  CHECK(e1.lpips_lite == e2.lpips_lite);
  CHECK(e1.fid_lite >= 0.0);
  CHECK(e1.lpips_lite > 0.0);
  const LossReport ra = a.train_step(), rb = b.train_step();
  CHECK(ra.total == rb.total);
}

TEST_CASE("checkpoint round trip reproduces every tensor bit-exactly") {
  Trainer a(tiny(4));
  {
    Trainer fresh(tiny(4));
    Trainer other(tiny(11));
    other.restore(decode_checkpoint(encode_checkpoint([&] {
      Checkpoint ck = fresh.make_checkpoint();
      ck.fingerprint = fingerprint(other.config());
      return ck;
    }())));
    CHECK(same_values(generator_params(other.model()), generator_params(fresh.model())));
  }
  for (int i = 0; i < 5; ++i) a.train_step();
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(a.make_checkpoint()));
  CHECK(ck.step == 5);

  Trainer b(tiny(4));
  b.restore(ck);
  CHECK(b.step() == 5);
  CHECK(same_values(generator_params(a.model()), generator_params(b.model())));
  CHECK(same_values(discriminator_params(a.model()), discriminator_params(b.model())));
  CHECK(same_values(model_buffers(a.model()), model_buffers(b.model())));
  const LossReport ra = a.train_step(), rb = b.train_step();
  CHECK(ra.total == rb.total);
  CHECK(ra.l_adv_d == rb.l_adv_d);

  const std::string bytes = encode_checkpoint(a.make_checkpoint());
  try {
    decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() > 0);
    CHECK(e.offset() < bytes.size());
  }

  Trainer c(tiny(5));
  CHECK_THROWS_AS(c.restore(ck), ConfigError);
}

TEST_CASE("smoke run on 8x8 images writes metrics, checkpoints and samples") {
  TrainConfig c = tiny();
  c.run_dir = fresh_dir("smoke");
  Trainer t(c);
  const auto rows = t.run();
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].step == 0);
  CHECK(rows[1].step == 5);
  CHECK(rows[2].step == 10);
  CHECK(rows[0].l_adv_d == 0.0);
  CHECK(rows[2].l_p > 0.0);

  const auto stored = read_metrics(c.run_dir / "metrics.csv");
  REQUIRE(stored.size() == rows.size());
  CHECK(slurp(c.run_dir / "metrics.csv").rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  CHECK(fs::exists(checkpoint_path(c.run_dir, 5)));
  CHECK(fs::exists(checkpoint_path(c.run_dir, 10)));
  CHECK(latest_checkpoint(c.run_dir) == checkpoint_path(c.run_dir, 10));
  CHECK(fs::exists(c.run_dir / "config.txt"));
  CHECK(fs::exists(c.run_dir / "samples" / "step_00000010.ppm"));
  const Tensor sheet = read_ppm(c.run_dir / "samples" / "step_00000010.ppm");
  CHECK(sheet.dim(1) == 3 * 8 + 2);

  const TrainedModel loaded = load_trained(c.run_dir);
  CHECK(loaded.step == 10);
  CHECK(same_values(generator_params(loaded.model), generator_params(t.model())));
  fs::remove_all(c.run_dir);
}

TEST_CASE("old checkpoints are pruned") {
  TrainConfig c = tiny();
  c.run_dir = fresh_dir("prune");
  c.checkpoint_every = 2;
  c.keep_checkpoints = 2;
  c.write_samples = false;
  Trainer(c).run();
  std::size_t count = 0;
  for (const auto& e : fs::directory_iterator(c.run_dir)) count += e.path().extension() == ".bin";
  CHECK(count == 2);
  CHECK(fs::exists(checkpoint_path(c.run_dir, 10)));
  CHECK(fs::exists(checkpoint_path(c.run_dir, 8)));
  fs::remove_all(c.run_dir);
}

TEST_CASE("a resumed run matches an uninterrupted one") {
  TrainConfig c = tiny(6);
  c.eval_every = 3;
  c.checkpoint_every = 3;
  c.write_samples = false;

  TrainConfig whole = c;
  whole.run_dir = fresh_dir("whole");
  Trainer(whole).run();

  TrainConfig part = c;
  part.run_dir = fresh_dir("part");
  part.steps = 7;
  Trainer(part).run();
  // Simulate a crash after step 7's metrics row but before a checkpoint at 9:
  // the rows after the newest checkpoint must be dropped and recomputed.
  fs::remove(checkpoint_path(part.run_dir, 7));
  part.steps = 10;
  Trainer resumed(part);
  std::ostringstream log;
  const auto rows = resumed.run(&log);
  CHECK(log.str().find("resuming") != std::string::npos);
  std::vector<long long> steps;
  for (const auto& r : rows) steps.push_back(r.step);
  CHECK(steps == std::vector<long long>{0, 3, 6, 9, 10});

  CHECK(slurp(part.run_dir / "metrics.csv") == slurp(whole.run_dir / "metrics.csv"));
  const Checkpoint a = load_checkpoint(checkpoint_path(whole.run_dir, 10));
  const Checkpoint b = load_checkpoint(checkpoint_path(part.run_dir, 10));
  CHECK(encode_checkpoint(a) == encode_checkpoint(b));

  TrainConfig other = part;
  other.seed = 99;
  Trainer refuse(other);
  CHECK_THROWS_AS(refuse.run(), ConfigError);
  fs::remove_all(whole.run_dir);
  fs::remove_all(part.run_dir);
}

TEST_CASE("metrics file parsing") {
  const fs::path dir = fresh_dir("csv");
  fs::create_directories(dir);
  const MetricsRow r{200, 1.5, 0.25, 0.5, -0.125, 0.75, 1.0};
  {
    std::ofstream f(dir / "m.csv");
    f << kMetricsHeader << "\n" << format_metrics_row(r) << "\n";
  }
  const auto rows = read_metrics(dir / "m.csv");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].step == 200);
  CHECK(rows[0].l_adv_g == -0.125);
  {
    std::ofstream f(dir / "bad.csv");
    f << kMetricsHeader << "\n1,2,3\n";
  }
  CHECK_THROWS_AS(read_metrics(dir / "bad.csv"), ParseError);
  {
    std::ofstream f(dir / "hdr.csv");
    f << "step,fid\n";
  }
  CHECK_THROWS_AS(read_metrics(dir / "hdr.csv"), ParseError);
  CHECK_THROWS(load_trained(dir));
  fs::remove_all(dir);
}
