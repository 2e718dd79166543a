#include "xmgan/synth_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include "xmgan/checkpoint.hpp"
#include "xmgan/errors.hpp"
#include "xmgan/ops.hpp"

namespace xmgan {

namespace {

using Rgb = std::array<double, 3>;

struct Palette {
  Rgb background, foreground;
};

// Stain-like colours in [0, 1]; sibling classes differ in colour as well as pattern.
constexpr std::array<Palette, 8> kPalettes{{
    {{0.93, 0.75, 0.85}, {0.55, 0.25, 0.55}},
    {{0.95, 0.85, 0.80}, {0.70, 0.30, 0.35}},
    {{0.85, 0.70, 0.90}, {0.45, 0.20, 0.60}},
    {{0.95, 0.80, 0.85}, {0.60, 0.35, 0.45}},
    {{0.96, 0.92, 0.95}, {0.50, 0.20, 0.50}},
    {{0.90, 0.75, 0.80}, {0.35, 0.15, 0.40}},
    {{0.80, 0.55, 0.70}, {0.98, 0.90, 0.95}},
    {{0.70, 0.40, 0.55}, {0.95, 0.80, 0.88}},
}};

using Field = std::vector<double>;  // S*S values in [0, 1]

Field grating(Rng& rng, std::size_t s, double angle, double freq_lo, double freq_hi) {
  const double theta = angle + rng.uniform(-0.3, 0.3);
  const double freq = rng.uniform(freq_lo, freq_hi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double sharp = rng.uniform(1.0, 3.0);
  Field f(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double u = static_cast<double>(x) / s, v = static_cast<double>(y) / s;
      const double t = std::sin(2.0 * std::numbers::pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
      f[y * s + x] = 0.5 + 0.5 * std::tanh(sharp * t) / std::tanh(sharp);
    }
  return f;
}

Field voronoi(Rng& rng, std::size_t s, std::size_t lo, std::size_t hi) {
  const std::size_t n = lo + rng.index(hi - lo + 1);
  std::vector<std::array<double, 3>> cells(n);
  for (auto& c : cells) c = {rng.uniform(), rng.uniform(), rng.uniform(0.2, 1.0)};
  const double edge = rng.uniform(0.015, 0.03);
  Field f(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (x + 0.5) / s, v = (y + 0.5) / s;
      double d1 = INFINITY, d2 = INFINITY;
      std::size_t nearest = 0;
      for (std::size_t i = 0; i < n; ++i) {
        // Toroidal distance so the mosaic tiles.
        double dx = std::abs(u - cells[i][0]), dy = std::abs(v - cells[i][1]);
        dx = std::min(dx, 1.0 - dx);
        dy = std::min(dy, 1.0 - dy);
        const double d = std::sqrt(dx * dx + dy * dy);
        if (d < d1) {
          d2 = d1;
          d1 = d;
          nearest = i;
        } else if (d < d2) {
          d2 = d;
        }
      }
      f[y * s + x] = (d2 - d1) < edge ? 1.0 : cells[nearest][2] * 0.6;
    }
  return f;
}

Field blobs(Rng& rng, std::size_t s, std::size_t lo, std::size_t hi, double r_lo, double r_hi) {
  const std::size_t n = lo + rng.index(hi - lo + 1);
  Field f(s * s, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(), cy = rng.uniform(), r = rng.uniform(r_lo, r_hi);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        double dx = std::abs((x + 0.5) / s - cx), dy = std::abs((y + 0.5) / s - cy);
        dx = std::min(dx, 1.0 - dx);
        dy = std::min(dy, 1.0 - dy);
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
        f[y * s + x] = std::max(f[y * s + x], g);
      }
  }
  return f;
}

// Bilinear value noise on a periodic grid of `cells` x `cells` random values.
Field value_noise(Rng& rng, std::size_t s, std::size_t cells) {
  cells = std::max<std::size_t>(cells, 2);
  std::vector<double> grid(cells * cells);
  for (auto& g : grid) g = rng.uniform();
  Field f(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double gx = (x + 0.5) / s * cells, gy = (y + 0.5) / s * cells;
      const std::size_t x0 = static_cast<std::size_t>(gx) % cells, y0 = static_cast<std::size_t>(gy) % cells;
      const std::size_t x1 = (x0 + 1) % cells, y1 = (y0 + 1) % cells;
      double tx = gx - std::floor(gx), ty = gy - std::floor(gy);
      tx = tx * tx * (3 - 2 * tx);
      ty = ty * ty * (3 - 2 * ty);
      const double top = grid[y0 * cells + x0] * (1 - tx) + grid[y0 * cells + x1] * tx;
      const double bot = grid[y1 * cells + x0] * (1 - tx) + grid[y1 * cells + x1] * tx;
      f[y * s + x] = top * (1 - ty) + bot * ty;
    }
  return f;
}

Field class_pattern(int class_id, Rng& rng, std::size_t s) {
  switch (class_id) {
    case 0: return grating(rng, s, 0.0, 2.0, 3.5);
    case 1: return grating(rng, s, std::numbers::pi / 3.0, 5.0, 7.0);
    case 2: return voronoi(rng, s, 6, 10);
    case 3: return voronoi(rng, s, 20, 30);
    case 4: return blobs(rng, s, 3, 5, 0.12, 0.2);
    case 5: return blobs(rng, s, 12, 20, 0.04, 0.07);
    case 6: return value_noise(rng, s, std::max<std::size_t>(s / 3, 4) + rng.index(3));
    case 7: return value_noise(rng, s, 3 + rng.index(3));
    default: throw ConfigError("no texture family for class " + std::to_string(class_id));
  }
}

std::uint8_t to_byte(double v) {
  const double b = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(b);
}

// Cursor over a PPM header that reports byte offsets on failure.
struct PpmReader {
  std::string_view bytes;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    if (pos >= bytes.size()) throw ParseError(std::string("ppm: unexpected end of file reading ") + what, pos);
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos])))
      throw ParseError(std::string("ppm: expected ") + what, pos);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) throw ParseError(std::string("ppm: ") + what + " too large", pos);
      ++pos;
    }
    return v;
  }
};

std::string split_name(const DatasetSpec& spec, int class_id) {
  if (std::find(spec.seen.begin(), spec.seen.end(), class_id) != spec.seen.end()) return "seen";
  if (std::find(spec.unseen.begin(), spec.unseen.end(), class_id) != spec.unseen.end()) return "unseen";
  return "unused";
}

}  // namespace

void validate(const DatasetSpec& spec) {
  if (spec.class_count == 0 || spec.class_count > kPalettes.size())
    throw ConfigError("class_count must be in [1, " + std::to_string(kPalettes.size()) + "]");
  if (spec.per_class == 0 || spec.image_size == 0) throw ConfigError("per_class and image_size must be positive");
  std::set<int> seen;
  for (int c : spec.seen) {
    if (c < 0 || static_cast<std::size_t>(c) >= spec.class_count)
      throw ConfigError("seen class " + std::to_string(c) + " out of range");
    seen.insert(c);
  }
  for (int c : spec.unseen) {
    if (c < 0 || static_cast<std::size_t>(c) >= spec.class_count)
      throw ConfigError("unseen class " + std::to_string(c) + " out of range");
    if (seen.count(c)) throw ConfigError("class " + std::to_string(c) + " is both seen and unseen");
  }
}

Tensor make_texture(int class_id, std::size_t image_size, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t s = image_size;
  const Field f = class_pattern(class_id, rng, s);
  Palette pal = kPalettes.at(static_cast<std::size_t>(class_id));
  for (auto* c : {&pal.background, &pal.foreground})
    for (double& ch : *c) ch = std::clamp(ch + rng.uniform(-0.05, 0.05), 0.0, 1.0);

  std::vector<double> data(3 * s * s);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < s * s; ++i) {
      const double v = pal.background[ch] * (1.0 - f[i]) + pal.foreground[ch] * f[i] + 0.02 * rng.normal();
      data[ch * s * s + i] = std::clamp(2.0 * v - 1.0, -1.0, 1.0);
    }
  return Tensor::from({3, s, s}, std::move(data));
}

Dataset make_dataset(const DatasetSpec& spec) {
  validate(spec);
  Dataset d;
  d.spec = spec;
  d.images.resize(spec.class_count);
  d.seeds.resize(spec.class_count);
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const std::uint64_t s = derive_seed(spec.seed, c * 100003 + i);
      d.seeds[c].push_back(s);
      d.images[c].push_back(make_texture(static_cast<int>(c), spec.image_size, s));
    }
  }
  return d;
}

Episode sample_episode_from(std::span<const Tensor> images, std::span<const std::size_t> ids, int class_id,
                            std::size_t k, std::size_t noise_dim, Rng& rng) {
  if (k < 2) throw ContractError("an episode needs K >= 2 images, got " + std::to_string(k));
  if (images.size() < k) {
    throw ContractError("class " + std::to_string(class_id) + " has " + std::to_string(images.size()) +
                        " images, fewer than K = " + std::to_string(k));
  }
  Episode e;
  e.class_id = class_id;
  const auto pick = rng.choose(images.size(), k);
  e.base = images[pick[0]];
  e.image_ids.push_back(ids.empty() ? pick[0] : ids[pick[0]]);
  for (std::size_t i = 1; i < k; ++i) {
    e.refs.push_back(images[pick[i]]);
    e.image_ids.push_back(ids.empty() ? pick[i] : ids[pick[i]]);
  }
  e.alphas = rng.simplex(k - 1);
  for (std::size_t i = 1; i < k; ++i) e.z_list.push_back(Tensor::from({noise_dim}, rng.normal_vector(noise_dim)));
  return e;
}

Episode sample_episode(const Dataset& data, std::span<const int> class_pool, std::size_t k, std::size_t noise_dim,
                       Rng& rng) {
  if (class_pool.empty()) throw ContractError("sample_episode: empty class pool");
  const int c = class_pool[rng.index(class_pool.size())];
  const auto& imgs = data.images.at(static_cast<std::size_t>(c));
  std::vector<std::size_t> ids(imgs.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = data.image_id(c, i);
  return sample_episode_from(imgs, ids, c, k, noise_dim, rng);
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ContractError("stack_images: no images");
  std::vector<Tensor> parts;
  parts.reserve(images.size());
  for (const auto& im : images) {
    if (im.rank() != 3) throw DimensionError("stack_images: expected [C x H x W], got " + shape_str(im.shape()));
    parts.push_back(reshape(im, {1, im.dim(0), im.dim(1), im.dim(2)}));
  }
  return concat_rows(parts);
}

Tensor image_at(const Tensor& batch, std::size_t n) {
  if (batch.rank() != 4 || n >= batch.dim(0)) throw DimensionError("image_at: bad index into " + shape_str(batch.shape()));
  const std::size_t per = batch.numel() / batch.dim(0);
  auto d = batch.data();
  return Tensor::from({batch.dim(1), batch.dim(2), batch.dim(3)},
                      std::vector<double>(d.begin() + n * per, d.begin() + (n + 1) * per));
}

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("encode_ppm: expected [3 x H x W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[header + (y * w + x) * 3 + c] = static_cast<char>(to_byte(image.at((c * h + y) * w + x)));
  return out;
}

Tensor decode_ppm(std::string_view bytes) {
  PpmReader r{bytes};
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("ppm: missing P6 magic", 0);
  r.pos = 2;
  if (r.pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[r.pos])) && bytes[r.pos] != '#')
    throw ParseError("ppm: expected whitespace after magic", r.pos);
  const std::size_t w = r.read_uint("width");
  const std::size_t h = r.read_uint("height");
  r.skip_space_and_comments();
  const std::size_t maxval_pos = r.pos;
  const std::size_t maxval = r.read_uint("maxval");
  if (w == 0 || h == 0) throw ParseError("ppm: zero image dimension", maxval_pos);
  if (maxval == 0 || maxval > 255) throw ParseError("ppm: unsupported maxval " + std::to_string(maxval), maxval_pos);
  if (r.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos])))
    throw ParseError("ppm: expected single whitespace before pixel data", r.pos);
  ++r.pos;
  const std::size_t need = 3 * w * h;
  if (bytes.size() - r.pos < need) {
    throw ParseError("ppm: truncated pixel data, expected " + std::to_string(need) + " bytes", bytes.size());
  }
  std::vector<double> data(need);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto b = static_cast<unsigned char>(bytes[r.pos + (y * w + x) * 3 + c]);
        data[(c * h + y) * w + x] = 2.0 * static_cast<double>(b) / static_cast<double>(maxval) - 1.0;
      }
  return Tensor::from({3, h, w}, std::move(data));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_ppm(image);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_ppm(ss.str());
}

Tensor image_grid(std::span<const Tensor> images, std::size_t columns) {
  if (images.empty() || columns == 0) throw ContractError("image_grid: nothing to tile");
  const std::size_t h = images[0].dim(1), w = images[0].dim(2);
  const std::size_t rows = (images.size() + columns - 1) / columns;
  const std::size_t gh = rows * (h + 1) - 1, gw = columns * (w + 1) - 1;
  std::vector<double> g(3 * gh * gw, 1.0);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].shape() != images[0].shape()) throw DimensionError("image_grid: images differ in shape");
    const std::size_t oy = (n / columns) * (h + 1), ox = (n % columns) * (w + 1);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) g[(c * gh + oy + y) * gw + ox + x] = images[n].at((c * h + y) * w + x);
  }
  return Tensor::from({3, gh, gw}, std::move(g));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t save_dataset(const Dataset& data, const std::filesystem::path& root) {
  std::ostringstream manifest;
  manifest << "class_id,index,split,seed,checksum\n";
  for (std::size_t c = 0; c < data.images.size(); ++c) {
    const auto split = split_name(data.spec, static_cast<int>(c));
    std::filesystem::create_directories(root / std::to_string(c));
    for (std::size_t i = 0; i < data.images[c].size(); ++i) {
      const std::string bytes = encode_ppm(data.images[c][i]);
      const auto path = root / std::to_string(c) / (std::to_string(i) + ".ppm");
      std::ofstream f(path, std::ios::binary);
      if (!(f << bytes)) throw std::runtime_error("cannot write " + path.string());
      manifest << c << ',' << i << ',' << split << ',' << data.seeds[c][i] << ',' << hex64(fnv1a64(bytes)) << '\n';
    }
  }
  const std::string text = manifest.str();
  std::ofstream out(root / "manifest.csv", std::ios::binary);
  if (!(out << text)) throw std::runtime_error("cannot write " + (root / "manifest.csv").string());
  return fnv1a64(text);
}

Dataset load_dataset(const std::filesystem::path& root, const DatasetSpec& spec) {
  validate(spec);
  std::ifstream manifest(root / "manifest.csv");
  if (!manifest) throw std::runtime_error("cannot open " + (root / "manifest.csv").string());
  Dataset d;
  d.spec = spec;
  d.images.assign(spec.class_count, std::vector<Tensor>(spec.per_class));
  d.seeds.assign(spec.class_count, std::vector<std::uint64_t>(spec.per_class));
  std::string line;
  std::getline(manifest, line);
  std::size_t offset = line.size() + 1, count = 0;
  while (std::getline(manifest, line)) {
    std::stringstream ss(line);
    std::string cls, idx, split, seed, checksum;
    if (!std::getline(ss, cls, ',') || !std::getline(ss, idx, ',') || !std::getline(ss, split, ',') ||
        !std::getline(ss, seed, ',') || !std::getline(ss, checksum)) {
      throw ParseError("manifest: expected 5 columns", offset);
    }
    std::size_t c = 0, i = 0;
    try {
      c = std::stoul(cls);
      i = std::stoul(idx);
      if (c >= spec.class_count || i >= spec.per_class) throw std::out_of_range("id");
      d.seeds[c][i] = std::stoull(seed);
    } catch (const std::logic_error&) {
      throw ParseError("manifest: bad class/index/seed in '" + line + "'", offset);
    }
    const auto path = root / cls / (idx + ".ppm");
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (hex64(fnv1a64(bytes)) != checksum)
      throw ParseError("manifest: checksum mismatch for " + path.string(), offset);
    Tensor img = decode_ppm(bytes);
    if (img.shape() != Shape{3, spec.image_size, spec.image_size})
      throw DimensionError("dataset image " + cls + "/" + idx + " has shape " + shape_str(img.shape()));
    d.images[c][i] = img;
    offset += line.size() + 1;
    ++count;
  }
  if (count != spec.class_count * spec.per_class) {
    throw ParseError("manifest: " + std::to_string(count) + " rows, expected " +
                         std::to_string(spec.class_count * spec.per_class),
                     offset);
  }
  return d;
}

}  // namespace xmgan
