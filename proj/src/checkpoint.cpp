#include "xmgan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xmgan/errors.hpp"

namespace xmgan {

namespace {

constexpr char kMagic[8] = {'X', 'M', 'G', 'A', 'N', 'C', 'K', '\0'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }

  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what + " (need " + std::to_string(n) +
                           " bytes, " + std::to_string(bytes_.size() - pos_) + " left)",
                       pos_);
    }
  }

  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, ck.fingerprint);
  put_u64(out, ck.step);
  put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) put_u64(out, d);
    for (double v : e.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof kMagic, "magic") != std::string_view(kMagic, sizeof kMagic))
    throw ParseError("not a checkpoint file (bad magic)", 0);
  const std::size_t version_pos = r.pos();
  const auto version = r.uint(4, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")",
                     version_pos);
  }
  Checkpoint ck;
  ck.fingerprint = r.uint(8, "fingerprint");
  ck.step = r.uint(8, "step");
  const auto count = r.uint(4, "entry count");
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name_len = r.uint(4, "name length");
    std::string name(r.take(name_len, "name"));
    const std::size_t ndim_pos = r.pos();
    const auto ndim = r.uint(4, "rank");
    if (ndim > 8) throw ParseError("implausible rank " + std::to_string(ndim) + " for '" + name + "'", ndim_pos);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < ndim; ++d) {
      const std::size_t dim_pos = r.pos();
      const auto dim = r.uint(8, "dimension");
      if (dim > (std::uint64_t{1} << 32) || numel * dim > (std::uint64_t{1} << 32))
        throw ParseError("implausible dimension for '" + name + "'", dim_pos);
      shape.push_back(static_cast<std::size_t>(dim));
      numel *= dim;
    }
    r.need(numel * 8, "tensor data");
    std::vector<double> data(numel);
    for (auto& v : data) v = std::bit_cast<double>(r.uint(8, "tensor data"));
    ck.entries.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  if (r.pos() != bytes.size()) throw ParseError("trailing bytes after last checkpoint entry", r.pos());
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    const std::string bytes = encode_checkpoint(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

void restore_tensors(const ParamList& dest, const Checkpoint& ck) {
  for (const auto& d : dest) {
    const Tensor* src = ck.find(d.name);
    if (!src) throw ConfigError("checkpoint has no tensor named '" + d.name + "'");
    if (src->shape() != d.tensor.shape()) {
      throw ConfigError("checkpoint tensor '" + d.name + "' has shape " + shape_str(src->shape()) + ", model expects " +
                        shape_str(d.tensor.shape()));
    }
    Tensor t = d.tensor;
    auto out = t.mutable_data();
    std::copy(src->data().begin(), src->data().end(), out.begin());
  }
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace xmgan
