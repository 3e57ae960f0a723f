#include "gradshield/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace gradshield {

namespace {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ArtifactError(std::string("checkpoint truncated while reading ") + what + " at offset " +
                          std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::string& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArtifactError("write failed for " + path.string());
}

}  // namespace

std::string encode_checkpoint(const ModelParams& params) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.entries) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_le<std::uint64_t>(out, d);
    for (float v : t.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

ModelParams decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (bytes.size() < magic_len || bytes.compare(0, magic_len, kCheckpointMagic) != 0) {
    throw ArtifactError("checkpoint has unknown magic");
  }
  r.take(magic_len, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw ArtifactError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  ModelParams params;
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = r.get<std::uint32_t>("name length");
    std::string name = r.take(name_len, "name");
    if (!seen.insert(name).second) throw ArtifactError("checkpoint has duplicate tensor '" + name + "'");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw ArtifactError("checkpoint tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>("dims"));
      if (d != 0 && n > (bytes.size() / d)) throw ArtifactError("checkpoint tensor '" + name + "' is too large");
      n *= d;
    }
    if (bytes.size() - r.pos() < n * 4) {
      throw ArtifactError("checkpoint truncated in payload of '" + name + "' at offset " + std::to_string(r.pos()));
    }
    Tensor t(shape);
    for (auto& v : t.data) v = std::bit_cast<float>(r.get<std::uint32_t>("payload"));
    if (!t.all_finite()) throw ArtifactError("checkpoint tensor '" + name + "' holds non-finite values");
    t.requires_grad = true;
    params.entries.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw ArtifactError("checkpoint has trailing bytes at offset " + std::to_string(r.pos()));
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  spill(encode_checkpoint(params), path);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(slurp(path));
  } catch (const ArtifactError& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

std::string encode_pgm(const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1) {
    throw ShapeError("write_pgm: expects 1x1xHxW, got " + shape_str(image.shape));
  }
  const std::size_t h = image.dim(2), w = image.dim(3);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (float v : image.data) {
    const double c = std::isnan(v) ? 0.0 : std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

Tensor decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> ArtifactError {
    return ArtifactError("malformed PGM at offset " + std::to_string(pos) + ": " + what);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) throw fail("header value too large");
      ++pos;
    }
    if (pos == start) throw fail("expected a number");
    return v;
  };
  if (bytes.compare(0, 2, "P5") != 0) throw fail("missing P5 magic");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval != 255) throw fail("maxval must be 255");
  if (w == 0 || h == 0) throw fail("zero image size");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("expected whitespace");
  ++pos;
  if (bytes.size() - pos != w * h) throw fail("expected " + std::to_string(w * h) + " pixel bytes");
  Tensor t({1, 1, h, w});
  for (std::size_t i = 0; i < w * h; ++i) t.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i]) / 255.0);
  return t;
}

void write_pgm(const Tensor& image, const std::filesystem::path& path) { spill(encode_pgm(image), path); }

Tensor read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(slurp(path));
  } catch (const ArtifactError& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

}  // namespace gradshield
