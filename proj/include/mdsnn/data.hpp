#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdsnn/error.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

template <typename Real = double>
struct Dataset {
  Tensor<Real> images;      // [N, C, H, W]
  std::vector<int> labels;  // N class ids
  std::size_t num_classes = 0;
  std::string split;        // "train" or "test"

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (!images.defined() || images.rank() != 4 || images.dim(0) != labels.size()) {
      throw ShapeError("dataset images " + to_string(images.shape()) +
                       " do not match " + std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw Error("dataset label " + std::to_string(y) + " outside [0, " +
                    std::to_string(num_classes) + ")");
      }
    }
  }
};

// --- IDX ----------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

class IdxError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kTruncated, kCountMismatch };

  IdxError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes,
                               std::size_t offset, const std::string& what) {
  if (bytes.size() < offset + 4) {
    throw IdxError(IdxError::Kind::kTruncated, what + ": truncated header");
  }
  return (std::uint32_t{bytes[offset]} << 24) |
         (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::kIo, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const auto magic = detail::read_be32(bytes, 0, "idx images");
  if (magic != kIdxImageMagic) {
    throw IdxError(IdxError::Kind::kBadMagic,
                   "idx images: bad magic " + detail::hex32(magic) +
                       " (expected 0x00000803)");
  }
  IdxImages out;
  out.count = detail::read_be32(bytes, 4, "idx images");
  out.rows = detail::read_be32(bytes, 8, "idx images");
  out.cols = detail::read_be32(bytes, 12, "idx images");
  const std::size_t need = std::size_t{out.count} * out.rows * out.cols;
  if (bytes.size() - 16 < need) {
    throw IdxError(IdxError::Kind::kTruncated,
                   "idx images: header declares " + std::to_string(need) +
                       " pixel bytes, file has " + std::to_string(bytes.size() - 16));
  }
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return out;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const auto magic = detail::read_be32(bytes, 0, "idx labels");
  if (magic != kIdxLabelMagic) {
    throw IdxError(IdxError::Kind::kBadMagic,
                   "idx labels: bad magic " + detail::hex32(magic) +
                       " (expected 0x00000801)");
  }
  const auto count = detail::read_be32(bytes, 4, "idx labels");
  if (bytes.size() - 8 < count) {
    throw IdxError(IdxError::Kind::kTruncated,
                   "idx labels: header declares " + std::to_string(count) +
                       " labels, file has " + std::to_string(bytes.size() - 8));
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + count};
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& img) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, img.count);
  detail::write_be32(out, img.rows);
  detail::write_be32(out, img.cols);
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

// Pixel bytes are scaled to [0, 1]; images come out as [N, 1, H, W].
template <typename Real = double>
Dataset<Real> dataset_from_idx(const IdxImages& img, std::span<const std::uint8_t> labels,
                               std::size_t num_classes, std::string split) {
  if (img.count != labels.size()) {
    throw IdxError(IdxError::Kind::kCountMismatch,
                   "idx: " + std::to_string(img.count) + " images but " +
                       std::to_string(labels.size()) + " labels");
  }
  Dataset<Real> ds;
  std::vector<Real> px(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), px.begin(),
                 [](std::uint8_t b) { return static_cast<Real>(b) / Real(255); });
  ds.images = Tensor<Real>(Shape{img.count, 1, img.rows, img.cols}, std::move(px));
  ds.labels.assign(labels.begin(), labels.end());
  ds.num_classes = num_classes;
  ds.split = std::move(split);
  ds.validate();
  return ds;
}

template <typename Real = double>
Dataset<Real> load_idx(const std::string& images_path, const std::string& labels_path,
                       std::size_t num_classes = 10, std::string split = "train") {
  const auto image_bytes = detail::read_file(images_path);
  const auto label_bytes = detail::read_file(labels_path);
  const IdxImages img = parse_idx_images(image_bytes);
  const auto labels = parse_idx_labels(label_bytes);
  return dataset_from_idx<Real>(img, labels, num_classes, std::move(split));
}

// --- normalization ----------------------------------------------------

struct ChannelStats {
  std::vector<double> mean, stddev;
};

template <typename Real>
ChannelStats channel_stats(const Tensor<Real>& images) {
  const std::size_t n = images.dim(0), c = images.dim(1);
  const std::size_t inner = images.dim(2) * images.dim(3);
  ChannelStats s{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < inner; ++p) acc += images[(b * c + ch) * inner + p];
    }
    const double m = acc / static_cast<double>(n * inner);
    double sq = 0;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < inner; ++p) {
        const double d = images[(b * c + ch) * inner + p] - m;
        sq += d * d;
      }
    }
    s.mean[ch] = m;
    const double sd = std::sqrt(sq / static_cast<double>(n * inner));
    s.stddev[ch] = sd > 0 ? sd : 1.0;
  }
  return s;
}

// (x - mean) / stddev per channel. Constant channels are only centered.
template <typename Real>
void standardize(Tensor<Real>& images, const ChannelStats& s) {
  const std::size_t n = images.dim(0), c = images.dim(1);
  const std::size_t inner = images.dim(2) * images.dim(3);
  if (s.mean.size() != c) throw ShapeError("standardize: channel count mismatch");
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < inner; ++p) {
        auto& v = images[(b * c + ch) * inner + p];
        v = static_cast<Real>((v - s.mean[ch]) / s.stddev[ch]);
      }
    }
  }
}

// --- synthetic blobs --------------------------------------------------

struct SynthOptions {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 32;
  std::size_t height = 8;
  std::size_t width = 8;
  double amplitude = 1.0;  // blob peak
  double noise = 0.3;      // pixel noise standard deviation
  double sigma = 1.2;      // blob radius in pixels
  std::uint64_t seed = 1;
};

// One Gaussian blob per image, centred on its class anchor. Anchors sit on a
// circle around the image centre. Pixels are clamped to [0, 1] and samples
// are shuffled with the seed.
template <typename Real = double>
Dataset<Real> synth_dataset(const SynthOptions& opt, std::string split = "train") {
  if (opt.num_classes == 0 || opt.samples_per_class == 0 || opt.height == 0 ||
      opt.width == 0) {
    throw ConfigError("synth_dataset: counts and image size must be positive");
  }
  if (!(opt.sigma > 0) || opt.noise < 0) {
    throw ConfigError("synth_dataset: sigma must be positive and noise nonnegative");
  }
  constexpr double kPi = 3.14159265358979323846;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t n = opt.num_classes * opt.samples_per_class;
  const std::size_t hw = opt.height * opt.width;
  const double cy = (static_cast<double>(opt.height) - 1) / 2;
  const double cx = (static_cast<double>(opt.width) - 1) / 2;
  const double radius = std::min(opt.height, opt.width) / 4.0;

  std::vector<Real> px(n * hw);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i / opt.samples_per_class;
    labels[i] = static_cast<int>(c);
    const double angle = 2 * kPi * static_cast<double>(c) / static_cast<double>(opt.num_classes);
    const double ay = cy + radius * std::sin(angle);
    const double ax = cx + radius * std::cos(angle);
    for (std::size_t y = 0; y < opt.height; ++y) {
      for (std::size_t x = 0; x < opt.width; ++x) {
        const double dy = static_cast<double>(y) - ay;
        const double dx = static_cast<double>(x) - ax;
        double v = opt.amplitude * std::exp(-(dy * dy + dx * dx) / (2 * opt.sigma * opt.sigma));
        v += opt.noise * noise(rng);
        px[i * hw + y * opt.width + x] = static_cast<Real>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  Dataset<Real> ds;
  ds.images = gather_rows(Tensor<Real>(Shape{n, 1, opt.height, opt.width}, std::move(px)),
                          std::span<const std::size_t>(order));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = labels[order[i]];
  ds.num_classes = opt.num_classes;
  ds.split = std::move(split);
  return ds;
}

}  // namespace mdsnn
