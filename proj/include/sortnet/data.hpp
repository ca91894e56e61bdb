#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sortnet/error.hpp"
#include "sortnet/rng.hpp"
#include "sortnet/tensor.hpp"

namespace sortnet {

/// Images [N, ...] with one integer label per sample.
struct DatasetHandle {
  std::string name;
  std::string split;
  Tensor images;  // empty when the split holds no samples
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }

  Shape sample_shape() const {
    if (images.empty()) return {};
    return Shape(images.shape().begin() + 1, images.shape().end());
  }

  std::size_t sample_size() const { return images.empty() ? 0 : images.size() / images.dim(0); }

  void validate() const {
    if (!images.empty() && images.dim(0) != labels.size()) {
      throw Error(ErrorKind::ShapeMismatch, name + ": " + std::to_string(images.dim(0)) + " images vs " +
                                                std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
        throw Error(ErrorKind::LabelOutOfRange, name + ": label " + std::to_string(l));
      }
    }
  }
};

/// Samples at `indices`, as a batch tensor and its labels.
inline std::pair<Tensor, std::vector<int>> gather(const DatasetHandle& d, std::span<const std::size_t> indices) {
  Shape shape = d.sample_shape();
  const std::size_t stride = d.sample_size();
  shape.insert(shape.begin(), indices.size());
  Tensor batch(shape);
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    std::copy_n(d.images.raw() + src * stride, stride, batch.raw() + i * stride);
    labels[i] = d.labels[src];
  }
  return {std::move(batch), std::move(labels)};
}

inline std::vector<std::size_t> class_histogram(const DatasetHandle& d) {
  std::vector<std::size_t> hist(d.class_count, 0);
  for (int l : d.labels) hist.at(static_cast<std::size_t>(l))++;
  return hist;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: 3073-byte records, 1 label byte then 3072 pixel
// bytes, R plane then G then B, each 32x32 row-major.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = kCifarPixels + 1;
inline constexpr std::size_t kCifarClasses = 10;

inline DatasetHandle load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split = "train") {
  std::vector<unsigned char> bytes;
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::vector<unsigned char> chunk((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (chunk.empty() || chunk.size() % kCifarRecord != 0) {
      throw Error(ErrorKind::TruncatedFile, path + " holds " + std::to_string(chunk.size()) +
                                                " bytes, not a multiple of " + std::to_string(kCifarRecord));
    }
    bytes.insert(bytes.end(), chunk.begin(), chunk.end());
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  DatasetHandle d;
  d.name = "cifar10";
  d.split = split;
  d.class_count = kCifarClasses;
  if (n == 0) return d;
  d.images = Tensor({n, 3, kCifarSide, kCifarSide});
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= kCifarClasses) {
      throw Error(ErrorKind::LabelOutOfRange, "record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    }
    d.labels[r] = rec[0];
    double* dst = d.images.raw() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) dst[i] = static_cast<double>(rec[1 + i]) / 255.0;
  }
  return d;
}

/// Inverse of load_cifar10_binary for [N,3,32,32] images in [0,1].
inline void write_cifar10_binary(const DatasetHandle& d, const std::string& path) {
  if (d.sample_shape() != Shape{3, kCifarSide, kCifarSide}) {
    throw Error(ErrorKind::ShapeMismatch, "CIFAR-10 records need [N,3,32,32] images");
  }
  d.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  std::vector<char> rec(kCifarRecord);
  for (std::size_t r = 0; r < d.size(); ++r) {
    rec[0] = static_cast<char>(d.labels[r]);
    const double* src = d.images.raw() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
      const double v = std::clamp(std::round(src[i] * 255.0), 0.0, 255.0);
      rec[1 + i] = static_cast<char>(static_cast<unsigned char>(v));
    }
    os.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

struct Cifar10 {
  DatasetHandle train;
  DatasetHandle test;
};

/// Finds the batch files under `root` or `root/cifar-10-batches-bin`.
inline std::filesystem::path find_cifar10_dir(const std::filesystem::path& root) {
  for (const auto& dir : {root, root / "cifar-10-batches-bin"}) {
    if (std::filesystem::exists(dir / "data_batch_1.bin") && std::filesystem::exists(dir / "test_batch.bin")) {
      return dir;
    }
  }
  throw Error(ErrorKind::IoError, "no CIFAR-10 binary batches under " + root.string());
}

/// Loads the standard five training batches and the test batch and checks
/// the 50,000 / 10,000 split sizes.
inline Cifar10 load_cifar10_dir(const std::filesystem::path& root) {
  const auto dir = find_cifar10_dir(root);
  std::vector<std::string> train_paths;
  for (int i = 1; i <= 5; ++i) train_paths.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
  Cifar10 c{load_cifar10_binary(train_paths, "train"), load_cifar10_binary({(dir / "test_batch.bin").string()}, "test")};
  if (c.train.size() != 50000 || c.test.size() != 10000) {
    throw Error(ErrorKind::TruncatedFile, "expected 50000/10000 samples, found " + std::to_string(c.train.size()) +
                                              "/" + std::to_string(c.test.size()));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel (axis 1) mean and population standard deviation.
inline ChannelStats compute_channel_stats(const DatasetHandle& train) {
  if (train.size() == 0) throw Error(ErrorKind::EmptySplit, "cannot compute statistics of an empty split");
  const Tensor& x = train.images;
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(n * inner);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.raw() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) sum += p[i];
    }
    const double m = sum / count;
    double ss = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.raw() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - m) * (p[i] - m);
    }
    s.mean[ch] = m;
    s.stddev[ch] = std::sqrt(ss / count);
    if (s.stddev[ch] < 1e-8) {
      throw Error(ErrorKind::ZeroVariance, train.name + ": channel " + std::to_string(ch) + " is constant");
    }
  }
  return s;
}

/// (x - mean_c) / std_c with statistics taken from the training split.
inline DatasetHandle standardize(const DatasetHandle& d, const ChannelStats& stats) {
  DatasetHandle out = d;
  if (d.size() == 0) return out;
  const std::size_t n = d.images.dim(0), c = d.images.dim(1);
  if (stats.mean.size() != c) throw Error(ErrorKind::ShapeMismatch, "channel statistics do not match dataset");
  const std::size_t inner = d.images.size() / (n * c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.images.raw() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] = (p[i] - stats.mean[ch]) / stats.stddev[ch];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subsets and synthetic data
// ---------------------------------------------------------------------------

/// n samples chosen by a seeded permutation, kept in their original order.
inline DatasetHandle subset(const DatasetHandle& d, std::size_t n, std::uint64_t seed) {
  if (n >= d.size()) return d;
  Rng rng(seed);
  auto idx = rng.permutation(d.size());
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  DatasetHandle out;
  out.name = d.name;
  out.split = d.split;
  out.class_count = d.class_count;
  if (n == 0) return out;
  auto [images, labels] = gather(d, idx);
  out.images = std::move(images);
  out.labels = std::move(labels);
  return out;
}

enum class SyntheticKind { Blobs, Xor };

/// blobs: two unit-variance clusters 6 sigma apart along the first axis,
/// truncated at 2.5 sigma so they are linearly separable.
/// xor: uniform points in [-1,1]^2 away from the axes, label = [x*y < 0].
/// Labels alternate, so classes are balanced within one sample.
inline DatasetHandle make_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw Error(ErrorKind::InvalidConfig, "synthetic dataset needs n >= 2");
  Rng rng(seed);
  DatasetHandle d;
  d.name = kind == SyntheticKind::Blobs ? "blobs" : "xor";
  d.split = "train";
  d.class_count = 2;
  d.images = Tensor({n, 2});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    d.labels[i] = label;
    if (kind == SyntheticKind::Blobs) {
      double z = rng.normal();
      while (std::abs(z) > 2.5) z = rng.normal();
      d.images[2 * i] = (label == 0 ? -3.0 : 3.0) + z;
      d.images[2 * i + 1] = rng.normal();
    } else {
      const double sx = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double mx = rng.uniform(0.1, 1.0);
      const double my = rng.uniform(0.1, 1.0);
      // label 0: same signs, label 1: opposite signs
      const double sy = label == 0 ? sx : -sx;
      d.images[2 * i] = sx * mx;
      d.images[2 * i + 1] = sy * my;
    }
  }
  return d;
}

/// CSV with header label,f0,f1,... one row per sample.
inline void write_features_csv(const DatasetHandle& d, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  const std::size_t dim = d.sample_size();
  os << "label";
  for (std::size_t j = 0; j < dim; ++j) os << ",f" << j;
  os << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << d.labels[i];
    for (std::size_t j = 0; j < dim; ++j) os << ',' << d.images[i * dim + j];
    os << '\n';
  }
  if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

/// 4-pixel zero pad, random 32x32 crop and random horizontal flip, applied
/// in place to a [N,C,H,W] batch.
inline void augment_batch(Tensor& batch, Rng& rng) {
  if (batch.rank() != 4) return;
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  constexpr std::ptrdiff_t pad = 4;
  std::vector<double> plane(h * w);
  for (std::size_t b = 0; b < n; ++b) {
    const auto dy = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - pad;
    const auto dx = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - pad;
    const bool flip = rng.below(2) == 1;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = batch.raw() + (b * c + ch) * h * w;
      std::copy_n(p, h * w, plane.begin());
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          const std::ptrdiff_t sx0 = static_cast<std::ptrdiff_t>(flip ? w - 1 - x : x) + dx;
          const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx0 >= 0 &&
                              sx0 < static_cast<std::ptrdiff_t>(w);
          p[y * w + x] = inside ? plane[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx0)] : 0.0;
        }
      }
    }
  }
}

}  // namespace sortnet
