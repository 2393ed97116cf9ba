#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "faqd/rng.hpp"
#include "faqd/tensor.hpp"

namespace faqd {

// Published CIFAR-10 per-channel statistics (on [0,1] pixels).
inline constexpr std::array<float, 3> kCifar10Mean = {0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifar10Std = {0.2470f, 0.2435f, 0.2616f};

// Immutable dataset: standardized float images plus optional labels. Label
// access goes through label(), which counts reads so label-free training can
// be audited.
struct DatasetHandle {
  int n = 0;
  int channels = 0, height = 0, width = 0;
  int classes = 0;
  std::vector<float> images;  // n * C*H*W
  bool augment = false;       // random flip + pad-4-crop when iterated for training
  mutable std::uint64_t label_reads = 0;

  bool labeled() const { return has_labels_; }

  int label(int i) const {
    if (!has_labels_) throw StateError("dataset: label access on a label-free handle");
    ++label_reads;
    return labels_.at(static_cast<size_t>(i));
  }

  const float* image(int i) const {
    return images.data() + static_cast<std::int64_t>(i) * channels * height * width;
  }
  std::int64_t item_size() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }

  void set_labels(std::vector<int> l) {
    labels_ = std::move(l);
    has_labels_ = true;
  }
  void drop_label_access() {
    labels_.clear();
    has_labels_ = false;
  }

 private:
  std::vector<int> labels_;
  bool has_labels_ = false;
};

// Label-free wrap: removes label access, preserves item count and order.
inline DatasetHandle label_free(const DatasetHandle& h) {
  DatasetHandle out = h;
  out.drop_label_access();
  out.label_reads = 0;
  return out;
}

// Standard CIFAR-10 binary batches: 3073-byte records, 1 label byte then
// 3072 pixel bytes (R,G,B planes, 32x32 row-major). Pixels are scaled to
// [0,1] and standardized per channel with the supplied constants.
inline DatasetHandle load_cifar_binary(const std::vector<std::string>& paths,
                                       std::array<float, 3> mean = kCifar10Mean,
                                       std::array<float, 3> stddev = kCifar10Std) {
  constexpr int kRecord = 3073;
  constexpr int kPixels = 3072;
  DatasetHandle h;
  h.channels = 3;
  h.height = 32;
  h.width = 32;
  h.classes = 10;
  std::vector<int> labels;
  std::vector<unsigned char> buf;
  for (const auto& path : paths) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw FormatError("cifar: cannot open '" + path + "'");
    std::fseek(f, 0, SEEK_END);
    long size = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    if (size < 0 || size % kRecord != 0) {
      std::fclose(f);
      throw FormatError("cifar: '" + path + "' length " + std::to_string(size) +
                        " is not a multiple of 3073");
    }
    buf.resize(static_cast<size_t>(size));
    size_t got = size ? std::fread(buf.data(), 1, static_cast<size_t>(size), f) : 0;
    std::fclose(f);
    if (got != static_cast<size_t>(size)) throw FormatError("cifar: short read on '" + path + "'");
    int records = static_cast<int>(size / kRecord);
    for (int r = 0; r < records; ++r) {
      const unsigned char* rec = buf.data() + static_cast<std::int64_t>(r) * kRecord;
      if (rec[0] > 9)
        throw FormatError("cifar: '" + path + "' record " + std::to_string(r) +
                          " has label byte " + std::to_string(rec[0]));
      labels.push_back(rec[0]);
      size_t base = h.images.size();
      h.images.resize(base + kPixels);
      for (int c = 0; c < 3; ++c) {
        float inv = 1.0f / (255.0f * stddev[static_cast<size_t>(c)]);
        float off = mean[static_cast<size_t>(c)] / stddev[static_cast<size_t>(c)];
        const unsigned char* plane = rec + 1 + c * 1024;
        float* dst = h.images.data() + base + static_cast<size_t>(c) * 1024;
        for (int p = 0; p < 1024; ++p) dst[p] = static_cast<float>(plane[p]) * inv - off;
      }
    }
  }
  h.n = static_cast<int>(labels.size());
  h.set_labels(std::move(labels));
  return h;
}

// Gaussian class blobs: x = margin * mu_label + noise, balanced labels,
// deterministic per seed. Linearly separable at the default margin.
inline DatasetHandle synthetic_dataset(std::uint64_t seed, int n, int classes, Shape chw,
                                       float margin = 3.0f) {
  if (chw.size() != 3) throw ConfigError("synthetic_dataset: shape must be CxHxW");
  if (n < classes) throw ConfigError("synthetic_dataset: need n >= classes");
  DatasetHandle h;
  h.channels = chw[0];
  h.height = chw[1];
  h.width = chw[2];
  h.classes = classes;
  h.n = n;
  std::int64_t d = h.item_size();
  Rng rng(seed);
  std::vector<float> mu(static_cast<size_t>(classes) * d);
  for (auto& v : mu) v = margin * rng.normal_f();
  h.images.resize(static_cast<size_t>(n) * d);
  std::vector<int> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int c = i % classes;
    labels[static_cast<size_t>(i)] = c;
    const float* m = mu.data() + static_cast<std::int64_t>(c) * d;
    float* x = h.images.data() + static_cast<std::int64_t>(i) * d;
    for (std::int64_t j = 0; j < d; ++j) x[j] = m[j] + rng.normal_f();
  }
  h.set_labels(std::move(labels));
  return h;
}

// First-n-per-class deterministic subset (desk-scale reduction).
inline DatasetHandle subset_per_class(const DatasetHandle& h, int per_class) {
  if (!h.labeled()) throw StateError("subset_per_class: needs labels");
  DatasetHandle out;
  out.channels = h.channels;
  out.height = h.height;
  out.width = h.width;
  out.classes = h.classes;
  out.augment = h.augment;
  std::vector<int> counts(static_cast<size_t>(h.classes), 0);
  std::vector<int> labels;
  for (int i = 0; i < h.n; ++i) {
    int lab = h.label(i);
    if (counts[static_cast<size_t>(lab)] >= per_class) continue;
    ++counts[static_cast<size_t>(lab)];
    labels.push_back(lab);
    const float* src = h.image(i);
    out.images.insert(out.images.end(), src, src + h.item_size());
  }
  out.n = static_cast<int>(labels.size());
  out.set_labels(std::move(labels));
  return out;
}

struct Batch {
  Tensor x;                 // B x C x H x W
  std::vector<int> labels;  // empty when dropped
};

// Deterministic batching: Fisher-Yates permutation seeded by (seed, epoch),
// last partial batch included. Augmentation (flip + pad-4-crop) applies only
// when the handle requests it and the stream is constructed for training.
class BatchStream {
 public:
  BatchStream(const DatasetHandle& h, int batch_size, std::uint64_t shuffle_seed, int epoch,
              bool drop_labels, bool shuffle, bool apply_augment)
      : h_(h),
        batch_(batch_size),
        drop_labels_(drop_labels),
        augment_(apply_augment && h.augment),
        aug_seed_(Rng::mix(shuffle_seed, 0x617567, static_cast<std::uint64_t>(epoch))) {
    if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
    order_.resize(static_cast<size_t>(h.n));
    for (int i = 0; i < h.n; ++i) order_[static_cast<size_t>(i)] = i;
    if (shuffle) {
      Rng rng(Rng::mix(shuffle_seed, static_cast<std::uint64_t>(epoch)));
      for (int i = h.n - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
        std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
      }
    }
  }

  bool next(Batch& out) {
    if (pos_ >= h_.n) return false;
    int b = std::min(batch_, h_.n - pos_);
    out.x = Tensor::zeros({b, h_.channels, h_.height, h_.width});
    out.labels.clear();
    for (int i = 0; i < b; ++i) {
      int idx = order_[static_cast<size_t>(pos_ + i)];
      float* dst = out.x.data.data() + static_cast<std::int64_t>(i) * h_.item_size();
      materialize(idx, dst);
      if (!drop_labels_) out.labels.push_back(h_.label(idx));
    }
    pos_ += b;
    return true;
  }

  const std::vector<int>& order() const { return order_; }

 private:
  void materialize(int idx, float* dst) const {
    const float* src = h_.image(idx);
    int C = h_.channels, H = h_.height, W = h_.width;
    if (!augment_) {
      std::copy(src, src + h_.item_size(), dst);
      return;
    }
    Rng rng(Rng::mix(aug_seed_, static_cast<std::uint64_t>(idx)));
    bool flip = rng.uniform_int(2) == 1;
    int dy = static_cast<int>(rng.uniform_int(9)) - 4;  // pad-4 crop offset
    int dx = static_cast<int>(rng.uniform_int(9)) - 4;
    for (int c = 0; c < C; ++c) {
      const float* sp = src + static_cast<std::int64_t>(c) * H * W;
      float* dp = dst + static_cast<std::int64_t>(c) * H * W;
      for (int y = 0; y < H; ++y) {
        int sy = y + dy;
        for (int x = 0; x < W; ++x) {
          int sx = (flip ? W - 1 - x : x) + dx;
          dp[y * W + x] =
              (sy >= 0 && sy < H && sx >= 0 && sx < W) ? sp[sy * W + sx] : 0.0f;
        }
      }
    }
  }

  const DatasetHandle& h_;
  int batch_;
  bool drop_labels_;
  bool augment_;
  std::uint64_t aug_seed_;
  std::vector<int> order_;
  int pos_ = 0;
};

inline BatchStream batches(const DatasetHandle& h, int batch_size, std::uint64_t shuffle_seed,
                           int epoch = 0, bool drop_labels = false, bool shuffle = true,
                           bool apply_augment = false) {
  return BatchStream(h, batch_size, shuffle_seed, epoch, drop_labels, shuffle, apply_augment);
}

}  // namespace faqd
