#include "gcaps/data_io.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gcaps {

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4) throw std::invalid_argument("dataset images must be [n, c, h, w]");
  if (images.shape()[0] != labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(images.shape()[0]) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (double p : images.values()) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("dataset pixel outside [0, 1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw std::invalid_argument("dataset label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::head(std::size_t limit) const {
  if (limit == 0 || limit >= size()) return *this;
  Dataset out;
  const std::size_t px = pixels();
  std::vector<double> v(images.values().begin(), images.values().begin() + static_cast<std::ptrdiff_t>(limit * px));
  out.images = Tensor::from({limit, channels(), height(), width()}, std::move(v));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(limit));
  out.num_classes = num_classes;
  out.name = name;
  out.split = split;
  return out;
}

IdxError::IdxError(Kind kind, const std::filesystem::path& file, std::uint64_t offset, const std::string& what)
    : std::runtime_error(file.string() + " at offset " + std::to_string(offset) + ": " + what),
      kind_(kind),
      offset_(offset) {}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, path, 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw IdxError(IdxError::Kind::Truncated, path, offset, "truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path, std::string name,
                 Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    throw IdxError(IdxError::Kind::BadMagic, images_path, 0,
                   "bad magic " + hex(img_magic) + " (expected " + hex(kIdxImageMagic) + ")");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    throw IdxError(IdxError::Kind::BadMagic, labels_path, 0,
                   "bad magic " + hex(lab_magic) + " (expected " + hex(kIdxLabelMagic) + ")");
  }
  const std::size_t count = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t label_count = read_be32(lab, 4, labels_path);
  constexpr std::size_t kImgHeader = 16;
  constexpr std::size_t kLabHeader = 8;
  if (count == 0 || rows == 0 || cols == 0) {
    throw IdxError(IdxError::Kind::CountMismatch, images_path, 4, "empty image set");
  }
  const std::size_t need = kImgHeader + count * rows * cols;
  if (img.size() < need) {
    throw IdxError(IdxError::Kind::Truncated, images_path, img.size(),
                   "header promises " + std::to_string(count) + " images (" + std::to_string(need) +
                       " bytes) but file has " + std::to_string(img.size()) + " bytes");
  }
  if (lab.size() < kLabHeader + label_count) {
    throw IdxError(IdxError::Kind::Truncated, labels_path, lab.size(),
                   "header promises " + std::to_string(label_count) + " labels but file has " +
                       std::to_string(lab.size() - kLabHeader) + " bytes of payload");
  }
  if (label_count != count) {
    throw IdxError(IdxError::Kind::CountMismatch, labels_path, 4,
                   "label count " + std::to_string(label_count) + " differs from image count " + std::to_string(count) +
                       " in " + images_path.string());
  }

  std::vector<double> pixels(count * rows * cols);
  for (std::size_t k = 0; k < pixels.size(); ++k) pixels[k] = static_cast<double>(img[kImgHeader + k]) / 255.0;
  Dataset ds;
  ds.images = Tensor::from({count, 1, rows, cols}, std::move(pixels));
  ds.labels.resize(count);
  int top = 0;
  for (std::size_t k = 0; k < count; ++k) {
    ds.labels[k] = lab[kLabHeader + k];
    top = std::max(top, ds.labels[k]);
  }
  ds.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(top) + 1);
  ds.name = std::move(name);
  ds.split = split;
  return ds;
}

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, std::uint32_t count,
                      std::uint32_t rows, std::uint32_t cols) {
  if (pixels.size() != std::size_t{count} * rows * cols) throw std::invalid_argument("pixel buffer does not match IDX dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::Io, path, 0, "cannot create file");
  put_be32(out, kIdxImageMagic);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::Io, path, 0, "cannot create file");
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

std::vector<double> shift_image(std::span<const double> image, std::size_t channels, std::size_t height,
                                std::size_t width, int dx, int dy) {
  std::vector<double> out(image.size(), 0.0);
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = image.data() + c * height * width;
    double* dst = out.data() + c * height * width;
    for (long y = 0; y < h; ++y) {
      const long sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (long x = 0; x < w; ++x) {
        const long sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        dst[y * w + x] = src[sy * w + sx];
      }
    }
  }
  return out;
}

std::vector<double> augment_shift(std::span<const double> image, std::size_t channels, std::size_t height,
                                  std::size_t width, int max_shift, Rng& rng) {
  if (max_shift <= 0) return {image.begin(), image.end()};
  std::uniform_int_distribution<int> dist(-max_shift, max_shift);
  const int dx = dist(rng);
  const int dy = dist(rng);
  return shift_image(image, channels, height, width, dx, dy);
}

BatchIterator::BatchIterator(const Dataset& dataset, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                             int augment_shift, std::uint64_t augment_seed)
    : dataset_(&dataset),
      batch_size_(batch_size),
      order_(dataset.size()),
      augment_shift_(dataset.split == Split::Train ? augment_shift : 0),
      augment_rng_(augment_seed) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

std::size_t BatchIterator::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
  const std::size_t px = dataset_->pixels();
  const auto src = dataset_->images.values();
  Batch batch;
  std::vector<double> pixels(count * px);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t idx = order_[cursor_ + k];
    batch.indices.push_back(idx);
    batch.labels.push_back(dataset_->labels[idx]);
    const auto image = src.subspan(idx * px, px);
    if (augment_shift_ > 0) {
      const auto shifted = augment_shift(image, dataset_->channels(), dataset_->height(), dataset_->width(),
                                         augment_shift_, augment_rng_);
      std::copy(shifted.begin(), shifted.end(), pixels.begin() + static_cast<std::ptrdiff_t>(k * px));
    } else {
      std::copy(image.begin(), image.end(), pixels.begin() + static_cast<std::ptrdiff_t>(k * px));
    }
  }
  batch.images = Tensor::from({count, dataset_->channels(), dataset_->height(), dataset_->width()}, std::move(pixels));
  cursor_ += count;
  return batch;
}

BatchIterator batches(const Dataset& dataset, std::size_t batch_size, std::uint64_t shuffle_seed, int augment_shift,
                      std::uint64_t augment_seed) {
  return BatchIterator(dataset, batch_size, shuffle_seed, augment_shift, augment_seed);
}

Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes) {
  constexpr std::size_t kSide = 28;
  if (num_classes == 0 || num_classes > 20) throw std::invalid_argument("synthetic data supports 1..20 classes");
  if (n < num_classes) throw std::invalid_argument("synthetic data needs n >= num_classes");
  Rng rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.1);
  std::uniform_real_distribution<double> ink(0.8, 1.0);
  std::vector<double> pixels(n * kSide * kSide);
  std::vector<int> labels(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t k = s % num_classes;
    labels[s] = static_cast<int>(k);
    // Even classes draw a horizontal bar, odd classes a vertical one, each
    // 2 pixels thick at a class-specific offset.
    const bool horizontal = k % 2 == 0;
    const std::size_t pos = 3 + (k / 2) * 2;
    double* img = pixels.data() + s * kSide * kSide;
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        const std::size_t across = horizontal ? y : x;
        const std::size_t along = horizontal ? x : y;
        const bool on = across >= pos && across < pos + 2 && along >= 4 && along < 24;
        img[y * kSide + x] = on ? ink(rng) : noise(rng);
      }
    }
  }
  Dataset ds;
  ds.images = Tensor::from({n, 1, kSide, kSide}, std::move(pixels));
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  ds.name = "synthetic";
  return ds;
}

std::uint64_t derive_seed(std::uint64_t root, SeedRole role, std::uint64_t index) {
  return root + static_cast<std::uint64_t>(role) + index;
}

}  // namespace gcaps
