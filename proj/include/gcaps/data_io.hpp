#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcaps/tensor.hpp"

namespace gcaps {

using Rng = std::mt19937_64;

enum class Split { Train, Test };

std::string to_string(Split split);

struct Dataset {
  Tensor images;            // [n, channels, height, width], values in [0, 1]
  std::vector<int> labels;  // in [0, num_classes)
  std::size_t num_classes = 10;
  std::string name;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.shape()[1]; }
  std::size_t height() const { return images.shape()[2]; }
  std::size_t width() const { return images.shape()[3]; }
  std::size_t pixels() const { return channels() * height() * width(); }

  void validate() const;
  /// First `limit` samples (all of them when limit is 0 or too large).
  Dataset head(std::size_t limit) const;
};

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };

  IdxError(Kind kind, const std::filesystem::path& file, std::uint64_t offset, const std::string& what);

  Kind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label pair (big-endian headers, unsigned byte payload).
/// Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::string name = "idx", Split split = Split::Train);

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, std::uint32_t count,
                      std::uint32_t rows, std::uint32_t cols);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// Translates one [channels, height, width] image by (dx, dy) with zero fill.
/// Positive dx moves content right, positive dy moves it down.
std::vector<double> shift_image(std::span<const double> image, std::size_t channels, std::size_t height,
                                std::size_t width, int dx, int dy);

/// Random integer translation in [-max_shift, max_shift]^2.
std::vector<double> augment_shift(std::span<const double> image, std::size_t channels, std::size_t height,
                                  std::size_t width, int max_shift, Rng& rng);

struct Batch {
  Tensor images;  // [b, channels, height, width]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset
};

/// Seeded shuffled pass over a dataset; the last partial batch is kept.
/// Train splits are shift-augmented per image when augment_shift > 0.
class BatchIterator {
 public:
  BatchIterator(const Dataset& dataset, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                int augment_shift = 0, std::uint64_t augment_seed = 0);

  std::optional<Batch> next();
  std::size_t num_batches() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* dataset_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int augment_shift_;
  Rng augment_rng_;
};

BatchIterator batches(const Dataset& dataset, std::size_t batch_size, std::uint64_t shuffle_seed,
                      int augment_shift = 0, std::uint64_t augment_seed = 0);

/// Class-indexed bar patterns plus seeded noise; 28x28 single channel.
Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes = 10);

/// Sub-seeds derived from one root seed by fixed role offsets.
enum class SeedRole : std::uint64_t { Init = 1, Shuffle = 1000, Augment = 2000, Synthetic = 3000 };
std::uint64_t derive_seed(std::uint64_t root, SeedRole role, std::uint64_t index = 0);

}  // namespace gcaps
