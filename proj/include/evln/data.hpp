#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "evln/tensor.hpp"

namespace evln {

/// Labelled images with disjoint train/test index partitions.
struct Dataset {
  Tensor inputs = Tensor::zeros({0, 1, 0, 0});  // [M x C x H x W]
  std::vector<std::size_t> labels;               // in [0, classes)
  std::size_t classes = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return inputs.dim(1); }
  std::size_t height() const { return inputs.dim(2); }
  std::size_t width() const { return inputs.dim(3); }
  std::vector<std::size_t> class_counts() const;

  // Gathers samples into a [k x C x H x W] tensor.
  Tensor gather(std::span<const std::size_t> indices) const;

  // Throws DataError on out-of-range labels, overlapping or out-of-range
  // partitions, or a class without samples.
  void validate() const;
};

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t samples_per_class = 250;
  std::size_t image_size = 16;
  double noise = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Oriented sinusoidal gratings. Class k uses orientation pi*k/classes and
/// frequency 2 + (k mod 4) cycles per image side:
///   pixel(i, j) = 0.5 + 0.5 sin(2 pi f_k (i cos t_k + j sin t_k) / H) + noise
/// with i the row and j the column index. Samples are stored class-major;
/// the first floor(0.8 * samples_per_class) of each class are train, the
/// remainder test.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Reads an IDX image file (magic 0x00000803, [M x H x W] unsigned bytes)
/// and an IDX label file (magic 0x00000801). Pixels are scaled by 1/255.
/// Every sample lands in the train partition.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

/// Writes single-channel inputs as IDX bytes (round(255 * x), clamped).
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

/// Concatenates two datasets, the first becoming train and the second test.
Dataset combine_train_test(const Dataset& train, const Dataset& test);

/// Re-partitions every sample: per class, the first floor(fraction * count)
/// in storage order are train and the rest test.
Dataset split_per_class(const Dataset& ds, double train_fraction);

/// Zero-pads height and width symmetrically (extra row/column at the
/// bottom/right) up to the next multiple of m.
Dataset pad_to_multiple(const Dataset& ds, std::size_t m);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Per-channel standardisation with train-split statistics (population
/// std), applied to every sample. Zero std raises DataError.
std::pair<Dataset, NormStats> normalize(const Dataset& ds);

/// Ordered class-incremental split.
struct TaskSequence {
  std::vector<std::vector<std::size_t>> tasks;  // class ids per task
  std::vector<std::vector<std::size_t>> train_by_class;
  std::vector<std::vector<std::size_t>> test_by_class;

  std::size_t size() const { return tasks.size(); }
  // Class ids of tasks [0, t) in order: the unified-head column order.
  std::vector<std::size_t> classes_before(std::size_t t) const;
};

/// Shuffles the class ids with Rng(shuffle_seed) and cuts them into chunks
/// of classes_per_task. When the count does not divide evenly the final
/// task absorbs the remainder (10 classes by 3 -> 3, 3, 4).
TaskSequence make_task_sequence(const Dataset& ds, std::size_t classes_per_task,
                                std::uint64_t shuffle_seed);
std::vector<std::vector<std::size_t>> partition_classes(std::size_t classes,
                                                        std::size_t classes_per_task,
                                                        std::uint64_t shuffle_seed);

}  // namespace evln
