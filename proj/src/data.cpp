#include "evln/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "evln/errors.hpp"
#include "evln/rng.hpp"

namespace evln {

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t y : labels) {
    if (y < classes) ++counts[y];
  }
  return counts;
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  NoGradGuard guard;
  return take_rows(inputs, indices);
}

void Dataset::validate() const {
  if (inputs.rank() != 4 || inputs.dim(0) != labels.size()) {
    throw DataError("dataset inputs " + shape_str(inputs.shape()) + " do not match " +
                    std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " of sample " +
                      std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  std::vector<char> seen(labels.size(), 0);
  for (const auto* part : {&train, &test}) {
    for (std::size_t i : *part) {
      if (i >= labels.size()) throw DataError("partition index out of range");
      if (seen[i]) throw DataError("sample " + std::to_string(i) + " listed twice");
      seen[i] = 1;
    }
  }
  const auto counts = class_counts();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) throw DataError("class " + std::to_string(k) + " has no samples");
  }
}

void SyntheticSpec::validate() const {
  if (classes < 2) throw ParameterError("synthetic spec needs >= 2 classes");
  if (image_size < 8) throw ParameterError("synthetic image size must be >= 8");
  if (samples_per_class < 2) throw ParameterError("synthetic spec needs >= 2 samples per class");
  if (!(noise >= 0.0)) throw ParameterError("synthetic noise must be >= 0");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t h = spec.image_size;
  const std::size_t m = spec.classes * spec.samples_per_class;
  const std::size_t n_train = spec.samples_per_class * 8 / 10;
  Rng rng(spec.seed);
  std::vector<double> pixels(m * h * h);
  Dataset ds;
  ds.classes = spec.classes;
  ds.labels.resize(m);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const double theta = std::numbers::pi * static_cast<double>(k) /
                         static_cast<double>(spec.classes);
    const double freq = 2.0 + static_cast<double>(k % 4);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const std::size_t idx = k * spec.samples_per_class + s;
      ds.labels[idx] = k;
      (s < n_train ? ds.train : ds.test).push_back(idx);
      double* img = pixels.data() + idx * h * h;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < h; ++j) {
          const double phase = 2.0 * std::numbers::pi * freq *
                               (static_cast<double>(i) * ct + static_cast<double>(j) * st) /
                               static_cast<double>(h);
          double v = 0.5 + 0.5 * std::sin(phase);
          if (spec.noise > 0.0) v += spec.noise * rng.normal();
          img[i * h + j] = v;
        }
      }
    }
  }
  ds.inputs = Tensor({m, 1, h, h}, std::move(pixels));
  return ds;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string name)
      : bytes_(bytes), name_(std::move(name)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }

  const unsigned char* take(std::size_t n) {
    need(n);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(name_ + ": truncated IDX file (need " + std::to_string(n) +
                        " more bytes at offset " + std::to_string(pos_) + ")");
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto image_bytes = read_file(images_path);
  const auto label_bytes = read_file(labels_path);

  ByteReader img(image_bytes, images_path.string());
  const std::uint32_t img_magic = img.u32();
  if (img_magic != 0x00000803) {
    throw FormatError(images_path.string() + ": bad IDX image magic " + hex(img_magic));
  }
  const std::size_t m = img.u32(), h = img.u32(), w = img.u32();
  const unsigned char* px = img.take(m * h * w);

  ByteReader lab(label_bytes, labels_path.string());
  const std::uint32_t lab_magic = lab.u32();
  if (lab_magic != 0x00000801) {
    throw FormatError(labels_path.string() + ": bad IDX label magic " + hex(lab_magic));
  }
  const std::size_t count = lab.u32();
  if (count != m) {
    throw DataError("IDX count mismatch: " + std::to_string(m) + " images, " +
                    std::to_string(count) + " labels");
  }
  const unsigned char* ly = lab.take(count);

  Dataset ds;
  std::vector<double> pixels(m * h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = px[i] / 255.0;
  ds.inputs = Tensor({m, 1, h, w}, std::move(pixels));
  ds.labels.assign(ly, ly + count);
  ds.classes = ds.labels.empty()
                   ? 0
                   : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  ds.train.resize(m);
  std::iota(ds.train.begin(), ds.train.end(), std::size_t{0});
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (ds.inputs.rank() != 4 || ds.channels() != 1) {
    throw DataError("IDX output needs single-channel inputs, got " +
                    shape_str(ds.inputs.shape()));
  }
  {
    std::ofstream out(images_path, std::ios::binary);
    if (!out) throw IoError("cannot open " + images_path.string() + " for writing");
    put_u32(out, 0x00000803);
    put_u32(out, static_cast<std::uint32_t>(ds.size()));
    put_u32(out, static_cast<std::uint32_t>(ds.height()));
    put_u32(out, static_cast<std::uint32_t>(ds.width()));
    std::vector<char> bytes(ds.inputs.numel());
    auto d = ds.inputs.data();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      const double v = std::clamp(std::round(d[i] * 255.0), 0.0, 255.0);
      bytes[i] = static_cast<char>(static_cast<unsigned char>(v));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + images_path.string());
  }
  std::ofstream out(labels_path, std::ios::binary);
  if (!out) throw IoError("cannot open " + labels_path.string() + " for writing");
  put_u32(out, 0x00000801);
  put_u32(out, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t y : ds.labels) {
    if (y > 255) throw DataError("label " + std::to_string(y) + " does not fit a byte");
    out.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
  if (!out) throw IoError("failed writing " + labels_path.string());
}

Dataset combine_train_test(const Dataset& train, const Dataset& test) {
  if (train.inputs.rank() != 4 || test.inputs.rank() != 4 ||
      std::vector(train.inputs.shape().begin() + 1, train.inputs.shape().end()) !=
          std::vector(test.inputs.shape().begin() + 1, test.inputs.shape().end())) {
    throw DataError("train/test image shapes differ: " + shape_str(train.inputs.shape()) +
                    " vs " + shape_str(test.inputs.shape()));
  }
  Dataset ds;
  ds.inputs = concat(train.inputs, test.inputs, 0);
  ds.labels = train.labels;
  ds.labels.insert(ds.labels.end(), test.labels.begin(), test.labels.end());
  ds.classes = std::max(train.classes, test.classes);
  ds.train.resize(train.size());
  std::iota(ds.train.begin(), ds.train.end(), std::size_t{0});
  ds.test.resize(test.size());
  std::iota(ds.test.begin(), ds.test.end(), train.size());
  return ds;
}

Dataset split_per_class(const Dataset& ds, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ParameterError("train fraction must lie in (0, 1)");
  }
  Dataset out = ds;
  out.train.clear();
  out.test.clear();
  const auto counts = ds.class_counts();
  std::vector<std::size_t> taken(ds.classes, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t y = ds.labels[i];
    const auto quota = static_cast<std::size_t>(
        std::floor(train_fraction * static_cast<double>(counts[y])));
    (taken[y]++ < quota ? out.train : out.test).push_back(i);
  }
  return out;
}

Dataset pad_to_multiple(const Dataset& ds, std::size_t m) {
  if (m == 0) throw ParameterError("pad multiple must be >= 1");
  const std::size_t h = ds.height(), w = ds.width(), c = ds.channels(), n = ds.size();
  const std::size_t nh = (h + m - 1) / m * m, nw = (w + m - 1) / m * m;
  if (nh == h && nw == w) return ds;
  const std::size_t top = (nh - h) / 2, left = (nw - w) / 2;
  std::vector<double> out(n * c * nh * nw, 0.0);
  auto src = ds.inputs.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        out[(p * nh + i + top) * nw + j + left] = src[(p * h + i) * w + j];
      }
    }
  }
  Dataset r = ds;
  r.inputs = Tensor({n, c, nh, nw}, std::move(out));
  return r;
}

std::pair<Dataset, NormStats> normalize(const Dataset& ds) {
  const std::size_t c = ds.channels();
  const std::size_t plane = ds.height() * ds.width();
  auto d = ds.inputs.data();
  NormStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(ds.train.size() * plane);
  if (count == 0) throw DataError("normalize needs a non-empty train split");
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i : ds.train) {
      const double* p = d.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) acc += p[k];
    }
    const double mu = acc / count;
    double var = 0.0;
    for (std::size_t i : ds.train) {
      const double* p = d.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) var += (p[k] - mu) * (p[k] - mu);
    }
    const double sd = std::sqrt(var / count);
    if (!(sd > 0.0)) {
      throw DataError("channel " + std::to_string(ch) + " has zero std in the train split");
    }
    stats.mean[ch] = mu;
    stats.std[ch] = sd;
  }
  Dataset out = ds;
  std::vector<double> pixels(d.begin(), d.end());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = pixels.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - stats.mean[ch]) / stats.std[ch];
    }
  }
  out.inputs = Tensor(ds.inputs.shape(), std::move(pixels));
  return {std::move(out), std::move(stats)};
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> TaskSequence::classes_before(std::size_t t) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < t && k < tasks.size(); ++k) {
    out.insert(out.end(), tasks[k].begin(), tasks[k].end());
  }
  return out;
}

std::vector<std::vector<std::size_t>> partition_classes(std::size_t classes,
                                                        std::size_t classes_per_task,
                                                        std::uint64_t shuffle_seed) {
  if (classes_per_task < 1) throw ParameterError("classes_per_task must be >= 1");
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(shuffle_seed);
  shuffle(std::span<std::size_t>(order), rng);
  const std::size_t n_tasks = std::max<std::size_t>(1, classes / classes_per_task);
  std::vector<std::vector<std::size_t>> tasks(n_tasks);
  for (std::size_t i = 0; i < classes; ++i) {
    tasks[std::min(i / classes_per_task, n_tasks - 1)].push_back(order[i]);
  }
  return tasks;
}

TaskSequence make_task_sequence(const Dataset& ds, std::size_t classes_per_task,
                                std::uint64_t shuffle_seed) {
  TaskSequence seq;
  seq.tasks = partition_classes(ds.classes, classes_per_task, shuffle_seed);
  seq.train_by_class.assign(ds.classes, {});
  seq.test_by_class.assign(ds.classes, {});
  for (std::size_t i : ds.train) seq.train_by_class[ds.labels[i]].push_back(i);
  for (std::size_t i : ds.test) seq.test_by_class[ds.labels[i]].push_back(i);
  return seq;
}

}  // namespace evln
