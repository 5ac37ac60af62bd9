#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "evln/data.hpp"
#include "evln/engine.hpp"

namespace evln {

enum class DataSource { synthetic, idx };

/// Every tunable of a run as one flat key set.
///
/// File format: one `key = value` per line; `#` starts a comment; blank
/// lines are ignored; booleans are true/false/1/0; lists are comma
/// separated. Unknown keys, duplicate keys and out-of-range values raise
/// ConfigError naming the key.
struct RunConfig {
  std::uint64_t seed = 0;
  // Class-order shuffle; follows seed unless set explicitly.
  std::optional<std::uint64_t> shuffle_seed;

  DataSource source = DataSource::synthetic;
  SyntheticSpec synthetic{10, 250, 16, 0.15, 0};
  std::string idx_train_images, idx_train_labels;
  std::string idx_test_images, idx_test_labels;  // optional pair
  bool normalize = true;

  std::size_t classes_per_task = 2;
  std::size_t buffer_capacity = 100;

  double tau = 2.0;
  double lambda = 0.5;
  std::size_t t_a = 10;
  AleatoricForm aleatoric_form = AleatoricForm::likelihood;
  CeScope ce_scope = CeScope::unified;

  double dropout_rate = 0.1;
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t attn_key_divisor = 2;

  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;

  LossSwitches use;

  bool save_attention = false;
  bool save_checkpoint = false;

  std::uint64_t effective_shuffle_seed() const { return shuffle_seed.value_or(seed); }

  // Applies one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  // Re-checks cross-field bounds.
  void validate() const;

  // Canonical key -> value listing, in a fixed key order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string to_text() const;

  EngineConfig engine_config(const Dataset& ds) const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Dataset described by the config, normalised when requested.
Dataset build_dataset(const RunConfig& cfg);

}  // namespace evln
