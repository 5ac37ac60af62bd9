#pragma once

#include <filesystem>
#include <iosfwd>

#include "evln/nn.hpp"

namespace evln {

/// Binary parameter container, all integers little-endian:
///   "EVLN" | version u32 | count u64
///   per entry: name_len u16 | name bytes (UTF-8) | rank u8 |
///              extents u64 x rank | data f64 x numel
inline constexpr std::uint32_t kContainerVersion = 1;

void write_tensors(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

}  // namespace evln
