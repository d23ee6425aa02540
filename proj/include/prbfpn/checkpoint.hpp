// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container, little-endian throughout:
//   "PRBF" | version u32 | count u32 |
//   count x ( name_len u16 | name utf-8 | rank u8 | dims u32[rank] | f32[prod(dims)] )
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/optim.hpp"

namespace prbfpn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

/// Written to a temporary file and renamed into place, so an interrupted
/// write never clobbers the previous file.
void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

template <typename T>
std::vector<CheckpointEntry> to_entries(std::span<const Parameter<T>> params);

template <typename T>
void save_parameters(const std::filesystem::path& path, std::span<const Parameter<T>> params);

/// Throws CheckpointMismatch listing every missing, unexpected or reshaped
/// parameter name when the file does not describe `params` exactly.
template <typename T>
void load_parameters(const std::filesystem::path& path, std::span<Parameter<T>> params);

template <typename T>
void assign_entries(std::span<const CheckpointEntry> entries, std::span<Parameter<T>> params);

}  // namespace prbfpn
