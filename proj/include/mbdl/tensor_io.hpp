#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mbdl/tensor.hpp"

namespace mbdl {

// Binary layout: "MBDLTNSR", u32 rank, rank x u64 extents, then little-endian f64 payload.
inline constexpr char kTensorMagic[8] = {'M', 'B', 'D', 'L', 'T', 'N', 'S', 'R'};

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

/// One row per trailing-dimension slice, 17 significant digits, no header.
void write_tensor_csv(std::ostream& out, const Tensor& t);
void write_tensor_csv(const std::filesystem::path& path, const Tensor& t);

/// %.17g.
std::string format_double(double v);

}  // namespace mbdl
