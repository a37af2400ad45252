#pragma once

#include <iosfwd>
#include <string>

#include "cal/binary_io.hpp"
#include "cal/tensor.hpp"

namespace cal {

// Flat tensor container: magic "CALT", version byte (1), rank as a 64-bit
// little-endian unsigned int, the dims likewise, then the data as 64-bit
// little-endian IEEE-754 doubles, row-major.
inline constexpr char kTensorMagic[4] = {'C', 'A', 'L', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

void save_tensor(BinaryWriter& w, const Tensor& t);
Tensor load_tensor(BinaryReader& r);

void save_tensor(std::ostream& out, const Tensor& t);
Tensor load_tensor(std::istream& in);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace cal
