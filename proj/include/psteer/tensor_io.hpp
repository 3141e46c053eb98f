#pragma once

#include "psteer/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace psteer {

// Binary feature-map container, bit-exact across round-trips:
//   magic "P2AF" | version u16 = 1 | rank u16 | dims u32 each | payload f64
// All integers and payload doubles are little-endian; payload is row-major.
void write_feature_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_feature_file(const std::filesystem::path& path);

// In-memory codec used by the file functions and by round-trip tests.
std::vector<unsigned char> encode_feature(const Tensor& t);
Tensor decode_feature(const std::vector<unsigned char>& bytes);

} // namespace psteer
