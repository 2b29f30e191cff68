#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "micl/tensor.hpp"

namespace micl {

// Binary tensor container, bit-exact:
//
//   bytes 0..7   magic "MICLTEN1"
//   u32 LE       tensor count N
//   N records:
//     u32 LE     name length n, then n bytes of UTF-8 name
//     u32 LE     rank r, then r x u64 LE extents
//     f64 LE     row-major values, product(extents) of them
//
// No padding anywhere; readers reject unknown magic and truncated files.
void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, const Tensor*>>& tensors);

std::vector<std::pair<std::string, Tensor>> read_tensor_file(const std::filesystem::path& path);

}  // namespace micl
