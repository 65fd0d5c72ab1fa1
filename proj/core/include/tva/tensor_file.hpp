// SPDX-License-Identifier: Apache-2.0
//
// "TVAT" binary tensors: magic, u32 version (1), u8 dtype (1 = f32,
// 2 = f64), u32 ndim, ndim x u64 dims, row-major payload. All multi-byte
// fields are little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tva/diffarray.hpp"

namespace tva {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

class TensorFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Tensor {
    Shape dims;
    DType dtype = DType::f64;
    std::vector<double> values;
};

std::size_t dtype_size(DType dtype);

/// Serialized bytes. f32 payloads round each value to the nearest float.
std::string encode_tensor(const Shape& dims, std::span<const double> values, DType dtype);
/// Parses bytes; `name` appears in error messages.
Tensor decode_tensor(std::string_view bytes, const std::string& name = "tensor");

void write_tensor(const std::filesystem::path& path, const Shape& dims, std::span<const double> values, DType dtype);
Tensor read_tensor(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace tva
