// SPDX-License-Identifier: Apache-2.0

#include "tva/tensor_file.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>

namespace tva {

namespace {

constexpr std::string_view kMagic = "TVAT";
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::string& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(std::string_view bytes, const std::string& name) : bytes_(bytes), name_(name) {}

    template <typename U>
    U take(const char* field) {
        if (bytes_.size() - pos_ < sizeof(U)) {
            throw TensorFormatError(name_ + ": truncated while reading " + field);
        }
        U value = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return value;
    }

    std::string_view rest() const { return bytes_.substr(pos_); }
    void skip(std::size_t n) { pos_ += n; }

private:
    std::string_view bytes_;
    const std::string& name_;
    std::size_t pos_ = 0;
};

}  // namespace

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::f32: return 4;
        case DType::f64: return 8;
    }
    throw TensorFormatError("unknown dtype code " + std::to_string(static_cast<int>(dtype)));
}

std::string encode_tensor(const Shape& dims, std::span<const double> values, DType dtype) {
    if (shape_size(dims) != values.size()) {
        throw ShapeError("encode_tensor: " + std::to_string(values.size()) + " values for dims " + shape_to_string(dims));
    }
    std::string out(kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put<std::uint64_t>(out, d);
    out.reserve(out.size() + values.size() * dtype_size(dtype));
    for (double v : values) {
        if (dtype == DType::f32) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        else put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

Tensor decode_tensor(std::string_view bytes, const std::string& name) {
    if (bytes.substr(0, kMagic.size()) != kMagic) throw TensorFormatError(name + ": bad magic (expected TVAT)");
    Reader in(bytes, name);
    in.skip(kMagic.size());
    const auto version = in.take<std::uint32_t>("version");
    if (version != kVersion) throw TensorFormatError(name + ": unsupported version " + std::to_string(version));
    const auto code = in.take<std::uint8_t>("dtype");
    if (code != 1 && code != 2) throw TensorFormatError(name + ": unknown dtype code " + std::to_string(code));
    Tensor t;
    t.dtype = static_cast<DType>(code);
    const auto ndim = in.take<std::uint32_t>("ndim");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const auto d = in.take<std::uint64_t>("dims");
        if (d != 0 && count > std::numeric_limits<std::size_t>::max() / d) {
            throw TensorFormatError(name + ": dims overflow");
        }
        count *= d;
        t.dims.push_back(d);
    }
    const std::size_t width = dtype_size(t.dtype);
    if (in.rest().size() != count * width) {
        throw TensorFormatError(name + ": payload holds " + std::to_string(in.rest().size()) + " bytes, dims " +
                                shape_to_string(t.dims) + " need " + std::to_string(count * width));
    }
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (t.dtype == DType::f32) t.values[i] = std::bit_cast<float>(in.take<std::uint32_t>("payload"));
        else t.values[i] = std::bit_cast<double>(in.take<std::uint64_t>("payload"));
    }
    return t;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Shape& dims, std::span<const double> values, DType dtype) {
    write_file(path, encode_tensor(dims, values, dtype));
}

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path), path.string()); }

}  // namespace tva
