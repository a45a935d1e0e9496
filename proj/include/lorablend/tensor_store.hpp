#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lorablend {

enum class DType { F16, BF16, F32, F64 };

std::size_t dtype_width(DType dtype);
// Container spelling: "F16", "BF16", "F32", "F64".
std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);
// Wider mantissa wins; F16 and BF16 are both 2 bytes, F16 ranks above BF16.
DType widest(DType a, DType b);

using Shape = std::vector<std::uint64_t>;

// Element count of a shape, or nullopt when the product does not fit in 63 bits.
std::optional<std::uint64_t> checked_numel(const Shape& shape);

// Named, shaped buffer of little-endian row-major elements. Immutable once
// constructed; equality is bit-exact.
class Tensor {
public:
    Tensor(std::string name, DType dtype, Shape shape, std::vector<std::byte> data);

    // Rounds every value to `dtype` with round-to-nearest-even.
    static Tensor from_f64(std::string name, DType dtype, Shape shape, std::span<const double> values);

    const std::string& name() const noexcept { return name_; }
    DType dtype() const noexcept { return dtype_; }
    const Shape& shape() const noexcept { return shape_; }
    std::span<const std::byte> bytes() const noexcept { return data_; }
    std::size_t numel() const noexcept { return data_.size() / dtype_width(dtype_); }

    // Widening to binary64 is exact for every supported dtype.
    std::vector<double> to_f64() const;
    Tensor renamed(std::string name) const;

    bool operator==(const Tensor&) const = default;

private:
    std::string name_;
    DType dtype_;
    Shape shape_;
    std::vector<std::byte> data_;
};

// Lossy when narrowing (round-to-nearest-even, overflow to infinity); exact
// when widening. Name and shape are preserved.
Tensor cast_tensor(const Tensor& t, DType target);

class TensorMap {
public:
    using Metadata = std::map<std::string, std::string>;

    TensorMap() = default;

    // Throws InvalidParameter on a duplicate or reserved name.
    void insert(Tensor t);
    const Tensor* find(std::string_view name) const;
    const Tensor& at(std::string_view name) const;
    bool contains(std::string_view name) const { return find(name) != nullptr; }

    // Ordered by name.
    const std::map<std::string, Tensor, std::less<>>& tensors() const noexcept { return tensors_; }
    std::size_t size() const noexcept { return tensors_.size(); }
    bool empty() const noexcept { return tensors_.empty(); }

    Metadata& metadata() noexcept { return metadata_; }
    const Metadata& metadata() const noexcept { return metadata_; }

    bool operator==(const TensorMap&) const = default;

private:
    std::map<std::string, Tensor, std::less<>> tensors_;
    Metadata metadata_;
};

// Key reserved for the string map in the container header.
inline constexpr std::string_view kMetadataKey = "__metadata__";

// Container layout: u64 little-endian header length N, N bytes of JSON
// header (space padded to a multiple of 8), then the raw data buffer with
// tensors stored in lexicographic name order and no gaps.
TensorMap parse_container(std::span<const std::byte> file);
std::vector<std::byte> serialize_container(const TensorMap& map);

TensorMap read_container(const std::filesystem::path& path);
void write_container(const std::filesystem::path& path, const TensorMap& map);

namespace detail {
std::uint16_t f64_to_f16_bits(double v);
double f16_bits_to_f64(std::uint16_t bits);
std::uint16_t f64_to_bf16_bits(double v);
double bf16_bits_to_f64(std::uint16_t bits);
} // namespace detail

} // namespace lorablend
