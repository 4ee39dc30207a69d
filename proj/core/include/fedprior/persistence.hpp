#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedprior/numerics/param_set.hpp"
#include "fedprior/numerics/tensor.hpp"

/// Little-endian binary tensor files ("FVT1") and parameter containers.
///
/// Tensor layout: "FVT1" | version u8 = 1 | dtype u8 (1 real, 2 complex) |
/// ndim u8 | reserved u8 = 0 | ndim x u32 dims | f64 payload, row-major.
/// For complex tensors the dims omit the trailing interleave axis.
///
/// Container layout: u32 entry count, then per entry u16 path length, path
/// bytes, embedded tensor. Paths are strictly increasing.
namespace fedprior::persist {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kDtypeReal = 1;
inline constexpr std::uint8_t kDtypeComplex = 2;

Bytes encode_tensor(const Tensor& t);
/// Decodes one tensor starting at `offset`, advancing it past the payload.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

Bytes encode_paramset(const ParamSet& p);
ParamSet decode_paramset(std::span<const std::uint8_t> bytes);

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);
void save_paramset(const ParamSet& p, const std::filesystem::path& path);
ParamSet load_paramset(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex64(std::uint64_t v);

Bytes read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename, creating parent directories.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

/// RFC-4180 field quoting.
std::string csv_field(const std::string& s);
std::string csv_row(const std::vector<std::string>& fields);
/// Shortest decimal that round-trips the double.
std::string format_double(double v);

namespace detail {
/// Host byte orders used to exercise the encoder independently of the build
/// machine: `big` copies native-order bytes as a big-endian host would see
/// them and swaps them into little-endian.
enum class HostOrder { little, big };
Bytes encode_tensor_as(const Tensor& t, HostOrder host);
}  // namespace detail

}  // namespace fedprior::persist
