#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lkconv/tensor.hpp"

namespace lkc {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

DType dtype_of_any(const AnyTensor& t);
const Shape& shape_of_any(const AnyTensor& t);

// VOL3: "VOL3" | version=1 | dtype | ndim | 4 zero bytes | ndim x u64 LE dims | raw LE data (C order).
void write_vol3(const std::filesystem::path& path, const AnyTensor& t);
AnyTensor read_vol3_any(const std::filesystem::path& path);

template <typename T>
void write_vol3(const std::filesystem::path& path, const Tensor<T>& t) {
  write_vol3(path, AnyTensor(t));
}

/// Reads a VOL3 file whose dtype must be T.
template <typename T>
Tensor<T> read_vol3(const std::filesystem::path& path) {
  AnyTensor any = read_vol3_any(path);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw IoError(path.string() + ": dtype is " + dtype_name(dtype_of_any(any)) + ", expected " +
                dtype_name(dtype_of<T>::value));
}

/// Ordered table of named tensors, serialized as
/// "CKPT" | version=1 | u32 count | { u16 name_len | name | dtype | ndim | u64 dims | raw LE data }*.
class Checkpoint {
 public:
  void put(std::string name, AnyTensor value);
  bool contains(std::string_view name) const;
  const AnyTensor& get_any(std::string_view name) const;

  template <typename T>
  const Tensor<T>& get(std::string_view name) const {
    const AnyTensor& any = get_any(name);
    if (auto* t = std::get_if<Tensor<T>>(&any)) return *t;
    throw IoError("checkpoint entry '" + std::string(name) + "' has dtype " + dtype_name(dtype_of_any(any)));
  }

  void put_text(std::string name, std::string_view text);
  std::string get_text(std::string_view name) const;

  const std::vector<std::pair<std::string, AnyTensor>>& entries() const noexcept { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, AnyTensor>> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace lkc
