#include "lkconv/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace lkc {

namespace {

constexpr std::uint8_t kVol3Version = 1;
constexpr std::uint8_t kCkptVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }

  template <typename U>
  void le(U v) {
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    bytes(raw, sizeof(U));
  }

  template <typename T>
  void payload(const Tensor<T>& t) {
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
      bytes(t.ptr(), t.size() * sizeof(T));
    } else {
      for (auto x : t.data()) le(x);
    }
  }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string context) : data_(data), ctx_(std::move(context)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(ctx_ + ": truncated");
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }

  template <typename U>
  U le() {
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, take(sizeof(U)), sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }

  template <typename T>
  Tensor<T> payload(Shape shape) {
    Tensor<T> t(std::move(shape));
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
      std::memcpy(t.ptr(), take(t.size() * sizeof(T)), t.size() * sizeof(T));
    } else {
      for (auto& x : t.data()) x = le<T>();
    }
    return t;
  }

  AnyTensor tensor(std::uint8_t dtype, Shape shape) {
    switch (static_cast<DType>(dtype)) {
      case DType::f32: return payload<float>(std::move(shape));
      case DType::f64: return payload<double>(std::move(shape));
      case DType::u8: return payload<std::uint8_t>(std::move(shape));
    }
    throw IoError(ctx_ + ": unknown dtype byte " + std::to_string(dtype));
  }

  Shape dims(std::size_t ndim) {
    Shape s(ndim);
    for (auto& d : s) {
      const auto v = le<std::uint64_t>();
      if (v == 0 || v > (1ull << 40)) throw IoError(ctx_ + ": bad dimension " + std::to_string(v));
      d = static_cast<std::int64_t>(v);
    }
    if (s.empty()) throw IoError(ctx_ + ": zero-rank tensor");
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string ctx_;
};

void write_dims(Writer& w, const Shape& s) {
  for (auto d : s) w.le<std::uint64_t>(static_cast<std::uint64_t>(d));
}

void write_payload(Writer& w, const AnyTensor& t) {
  std::visit([&](const auto& x) { w.payload(x); }, t);
}

}  // namespace

DType dtype_of_any(const AnyTensor& t) {
  return std::visit([](const auto& x) { return std::decay_t<decltype(x)>::dtype; }, t);
}

const Shape& shape_of_any(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_vol3(const std::filesystem::path& path, const AnyTensor& t) {
  const Shape& s = shape_of_any(t);
  if (s.size() > 255) throw ShapeError("VOL3 supports at most 255 axes");
  Writer w;
  w.bytes("VOL3", 4);
  w.u8(kVol3Version);
  w.u8(static_cast<std::uint8_t>(dtype_of_any(t)));
  w.u8(static_cast<std::uint8_t>(s.size()));
  w.le<std::uint32_t>(0);
  write_dims(w, s);
  write_payload(w, t);
  write_file_bytes(path, w.take());
}

AnyTensor read_vol3_any(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Reader r(bytes, path.string());
  if (std::memcmp(r.take(4), "VOL3", 4) != 0) throw IoError(path.string() + ": bad VOL3 magic");
  if (const auto v = r.u8(); v != kVol3Version) throw IoError(path.string() + ": unsupported VOL3 version " + std::to_string(v));
  const auto dtype = r.u8();
  const auto ndim = r.u8();
  if (r.le<std::uint32_t>() != 0) throw IoError(path.string() + ": reserved bytes must be zero");
  AnyTensor t = r.tensor(dtype, r.dims(ndim));
  if (!r.done()) throw IoError(path.string() + ": trailing bytes after VOL3 payload");
  return t;
}

void Checkpoint::put(std::string name, AnyTensor value) {
  if (name.size() > 0xFFFF) throw IoError("checkpoint entry name too long");
  for (auto& [n, v] : entries_) {
    if (n == name) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(name), std::move(value));
}

bool Checkpoint::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const AnyTensor& Checkpoint::get_any(std::string_view name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw IoError("checkpoint has no entry '" + std::string(name) + "'");
}

void Checkpoint::put_text(std::string name, std::string_view text) {
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  if (bytes.empty()) bytes.push_back('\n');
  const auto n = static_cast<std::int64_t>(bytes.size());
  put(std::move(name), Tensor<std::uint8_t>({n}, std::move(bytes)));
}

std::string Checkpoint::get_text(std::string_view name) const {
  const auto& t = get<std::uint8_t>(name);
  return std::string(t.data().begin(), t.data().end());
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.bytes("CKPT", 4);
  w.u8(kCkptVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, t] : entries_) {
    const Shape& s = shape_of_any(t);
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(dtype_of_any(t)));
    w.u8(static_cast<std::uint8_t>(s.size()));
    write_dims(w, s);
    write_payload(w, t);
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  if (std::memcmp(r.take(4), "CKPT", 4) != 0) throw IoError("bad CKPT magic");
  if (const auto v = r.u8(); v != kCkptVersion) throw IoError("unsupported CKPT version " + std::to_string(v));
  const auto count = r.le<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint16_t>();
    const auto* p = r.take(len);
    std::string name(reinterpret_cast<const char*>(p), len);
    const auto dtype = r.u8();
    const auto ndim = r.u8();
    ck.entries_.emplace_back(std::move(name), r.tensor(dtype, r.dims(ndim)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint entries");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  write_file_bytes(path, serialize());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize(bytes);
}

}  // namespace lkc
