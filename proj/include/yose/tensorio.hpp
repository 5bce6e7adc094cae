#pragma once

// YT01 binary tensor container and synthetic (video, mask) generation.
//
// Layout (all integers little-endian):
//   "YT01" | dtype_code:u8 | ndim:u8 | dims: ndim x u64 | payload
// dtype_code: 0 = f32, 1 = f64, 2 = u8.

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "yose/tensor.hpp"

namespace yose {

inline constexpr std::array<char, 4> kTensorMagic = {'Y', 'T', '0', '1'};
inline constexpr std::size_t kMaxTensorRank = 8;

namespace detail {

inline void put_le(std::string& out, const void* src, std::size_t n) {
  const auto* b = static_cast<const char*>(src);
  if constexpr (std::endian::native == std::endian::little) {
    out.append(b, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(b[n - 1 - i]);
  }
}

inline void get_le(const char* src, void* dst, std::size_t n) {
  auto* d = static_cast<char*>(dst);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(d, src, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) d[i] = src[n - 1 - i];
  }
}

inline void validate_header_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > kMaxTensorRank)
    throw std::invalid_argument("tensor rank must be in [1, 8], got " +
                                std::to_string(shape.size()));
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("dims must be >= 1, got " + shape_str(shape));
}

template <class T>
Tensor<T> decode_payload(const Shape& shape, const char* p) {
  std::vector<T> data(shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); ++i) get_le(p + i * sizeof(T), &data[i], sizeof(T));
  return Tensor<T>(shape, std::move(data));
}

}  // namespace detail

// Serialized bytes of a tensor; the exact content save_tensor writes.
template <class T>
std::string encode_tensor(const Tensor<T>& t) {
  detail::validate_header_shape(t.shape());
  std::string out;
  out.reserve(6 + 8 * t.ndim() + t.size() * sizeof(T));
  out.append(kTensorMagic.data(), kTensorMagic.size());
  out.push_back(static_cast<char>(dtype_of<T>()));
  out.push_back(static_cast<char>(t.ndim()));
  for (auto d : t.shape()) {
    const auto d64 = static_cast<std::uint64_t>(d);
    detail::put_le(out, &d64, 8);
  }
  for (const T& v : t.data()) detail::put_le(out, &v, sizeof(T));
  return out;
}

inline AnyTensor decode_tensor(std::string_view bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0)
    throw std::runtime_error("bad magic");
  const auto code = static_cast<std::uint8_t>(bytes[4]);
  if (code > 2) throw std::runtime_error("unsupported dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t ndim = static_cast<std::uint8_t>(bytes[5]);
  if (bytes.size() < 6 + 8 * ndim) throw std::runtime_error("truncated header");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint64_t d = 0;
    detail::get_le(bytes.data() + 6 + 8 * i, &d, 8);
    shape[i] = static_cast<std::size_t>(d);
  }
  detail::validate_header_shape(shape);
  const std::size_t header = 6 + 8 * ndim;
  const std::size_t need = shape_numel(shape) * dtype_size(dtype);
  if (bytes.size() - header < need)
    throw std::runtime_error("truncated payload: need " + std::to_string(need) + " bytes, have " +
                             std::to_string(bytes.size() - header));
  const char* p = bytes.data() + header;
  switch (dtype) {
    case DType::f32: return detail::decode_payload<float>(shape, p);
    case DType::f64: return detail::decode_payload<double>(shape, p);
    case DType::u8: return detail::decode_payload<std::uint8_t>(shape, p);
  }
  throw std::runtime_error("unsupported dtype");
}

template <class T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  const std::string bytes = encode_tensor(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline void save_tensor(const AnyTensor& t, const std::filesystem::path& path) {
  std::visit([&](const auto& x) { save_tensor(x, path); }, t);
}

inline AnyTensor load_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

// Loads and converts to T. Float -> u8 conversion is refused.
template <class T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  AnyTensor any = load_tensor(path);
  return std::visit(
      [&](auto&& x) -> Tensor<T> {
        using S = typename std::decay_t<decltype(x)>::value_type;
        if constexpr (std::is_same_v<S, T>) {
          return std::move(x);
        } else if constexpr (std::is_same_v<T, std::uint8_t>) {
          throw std::runtime_error(path.string() + ": expected u8 tensor, got " +
                                   dtype_name(dtype_of<S>()));
        } else {
          return tensor_cast<T>(x);
        }
      },
      std::move(any));
}

// Synthetic video/mask pair.
struct SynthCase {
  Tensor<float> video;  // [1, channels, frames, height, width], values in [-1, 1]
  Mask mask;            // [1, 1, frames, height, width]
};

// Union of axis-aligned boxes covering exactly round(mask_ratio * N) voxels.
// Each box is drawn with volume <= remaining deficit, so the count never overshoots.
inline Mask synth_mask(std::mt19937_64& rng, std::size_t frames, std::size_t height,
                       std::size_t width, double mask_ratio) {
  Mask mask({1, 1, frames, height, width}, 0);
  const std::size_t total = mask.size();
  const auto target = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(total)));
  if (target == total) {
    mask.fill(1);
    return mask;
  }
  std::size_t count = 0;
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  while (count < target) {
    const std::size_t deficit = target - count;
    const std::size_t bf = pick(1, std::min(frames, deficit));
    const std::size_t bh = pick(1, std::min(height, std::max<std::size_t>(1, deficit / bf)));
    const std::size_t bw = pick(1, std::min(width, std::max<std::size_t>(1, deficit / (bf * bh))));
    const std::size_t f0 = pick(0, frames - bf), h0 = pick(0, height - bh), w0 = pick(0, width - bw);
    for (std::size_t f = f0; f < f0 + bf; ++f)
      for (std::size_t h = h0; h < h0 + bh; ++h)
        for (std::size_t w = w0; w < w0 + bw; ++w) {
          auto& m = mask(0, 0, f, h, w);
          if (!m) {
            m = 1;
            ++count;
          }
        }
  }
  return mask;
}

inline SynthCase synth_case(std::uint64_t seed, std::size_t frames, std::size_t height,
                            std::size_t width, std::size_t channels, double mask_ratio) {
  if (frames == 0 || height == 0 || width == 0 || channels == 0)
    throw std::invalid_argument("synth_case: zero-sized dimension");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    throw std::invalid_argument("synth_case: mask_ratio must be in [0, 1]");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  // Smooth per-channel pattern: offset + two plane waves + small noise, clamped.
  Tensor<float> video({1, channels, frames, height, width});
  for (std::size_t c = 0; c < channels; ++c) {
    const double offset = 0.5 * uni(rng);
    const double a1 = 0.3 * uni(rng), a2 = 0.2 * uni(rng);
    const double kf = 0.7 * uni(rng), kh = 0.9 * uni(rng), kw = 0.9 * uni(rng);
    const double ph = 3.14159265358979 * uni(rng);
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t h = 0; h < height; ++h)
        for (std::size_t w = 0; w < width; ++w) {
          double v = offset + a1 * std::sin(kf * f + kh * h + ph) + a2 * std::cos(kw * w - kh * h) +
                     0.1 * uni(rng);
          video(0, c, f, h, w) = static_cast<float>(std::clamp(v, -1.0, 1.0));
        }
  }
  Mask mask = synth_mask(rng, frames, height, width, mask_ratio);
  return {std::move(video), std::move(mask)};
}

}  // namespace yose
