#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "woodflow/rng.hpp"
#include "woodflow/tensor.hpp"

namespace woodflow {

// ---- NTF container -------------------------------------------------------------
//
// "NTF1" | dtype u8 | ndim u8 | ndim x u32le dims | row-major little-endian payload

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

std::size_t dtype_size(DType t);

// Raw 8-bit tensor, the storage type of image datasets.
struct ByteTensor {
  Shape shape;
  std::vector<std::uint8_t> data;

  ByteTensor() = default;
  explicit ByteTensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0) {}
  std::size_t numel() const { return data.size(); }
  friend bool operator==(const ByteTensor&, const ByteTensor&) = default;
};

// One decoded record. Exactly one of `values` (f32/f64) and `bytes` (u8) is
// populated; f32 payloads are widened to `real`.
struct NtfData {
  DType dtype = DType::f64;
  Shape shape;
  Tensor values;
  ByteTensor bytes;

  // Converts u8 records to reals; returns float records unchanged.
  Tensor as_real() const;
};

std::vector<std::uint8_t> ntf_encode(const Tensor& t, DType dtype = DType::f64);
std::vector<std::uint8_t> ntf_encode(const ByteTensor& t);
// Parses one record starting at the beginning of `buf`. `consumed` receives
// the record length. Offsets in FormatError are relative to `base_offset`.
NtfData ntf_decode(std::span<const std::uint8_t> buf, std::size_t* consumed = nullptr, std::uint64_t base_offset = 0);

NtfData ntf_read(const std::string& path);
void ntf_write(const std::string& path, const Tensor& t, DType dtype = DType::f64);
void ntf_write(const std::string& path, const ByteTensor& t);

// Named-tensor bundle: "NTFB" | u32le count | count x (u32le name length | name | NTF record).
using TensorBundle = std::map<std::string, Tensor>;
std::vector<std::uint8_t> bundle_encode(const TensorBundle& bundle);
TensorBundle bundle_decode(std::span<const std::uint8_t> buf);
void bundle_write(const std::string& path, const TensorBundle& bundle);
TensorBundle bundle_read(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

// ---- dequantization ------------------------------------------------------------

// Keeps the top `bits` bits: x >> (8 - bits).
ByteTensor reduce_bits(const ByteTensor& x, unsigned bits);

// y = ((x >> (8 - bits)) + u) / 2^bits with u ~ U[0, 1) drawn from `rng` in
// row-major order. Output lies in [0, 1).
Tensor dequantize(const ByteTensor& x, unsigned bits, Rng& rng);
// Same map with the noise given explicitly (same shape as x, values in [0, 1)).
Tensor dequantize(const ByteTensor& x, unsigned bits, const Tensor& noise);

// ---- batch sources -------------------------------------------------------------

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::size_t size() const = 0;
  // Per-sample (C, H, W).
  virtual Shape sample_shape() const = 0;
  // Input scaling offset for bits per dimension; 0 for continuous data.
  virtual unsigned bits() const = 0;
  // Samples `count` indices uniformly with replacement from `rng`, then
  // dequantizes them with the same stream.
  Tensor draw(std::size_t count, Rng& rng) const;
  // Model-space batch for the samples [first, first + count).
  virtual Tensor rows(std::size_t first, std::size_t count, Rng& rng) const = 0;
  virtual Tensor gather(const std::vector<std::size_t>& index, Rng& rng) const = 0;
};

// (N, C, H, W) u8 images, reduced to `bits` and uniformly dequantized.
class ImageSource final : public BatchSource {
 public:
  ImageSource(ByteTensor images, unsigned bits);
  std::size_t size() const override { return images_.shape[0]; }
  Shape sample_shape() const override { return {images_.shape[1], images_.shape[2], images_.shape[3]}; }
  unsigned bits() const override { return bits_; }
  Tensor rows(std::size_t first, std::size_t count, Rng& rng) const override;
  Tensor gather(const std::vector<std::size_t>& index, Rng& rng) const override;

 private:
  ByteTensor images_;
  unsigned bits_;
};

// (N, C, H, W) real-valued samples used as they are.
class ContinuousSource final : public BatchSource {
 public:
  explicit ContinuousSource(Tensor samples);
  std::size_t size() const override { return samples_.dim(0); }
  Shape sample_shape() const override { return {samples_.dim(1), samples_.dim(2), samples_.dim(3)}; }
  unsigned bits() const override { return 0; }
  Tensor rows(std::size_t first, std::size_t count, Rng& rng) const override;
  Tensor gather(const std::vector<std::size_t>& index, Rng& rng) const override;

 private:
  Tensor samples_;
};

// Builds the matching source for a decoded NTF dataset: u8 records become
// ImageSource(bits), float records ContinuousSource. Requires rank 4.
std::unique_ptr<BatchSource> make_source(const NtfData& data, unsigned bits);

// ---- synthetic data -------------------------------------------------------------

// n images of shape (c, h, w). Each sample picks one of `modes` components;
// a component has its own per-channel mean and channel loadings on a few
// smooth spatial cosine fields, so pixels are correlated across channels and
// space. Values are clamped to [0, 255] and floored. Sample i reads only
// Rng(seed).stream(i).
ByteTensor synth_gaussian_mixture(std::size_t n, const Shape& chw, std::size_t modes, std::uint64_t seed);

// Per-mode channel means used by synth_gaussian_mixture, (modes, c).
Tensor synth_mode_means(const Shape& chw, std::size_t modes, std::uint64_t seed);

// n points in R^2 from an equal mixture of two correlated Gaussians, as a
// (n, 2, 1, 1) batch.
Tensor synth_gaussian_2d(std::size_t n, std::uint64_t seed);

}  // namespace woodflow
