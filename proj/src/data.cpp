#include "woodflow/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>

#include "woodflow/errors.hpp"

namespace woodflow {

namespace {

constexpr std::uint8_t kMagic[4] = {'N', 'T', 'F', '1'};
constexpr std::uint8_t kBundleMagic[4] = {'N', 'T', 'F', 'B'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_header(std::vector<std::uint8_t>& out, DType dtype, const Shape& shape) {
  if (shape.size() > 255) throw DimensionError("NTF supports at most 255 dimensions");
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("NTF dimension exceeds 2^32 - 1");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw ContractError("unknown dtype");
}

Tensor NtfData::as_real() const {
  if (dtype != DType::u8) return values;
  Tensor t(shape);
  for (std::size_t i = 0; i < bytes.numel(); ++i) t[i] = static_cast<real>(bytes.data[i]);
  return t;
}

std::vector<std::uint8_t> ntf_encode(const Tensor& t, DType dtype) {
  std::vector<std::uint8_t> out;
  put_header(out, dtype, t.shape());
  out.reserve(out.size() + t.numel() * dtype_size(dtype));
  switch (dtype) {
    case DType::f64:
      for (std::size_t i = 0; i < t.numel(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(t[i])));
      break;
    case DType::f32:
      for (std::size_t i = 0; i < t.numel(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
      break;
    case DType::u8:
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const real v = t[i];
        if (!(v >= 0 && v <= 255) || v != std::floor(v)) {
          throw DataError("value " + std::to_string(v) + " at index " + std::to_string(i) + " is not a byte");
        }
        out.push_back(static_cast<std::uint8_t>(v));
      }
      break;
  }
  return out;
}

std::vector<std::uint8_t> ntf_encode(const ByteTensor& t) {
  if (shape_numel(t.shape) != t.data.size()) throw DimensionError("ByteTensor shape does not match its data");
  std::vector<std::uint8_t> out;
  put_header(out, DType::u8, t.shape);
  out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

NtfData ntf_decode(std::span<const std::uint8_t> buf, std::size_t* consumed, std::uint64_t base_offset) {
  if (buf.size() < 6) throw FormatError("truncated NTF header", base_offset + buf.size());
  if (!std::equal(std::begin(kMagic), std::end(kMagic), buf.begin())) {
    throw FormatError("bad NTF magic", base_offset);
  }
  if (buf[4] > 2) throw FormatError("unknown NTF dtype code " + std::to_string(buf[4]), base_offset + 4);
  NtfData out;
  out.dtype = static_cast<DType>(buf[4]);
  const std::size_t ndim = buf[5];
  const std::size_t header = 6 + 4 * ndim;
  if (buf.size() < header) throw FormatError("truncated NTF dimension list", base_offset + buf.size());
  std::uint64_t count = 1;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / 8;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint32_t d = get_u32(buf.data() + 6 + 4 * i);
    if (d != 0 && count > limit / d) throw FormatError("NTF dimensions overflow", base_offset + 6 + 4 * i);
    count *= d;
    out.shape.push_back(d);
  }
  const std::uint64_t bytes = count * dtype_size(out.dtype);
  if (buf.size() - header < bytes) {
    throw FormatError("truncated NTF payload: need " + std::to_string(bytes) + " bytes, have " +
                          std::to_string(buf.size() - header),
                      base_offset + buf.size());
  }
  const std::uint8_t* p = buf.data() + header;
  switch (out.dtype) {
    case DType::f64:
      out.values = Tensor(out.shape);
      for (std::size_t i = 0; i < count; ++i) out.values[i] = static_cast<real>(std::bit_cast<double>(get_u64(p + 8 * i)));
      break;
    case DType::f32:
      out.values = Tensor(out.shape);
      for (std::size_t i = 0; i < count; ++i) out.values[i] = static_cast<real>(std::bit_cast<float>(get_u32(p + 4 * i)));
      break;
    case DType::u8:
      out.bytes.shape = out.shape;
      out.bytes.data.assign(p, p + count);
      break;
  }
  if (consumed) *consumed = header + bytes;
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error while reading " + path);
  return bytes;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error while writing " + path);
}

NtfData ntf_read(const std::string& path) {
  const auto bytes = read_file(path);
  std::size_t used = 0;
  NtfData d = ntf_decode(bytes, &used);
  if (used != bytes.size()) throw FormatError("trailing bytes after NTF payload in " + path, used);
  return d;
}

void ntf_write(const std::string& path, const Tensor& t, DType dtype) { write_file(path, ntf_encode(t, dtype)); }
void ntf_write(const std::string& path, const ByteTensor& t) { write_file(path, ntf_encode(t)); }

std::vector<std::uint8_t> bundle_encode(const TensorBundle& bundle) {
  std::vector<std::uint8_t> out(std::begin(kBundleMagic), std::end(kBundleMagic));
  put_u32(out, static_cast<std::uint32_t>(bundle.size()));
  for (const auto& [name, t] : bundle) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto rec = ntf_encode(t, DType::f64);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

TensorBundle bundle_decode(std::span<const std::uint8_t> buf) {
  if (buf.size() < 8) throw FormatError("truncated bundle header", buf.size());
  if (!std::equal(std::begin(kBundleMagic), std::end(kBundleMagic), buf.begin())) {
    throw FormatError("bad bundle magic", 0);
  }
  const std::uint32_t count = get_u32(buf.data() + 4);
  std::size_t pos = 8;
  TensorBundle out;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (buf.size() - pos < 4) throw FormatError("truncated bundle entry", buf.size());
    const std::uint32_t len = get_u32(buf.data() + pos);
    pos += 4;
    if (buf.size() - pos < len) throw FormatError("truncated bundle entry name", buf.size());
    std::string name(reinterpret_cast<const char*>(buf.data() + pos), len);
    pos += len;
    std::size_t used = 0;
    NtfData rec = ntf_decode(buf.subspan(pos), &used, pos);
    pos += used;
    if (!out.emplace(name, rec.as_real()).second) throw FormatError("duplicate bundle entry " + name, pos);
  }
  if (pos != buf.size()) throw FormatError("trailing bytes after bundle", pos);
  return out;
}

void bundle_write(const std::string& path, const TensorBundle& bundle) { write_file(path, bundle_encode(bundle)); }
TensorBundle bundle_read(const std::string& path) { return bundle_decode(read_file(path)); }

// ---- dequantization ------------------------------------------------------------

namespace {

void check_bits(unsigned bits) {
  if (bits < 1 || bits > 8) throw DataError("bits must be in [1, 8], got " + std::to_string(bits));
}

}  // namespace

ByteTensor reduce_bits(const ByteTensor& x, unsigned bits) {
  check_bits(bits);
  ByteTensor out = x;
  for (auto& v : out.data) v = static_cast<std::uint8_t>(v >> (8 - bits));
  return out;
}

Tensor dequantize(const ByteTensor& x, unsigned bits, const Tensor& noise) {
  check_bits(bits);
  if (noise.shape() != x.shape) {
    throw DimensionError("dequantize: noise shape " + shape_str(noise.shape()) + " does not match " + shape_str(x.shape));
  }
  const real levels = static_cast<real>(1u << bits);
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const real u = noise[i];
    if (!(u >= 0 && u < 1)) throw DataError("dequantize: noise value outside [0, 1) at index " + std::to_string(i));
    const real y = (static_cast<real>(x.data[i] >> (8 - bits)) + u) / levels;
    // Rounding can land on 1 only for u within an ulp of 1.
    out[i] = y < 1 ? y : std::nextafter(real(1), real(0));
  }
  return out;
}

Tensor dequantize(const ByteTensor& x, unsigned bits, Rng& rng) {
  Tensor noise(x.shape);
  for (auto& u : noise.data()) u = static_cast<real>(rng.uniform());
  for (auto& u : noise.data()) {
    if (u >= 1) u = std::nextafter(real(1), real(0));  // float mode rounding
  }
  return dequantize(x, bits, noise);
}

// ---- batch sources -------------------------------------------------------------

Tensor BatchSource::draw(std::size_t count, Rng& rng) const {
  if (size() == 0) throw DataError("cannot draw a batch from an empty dataset");
  std::vector<std::size_t> index(count);
  for (auto& i : index) i = static_cast<std::size_t>(rng.below(size()));
  return gather(index, rng);
}

ImageSource::ImageSource(ByteTensor images, unsigned bits) : images_(std::move(images)), bits_(bits) {
  check_bits(bits);
  if (images_.shape.size() != 4) throw DataError("image dataset must be (N, C, H, W), got " + shape_str(images_.shape));
}

Tensor ImageSource::gather(const std::vector<std::size_t>& index, Rng& rng) const {
  const std::size_t per = shape_numel(sample_shape());
  ByteTensor picked(Shape{index.size(), images_.shape[1], images_.shape[2], images_.shape[3]});
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] >= size()) throw DataError("sample index out of range");
    std::copy_n(images_.data.begin() + static_cast<std::ptrdiff_t>(index[b] * per), per,
                picked.data.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return dequantize(picked, bits_, rng);
}

Tensor ImageSource::rows(std::size_t first, std::size_t count, Rng& rng) const {
  std::vector<std::size_t> index(count);
  for (std::size_t i = 0; i < count; ++i) index[i] = first + i;
  return gather(index, rng);
}

ContinuousSource::ContinuousSource(Tensor samples) : samples_(std::move(samples)) {
  if (samples_.ndim() != 4) throw DataError("dataset must be (N, C, H, W), got " + shape_str(samples_.shape()));
  if (!all_finite(samples_)) throw DataError("dataset contains non-finite values");
}

Tensor ContinuousSource::gather(const std::vector<std::size_t>& index, Rng&) const {
  const std::size_t per = shape_numel(sample_shape());
  const Shape s = sample_shape();
  Tensor out(Shape{index.size(), s[0], s[1], s[2]});
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] >= size()) throw DataError("sample index out of range");
    std::copy_n(samples_.raw() + index[b] * per, per, out.raw() + b * per);
  }
  return out;
}

Tensor ContinuousSource::rows(std::size_t first, std::size_t count, Rng& rng) const {
  std::vector<std::size_t> index(count);
  for (std::size_t i = 0; i < count; ++i) index[i] = first + i;
  return gather(index, rng);
}

std::unique_ptr<BatchSource> make_source(const NtfData& data, unsigned bits) {
  if (data.shape.size() != 4) throw DataError("dataset must be rank 4 (N, C, H, W), got " + shape_str(data.shape));
  if (data.dtype == DType::u8) return std::make_unique<ImageSource>(data.bytes, bits);
  return std::make_unique<ContinuousSource>(data.values);
}

// ---- synthetic data ----------------------------------------------------------------

namespace {

constexpr std::size_t kFields = 4;
constexpr real kFieldScale = 28;
constexpr real kNoiseScale = 6;

struct MixtureParams {
  Tensor means;     // (modes, c)
  Tensor loadings;  // (modes, c, kFields)
  Tensor fields;    // (kFields, h, w), smooth cosines
};

MixtureParams mixture_params(const Shape& chw, std::size_t modes, std::uint64_t seed) {
  const std::size_t c = chw[0], h = chw[1], w = chw[2];
  Rng rng = Rng(seed).stream(~std::uint64_t{0});
  MixtureParams p{Tensor(Shape{modes, c}), Tensor(Shape{modes, c, kFields}), Tensor(Shape{kFields, h, w})};
  for (std::size_t m = 0; m < modes; ++m) {
    const real centre = modes == 1 ? 128 : 72 + 112 * static_cast<real>(m) / static_cast<real>(modes - 1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      p.means[m * c + ch] = centre + static_cast<real>(8 * rng.normal());
      for (std::size_t f = 0; f < kFields; ++f) p.loadings[(m * c + ch) * kFields + f] = static_cast<real>(rng.normal());
    }
  }
  const real pi = std::numbers::pi_v<real>;
  for (std::size_t f = 0; f < kFields; ++f) {
    const real fy = static_cast<real>(rng.uniform()) * 1.5, fx = static_cast<real>(rng.uniform()) * 1.5;
    const real phase = static_cast<real>(rng.uniform()) * 2 * pi;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        p.fields[(f * h + i) * w + j] =
            std::cos(pi * (fy * static_cast<real>(i) / static_cast<real>(h) + fx * static_cast<real>(j) / static_cast<real>(w)) + phase);
      }
  }
  return p;
}

}  // namespace

Tensor synth_mode_means(const Shape& chw, std::size_t modes, std::uint64_t seed) {
  if (chw.size() != 3) throw DimensionError("synthetic image shape must be (c, h, w)");
  if (modes < 1) throw ContractError("synth_gaussian_mixture: modes must be >= 1");
  return mixture_params(chw, modes, seed).means;
}

ByteTensor synth_gaussian_mixture(std::size_t n, const Shape& chw, std::size_t modes, std::uint64_t seed) {
  if (chw.size() != 3) throw DimensionError("synthetic image shape must be (c, h, w)");
  if (modes < 1) throw ContractError("synth_gaussian_mixture: modes must be >= 1");
  const std::size_t c = chw[0], plane = chw[1] * chw[2];
  const MixtureParams p = mixture_params(chw, modes, seed);
  ByteTensor out(Shape{n, chw[0], chw[1], chw[2]});
  const Rng root(seed);
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng = root.stream(s);
    const std::size_t m = static_cast<std::size_t>(rng.below(modes));
    real g[kFields];
    for (auto& v : g) v = static_cast<real>(rng.normal());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < plane; ++q) {
        real v = p.means[m * c + ch];
        for (std::size_t f = 0; f < kFields; ++f) v += kFieldScale * p.loadings[(m * c + ch) * kFields + f] * g[f] * p.fields[f * plane + q];
        v += kNoiseScale * static_cast<real>(rng.normal());
        out.data[(s * c + ch) * plane + q] = static_cast<std::uint8_t>(std::clamp(std::floor(v), real(0), real(255)));
      }
  }
  return out;
}

Tensor synth_gaussian_2d(std::size_t n, std::uint64_t seed) {
  Tensor out(Shape{n, 2, 1, 1});
  const Rng root(seed);
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng = root.stream(s);
    const bool second = rng.below(2) == 1;
    const real e1 = static_cast<real>(rng.normal()), e2 = static_cast<real>(rng.normal());
    // Correlation +0.8 in the first mode, -0.6 in the second.
    if (!second) {
      out[2 * s] = -2 + 0.6 * e1;
      out[2 * s + 1] = -1 + 0.6 * (0.8 * e1 + 0.6 * e2);
    } else {
      out[2 * s] = 2 + 0.5 * e1;
      out[2 * s + 1] = 1 + 0.8 * (-0.6 * e1 + 0.8 * e2);
    }
  }
  return out;
}

}  // namespace woodflow
