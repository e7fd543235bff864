#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "woodflow/rng.hpp"
#include "woodflow/tensor.hpp"

namespace woodflow::testing {

inline Tensor random_tensor(const Shape& s, Rng& rng, real scale = 1) {
  Tensor t(s);
  for (auto& v : t.data()) v = static_cast<real>(scale * rng.normal());
  return t;
}

// Well conditioned: identity plus a small random part.
inline Tensor near_identity(std::size_t n, Rng& rng, real scale = real(0.3)) {
  Tensor t = random_tensor({n, n}, rng, scale / std::sqrt(static_cast<real>(n)));
  for (std::size_t i = 0; i < n; ++i) t(i, i) += 1;
  return t;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      real s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// Laplace expansion along the first row.
inline real cofactor_det(const Tensor& a) {
  const std::size_t n = a.rows();
  if (n == 1) return a(0, 0);
  real det = 0;
  for (std::size_t j = 0; j < n; ++j) {
    Tensor minor({n - 1, n - 1});
    for (std::size_t r = 1; r < n; ++r)
      for (std::size_t c = 0, cc = 0; c < n; ++c) {
        if (c == j) continue;
        minor(r - 1, cc++) = a(r, c);
      }
    det += ((j % 2) ? -1 : 1) * a(0, j) * cofactor_det(minor);
  }
  return det;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("woodflow_" + tag + "_" + std::to_string(std::hash<std::string>{}(tag) ^ counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  static std::size_t& counter() {
    static std::size_t c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace woodflow::testing
