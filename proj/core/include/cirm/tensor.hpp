#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "cirm/error.hpp"

namespace cirm {

// Dense row-major tensor of doubles. Everything numeric in this project is
// 64-bit; there is deliberately no float path.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shp) : shape(std::move(shp)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  static Tensor from(std::vector<int64_t> shp, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(shp);
    if (numel_of(t.shape) != static_cast<int64_t>(d.size()))
      throw Error("shape_mismatch", "Tensor::from: data size does not match shape");
    t.data = std::move(d);
    return t;
  }

  static Tensor scalar(double v) { return from({1, 1}, {v}); }

  static Tensor row(std::vector<double> d) {
    int64_t n = static_cast<int64_t>(d.size());
    return from({1, n}, std::move(d));
  }

  static Tensor vec(std::vector<double> d) {
    int64_t n = static_cast<int64_t>(d.size());
    return from({n}, std::move(d));
  }

  int64_t numel() const { return numel_of(shape); }
  int rank() const { return static_cast<int>(shape.size()); }

  bool is_matrix() const { return shape.size() == 2; }
  bool is_vector() const { return shape.size() == 1; }

  int64_t rows() const {
    require_matrix();
    return shape[0];
  }
  int64_t cols() const {
    require_matrix();
    return shape[1];
  }

  double& at(int64_t i, int64_t j) {
    require_matrix();
    return data[static_cast<size_t>(i * shape[1] + j)];
  }
  double at(int64_t i, int64_t j) const {
    require_matrix();
    return data[static_cast<size_t>(i * shape[1] + j)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Reuses the allocation when the element count already matches.
  void reshape_to(const std::vector<int64_t>& shp) {
    shape = shp;
    data.resize(static_cast<size_t>(numel_of(shape)));
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
  }

private:
  void require_matrix() const {
    if (shape.size() != 2)
      throw Error("shape_mismatch", "expected rank-2 tensor, got rank " + std::to_string(shape.size()));
  }

  static int64_t numel_of(const std::vector<int64_t>& shp) {
    int64_t n = 1;
    for (int64_t d : shp) {
      if (d < 0) throw Error("shape_mismatch", "negative dimension in tensor shape");
      n *= d;
    }
    return n;
  }
};

}  // namespace cirm
