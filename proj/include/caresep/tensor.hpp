#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cstdint>
#include <vector>

namespace caresep {

// Dense row-major 2-D array. Rows usually index tokens/frames/samples and
// columns index channels; scalars are 1x1.
template <typename T>
class Tensor {
 public:
  using Map = Eigen::Map<
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMap = Eigen::Map<
      const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  Tensor(int64_t rows, int64_t cols)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols), T(0)) {}

  static Tensor scalar(T v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int64_t size() const { return rows_ * cols_; }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator()(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
  T operator()(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols_ + c)]; }
  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  Map mat() { return Map(data_.data(), rows_, cols_); }
  ConstMap mat() const { return ConstMap(data_.data(), rows_, cols_); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void add_inplace(const Tensor& o) {
    assert(same_shape(o));
    for (int64_t i = 0; i < size(); ++i) data_[static_cast<size_t>(i)] += o.data_[static_cast<size_t>(i)];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  int64_t rows_ = 0;
  int64_t cols_ = 0;
  std::vector<T> data_;
};

}  // namespace caresep
