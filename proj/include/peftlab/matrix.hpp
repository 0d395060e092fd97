// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace peftlab {

using Index = std::int64_t;

// Counts matmul invocations and the FLOPs they imply (2*m*n*p per m x n
// times n x p product, multiply + add). One counter per execution context;
// parallel callers keep separate counters and merge explicitly.
struct OpCounter {
  std::uint64_t matmul_calls = 0;
  std::uint64_t flops = 0;

  void reset() {
    matmul_calls = 0;
    flops = 0;
  }
  void merge(const OpCounter& other) {
    matmul_calls += other.matmul_calls;
    flops += other.flops;
  }
};

// Dense row-major matrix of 64-bit floats. Immutable by convention once a
// module hands it out; mutation is confined to construction and training
// updates.
class Matrix {
 public:
  Matrix() = default;
  Matrix(Index rows, Index cols);  // zero-filled
  Matrix(Index rows, Index cols, std::vector<double> data);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Index size() const { return rows_ * cols_; }
  bool empty() const { return rows_ == 0 || cols_ == 0; }

  double& at(Index r, Index c) { return data_[r * cols_ + c]; }
  double at(Index r, Index c) const { return data_[r * cols_ + c]; }
  double* row_ptr(Index r) { return data_.data() + r * cols_; }
  const double* row_ptr(Index r) const { return data_.data() + r * cols_; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;
  void fill(double value);

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<double> data_;
};

// Product a*b with a fixed accumulation order: each output element is the
// fold of a[i,l]*b[l,j] over l ascending, starting from 0.0. Deterministic
// for fixed inputs. Increments the counter by one call and 2*m*n*p FLOPs.
Matrix matmul(const Matrix& a, const Matrix& b, OpCounter& counter);

// Same product written into a caller-owned buffer (reshaped as needed).
// out must not alias a or b. Lets hot paths reuse storage across calls.
void matmul_into(const Matrix& a, const Matrix& b, Matrix& out, OpCounter& counter);

// Reshapes m to rows x cols if it does not match already; contents are
// unspecified afterwards.
void ensure_shape(Matrix& m, Index rows, Index cols);

// Row-wise softmax, stabilized by per-row max subtraction. Rows of the
// result sum to 1 within 1e-12 for any finite input.
Matrix softmax_rows(const Matrix& m);

// Splits m into k column blocks of equal width. Throws ShapeError when the
// width is not divisible by k. Block i holds columns [i*w, (i+1)*w).
std::vector<Matrix> split_columns(const Matrix& m, Index k);

// split_columns into reusable part buffers.
void split_columns_into(const Matrix& m, Index k, std::vector<Matrix>& parts);

// Inverse of split_columns: horizontal concatenation.
Matrix concat_columns(const std::vector<Matrix>& parts);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double s);
Matrix scale(Matrix&& m, double s);  // in place, no copy
void scale_in_place(Matrix& m, double s);
void add_in_place(Matrix& a, const Matrix& b);
void add_scaled_in_place(Matrix& a, const Matrix& b, double s);

// Adds a 1 x cols row vector to every row of m.
Matrix add_row_broadcast(const Matrix& m, const Matrix& row);
void add_row_in_place(Matrix& m, const Matrix& row);
void tanh_in_place(Matrix& m);

// Column sums as a 1 x cols matrix.
Matrix column_sums(const Matrix& m);

// Per-row dot products of equally shaped a and b, as an N x 1 matrix.
Matrix row_dots(const Matrix& a, const Matrix& b);

// Sum of the elementwise product of a and b.
double dot_all(const Matrix& a, const Matrix& b);

Matrix relu(const Matrix& m);
Matrix relu_mask(const Matrix& pre);  // 1 where pre > 0, else 0
Matrix tanh_elem(const Matrix& m);

double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// FNV-1a over the raw byte representation, dims included. Used for
// frozen-weight invariance checks.
std::uint64_t checksum(const Matrix& m);

}  // namespace peftlab
