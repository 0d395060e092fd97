// SPDX-License-Identifier: Apache-2.0
#include "peftlab/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

#include "peftlab/error.hpp"

namespace peftlab {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                     shape_str(b) + " differ");
  }
}

}  // namespace

Matrix::Matrix(Index rows, Index cols)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), 0.0) {
  if (rows < 0 || cols < 0) {
    throw ShapeError("Matrix: negative dimension " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

Matrix::Matrix(Index rows, Index cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (static_cast<Index>(data_.size()) != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = r > 0 ? static_cast<Index>(rows.begin()->size()) : 0;
  Matrix m(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) {
      throw ShapeError("Matrix::from_rows: ragged row " + std::to_string(i));
    }
    std::copy(row.begin(), row.end(), m.row_ptr(i));
    ++i;
  }
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void ensure_shape(Matrix& m, Index rows, Index cols) {
  if (m.rows() != rows || m.cols() != cols) m = Matrix(rows, cols);
}

void matmul_into(const Matrix& a, const Matrix& b, Matrix& out, OpCounter& counter) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions of " + shape_str(a) + " and " +
                     shape_str(b) + " do not match");
  }
  const Index m = a.rows();
  const Index n = a.cols();
  const Index p = b.cols();
  ensure_shape(out, m, p);
  out.fill(0.0);
  const double* __restrict__ adata = a.data().data();
  const double* __restrict__ bdata = b.data().data();
  double* __restrict__ cdata = out.data().data();
  for (Index i = 0; i < m; ++i) {
    const double* arow = adata + i * n;
    double* crow = cdata + i * p;
    for (Index l = 0; l < n; ++l) {  // inner dimension ascending
      const double s = arow[l];
      const double* brow = bdata + l * p;
      for (Index j = 0; j < p; ++j) {
        crow[j] += s * brow[j];
      }
    }
  }
  counter.matmul_calls += 1;
  counter.flops += 2ull * static_cast<std::uint64_t>(m) *
                   static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(p);
}

Matrix matmul(const Matrix& a, const Matrix& b, OpCounter& counter) {
  Matrix c;
  matmul_into(a, b, c, counter);
  return c;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const double* src = m.row_ptr(i);
    double* dst = out.row_ptr(i);
    double mx = src[0];
    for (Index j = 1; j < m.cols(); ++j) mx = std::max(mx, src[j]);
    double sum = 0.0;
    for (Index j = 0; j < m.cols(); ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    for (Index j = 0; j < m.cols(); ++j) dst[j] /= sum;
  }
  return out;
}

void split_columns_into(const Matrix& m, Index k, std::vector<Matrix>& parts) {
  if (k < 1) throw ShapeError("split_columns: k must be >= 1, got " + std::to_string(k));
  if (m.cols() % k != 0) {
    throw ShapeError("split_columns: width " + std::to_string(m.cols()) +
                     " not divisible by k=" + std::to_string(k));
  }
  const Index w = m.cols() / k;
  parts.resize(static_cast<std::size_t>(k));
  for (Index s = 0; s < k; ++s) {
    Matrix& part = parts[static_cast<std::size_t>(s)];
    ensure_shape(part, m.rows(), w);
    for (Index i = 0; i < m.rows(); ++i) {
      const double* src = m.row_ptr(i) + s * w;
      std::copy(src, src + w, part.row_ptr(i));
    }
  }
}

std::vector<Matrix> split_columns(const Matrix& m, Index k) {
  std::vector<Matrix> parts;
  split_columns_into(m, k, parts);
  return parts;
}

Matrix concat_columns(const std::vector<Matrix>& parts) {
  if (parts.empty()) return Matrix();
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Matrix& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_columns: row counts differ (" + std::to_string(rows) +
                       " vs " + std::to_string(p.rows()) + ")");
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    double* dst = out.row_ptr(i);
    for (const Matrix& p : parts) {
      std::copy(p.row_ptr(i), p.row_ptr(i) + p.cols(), dst);
      dst += p.cols();
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      out.at(j, i) = m.at(i, j);
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (Index i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  for (Index i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (Index i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

Matrix scale(const Matrix& m, double s) {
  Matrix out = m;
  for (double& v : out.data()) v *= s;
  return out;
}

Matrix scale(Matrix&& m, double s) {
  for (double& v : m.data()) v *= s;
  return std::move(m);
}

void scale_in_place(Matrix& m, double s) {
  for (double& v : m.data()) v *= s;
}

void add_in_place(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add_in_place");
  for (Index i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

void add_scaled_in_place(Matrix& a, const Matrix& b, double s) {
  require_same_shape(a, b, "add_scaled_in_place");
  for (Index i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

Matrix add_row_broadcast(const Matrix& m, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != m.cols()) {
    throw ShapeError("add_row_broadcast: row vector " + shape_str(row) +
                     " does not match matrix " + shape_str(m));
  }
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    double* dst = out.row_ptr(i);
    const double* src = row.row_ptr(0);
    for (Index j = 0; j < m.cols(); ++j) dst[j] += src[j];
  }
  return out;
}

void add_row_in_place(Matrix& m, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != m.cols()) {
    throw ShapeError("add_row_in_place: row vector " + shape_str(row) +
                     " does not match matrix " + shape_str(m));
  }
  for (Index i = 0; i < m.rows(); ++i) {
    double* dst = m.row_ptr(i);
    const double* src = row.row_ptr(0);
    for (Index j = 0; j < m.cols(); ++j) dst[j] += src[j];
  }
}

void tanh_in_place(Matrix& m) {
  for (double& v : m.data()) v = std::tanh(v);
}

Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const double* src = m.row_ptr(i);
    double* dst = out.row_ptr(0);
    for (Index j = 0; j < m.cols(); ++j) dst[j] += src[j];
  }
  return out;
}

Matrix row_dots(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "row_dots");
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const double* ra = a.row_ptr(i);
    const double* rb = b.row_ptr(i);
    double acc = 0.0;
    for (Index j = 0; j < a.cols(); ++j) acc += ra[j] * rb[j];
    out.at(i, 0) = acc;
  }
  return out;
}

double dot_all(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "dot_all");
  double acc = 0.0;
  for (Index i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
  return acc;
}

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix relu_mask(const Matrix& pre) {
  Matrix out(pre.rows(), pre.cols());
  for (Index i = 0; i < pre.size(); ++i) out.data()[i] = pre.data()[i] > 0.0 ? 1.0 : 0.0;
  return out;
}

Matrix tanh_elem(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v = std::tanh(v);
  return out;
}

double max_abs(const Matrix& m) {
  double mx = 0.0;
  for (double v : m.data()) mx = std::max(mx, std::fabs(v));
  return mx;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double mx = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    mx = std::max(mx, std::fabs(a.data()[i] - b.data()[i]));
  }
  return mx;
}

std::uint64_t checksum(const Matrix& m) {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  const Index r = m.rows();
  const Index c = m.cols();
  mix(&r, sizeof(r));
  mix(&c, sizeof(c));
  if (!m.data().empty()) {
    mix(m.data().data(), m.data().size() * sizeof(double));
  }
  return h;
}

}  // namespace peftlab
