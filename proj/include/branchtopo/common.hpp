#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace branchtopo {

// Base error for anything raised by the library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad or missing input data (files, labels, configs at runtime).
class DataError : public Error {
public:
  explicit DataError(const std::string& what) : Error(what) {}
};

// Non-finite values or other numeric breakdown.
class NumericError : public Error {
public:
  explicit NumericError(const std::string& what) : Error(what) {}
};

// Semantic point classes. Values are the on-disk encoding.
enum class PointClass : int {
  kPadding = 0,
  kBranch = 1,
  kEndPoint = 2,
};

constexpr int kPaddingInstance = -1;

// Row-major N x dim coordinate block. dim is 2 or 3.
struct PointArray {
  int dim = 2;
  std::vector<double> data;

  PointArray() = default;
  explicit PointArray(int d) : dim(d) {}
  PointArray(int d, int n) : dim(d), data(static_cast<size_t>(d) * n, 0.0) {}

  int size() const { return dim == 0 ? 0 : static_cast<int>(data.size()) / dim; }
  double* row(int i) { return data.data() + static_cast<size_t>(i) * dim; }
  const double* row(int i) const { return data.data() + static_cast<size_t>(i) * dim; }
  double& at(int i, int a) { return data[static_cast<size_t>(i) * dim + a]; }
  double at(int i, int a) const { return data[static_cast<size_t>(i) * dim + a]; }
  void push_row(const double* p) { data.insert(data.end(), p, p + dim); }
};

// Point cloud with per-point instance id and semantic class.
// instance == kPaddingInstance iff cls == kPadding.
struct LabeledPointCloud {
  PointArray coords;
  std::vector<int> instance;
  std::vector<PointClass> cls;

  int size() const { return coords.size(); }
  int dim() const { return coords.dim; }
};

// Lexicographic comparison of two coordinate rows.
inline int compare_rows(const double* a, const double* b, int dim) {
  for (int k = 0; k < dim; ++k) {
    if (a[k] < b[k]) return -1;
    if (a[k] > b[k]) return 1;
  }
  return 0;
}

inline double squared_distance(const double* a, const double* b, int dim) {
  double s = 0.0;
  for (int k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

}  // namespace branchtopo
