#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace emcomm {

// Error taxonomy shared by every module.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// `grad` is non-empty exactly when `requires_grad` is set, and then has the
/// same number of elements as `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() : shape{}, data(1, 0.0) {}

  explicit Tensor(Shape s, double fill = 0.0, bool with_grad = false)
      : shape(std::move(s)), data(shape_size(shape), fill) {
    set_requires_grad(with_grad);
  }

  Tensor(Shape s, std::vector<double> values, bool with_grad = false)
      : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_size(shape)) +
                           " elements, got " + std::to_string(data.size()));
    }
    set_requires_grad(with_grad);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double item() const {
    if (data.size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape));
    }
    return data[0];
  }

  void set_requires_grad(bool on) {
    requires_grad = on;
    if (on) {
      grad.assign(data.size(), 0.0);
    } else {
      grad.clear();
    }
  }

  void zero_grad() {
    if (requires_grad) std::fill(grad.begin(), grad.end(), 0.0);
  }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

}  // namespace emcomm
