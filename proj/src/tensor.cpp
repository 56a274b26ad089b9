#include "pspseg/tensor.hpp"

namespace pspseg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace pspseg
