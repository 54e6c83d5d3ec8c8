#include "apforge/tensor.hpp"

#include <cmath>
#include <sstream>

namespace apf {

bool Tensor::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

void check_shape(const Tensor& t, const std::vector<int>& expect, const char* what) {
  if (t.shape.size() != expect.size()) {
    std::ostringstream os;
    os << what << ": rank " << t.shape.size() << ", expected " << expect.size();
    throw std::invalid_argument(os.str());
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (expect[i] >= 0 && t.shape[i] != expect[i]) {
      std::ostringstream os;
      os << what << ": dimension " << i << " is " << t.shape[i] << ", expected " << expect[i]
         << " (shape " << shape_str(t.shape) << ")";
      throw std::invalid_argument(os.str());
    }
  }
}

}  // namespace apf
