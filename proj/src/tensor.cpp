#include "inca/tensor.hpp"

#include "kernels.hpp"

namespace inca {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
BasicTensor<T> transposed(const BasicTensor<T>& a) {
  const std::size_t p = a.rows(), q = a.cols();
  BasicTensor<T> out({q, p});
  kernels::transpose(a.ptr(), out.ptr(), p, q);
  return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.cols() == b.rows(), ErrorKind::kDimension,
          "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  BasicTensor<T> out({a.rows(), b.cols()});
  kernels::gemm(a.ptr(), b.ptr(), out.ptr(), a.rows(), a.cols(), b.cols());
  return out;
}

template <typename T>
std::uint64_t fingerprint(const BasicTensor<T>& t, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (auto d : t.shape()) {
    const std::uint64_t v = d;
    mix(reinterpret_cast<const unsigned char*>(&v), sizeof v);
  }
  mix(reinterpret_cast<const unsigned char*>(t.ptr()), t.size() * sizeof(T));
  return h;
}

template BasicTensor<float> transposed(const BasicTensor<float>&);
template BasicTensor<double> transposed(const BasicTensor<double>&);
template Tensor matmul(const Tensor&, const Tensor&);
template Tensor64 matmul(const Tensor64&, const Tensor64&);
template std::uint64_t fingerprint(const BasicTensor<float>&, std::uint64_t);
template std::uint64_t fingerprint(const BasicTensor<double>&, std::uint64_t);

}  // namespace inca
