#include "dybnn/bitkernel.hpp"

#include <algorithm>
#include <string>

namespace dybnn::bitkernel {

PackedBitMatrix::PackedBitMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows),
      cols_(cols),
      words_per_row_(words_for(cols)),
      tail_mask_(tail_mask_for(cols)),
      storage_(rows * words_for(cols), Word{0}) {}

bool PackedBitMatrix::tail_clean() const {
  if (words_per_row_ == 0) return true;
  for (std::size_t r = 0; r < rows_; ++r) {
    if (row(r)[words_per_row_ - 1] & ~tail_mask_) return false;
  }
  return true;
}

template <typename T>
PackedBitMatrix pack_signs(std::span<const T> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) {
    throw DimensionError("pack_signs: " + std::to_string(values.size()) + " values for " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  PackedBitMatrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto out = m.row(r);
    const T* src = values.data() + r * cols;
    for (std::size_t w = 0; w < out.size(); ++w) {
      const std::size_t begin = w * kWordBits;
      const std::size_t end = std::min(cols, begin + kWordBits);
      Word word = 0;
      for (std::size_t c = begin; c < end; ++c) {
        word |= static_cast<Word>(src[c] > T(0)) << (c - begin);
      }
      out[w] = word;
    }
  }
  return m;
}

template <typename T>
PackedBitMatrix pack_signs(const Tensor<T>& matrix) {
  if (matrix.rank() != 2) throw DimensionError("pack_signs expects a matrix, got " + shape_str(matrix.shape()));
  return pack_signs<T>(matrix.data(), matrix.dim(0), matrix.dim(1));
}

template <typename T>
Tensor<T> unpack(const PackedBitMatrix& m) {
  Tensor<T> out(Shape{m.rows(), m.cols()});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out[r * m.cols() + c] = T(m.value(r, c));
  }
  return out;
}

namespace {

inline std::int64_t dot_words(const Word* a, const Word* b, std::size_t words, Word tail, std::size_t n) {
  std::int64_t ones = 0;
  for (std::size_t w = 0; w + 1 < words; ++w) ones += std::popcount(~(a[w] ^ b[w]));
  ones += std::popcount(~(a[words - 1] ^ b[words - 1]) & tail);
  return 2 * ones - static_cast<std::int64_t>(n);
}

}  // namespace

std::int64_t xnor_popcount_dot(std::span<const Word> a, std::span<const Word> b, std::size_t n) {
  const std::size_t words = words_for(n);
  if (a.size() != words || b.size() != words) {
    throw DimensionError("xnor_popcount_dot: rows of " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " words for length " + std::to_string(n));
  }
  if (n == 0) return 0;
  return dot_words(a.data(), b.data(), words, tail_mask_for(n), n);
}

IntMatrix binary_gemm(const PackedBitMatrix& a, const PackedBitMatrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("binary_gemm: inner dimensions " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()));
  }
  IntMatrix out{a.rows(), b.rows(), std::vector<std::int32_t>(a.rows() * b.rows(), 0)};
  const std::size_t n = a.cols();
  if (n == 0) return out;
  const std::size_t words = a.words_per_row();
  const Word tail = a.tail_mask();
  // Block over B rows so a tile of B stays in cache while A rows stream.
  constexpr std::size_t kBlock = 64;
  for (std::size_t j0 = 0; j0 < b.rows(); j0 += kBlock) {
    const std::size_t j1 = std::min(b.rows(), j0 + kBlock);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const Word* ar = a.row(i).data();
      std::int32_t* dst = out.data.data() + i * out.cols;
      for (std::size_t j = j0; j < j1; ++j) {
        dst[j] = static_cast<std::int32_t>(dot_words(ar, b.row(j).data(), words, tail, n));
      }
    }
  }
  return out;
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw DimensionError("convolution stride must be positive");
  if (kernel == 0 || kernel > in + 2 * padding) {
    throw DimensionError("kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

template <typename T>
Tensor<T> binary_conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("binary_conv2d expects NCHW input and OIHW weights, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c) {
    throw DimensionError("binary_conv2d: input has " + std::to_string(c) + " channels, weights expect " +
                         std::to_string(w.dim(1)));
  }
  const std::size_t oh = conv_out_extent(h, kh, stride, padding);
  const std::size_t ow = conv_out_extent(wd, kw, stride, padding);
  const std::size_t patch = c * kh * kw;

  PackedBitMatrix patches(n * oh * ow, patch);
  const T* xp = x.ptr();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        auto row = patches.row((b * oh + y) * ow + xo);
        std::size_t col = 0;
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            for (std::size_t kx = 0; kx < kw; ++kx, ++col) {
              const auto ix = static_cast<std::ptrdiff_t>(xo * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd)) {
                continue;  // padding: bit 0 (-1)
              }
              if (xp[((b * c + ci) * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] > T(0)) {
                row[col / kWordBits] |= Word{1} << (col % kWordBits);
              }
            }
          }
        }
      }
    }
  }
  const PackedBitMatrix weights = pack_signs<T>(w.data(), o, patch);
  const IntMatrix counts = binary_gemm(patches, weights);

  Tensor<T> out(Shape{n, o, oh, ow});
  T* op = out.ptr();
  const std::size_t plane = oh * ow;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::int32_t* src = counts.data.data() + (b * plane + p) * o;
      for (std::size_t oc = 0; oc < o; ++oc) op[(b * o + oc) * plane + p] = static_cast<T>(src[oc]);
    }
  }
  return out;
}

#define DYBNN_INSTANTIATE(T)                                                                       \
  template PackedBitMatrix pack_signs<T>(std::span<const T>, std::size_t, std::size_t);            \
  template PackedBitMatrix pack_signs<T>(const Tensor<T>&);                                        \
  template Tensor<T> unpack<T>(const PackedBitMatrix&);                                            \
  template Tensor<T> binary_conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);

DYBNN_INSTANTIATE(float)
DYBNN_INSTANTIATE(double)
#undef DYBNN_INSTANTIATE

}  // namespace dybnn::bitkernel
