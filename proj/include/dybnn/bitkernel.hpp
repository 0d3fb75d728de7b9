#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dybnn/tensor.hpp"

// Bit-packed ±1 linear algebra. Encoding: bit 1 <-> +1, bit 0 <-> -1, so for
// rows of logical length n:  dot = 2 * popcount(XNOR(a, b) & valid) - n.
namespace dybnn::bitkernel {

using Word = std::uint64_t;
inline constexpr std::size_t kWordBits = 64;

inline std::size_t words_for(std::size_t n) { return (n + kWordBits - 1) / kWordBits; }

// Mask of the valid bits in the last word of a row of length n.
inline Word tail_mask_for(std::size_t n) {
  const std::size_t rem = n % kWordBits;
  return rem == 0 ? ~Word{0} : ((Word{1} << rem) - 1);
}

class PackedBitMatrix {
 public:
  PackedBitMatrix() = default;
  // All bits zero, i.e. every entry -1.
  PackedBitMatrix(std::size_t rows, std::size_t cols);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t words_per_row() const { return words_per_row_; }
  Word tail_mask() const { return tail_mask_; }

  std::span<Word> row(std::size_t r) { return {storage_.data() + r * words_per_row_, words_per_row_}; }
  std::span<const Word> row(std::size_t r) const {
    return {storage_.data() + r * words_per_row_, words_per_row_};
  }
  std::span<Word> storage() { return storage_; }
  std::span<const Word> storage() const { return storage_; }

  bool bit(std::size_t r, std::size_t c) const {
    return (storage_[r * words_per_row_ + c / kWordBits] >> (c % kWordBits)) & 1U;
  }
  void set(std::size_t r, std::size_t c, bool on) {
    Word& w = storage_[r * words_per_row_ + c / kWordBits];
    const Word m = Word{1} << (c % kWordBits);
    w = on ? (w | m) : (w & ~m);
  }
  int value(std::size_t r, std::size_t c) const { return bit(r, c) ? 1 : -1; }

  // True when no row carries set bits beyond cols.
  bool tail_clean() const;

  friend bool operator==(const PackedBitMatrix&, const PackedBitMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_per_row_ = 0;
  Word tail_mask_ = 0;
  std::vector<Word> storage_;
};

// Row-major integer result of a binary GEMM.
struct IntMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> data;

  std::int32_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// bit = 1 where v > 0, 0 where v <= 0.
template <typename T>
PackedBitMatrix pack_signs(std::span<const T> values, std::size_t rows, std::size_t cols);

template <typename T>
PackedBitMatrix pack_signs(const Tensor<T>& matrix);

template <typename T>
Tensor<T> unpack(const PackedBitMatrix& m);

// Sum of a_i * b_i over the first n entries of two packed rows.
std::int64_t xnor_popcount_dot(std::span<const Word> a, std::span<const Word> b, std::size_t n);

// out[i][j] = dot(A.row(i), B.row(j)); B is the transposed right operand.
IntMatrix binary_gemm(const PackedBitMatrix& a, const PackedBitMatrix& b);

// Convolution of sign(x) with sign(w) by patch lowering + binary_gemm.
// x: N x C x H x W, w: O x C x KH x KW. Padding positions read as -1.
// Returns the integer counts as reals, N x O x OH x OW.
template <typename T>
Tensor<T> binary_conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding);

// Output extent of a strided window; throws DimensionError when the kernel
// does not fit in the padded input.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

}  // namespace dybnn::bitkernel
