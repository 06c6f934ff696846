#pragma once

// Dense kernels shared by the model. Internal to the library.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace gapelab::kernels {

/// While alive, single-precision work flushes subnormals to zero. Late in
/// training, softmax tails and Adam moments underflow into the subnormal
/// range, where x86 arithmetic is many times slower. Double-precision
/// instantiations leave the floating-point environment alone.
template <class T>
class FlushDenormals {
public:
    FlushDenormals() {
#if defined(__SSE__)
        if constexpr (sizeof(T) == 4) {
            saved_ = _mm_getcsr();
            _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
        }
#endif
    }
    ~FlushDenormals() {
#if defined(__SSE__)
        if constexpr (sizeof(T) == 4) _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned saved_ = 0;
};

template <class T>
struct Vec;
template <>
struct Vec<float> {
    typedef float type __attribute__((vector_size(64)));
};
template <>
struct Vec<double> {
    typedef double type __attribute__((vector_size(64)));
};

/// C (+)= A B with A(i, k) = a[i * ars + k * acs], B row-major with stride
/// ldb and C row-major with stride ldc. Every C element is accumulated over
/// k in increasing order, whatever the tiling, so results are identical no
/// matter which rows or columns a call covers.
template <class T>
void gemm(std::size_t m, std::size_t n, std::size_t p, const T* a, std::size_t ars, std::size_t acs, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
    using V = typename Vec<T>::type;
    constexpr std::size_t W = 64 / sizeof(T);  // lanes per vector
    constexpr std::size_t MR = 4, NV = 2, NR = NV * W;

    // Full 4 x (2 vectors) tiles.
    const std::size_t n_pair = n / NR * NR;
    for (std::size_t j0 = 0; j0 < n_pair; j0 += NR) {
        std::size_t i0 = 0;
        for (; i0 + MR <= m; i0 += MR) {
            V acc[MR][NV];
            for (std::size_t r = 0; r < MR; ++r)
                for (std::size_t v = 0; v < NV; ++v) {
                    if (accumulate) std::memcpy(&acc[r][v], c + (i0 + r) * ldc + j0 + v * W, sizeof(V));
                    else acc[r][v] = V{};
                }
            for (std::size_t k = 0; k < p; ++k) {
                V bv[NV];
                for (std::size_t v = 0; v < NV; ++v) std::memcpy(&bv[v], b + k * ldb + j0 + v * W, sizeof(V));
                for (std::size_t r = 0; r < MR; ++r) {
                    const T av = a[(i0 + r) * ars + k * acs];
                    for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
                }
            }
            for (std::size_t r = 0; r < MR; ++r)
                for (std::size_t v = 0; v < NV; ++v) std::memcpy(c + (i0 + r) * ldc + j0 + v * W, &acc[r][v], sizeof(V));
        }
        for (; i0 < m; ++i0) {
            V acc[NV];
            for (std::size_t v = 0; v < NV; ++v) {
                if (accumulate) std::memcpy(&acc[v], c + i0 * ldc + j0 + v * W, sizeof(V));
                else acc[v] = V{};
            }
            for (std::size_t k = 0; k < p; ++k) {
                const T av = a[i0 * ars + k * acs];
                for (std::size_t v = 0; v < NV; ++v) {
                    V bv;
                    std::memcpy(&bv, b + k * ldb + j0 + v * W, sizeof(V));
                    acc[v] += av * bv;
                }
            }
            for (std::size_t v = 0; v < NV; ++v) std::memcpy(c + i0 * ldc + j0 + v * W, &acc[v], sizeof(V));
        }
    }

    // Remaining columns, one vector wide at a time. A partial last vector
    // reads B from a zero-padded copy and writes back only its live lanes.
    thread_local std::vector<T> panel;
    for (std::size_t j0 = n_pair; j0 < n; j0 += W) {
        const std::size_t w = std::min(W, n - j0);
        const T* bp = b + j0;
        std::size_t ldp = ldb;
        if (w < W) {
            panel.assign(p * W, T(0));
            for (std::size_t k = 0; k < p; ++k) std::memcpy(panel.data() + k * W, b + k * ldb + j0, w * sizeof(T));
            bp = panel.data();
            ldp = W;
        }
        const std::size_t bytes = w * sizeof(T);
        std::size_t i0 = 0;
        for (; i0 + MR <= m; i0 += MR) {
            V acc[MR];
            for (std::size_t r = 0; r < MR; ++r) {
                acc[r] = V{};
                if (accumulate) std::memcpy(&acc[r], c + (i0 + r) * ldc + j0, bytes);
            }
            for (std::size_t k = 0; k < p; ++k) {
                V bv;
                std::memcpy(&bv, bp + k * ldp, sizeof(V));
                for (std::size_t r = 0; r < MR; ++r) acc[r] += a[(i0 + r) * ars + k * acs] * bv;
            }
            for (std::size_t r = 0; r < MR; ++r) std::memcpy(c + (i0 + r) * ldc + j0, &acc[r], bytes);
        }
        for (; i0 < m; ++i0) {
            V acc = V{};
            if (accumulate) std::memcpy(&acc, c + i0 * ldc + j0, bytes);
            for (std::size_t k = 0; k < p; ++k) {
                V bv;
                std::memcpy(&bv, bp + k * ldp, sizeof(V));
                acc += a[i0 * ars + k * acs] * bv;
            }
            std::memcpy(c + i0 * ldc + j0, &acc, bytes);
        }
    }
}

/// dst (cols x rows) = src (rows x cols)^T; src rows have stride lds.
template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, std::size_t lds, T* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * lds + c];
}

} // namespace gapelab::kernels
