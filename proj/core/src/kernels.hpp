#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

// Dense kernels shared by the tape ops. Row-major throughout. The GEMM is an
// i-k-j saxpy loop so the inner dimension streams contiguously and the
// compiler can vectorize without reassociating reductions; results are
// bit-identical across runs for a given build.
namespace emostyle::detail {

// c{m,n} += a{m,k} * b{k,n}
template <class S>
void gemm_nn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c{m,n} = a{m,k} * b{k,n}
template <class S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = S(0);
    gemm_nn_acc(a, b, c, m, k, n);
}

// bt{n,m} = b{m,n}
template <class S>
void transpose(const S* b, S* bt, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) bt[j * m + i] = b[i * n + j];
}

// col{c*9, h*w} from x{c,h,w}, 3x3 window, zero pad 1
template <class S>
void im2col3x3(const S* x, S* col, std::size_t c, std::size_t h, std::size_t w) {
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const S* plane = x + ch * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                S* dst = col + (ch * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + ky - 1;
                    if (sy < 0 || sy >= static_cast<long>(h)) {
                        for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] = S(0);
                        continue;
                    }
                    const S* src = plane + static_cast<std::size_t>(sy) * w;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = static_cast<long>(xx) + kx - 1;
                        dst[y * w + xx] =
                            (sx < 0 || sx >= static_cast<long>(w)) ? S(0) : src[static_cast<std::size_t>(sx)];
                    }
                }
            }
        }
    }
}

// dx{c,h,w} += scatter of dcol{c*9, h*w}
template <class S>
void col2im3x3_acc(const S* dcol, S* dx, std::size_t c, std::size_t h, std::size_t w) {
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
        S* plane = dx + ch * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const S* src = dcol + (ch * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + ky - 1;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    S* dst = plane + static_cast<std::size_t>(sy) * w;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = static_cast<long>(xx) + kx - 1;
                        if (sx < 0 || sx >= static_cast<long>(w)) continue;
                        dst[static_cast<std::size_t>(sx)] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

template <class S>
S gelu_fwd(S x) {
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S u = k * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <class S>
S gelu_bwd(S x) {
    const S k = S(0.7978845608028654);
    const S u = k * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(u);
    const S du = k * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

template <class S>
void softmax_row(S* p, std::size_t n) {
    S mx = p[0];
    for (std::size_t j = 1; j < n; ++j) mx = p[j] > mx ? p[j] : mx;
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
    }
    const S inv = S(1) / sum;
    for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

}  // namespace emostyle::detail
