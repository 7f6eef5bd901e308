#pragma once

// Differentiable primitives on the tape. Activation tensors are [F,C,H,W]
// (frames, channels, rows, cols); F=1 for plain images. Every op has a
// finite-difference-verified adjoint (see gradcheck.hpp and the test suite).

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

#include "metalattice/blas.hpp"
#include "metalattice/tape.hpp"

namespace metalattice::nn {

// Small GEMMs (per-head attention blocks) bypass BLAS dispatch overhead.
inline void gemm_any(bool ta, bool tb, int m, int n, int k, float alpha,
                     const float* a, int lda, const float* b, int ldb,
                     float beta, float* c, int ldc) {
    const std::int64_t work = static_cast<std::int64_t>(m) * n * k;
    if (work >= 16384) {
        metalattice::sgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
        return;
    }
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int p = 0; p < k; ++p) {
                const float av = ta ? a[p * lda + i] : a[i * lda + p];
                const float bv = tb ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            c[i * ldc + j] = alpha * acc + (beta == 0.0f ? 0.0f : beta * c[i * ldc + j]);
        }
    }
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

// ---------------------------------------------------------------- elementwise

inline Var add(Tape& T, Var a, Var b) {
    check_same_dims(T.val(a), T.val(b), "add");
    Tensor out = T.val(a);
    const Tensor& vb = T.val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += vb.v[i];
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b](Tape& t) {
        const Tensor& g = t.grad(o);
        if (t.needs_grad(a)) accumulate(t.grad(a), g);
        if (t.needs_grad(b)) accumulate(t.grad(b), g);
    });
    return o;
}

inline Var sub(Tape& T, Var a, Var b) {
    check_same_dims(T.val(a), T.val(b), "sub");
    Tensor out = T.val(a);
    const Tensor& vb = T.val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= vb.v[i];
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b](Tape& t) {
        const Tensor& g = t.grad(o);
        if (t.needs_grad(a)) accumulate(t.grad(a), g);
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] -= g.v[i];
        }
    });
    return o;
}

inline Var mul(Tape& T, Var a, Var b) {
    check_same_dims(T.val(a), T.val(b), "mul");
    Tensor out = T.val(a);
    const Tensor& vb = T.val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= vb.v[i];
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b](Tape& t) {
        const Tensor& g = t.grad(o);
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad(a);
            const Tensor& vb2 = t.val(b);
            for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i] * vb2.v[i];
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b);
            const Tensor& va2 = t.val(a);
            for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += g.v[i] * va2.v[i];
        }
    });
    return o;
}

inline Var scale(Tape& T, Var a, double s) {
    Tensor out = T.val(a);
    const float fs = static_cast<float>(s);
    for (auto& x : out.v) x *= fs;
    const bool ng = T.needs_grad(a);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, fs](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += fs * g.v[i];
    });
    return o;
}

inline Var silu(Tape& T, Var a) {
    Tensor out = T.val(a);
    for (auto& x : out.v) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        x = x * s;
    }
    const bool ng = T.needs_grad(a);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a](Tape& t) {
        const Tensor& g = t.grad(o);
        const Tensor& x = t.val(a);
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.v.size(); ++i) {
            const float s = 1.0f / (1.0f + std::exp(-x.v[i]));
            ga.v[i] += g.v[i] * (s * (1.0f + x.v[i] * (1.0f - s)));
        }
    });
    return o;
}

inline Var sigmoid_op(Tape& T, Var a) {
    Tensor out = T.val(a);
    for (auto& x : out.v) x = 1.0f / (1.0f + std::exp(-x));
    const bool ng = T.needs_grad(a);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a](Tape& t) {
        const Tensor& g = t.grad(o);
        const Tensor& y = t.val(o);
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.v.size(); ++i)
            ga.v[i] += g.v[i] * y.v[i] * (1.0f - y.v[i]);
    });
    return o;
}

// ------------------------------------------------------------------- matmul

// a: [M,K], b: [K,N] -> [M,N]
inline Var matmul(Tape& T, Var a, Var b) {
    const Tensor& va = T.val(a);
    const Tensor& vb = T.val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
        throw std::invalid_argument("matmul: need [M,K]x[K,N]");
    const int M = va.dim(0), K = va.dim(1), N = vb.dim(1);
    Tensor out({M, N});
    gemm_any(false, false, M, N, K, 1.0f, va.data(), K, vb.data(), N, 0.0f, out.data(), N);
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b, M, K, N](Tape& t) {
        const Tensor& g = t.grad(o);
        if (t.needs_grad(a))
            gemm_any(false, true, M, K, N, 1.0f, g.data(), N, t.val(b).data(), N, 1.0f, t.grad(a).data(), K);
        if (t.needs_grad(b))
            gemm_any(true, false, K, N, M, 1.0f, t.val(a).data(), K, g.data(), N, 1.0f, t.grad(b).data(), N);
    });
    return o;
}

// x: [N,Din], w: [Dout,Din], b: [Dout] -> [N,Dout]
inline Var linear(Tape& T, Var x, Var w, Var b) {
    const Tensor& vx = T.val(x);
    const Tensor& vw = T.val(w);
    const Tensor& vb = T.val(b);
    if (vx.ndim() != 2 || vw.ndim() != 2 || vx.dim(1) != vw.dim(1) || vb.dim(0) != vw.dim(0))
        throw std::invalid_argument("linear: shape mismatch");
    const int N = vx.dim(0), Din = vx.dim(1), Dout = vw.dim(0);
    Tensor out({N, Dout});
    gemm_any(false, true, N, Dout, Din, 1.0f, vx.data(), Din, vw.data(), Din, 0.0f, out.data(), Dout);
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < Dout; ++j) out.v[static_cast<std::size_t>(i) * Dout + j] += vb.v[static_cast<std::size_t>(j)];
    const bool ng = T.needs_grad(x) || T.needs_grad(w) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, w, b, N, Din, Dout](Tape& t) {
        const Tensor& g = t.grad(o);
        if (t.needs_grad(x))
            gemm_any(false, false, N, Din, Dout, 1.0f, g.data(), Dout, t.val(w).data(), Din, 1.0f, t.grad(x).data(), Din);
        if (t.needs_grad(w))
            gemm_any(true, false, Dout, Din, N, 1.0f, g.data(), Dout, t.val(x).data(), Din, 1.0f, t.grad(w).data(), Din);
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b);
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < Dout; ++j) gb.v[static_cast<std::size_t>(j)] += g.v[static_cast<std::size_t>(i) * Dout + j];
        }
    });
    return o;
}

// ------------------------------------------------------------------- conv2d

struct Conv2dDims {
    int F, Ci, H, W, Co, k, stride, pad, Ho, Wo;
};

inline Conv2dDims conv2d_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4) throw std::invalid_argument("conv2d: x must be [F,C,H,W], w [Co,Ci,k,k]");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >=1 and pad >=0");
    Conv2dDims d;
    d.F = x.dim(0); d.Ci = x.dim(1); d.H = x.dim(2); d.W = x.dim(3);
    d.Co = w.dim(0); d.k = w.dim(2);
    if (w.dim(1) != d.Ci || w.dim(3) != d.k) throw std::invalid_argument("conv2d: kernel shape mismatch");
    if (d.k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
    d.stride = stride; d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.k) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.k) / stride + 1;
    if (d.Ho < 1 || d.Wo < 1) throw std::invalid_argument("conv2d: empty output");
    return d;
}

// col rows live at col + row * row_pitch so multi-frame columns can share
// one [K, F*HWo] matrix
inline void im2col(const float* x, const Conv2dDims& d, float* col, std::size_t row_pitch) {
    const bool unit = d.stride == 1;
    for (int c = 0; c < d.Ci; ++c) {
        for (int ki = 0; ki < d.k; ++ki) {
            for (int kj = 0; kj < d.k; ++kj) {
                float* dst = col + (static_cast<std::size_t>(c) * d.k * d.k + ki * d.k + kj) * row_pitch;
                for (int oi = 0; oi < d.Ho; ++oi) {
                    const int ii = oi * d.stride + ki - d.pad;
                    float* row = dst + static_cast<std::size_t>(oi) * d.Wo;
                    if (ii < 0 || ii >= d.H) {
                        std::memset(row, 0, sizeof(float) * static_cast<std::size_t>(d.Wo));
                        continue;
                    }
                    const float* src = x + (static_cast<std::size_t>(c) * d.H + ii) * d.W;
                    if (unit) {
                        // contiguous shifted copy with zeroed borders
                        const int jlo = std::max(0, d.pad - kj);
                        const int jhi = std::min(d.Wo, d.W + d.pad - kj);
                        for (int oj = 0; oj < jlo; ++oj) row[oj] = 0.0f;
                        if (jhi > jlo)
                            std::memcpy(row + jlo, src + (jlo + kj - d.pad),
                                        sizeof(float) * static_cast<std::size_t>(jhi - jlo));
                        for (int oj = jhi; oj < d.Wo; ++oj) row[oj] = 0.0f;
                    } else {
                        for (int oj = 0; oj < d.Wo; ++oj) {
                            const int jj = oj * d.stride + kj - d.pad;
                            row[oj] = (jj >= 0 && jj < d.W) ? src[jj] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// scratch reused across conv calls on the same thread
inline std::vector<float>& conv_scratch(std::size_t n) {
    thread_local std::vector<float> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}

inline void col2im_add(const float* col, const Conv2dDims& d, float* x, std::size_t row_pitch) {
    const bool unit = d.stride == 1;
    for (int c = 0; c < d.Ci; ++c) {
        for (int ki = 0; ki < d.k; ++ki) {
            for (int kj = 0; kj < d.k; ++kj) {
                const float* src = col + (static_cast<std::size_t>(c) * d.k * d.k + ki * d.k + kj) * row_pitch;
                for (int oi = 0; oi < d.Ho; ++oi) {
                    const int ii = oi * d.stride + ki - d.pad;
                    if (ii < 0 || ii >= d.H) continue;
                    float* dst = x + (static_cast<std::size_t>(c) * d.H + ii) * d.W;
                    const float* row = src + static_cast<std::size_t>(oi) * d.Wo;
                    if (unit) {
                        const int jlo = std::max(0, d.pad - kj);
                        const int jhi = std::min(d.Wo, d.W + d.pad - kj);
                        float* dseg = dst + (jlo + kj - d.pad);
                        for (int oj = jlo; oj < jhi; ++oj) dseg[oj - jlo] += row[oj];
                    } else {
                        for (int oj = 0; oj < d.Wo; ++oj) {
                            const int jj = oj * d.stride + kj - d.pad;
                            if (jj >= 0 && jj < d.W) dst[jj] += row[oj];
                        }
                    }
                }
            }
        }
    }
}

// x: [F,Ci,H,W], w: [Co,Ci,k,k], b: [Co] -> [F,Co,Ho,Wo]. Cross-correlation
// with zero padding; the im2col buffer is rebuilt in the adjoint to keep the
// tape's memory footprint at one activation per node.
inline Var conv2d(Tape& T, Var x, Var w, Var b, int stride = 1, int pad = 0) {
    const Conv2dDims d = conv2d_dims(T.val(x), T.val(w), stride, pad);
    const Tensor& vx = T.val(x);
    const Tensor& vw = T.val(w);
    const Tensor& vb = T.val(b);
    if (vb.numel() != d.Co) throw std::invalid_argument("conv2d: bias size");
    const int K = d.Ci * d.k * d.k, HWo = d.Ho * d.Wo;
    const bool pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
    Tensor out({d.F, d.Co, d.Ho, d.Wo});
    const std::size_t xs = static_cast<std::size_t>(d.Ci) * d.H * d.W;
    const std::size_t os = static_cast<std::size_t>(d.Co) * HWo;
    const std::size_t cs = static_cast<std::size_t>(K) * HWo;

    {
        std::vector<float>& col = conv_scratch(pointwise ? 1 : cs);
        for (int f = 0; f < d.F; ++f) {
            const float* colp;
            if (pointwise) {
                colp = vx.data() + f * xs; // [Ci, H*W] is already the column matrix
            } else {
                im2col(vx.data() + f * xs, d, col.data(), static_cast<std::size_t>(HWo));
                colp = col.data();
            }
            gemm_any(false, false, d.Co, HWo, K, 1.0f, vw.data(), K, colp, HWo, 0.0f, out.data() + f * os, HWo);
            for (int c = 0; c < d.Co; ++c) {
                float* dst = out.data() + f * os + static_cast<std::size_t>(c) * HWo;
                const float bias = vb.v[static_cast<std::size_t>(c)];
                for (int p = 0; p < HWo; ++p) dst[p] += bias;
            }
        }
    }
    const bool ng = T.needs_grad(x) || T.needs_grad(w) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, w, b, d, K, HWo, xs, os, cs, pointwise](Tape& t) {
        const Tensor& g = t.grad(o);
        const bool need_x = t.needs_grad(x);
        std::vector<float> col(pointwise ? 0 : cs);
        std::vector<float> dcol((pointwise || !need_x) ? 0 : cs);
        for (int f = 0; f < d.F; ++f) {
            const float* gf = g.data() + f * os;
            const float* colp = nullptr;
            if (t.needs_grad(w) || need_x) {
                if (pointwise) {
                    colp = t.val(x).data() + f * xs;
                } else {
                    im2col(t.val(x).data() + f * xs, d, col.data(), static_cast<std::size_t>(HWo));
                    colp = col.data();
                }
            }
            if (t.needs_grad(w))
                gemm_any(false, true, d.Co, K, HWo, 1.0f, gf, HWo, colp, HWo, 1.0f, t.grad(w).data(), K);
            if (need_x) {
                if (pointwise) {
                    gemm_any(true, false, K, HWo, d.Co, 1.0f, t.val(w).data(), K, gf, HWo, 1.0f,
                             t.grad(x).data() + f * xs, HWo);
                } else {
                    gemm_any(true, false, K, HWo, d.Co, 1.0f, t.val(w).data(), K, gf, HWo, 0.0f, dcol.data(), HWo);
                    col2im_add(dcol.data(), d, t.grad(x).data() + f * xs, static_cast<std::size_t>(HWo));
                }
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad(b);
                for (int c = 0; c < d.Co; ++c) {
                    double s = 0.0;
                    const float* src = gf + static_cast<std::size_t>(c) * HWo;
                    for (int p = 0; p < HWo; ++p) s += src[p];
                    gb.v[static_cast<std::size_t>(c)] += static_cast<float>(s);
                }
            }
        }
    });
    return o;
}

// Temporal conv, kernel kt over the frame axis with same-padding.
// x: [F,Ci,H,W], w: [Co,Ci,kt], b: [Co] -> [F,Co,H,W]
inline Var conv1d_time(Tape& T, Var x, Var w, Var b) {
    const Tensor& vx = T.val(x);
    const Tensor& vw = T.val(w);
    if (vx.ndim() != 4 || vw.ndim() != 3 || vw.dim(1) != vx.dim(1))
        throw std::invalid_argument("conv1d_time: shape mismatch");
    const int F = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    const int Co = vw.dim(0), kt = vw.dim(2), off = kt / 2;
    if (kt % 2 == 0) throw std::invalid_argument("conv1d_time: kernel size must be odd");
    const int HW = H * W;
    const Tensor& vb = T.val(b);
    Tensor out({F, Co, H, W});
    const std::size_t xs = static_cast<std::size_t>(Ci) * HW, os = static_cast<std::size_t>(Co) * HW;
    for (int f = 0; f < F; ++f) {
        float* of = out.data() + f * os;
        for (int c = 0; c < Co; ++c) {
            const float bias = vb.v[static_cast<std::size_t>(c)];
            float* dst = of + static_cast<std::size_t>(c) * HW;
            for (int p = 0; p < HW; ++p) dst[p] = bias;
        }
        for (int dt = 0; dt < kt; ++dt) {
            const int fs = f + dt - off;
            if (fs < 0 || fs >= F) continue;
            // of += w[:,:,dt] (Co x Ci) * x[fs] (Ci x HW)
            std::vector<float> wslice(static_cast<std::size_t>(Co) * Ci);
            for (int co = 0; co < Co; ++co)
                for (int ci = 0; ci < Ci; ++ci)
                    wslice[static_cast<std::size_t>(co) * Ci + ci] = vw.v[(static_cast<std::size_t>(co) * Ci + ci) * kt + dt];
            gemm_any(false, false, Co, HW, Ci, 1.0f, wslice.data(), Ci, vx.data() + fs * xs, HW, 1.0f, of, HW);
        }
    }
    const bool ng = T.needs_grad(x) || T.needs_grad(w) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, w, b, F, Ci, Co, kt, off, HW, xs, os](Tape& t) {
        const Tensor& g = t.grad(o);
        std::vector<float> wslice(static_cast<std::size_t>(Co) * Ci);
        std::vector<float> gw(static_cast<std::size_t>(Co) * Ci);
        for (int f = 0; f < F; ++f) {
            const float* gf = g.data() + f * os;
            for (int dt = 0; dt < kt; ++dt) {
                const int fs = f + dt - off;
                if (fs < 0 || fs >= F) continue;
                if (t.needs_grad(w)) {
                    gemm_any(false, true, Co, Ci, HW, 1.0f, gf, HW, t.val(x).data() + fs * xs, HW, 0.0f, gw.data(), Ci);
                    Tensor& gwt = t.grad(w);
                    for (int co = 0; co < Co; ++co)
                        for (int ci = 0; ci < Ci; ++ci)
                            gwt.v[(static_cast<std::size_t>(co) * Ci + ci) * kt + dt] += gw[static_cast<std::size_t>(co) * Ci + ci];
                }
                if (t.needs_grad(x)) {
                    for (int co = 0; co < Co; ++co)
                        for (int ci = 0; ci < Ci; ++ci)
                            wslice[static_cast<std::size_t>(co) * Ci + ci] = t.val(w).v[(static_cast<std::size_t>(co) * Ci + ci) * kt + dt];
                    gemm_any(true, false, Ci, HW, Co, 1.0f, wslice.data(), Ci, gf, HW, 1.0f, t.grad(x).data() + fs * xs, HW);
                }
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad(b);
                for (int c = 0; c < Co; ++c) {
                    double s = 0.0;
                    const float* src = gf + static_cast<std::size_t>(c) * HW;
                    for (int p = 0; p < HW; ++p) s += src[p];
                    gb.v[static_cast<std::size_t>(c)] += static_cast<float>(s);
                }
            }
        }
    });
    return o;
}

// --------------------------------------------------------------- group norm

// x: [F,C,H,W]; statistics per group over (F, C/G channels, H, W); gain and
// bias are per channel.
inline Var group_norm(Tape& T, Var x, Var gain, Var bias, int groups, float eps = 1e-5f) {
    const Tensor& vx = T.val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("group_norm: x must be [F,C,H,W]");
    const int F = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
    const int Cg = C / groups, HW = H * W;
    const Tensor& vg = T.val(gain);
    const Tensor& vb = T.val(bias);
    if (vg.numel() != C || vb.numel() != C) throw std::invalid_argument("group_norm: gain/bias size");

    std::vector<double> mu(static_cast<std::size_t>(groups)), rstd(static_cast<std::size_t>(groups));
    const double cnt = static_cast<double>(F) * Cg * HW;
    for (int g = 0; g < groups; ++g) {
        double s = 0.0, s2 = 0.0;
        for (int f = 0; f < F; ++f)
            for (int c = g * Cg; c < (g + 1) * Cg; ++c) {
                const float* p = vx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                for (int i = 0; i < HW; ++i) { s += p[i]; s2 += static_cast<double>(p[i]) * p[i]; }
            }
        const double m = s / cnt;
        double var = s2 / cnt - m * m;
        if (var < 0.0) var = 0.0;
        mu[static_cast<std::size_t>(g)] = m;
        rstd[static_cast<std::size_t>(g)] = 1.0 / std::sqrt(var + eps);
    }
    Tensor out({F, C, H, W});
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            const int g = c / Cg;
            const float m = static_cast<float>(mu[static_cast<std::size_t>(g)]);
            const float r = static_cast<float>(rstd[static_cast<std::size_t>(g)]);
            const float ga = vg.v[static_cast<std::size_t>(c)], bi = vb.v[static_cast<std::size_t>(c)];
            const float* src = vx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
            float* dst = out.data() + (static_cast<std::size_t>(f) * C + c) * HW;
            for (int i = 0; i < HW; ++i) dst[i] = ga * ((src[i] - m) * r) + bi;
        }
    const bool ng = T.needs_grad(x) || T.needs_grad(gain) || T.needs_grad(bias);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, gain, bias, groups, F, C, Cg, HW, mu, rstd, cnt](Tape& t) {
        const Tensor& g = t.grad(o);
        const Tensor& vx2 = t.val(x);
        const Tensor& vg2 = t.val(gain);
        // per-channel sums for gain/bias
        if (t.needs_grad(gain) || t.needs_grad(bias)) {
            for (int c = 0; c < C; ++c) {
                const int gr = c / Cg;
                const float m = static_cast<float>(mu[static_cast<std::size_t>(gr)]);
                const float r = static_cast<float>(rstd[static_cast<std::size_t>(gr)]);
                double sg = 0.0, sb = 0.0;
                for (int f = 0; f < F; ++f) {
                    const float* gp = g.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    const float* xp = vx2.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        sg += static_cast<double>(gp[i]) * ((xp[i] - m) * r);
                        sb += gp[i];
                    }
                }
                if (t.needs_grad(gain)) t.grad(gain).v[static_cast<std::size_t>(c)] += static_cast<float>(sg);
                if (t.needs_grad(bias)) t.grad(bias).v[static_cast<std::size_t>(c)] += static_cast<float>(sb);
            }
        }
        if (!t.needs_grad(x)) return;
        Tensor& gx = t.grad(x);
        for (int gr = 0; gr < groups; ++gr) {
            const float m = static_cast<float>(mu[static_cast<std::size_t>(gr)]);
            const float r = static_cast<float>(rstd[static_cast<std::size_t>(gr)]);
            double s1 = 0.0, s2 = 0.0; // sum(dxhat), sum(dxhat * xhat)
            for (int f = 0; f < F; ++f)
                for (int c = gr * Cg; c < (gr + 1) * Cg; ++c) {
                    const float ga = vg2.v[static_cast<std::size_t>(c)];
                    const float* gp = g.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    const float* xp = vx2.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        const float dxh = gp[i] * ga;
                        const float xh = (xp[i] - m) * r;
                        s1 += dxh;
                        s2 += static_cast<double>(dxh) * xh;
                    }
                }
            const float c1 = static_cast<float>(s1 / cnt), c2 = static_cast<float>(s2 / cnt);
            for (int f = 0; f < F; ++f)
                for (int c = gr * Cg; c < (gr + 1) * Cg; ++c) {
                    const float ga = vg2.v[static_cast<std::size_t>(c)];
                    const float* gp = g.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    const float* xp = vx2.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    float* dst = gx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        const float dxh = gp[i] * ga;
                        const float xh = (xp[i] - m) * r;
                        dst[i] += r * (dxh - c1 - xh * c2);
                    }
                }
        }
    });
    return o;
}

// ------------------------------------------------------------------ softmax

// softmax over the last dim
inline Var softmax_lastdim(Tape& T, Var x) {
    const Tensor& vx = T.val(x);
    const int L = vx.dim(vx.ndim() - 1);
    const std::int64_t rows = vx.numel() / L;
    Tensor out = vx;
    for (std::int64_t rI = 0; rI < rows; ++rI) {
        float* p = out.data() + rI * L;
        float mx = p[0];
        for (int i = 1; i < L; ++i) mx = std::max(mx, p[i]);
        double s = 0.0;
        for (int i = 0; i < L; ++i) { p[i] = std::exp(p[i] - mx); s += p[i]; }
        const float inv = static_cast<float>(1.0 / s);
        for (int i = 0; i < L; ++i) p[i] *= inv;
    }
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, L, rows](Tape& t) {
        const Tensor& g = t.grad(o);
        const Tensor& y = t.val(o);
        Tensor& gx = t.grad(x);
        for (std::int64_t rI = 0; rI < rows; ++rI) {
            const float* gp = g.data() + rI * L;
            const float* yp = y.data() + rI * L;
            float* dst = gx.data() + rI * L;
            double dot = 0.0;
            for (int i = 0; i < L; ++i) dot += static_cast<double>(gp[i]) * yp[i];
            for (int i = 0; i < L; ++i) dst[i] += yp[i] * (gp[i] - static_cast<float>(dot));
        }
    });
    return o;
}

// ---------------------------------------------------------------- attention

// Multi-head scaled-dot-product softmax attention.
// q,k,v: [B,L,D]; D divisible by heads. Returns [B,L,D].
inline Var attention(Tape& T, Var q, Var k, Var v, int heads) {
    const Tensor& vq = T.val(q);
    const Tensor& vk = T.val(k);
    const Tensor& vv = T.val(v);
    if (vq.ndim() != 3) throw std::invalid_argument("attention: q must be [B,L,D]");
    check_same_dims(vq, vk, "attention q/k");
    check_same_dims(vq, vv, "attention q/v");
    const int B = vq.dim(0), L = vq.dim(1), D = vq.dim(2);
    if (L < 1) throw std::invalid_argument("attention: empty sequence");
    if (heads < 1 || D % heads != 0) throw std::invalid_argument("attention: D % heads != 0");
    const int dh = D / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

    // attention weights kept for the adjoint: [B,heads,L,L]
    auto attn = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B) * heads * L * L);
    Tensor out({B, L, D});
    std::vector<float> qh(static_cast<std::size_t>(L) * dh), kh(qh.size()), vh(qh.size()), oh(qh.size());
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
            const float* qb = vq.data() + static_cast<std::size_t>(b) * L * D;
            const float* kb = vk.data() + static_cast<std::size_t>(b) * L * D;
            const float* vb = vv.data() + static_cast<std::size_t>(b) * L * D;
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < dh; ++j) {
                    qh[static_cast<std::size_t>(i) * dh + j] = qb[static_cast<std::size_t>(i) * D + h * dh + j];
                    kh[static_cast<std::size_t>(i) * dh + j] = kb[static_cast<std::size_t>(i) * D + h * dh + j];
                    vh[static_cast<std::size_t>(i) * dh + j] = vb[static_cast<std::size_t>(i) * D + h * dh + j];
                }
            float* A = attn->data() + (static_cast<std::size_t>(b) * heads + h) * L * L;
            gemm_any(false, true, L, L, dh, sc, qh.data(), dh, kh.data(), dh, 0.0f, A, L);
            for (int i = 0; i < L; ++i) {
                float* row = A + static_cast<std::size_t>(i) * L;
                float mx = row[0];
                for (int j = 1; j < L; ++j) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (int j = 0; j < L; ++j) { row[j] = std::exp(row[j] - mx); s += row[j]; }
                const float inv = static_cast<float>(1.0 / s);
                for (int j = 0; j < L; ++j) row[j] *= inv;
            }
            gemm_any(false, false, L, dh, L, 1.0f, A, L, vh.data(), dh, 0.0f, oh.data(), dh);
            float* ob = out.data() + static_cast<std::size_t>(b) * L * D;
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < dh; ++j) ob[static_cast<std::size_t>(i) * D + h * dh + j] = oh[static_cast<std::size_t>(i) * dh + j];
        }
    }
    const bool ng = T.needs_grad(q) || T.needs_grad(k) || T.needs_grad(v);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, q, k, v, heads, B, L, D, dh, sc, attn](Tape& t) {
        const Tensor& g = t.grad(o);
        std::vector<float> qh(static_cast<std::size_t>(L) * dh), kh(qh.size()), vh(qh.size());
        std::vector<float> goh(qh.size()), dqh(qh.size()), dkh(qh.size()), dvh(qh.size());
        std::vector<float> dA(static_cast<std::size_t>(L) * L);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < heads; ++h) {
                const float* qb = t.val(q).data() + static_cast<std::size_t>(b) * L * D;
                const float* kb = t.val(k).data() + static_cast<std::size_t>(b) * L * D;
                const float* vb = t.val(v).data() + static_cast<std::size_t>(b) * L * D;
                const float* gb = g.data() + static_cast<std::size_t>(b) * L * D;
                for (int i = 0; i < L; ++i)
                    for (int j = 0; j < dh; ++j) {
                        const std::size_t src = static_cast<std::size_t>(i) * D + h * dh + j;
                        const std::size_t dst = static_cast<std::size_t>(i) * dh + j;
                        qh[dst] = qb[src]; kh[dst] = kb[src]; vh[dst] = vb[src]; goh[dst] = gb[src];
                    }
                const float* A = attn->data() + (static_cast<std::size_t>(b) * heads + h) * L * L;
                // dV = A^T dO ; dA = dO V^T ; dS = A o (dA - rowsum(dA o A)) ; dQ = sc dS K ; dK = sc dS^T Q
                gemm_any(true, false, L, dh, L, 1.0f, A, L, goh.data(), dh, 0.0f, dvh.data(), dh);
                gemm_any(false, true, L, L, dh, 1.0f, goh.data(), dh, vh.data(), dh, 0.0f, dA.data(), L);
                for (int i = 0; i < L; ++i) {
                    const float* arow = A + static_cast<std::size_t>(i) * L;
                    float* drow = dA.data() + static_cast<std::size_t>(i) * L;
                    double dot = 0.0;
                    for (int j = 0; j < L; ++j) dot += static_cast<double>(drow[j]) * arow[j];
                    for (int j = 0; j < L; ++j) drow[j] = arow[j] * (drow[j] - static_cast<float>(dot));
                }
                gemm_any(false, false, L, dh, L, sc, dA.data(), L, kh.data(), dh, 0.0f, dqh.data(), dh);
                gemm_any(true, false, L, dh, L, sc, dA.data(), L, qh.data(), dh, 0.0f, dkh.data(), dh);
                auto scatter = [&](Var target, const std::vector<float>& dsrc) {
                    if (!t.needs_grad(target)) return;
                    float* dst = t.grad(target).data() + static_cast<std::size_t>(b) * L * D;
                    for (int i = 0; i < L; ++i)
                        for (int j = 0; j < dh; ++j)
                            dst[static_cast<std::size_t>(i) * D + h * dh + j] += dsrc[static_cast<std::size_t>(i) * dh + j];
                };
                scatter(q, dqh);
                scatter(k, dkh);
                scatter(v, dvh);
            }
        }
    });
    return o;
}

// Kernelized (softmax-free) linear attention: per head,
// out = phi_q(q) . (phi_k(k)^T v) with phi_q = softmax over features and
// phi_k = softmax over the sequence. Output rows stay convex combinations of
// value rows. q,k,v: [B,L,D].
inline Var linear_attention(Tape& T, Var q, Var k, Var v, int heads) {
    const Tensor& vq = T.val(q);
    check_same_dims(vq, T.val(k), "linear_attention q/k");
    check_same_dims(vq, T.val(v), "linear_attention q/v");
    if (vq.ndim() != 3) throw std::invalid_argument("linear_attention: q must be [B,L,D]");
    const int B = vq.dim(0), L = vq.dim(1), D = vq.dim(2);
    if (L < 1) throw std::invalid_argument("linear_attention: empty sequence");
    if (heads < 1 || D % heads != 0) throw std::invalid_argument("linear_attention: D % heads != 0");
    const int dh = D / heads;

    auto qs = std::make_shared<std::vector<float>>(vq.v.size()); // softmaxed q (per row within head)
    auto ks = std::make_shared<std::vector<float>>(vq.v.size()); // softmaxed k (per feature over L)
    const Tensor& vk = T.val(k);
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < L; ++i) {
                const float* src = vq.data() + (static_cast<std::size_t>(b) * L + i) * D + h * dh;
                float* dst = qs->data() + (static_cast<std::size_t>(b) * L + i) * D + h * dh;
                float mx = src[0];
                for (int j = 1; j < dh; ++j) mx = std::max(mx, src[j]);
                double s = 0.0;
                for (int j = 0; j < dh; ++j) { dst[j] = std::exp(src[j] - mx); s += dst[j]; }
                const float inv = static_cast<float>(1.0 / s);
                for (int j = 0; j < dh; ++j) dst[j] *= inv;
            }
            for (int j = 0; j < dh; ++j) {
                float mx = -3.4e38f;
                for (int i = 0; i < L; ++i)
                    mx = std::max(mx, vk.v[(static_cast<std::size_t>(b) * L + i) * D + h * dh + j]);
                double s = 0.0;
                for (int i = 0; i < L; ++i) {
                    float e = std::exp(vk.v[(static_cast<std::size_t>(b) * L + i) * D + h * dh + j] - mx);
                    (*ks)[(static_cast<std::size_t>(b) * L + i) * D + h * dh + j] = e;
                    s += e;
                }
                const float inv = static_cast<float>(1.0 / s);
                for (int i = 0; i < L; ++i) (*ks)[(static_cast<std::size_t>(b) * L + i) * D + h * dh + j] *= inv;
            }
        }

    const Tensor& vv = T.val(v);
    Tensor out({B, L, D});
    std::vector<float> ctx(static_cast<std::size_t>(dh) * dh);
    std::vector<float> khb(static_cast<std::size_t>(L) * dh), vhb(khb.size()), qhb(khb.size()), ohb(khb.size());
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < dh; ++j) {
                    const std::size_t src = (static_cast<std::size_t>(b) * L + i) * D + h * dh + j;
                    const std::size_t dst = static_cast<std::size_t>(i) * dh + j;
                    qhb[dst] = (*qs)[src]; khb[dst] = (*ks)[src]; vhb[dst] = vv.v[src];
                }
            gemm_any(true, false, dh, dh, L, 1.0f, khb.data(), dh, vhb.data(), dh, 0.0f, ctx.data(), dh);
            gemm_any(false, false, L, dh, dh, 1.0f, qhb.data(), dh, ctx.data(), dh, 0.0f, ohb.data(), dh);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < dh; ++j)
                    out.v[(static_cast<std::size_t>(b) * L + i) * D + h * dh + j] = ohb[static_cast<std::size_t>(i) * dh + j];
        }
    const bool ng = T.needs_grad(q) || T.needs_grad(k) || T.needs_grad(v);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, q, k, v, heads, B, L, D, dh, qs, ks](Tape& t) {
        const Tensor& g = t.grad(o);
        const Tensor& vv2 = t.val(v);
        std::vector<float> ctx(static_cast<std::size_t>(dh) * dh), dctx(ctx.size());
        std::vector<float> khb(static_cast<std::size_t>(L) * dh), vhb(khb.size()), qhb(khb.size()), ghb(khb.size());
        std::vector<float> dqs(khb.size()), dks(khb.size()), dvh(khb.size());
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < L; ++i)
                    for (int j = 0; j < dh; ++j) {
                        const std::size_t src = (static_cast<std::size_t>(b) * L + i) * D + h * dh + j;
                        const std::size_t dst = static_cast<std::size_t>(i) * dh + j;
                        qhb[dst] = (*qs)[src]; khb[dst] = (*ks)[src]; vhb[dst] = vv2.v[src]; ghb[dst] = g.v[src];
                    }
                gemm_any(true, false, dh, dh, L, 1.0f, khb.data(), dh, vhb.data(), dh, 0.0f, ctx.data(), dh);
                // dctx = qs^T dO ; dqs = dO ctx^T ; dks = v dctx^T ; dv = ks dctx
                gemm_any(true, false, dh, dh, L, 1.0f, qhb.data(), dh, ghb.data(), dh, 0.0f, dctx.data(), dh);
                gemm_any(false, true, L, dh, dh, 1.0f, ghb.data(), dh, ctx.data(), dh, 0.0f, dqs.data(), dh);
                gemm_any(false, true, L, dh, dh, 1.0f, vhb.data(), dh, dctx.data(), dh, 0.0f, dks.data(), dh);
                gemm_any(false, false, L, dh, dh, 1.0f, khb.data(), dh, dctx.data(), dh, 0.0f, dvh.data(), dh);
                // softmax adjoints: q rows over features, k columns over L
                if (t.needs_grad(q)) {
                    float* dst = t.grad(q).data() + static_cast<std::size_t>(b) * L * D;
                    for (int i = 0; i < L; ++i) {
                        double dot = 0.0;
                        for (int j = 0; j < dh; ++j)
                            dot += static_cast<double>(dqs[static_cast<std::size_t>(i) * dh + j]) * qhb[static_cast<std::size_t>(i) * dh + j];
                        for (int j = 0; j < dh; ++j) {
                            const float y = qhb[static_cast<std::size_t>(i) * dh + j];
                            dst[static_cast<std::size_t>(i) * D + h * dh + j] +=
                                y * (dqs[static_cast<std::size_t>(i) * dh + j] - static_cast<float>(dot));
                        }
                    }
                }
                if (t.needs_grad(k)) {
                    float* dst = t.grad(k).data() + static_cast<std::size_t>(b) * L * D;
                    for (int j = 0; j < dh; ++j) {
                        double dot = 0.0;
                        for (int i = 0; i < L; ++i)
                            dot += static_cast<double>(dks[static_cast<std::size_t>(i) * dh + j]) * khb[static_cast<std::size_t>(i) * dh + j];
                        for (int i = 0; i < L; ++i) {
                            const float y = khb[static_cast<std::size_t>(i) * dh + j];
                            dst[static_cast<std::size_t>(i) * D + h * dh + j] +=
                                y * (dks[static_cast<std::size_t>(i) * dh + j] - static_cast<float>(dot));
                        }
                    }
                }
                if (t.needs_grad(v)) {
                    float* dst = t.grad(v).data() + static_cast<std::size_t>(b) * L * D;
                    for (int i = 0; i < L; ++i)
                        for (int j = 0; j < dh; ++j)
                            dst[static_cast<std::size_t>(i) * D + h * dh + j] += dvh[static_cast<std::size_t>(i) * dh + j];
                }
            }
    });
    return o;
}

// -------------------------------------------------------- shape and layout

// nearest-neighbor 2x upsample on H,W
inline Var upsample2x(Tape& T, Var x) {
    const Tensor& vx = T.val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("upsample2x: x must be [F,C,H,W]");
    const int F = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    Tensor out({F, C, 2 * H, 2 * W});
    for (int fc = 0; fc < F * C; ++fc) {
        const float* src = vx.data() + static_cast<std::size_t>(fc) * H * W;
        float* dst = out.data() + static_cast<std::size_t>(fc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const float val = src[static_cast<std::size_t>(i) * W + j];
                float* d = dst + (static_cast<std::size_t>(2 * i) * 2 * W + 2 * j);
                d[0] = val; d[1] = val;
                d[2 * W] = val; d[2 * W + 1] = val;
            }
    }
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, F, C, H, W](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& gx = t.grad(x);
        for (int fc = 0; fc < F * C; ++fc) {
            const float* src = g.data() + static_cast<std::size_t>(fc) * 4 * H * W;
            float* dst = gx.data() + static_cast<std::size_t>(fc) * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const float* s = src + (static_cast<std::size_t>(2 * i) * 2 * W + 2 * j);
                    dst[static_cast<std::size_t>(i) * W + j] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
                }
        }
    });
    return o;
}

inline Var concat_channels(Tape& T, Var a, Var b) {
    const Tensor& va = T.val(a);
    const Tensor& vb = T.val(b);
    if (va.ndim() != 4 || vb.ndim() != 4 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3))
        throw std::invalid_argument("concat_channels: incompatible shapes");
    const int F = va.dim(0), Ca = va.dim(1), Cb = vb.dim(1), H = va.dim(2), W = va.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out({F, Ca + Cb, H, W});
    for (int f = 0; f < F; ++f) {
        std::memcpy(out.data() + static_cast<std::size_t>(f) * (Ca + Cb) * hw,
                    va.data() + static_cast<std::size_t>(f) * Ca * hw, sizeof(float) * Ca * hw);
        std::memcpy(out.data() + (static_cast<std::size_t>(f) * (Ca + Cb) + Ca) * hw,
                    vb.data() + static_cast<std::size_t>(f) * Cb * hw, sizeof(float) * Cb * hw);
    }
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b, F, Ca, Cb, hw](Tape& t) {
        const Tensor& g = t.grad(o);
        for (int f = 0; f < F; ++f) {
            if (t.needs_grad(a)) {
                float* dst = t.grad(a).data() + static_cast<std::size_t>(f) * Ca * hw;
                const float* src = g.data() + static_cast<std::size_t>(f) * (Ca + Cb) * hw;
                for (std::size_t i = 0; i < Ca * hw; ++i) dst[i] += src[i];
            }
            if (t.needs_grad(b)) {
                float* dst = t.grad(b).data() + static_cast<std::size_t>(f) * Cb * hw;
                const float* src = g.data() + (static_cast<std::size_t>(f) * (Ca + Cb) + Ca) * hw;
                for (std::size_t i = 0; i < Cb * hw; ++i) dst[i] += src[i];
            }
        }
    });
    return o;
}

// x: [F,C,H,W] + e: [C] broadcast over F,H,W
inline Var add_channel_bias(Tape& T, Var x, Var e) {
    const Tensor& vx = T.val(x);
    const Tensor& ve = T.val(e);
    if (vx.ndim() != 4 || ve.numel() != vx.dim(1))
        throw std::invalid_argument("add_channel_bias: shape mismatch");
    const int F = vx.dim(0), C = vx.dim(1);
    const std::size_t hw = static_cast<std::size_t>(vx.dim(2)) * vx.dim(3);
    Tensor out = vx;
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            float* p = out.data() + (static_cast<std::size_t>(f) * C + c) * hw;
            const float b = ve.v[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < hw; ++i) p[i] += b;
        }
    const bool ng = T.needs_grad(x) || T.needs_grad(e);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, e, F, C, hw](Tape& t) {
        const Tensor& g = t.grad(o);
        if (t.needs_grad(x)) accumulate(t.grad(x), g);
        if (t.needs_grad(e)) {
            Tensor& ge = t.grad(e);
            for (int f = 0; f < F; ++f)
                for (int c = 0; c < C; ++c) {
                    const float* p = g.data() + (static_cast<std::size_t>(f) * C + c) * hw;
                    double s = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) s += p[i];
                    ge.v[static_cast<std::size_t>(c)] += static_cast<float>(s);
                }
        }
    });
    return o;
}

// copy-based reshape (same element count)
inline Var reshape(Tape& T, Var x, std::vector<int> dims) {
    Tensor out = T.val(x);
    if (Tensor::numel_of(dims) != out.numel()) throw std::invalid_argument("reshape: element count mismatch");
    out.dims = std::move(dims);
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& gx = t.grad(x);
        for (std::size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += g.v[i];
    });
    return o;
}

// [F,C,H,W] -> [F, H*W, C] token layout for spatial attention
inline Var to_tokens_spatial(Tape& T, Var x) {
    const Tensor& vx = T.val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("to_tokens_spatial: x must be [F,C,H,W]");
    const int F = vx.dim(0), C = vx.dim(1), HW = vx.dim(2) * vx.dim(3);
    Tensor out({F, HW, C});
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            const float* src = vx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
            for (int p = 0; p < HW; ++p) out.v[(static_cast<std::size_t>(f) * HW + p) * C + c] = src[p];
        }
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, F, C, HW](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& gx = t.grad(x);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) {
                float* dst = gx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                for (int p = 0; p < HW; ++p) dst[p] += g.v[(static_cast<std::size_t>(f) * HW + p) * C + c];
            }
    });
    return o;
}

// inverse of to_tokens_spatial: [F,HW,C] -> [F,C,H,W]
inline Var from_tokens_spatial(Tape& T, Var x, int H, int W) {
    const Tensor& vx = T.val(x);
    if (vx.ndim() != 3 || vx.dim(1) != H * W) throw std::invalid_argument("from_tokens_spatial: shape mismatch");
    const int F = vx.dim(0), HW = H * W, C = vx.dim(2);
    Tensor out({F, C, H, W});
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            float* dst = out.data() + (static_cast<std::size_t>(f) * C + c) * HW;
            for (int p = 0; p < HW; ++p) dst[p] = vx.v[(static_cast<std::size_t>(f) * HW + p) * C + c];
        }
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, F, C, HW](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& gx = t.grad(x);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) {
                const float* src = g.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                for (int p = 0; p < HW; ++p) gx.v[(static_cast<std::size_t>(f) * HW + p) * C + c] += src[p];
            }
    });
    return o;
}

// [F,C,H,W] -> [H*W, F, C] token layout for temporal attention
inline Var to_tokens_temporal(Tape& T, Var x) {
    const Tensor& vx = T.val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("to_tokens_temporal: x must be [F,C,H,W]");
    const int F = vx.dim(0), C = vx.dim(1), HW = vx.dim(2) * vx.dim(3);
    Tensor out({HW, F, C});
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            const float* src = vx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
            for (int p = 0; p < HW; ++p) out.v[(static_cast<std::size_t>(p) * F + f) * C + c] = src[p];
        }
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, F, C, HW](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& gx = t.grad(x);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) {
                float* dst = gx.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                for (int p = 0; p < HW; ++p) dst[p] += g.v[(static_cast<std::size_t>(p) * F + f) * C + c];
            }
    });
    return o;
}

inline Var from_tokens_temporal(Tape& T, Var x, int H, int W) {
    const Tensor& vx = T.val(x);
    if (vx.ndim() != 3 || vx.dim(0) != H * W) throw std::invalid_argument("from_tokens_temporal: shape mismatch");
    const int HW = H * W, F = vx.dim(1), C = vx.dim(2);
    Tensor out({F, C, H, W});
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            float* dst = out.data() + (static_cast<std::size_t>(f) * C + c) * HW;
            for (int p = 0; p < HW; ++p) dst[p] = vx.v[(static_cast<std::size_t>(p) * F + f) * C + c];
        }
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x, F, C, HW](Tape& t) {
        const Tensor& g = t.grad(o);
        Tensor& gx = t.grad(x);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) {
                const float* src = g.data() + (static_cast<std::size_t>(f) * C + c) * HW;
                for (int p = 0; p < HW; ++p) gx.v[(static_cast<std::size_t>(p) * F + f) * C + c] += src[p];
            }
    });
    return o;
}

// ---------------------------------------------------------------- reductions

inline Var mean_all(Tape& T, Var x) {
    const Tensor& vx = T.val(x);
    Tensor out({1});
    out.v[0] = static_cast<float>(vx.mean());
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x](Tape& t) {
        const float g = t.grad(o).v[0] / static_cast<float>(t.val(x).numel());
        Tensor& gx = t.grad(x);
        for (auto& d : gx.v) d += g;
    });
    return o;
}

inline Var sum_all(Tape& T, Var x) {
    Tensor out({1});
    out.v[0] = static_cast<float>(T.val(x).sum());
    const bool ng = T.needs_grad(x);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, x](Tape& t) {
        const float g = t.grad(o).v[0];
        Tensor& gx = t.grad(x);
        for (auto& d : gx.v) d += g;
    });
    return o;
}

// mean squared error between a and b (scalar)
inline Var mse_loss(Tape& T, Var a, Var b) {
    check_same_dims(T.val(a), T.val(b), "mse_loss");
    const Tensor& va = T.val(a);
    const Tensor& vb = T.val(b);
    double s = 0.0;
    for (std::size_t i = 0; i < va.v.size(); ++i) {
        const double d = static_cast<double>(va.v[i]) - vb.v[i];
        s += d * d;
    }
    Tensor out({1});
    out.v[0] = static_cast<float>(s / static_cast<double>(va.v.size()));
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b](Tape& t) {
        const Tensor& va2 = t.val(a);
        const Tensor& vb2 = t.val(b);
        const float g = 2.0f * t.grad(o).v[0] / static_cast<float>(va2.numel());
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g * (va2.v[i] - vb2.v[i]);
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] -= g * (va2.v[i] - vb2.v[i]);
        }
    });
    return o;
}

// mean absolute error between a and b (scalar)
inline Var l1_loss(Tape& T, Var a, Var b) {
    check_same_dims(T.val(a), T.val(b), "l1_loss");
    const Tensor& va = T.val(a);
    const Tensor& vb = T.val(b);
    double s = 0.0;
    for (std::size_t i = 0; i < va.v.size(); ++i) s += std::abs(static_cast<double>(va.v[i]) - vb.v[i]);
    Tensor out({1});
    out.v[0] = static_cast<float>(s / static_cast<double>(va.v.size()));
    const bool ng = T.needs_grad(a) || T.needs_grad(b);
    Var o = T.emit(std::move(out), ng);
    if (ng) T.set_backward(o, [o, a, b](Tape& t) {
        const Tensor& va2 = t.val(a);
        const Tensor& vb2 = t.val(b);
        const float g = t.grad(o).v[0] / static_cast<float>(va2.numel());
        for (std::size_t i = 0; i < va2.v.size(); ++i) {
            const float sg = va2.v[i] > vb2.v[i] ? 1.0f : (va2.v[i] < vb2.v[i] ? -1.0f : 0.0f);
            if (t.needs_grad(a)) t.grad(a).v[i] += g * sg;
            if (t.needs_grad(b)) t.grad(b).v[i] -= g * sg;
        }
    });
    return o;
}

} // namespace metalattice::nn
