#include "refgame/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace refgame::ad {

namespace {

void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha, const float* a,
          int64_t lda, const float* b, int64_t ldb, float beta, float* c, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
          int64_t lda, const double* b, int64_t ldb, double beta, double* c, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
}

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype != b.dtype) throw std::runtime_error(std::string(op) + ": mixed dtypes");
}

bool wants_grad(const Tensor& t) { return t.requires_grad || t.on_tape(); }

bool should_tape(const std::vector<TensorPtr>& ins) {
    if (!grad_enabled()) return false;
    for (const auto& p : ins)
        if (p && wants_grad(*p)) return true;
    return false;
}

// records the tape node (or drops it when no input needs gradients)
void attach(const TensorPtr& out, std::vector<TensorPtr> parents, const char* name,
            std::function<void(Tensor&)> fn) {
    out->op = name;
    if (should_tape(parents)) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(fn);
    }
}

void finish(const TensorPtr& out, const char* name) { check_finite(*out, name); }

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, T* col) {
    // col is (C*9) x (H*W), kernel 3x3, stride 1, zero pad 1
    const int64_t HW = H * W;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < 3; ++ky) {
            for (int64_t kx = 0; kx < 3; ++kx) {
                T* dst = col + ((c * 9 + ky * 3 + kx)) * HW;
                const int64_t dy = ky - 1, dx = kx - 1;
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + dy;
                    T* row = dst + y * W;
                    if (sy < 0 || sy >= H) {
                        std::memset(row, 0, sizeof(T) * static_cast<size_t>(W));
                        continue;
                    }
                    const T* src = x + c * HW + sy * W;
                    const int64_t x0 = std::max<int64_t>(0, -dx);
                    const int64_t x1 = W - std::max<int64_t>(0, dx);  // exclusive
                    if (x0 > 0) std::memset(row, 0, sizeof(T) * static_cast<size_t>(x0));
                    if (x1 > x0)
                        std::memcpy(row + x0, src + x0 + dx, sizeof(T) * static_cast<size_t>(x1 - x0));
                    if (x1 < W) std::memset(row + x1, 0, sizeof(T) * static_cast<size_t>(W - x1));
                }
            }
        }
    }
}

template <class T>
void col2im(const T* col, int64_t C, int64_t H, int64_t W, T* x) {
    // transpose of im2col: scatter-add back into the (C,H,W) image
    const int64_t HW = H * W;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < 3; ++ky) {
            for (int64_t kx = 0; kx < 3; ++kx) {
                const T* src = col + ((c * 9 + ky * 3 + kx)) * HW;
                const int64_t dy = ky - 1, dx = kx - 1;
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + dy;
                    if (sy < 0 || sy >= H) continue;
                    T* dst = x + c * HW + sy * W;
                    const int64_t x0 = std::max<int64_t>(0, -dx);
                    const int64_t x1 = W - std::max<int64_t>(0, dx);
                    const T* s = src + y * W;
                    for (int64_t xx = x0; xx < x1; ++xx) dst[xx + dx] += s[xx];
                }
            }
        }
    }
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_dtype("add", *a, *b);
    const bool bias_bcast = a->shape.size() == 2 && b->shape.size() == 1 && a->shape[1] == b->shape[0];
    if (!bias_bcast && a->shape != b->shape) shape_error("add", *a, *b);

    auto out = make_tensor(a->shape, a->dtype, false);
    const int64_t n = a->numel();
    if (a->dtype == Dtype::F32) {
        const float* pa = a->data<float>();
        const float* pb = b->data<float>();
        float* po = out->data<float>();
        if (bias_bcast) {
            const int64_t cols = a->shape[1];
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % cols];
        } else {
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        }
    } else {
        const double* pa = a->data<double>();
        const double* pb = b->data<double>();
        double* po = out->data<double>();
        if (bias_bcast) {
            const int64_t cols = a->shape[1];
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % cols];
        } else {
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        }
    }
    attach(out, {a, b}, "add", [bias_bcast](Tensor& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const int64_t n = self.numel();
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            if (wants_grad(*pa)) {
                float* ga = pa->grad<float>();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (wants_grad(*pb)) {
                float* gb = pb->grad<float>();
                if (bias_bcast) {
                    const int64_t cols = self.shape[1];
                    for (int64_t i = 0; i < n; ++i) gb[i % cols] += g[i];
                } else {
                    for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
                }
            }
        } else {
            const double* g = self.grad<double>();
            if (wants_grad(*pa)) {
                double* ga = pa->grad<double>();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (wants_grad(*pb)) {
                double* gb = pb->grad<double>();
                if (bias_bcast) {
                    const int64_t cols = self.shape[1];
                    for (int64_t i = 0; i < n; ++i) gb[i % cols] += g[i];
                } else {
                    for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
                }
            }
        }
    });
    finish(out, "add");
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    require_same_dtype("sub", *a, *b);
    if (a->shape != b->shape) shape_error("sub", *a, *b);
    auto out = make_tensor(a->shape, a->dtype, false);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->write(i, a->read(i) - b->read(i));
    attach(out, {a, b}, "sub", [](Tensor& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const int64_t n = self.numel();
        for (int64_t i = 0; i < n; ++i) {
            const double g = self.grad_read(i);
            if (wants_grad(*pa)) {
                if (pa->dtype == Dtype::F32) pa->grad<float>()[i] += static_cast<float>(g);
                else pa->grad<double>()[i] += g;
            }
            if (wants_grad(*pb)) {
                if (pb->dtype == Dtype::F32) pb->grad<float>()[i] -= static_cast<float>(g);
                else pb->grad<double>()[i] -= g;
            }
        }
    });
    finish(out, "sub");
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_dtype("mul", *a, *b);
    if (a->shape != b->shape) shape_error("mul", *a, *b);
    auto out = make_tensor(a->shape, a->dtype, false);
    const int64_t n = a->numel();
    if (a->dtype == Dtype::F32) {
        const float* pa = a->data<float>();
        const float* pb = b->data<float>();
        float* po = out->data<float>();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    } else {
        const double* pa = a->data<double>();
        const double* pb = b->data<double>();
        double* po = out->data<double>();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    }
    attach(out, {a, b}, "mul", [](Tensor& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const int64_t n = self.numel();
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            const float* va = pa->data<float>();
            const float* vb = pb->data<float>();
            if (wants_grad(*pa)) {
                float* ga = pa->grad<float>();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
            }
            if (wants_grad(*pb)) {
                float* gb = pb->grad<float>();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
            }
        } else {
            const double* g = self.grad<double>();
            const double* va = pa->data<double>();
            const double* vb = pb->data<double>();
            if (wants_grad(*pa)) {
                double* ga = pa->grad<double>();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
            }
            if (wants_grad(*pb)) {
                double* gb = pb->grad<double>();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
            }
        }
    });
    finish(out, "mul");
    return out;
}

TensorPtr affine(const TensorPtr& a, double scale, double shift) {
    auto out = make_tensor(a->shape, a->dtype, false);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->write(i, scale * a->read(i) + shift);
    attach(out, {a}, "affine", [scale](Tensor& self) {
        auto& pa = self.parents[0];
        if (!wants_grad(*pa)) return;
        const int64_t n = self.numel();
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            float* ga = pa->grad<float>();
            const float s = static_cast<float>(scale);
            for (int64_t i = 0; i < n; ++i) ga[i] += s * g[i];
        } else {
            const double* g = self.grad<double>();
            double* ga = pa->grad<double>();
            for (int64_t i = 0; i < n; ++i) ga[i] += scale * g[i];
        }
    });
    finish(out, "affine");
    return out;
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require_same_dtype("matmul", *a, *b);
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        shape_error("matmul", *a, *b);
    const int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_tensor({m, n}, a->dtype, false);
    if (a->dtype == Dtype::F32)
        gemm(false, false, m, n, k, 1.0f, a->data<float>(), k, b->data<float>(), n, 0.0f,
             out->data<float>(), n);
    else
        gemm(false, false, m, n, k, 1.0, a->data<double>(), k, b->data<double>(), n, 0.0,
             out->data<double>(), n);
    attach(out, {a, b}, "matmul", [m, k, n](Tensor& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            if (wants_grad(*pa))
                gemm(false, true, m, k, n, 1.0f, g, n, pb->data<float>(), n, 1.0f, pa->grad<float>(), k);
            if (wants_grad(*pb))
                gemm(true, false, k, n, m, 1.0f, pa->data<float>(), k, g, n, 1.0f, pb->grad<float>(), n);
        } else {
            const double* g = self.grad<double>();
            if (wants_grad(*pa))
                gemm(false, true, m, k, n, 1.0, g, n, pb->data<double>(), n, 1.0, pa->grad<double>(), k);
            if (wants_grad(*pb))
                gemm(true, false, k, n, m, 1.0, pa->data<double>(), k, g, n, 1.0, pb->grad<double>(), n);
        }
    });
    finish(out, "matmul");
    return out;
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    require_same_dtype("conv2d", *x, *w);
    require_same_dtype("conv2d", *x, *b);
    if (x->shape.size() != 4 || w->shape.size() != 4 || w->shape[2] != 3 || w->shape[3] != 3 ||
        w->shape[1] != x->shape[1])
        shape_error("conv2d", *x, *w);
    if (b->shape.size() != 1 || b->shape[0] != w->shape[0]) shape_error("conv2d", *w, *b);

    const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int64_t F = w->shape[0];
    const int64_t HW = H * W, K = C * 9;
    auto out = make_tensor({N, F, H, W}, x->dtype, false);

    auto run = [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> col(static_cast<size_t>(K * HW));
        const T* xd = x->data<T>();
        const T* wd = w->data<T>();
        const T* bd = b->data<T>();
        T* od = out->data<T>();
        for (int64_t img = 0; img < N; ++img) {
            im2col(xd + img * C * HW, C, H, W, col.data());
            T* y = od + img * F * HW;
            gemm(false, false, F, HW, K, T(1), wd, K, col.data(), HW, T(0), y, HW);
            for (int64_t f = 0; f < F; ++f) {
                const T bias = bd[f];
                T* row = y + f * HW;
                for (int64_t i = 0; i < HW; ++i) row[i] += bias;
            }
        }
    };
    if (x->dtype == Dtype::F32) run(float{});
    else run(double{});

    attach(out, {x, w, b}, "conv2d", [N, C, H, W, F, HW, K](Tensor& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        auto& pb = self.parents[2];
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            std::vector<T> col(static_cast<size_t>(K * HW));
            std::vector<T> dcol(static_cast<size_t>(K * HW));
            const T* xd = px->data<T>();
            const T* wd = pw->data<T>();
            T* gx = wants_grad(*px) ? px->grad<T>() : nullptr;
            T* gw = wants_grad(*pw) ? pw->grad<T>() : nullptr;
            T* gb = wants_grad(*pb) ? pb->grad<T>() : nullptr;
            for (int64_t img = 0; img < N; ++img) {
                const T* gy = g + img * F * HW;
                if (gw) {
                    im2col(xd + img * C * HW, C, H, W, col.data());
                    gemm(false, true, F, K, HW, T(1), gy, HW, col.data(), HW, T(1), gw, K);
                }
                if (gx) {
                    gemm(true, false, K, HW, F, T(1), wd, K, gy, HW, T(0), dcol.data(), HW);
                    col2im(dcol.data(), C, H, W, gx + img * C * HW);
                }
                if (gb) {
                    for (int64_t f = 0; f < F; ++f) {
                        T acc = T(0);
                        const T* row = gy + f * HW;
                        for (int64_t i = 0; i < HW; ++i) acc += row[i];
                        gb[f] += acc;
                    }
                }
            }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "conv2d");
    return out;
}

TensorPtr maxpool2d(const TensorPtr& x) {
    if (x->shape.size() != 4 || x->shape[2] % 2 != 0 || x->shape[3] % 2 != 0)
        throw std::runtime_error("maxpool2d: need 4-d input with even H,W, got " + shape_str(x->shape));
    const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int64_t OH = H / 2, OW = W / 2;
    auto out = make_tensor({N, C, OH, OW}, x->dtype, false);
    auto idx = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(out->numel()));

    auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* xd = x->data<T>();
        T* od = out->data<T>();
        int64_t o = 0;
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* plane = xd + nc * H * W;
            for (int64_t y = 0; y < OH; ++y) {
                for (int64_t xx = 0; xx < OW; ++xx, ++o) {
                    const int64_t base = (2 * y) * W + 2 * xx;
                    T best = plane[base];
                    uint8_t bi = 0;
                    const T c1 = plane[base + 1];
                    if (c1 > best) { best = c1; bi = 1; }
                    const T c2 = plane[base + W];
                    if (c2 > best) { best = c2; bi = 2; }
                    const T c3 = plane[base + W + 1];
                    if (c3 > best) { best = c3; bi = 3; }
                    od[o] = best;
                    (*idx)[static_cast<size_t>(o)] = bi;
                }
            }
        }
    };
    if (x->dtype == Dtype::F32) run(float{});
    else run(double{});

    attach(out, {x}, "maxpool2d", [N, C, H, W, OH, OW, idx](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            T* gx = px->grad<T>();
            int64_t o = 0;
            for (int64_t nc = 0; nc < N * C; ++nc) {
                T* plane = gx + nc * H * W;
                for (int64_t y = 0; y < OH; ++y) {
                    for (int64_t xx = 0; xx < OW; ++xx, ++o) {
                        const int64_t base = (2 * y) * W + 2 * xx;
                        const uint8_t bi = (*idx)[static_cast<size_t>(o)];
                        const int64_t off = (bi & 1) + (bi >> 1) * W;
                        plane[base + off] += g[o];
                    }
                }
            }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "maxpool2d");
    return out;
}

TensorPtr batchnorm2d(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                      TensorPtr& running_mean, TensorPtr& running_var, bool training,
                      double momentum, double eps) {
    if (x->shape.size() != 4) throw std::runtime_error("batchnorm2d: need 4-d input, got " + shape_str(x->shape));
    const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (gamma->shape != std::vector<int64_t>{C}) shape_error("batchnorm2d", *x, *gamma);
    require_same_dtype("batchnorm2d", *x, *gamma);

    const int64_t HW = H * W;
    const int64_t m = N * HW;  // reduction size per channel
    auto out = make_tensor(x->shape, x->dtype, false);
    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
    auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(C));

    auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* xd = x->data<T>();
        const T* gd = gamma->data<T>();
        const T* bd = beta->data<T>();
        T* od = out->data<T>();
        for (int64_t c = 0; c < C; ++c) {
            double mean, var;
            if (training) {
                double s = 0.0, s2 = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* p = xd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const double v = static_cast<double>(p[i]);
                        s += v;
                        s2 += v * v;
                    }
                }
                mean = s / static_cast<double>(m);
                var = s2 / static_cast<double>(m) - mean * mean;
                if (var < 0.0) var = 0.0;  // numerical floor
                running_mean->write(c, (1.0 - momentum) * running_mean->read(c) + momentum * mean);
                running_var->write(c, (1.0 - momentum) * running_var->read(c) + momentum * var);
            } else {
                mean = running_mean->read(c);
                var = running_var->read(c);
            }
            const double is = 1.0 / std::sqrt(var + eps);
            (*mu)[static_cast<size_t>(c)] = mean;
            (*invstd)[static_cast<size_t>(c)] = is;
            const double gc = static_cast<double>(gd[c]);
            const double bc = static_cast<double>(bd[c]);
            for (int64_t n = 0; n < N; ++n) {
                const T* p = xd + (n * C + c) * HW;
                T* q = od + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i)
                    q[i] = static_cast<T>((static_cast<double>(p[i]) - mean) * is * gc + bc);
            }
        }
    };
    if (x->dtype == Dtype::F32) run(float{});
    else run(double{});

    attach(out, {x, gamma, beta}, "batchnorm2d", [N, C, HW, m, mu, invstd, training](Tensor& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            const T* xd = px->data<T>();
            const T* gd = pg->data<T>();
            T* gx = wants_grad(*px) ? px->grad<T>() : nullptr;
            T* gg = wants_grad(*pg) ? pg->grad<T>() : nullptr;
            T* gb = wants_grad(*pb) ? pb->grad<T>() : nullptr;
            for (int64_t c = 0; c < C; ++c) {
                const double mean = (*mu)[static_cast<size_t>(c)];
                const double is = (*invstd)[static_cast<size_t>(c)];
                const double gc = static_cast<double>(gd[c]);
                // channel reductions
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* pgrow = g + (n * C + c) * HW;
                    const T* pxrow = xd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const double gv = static_cast<double>(pgrow[i]);
                        sum_g += gv;
                        sum_gx += gv * (static_cast<double>(pxrow[i]) - mean) * is;
                    }
                }
                if (gg) gg[c] += static_cast<T>(sum_gx);
                if (gb) gb[c] += static_cast<T>(sum_g);
                if (gx) {
                    const double md = static_cast<double>(m);
                    for (int64_t n = 0; n < N; ++n) {
                        const T* pgrow = g + (n * C + c) * HW;
                        const T* pxrow = xd + (n * C + c) * HW;
                        T* pxg = gx + (n * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) {
                            const double gv = static_cast<double>(pgrow[i]);
                            const double xh = (static_cast<double>(pxrow[i]) - mean) * is;
                            double dx;
                            if (training) {
                                dx = gc * is * (gv - sum_g / md - xh * sum_gx / md);
                            } else {
                                dx = gc * is * gv;  // running stats are constants
                            }
                            pxg[i] += static_cast<T>(dx);
                        }
                    }
                }
            }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "batchnorm2d");
    return out;
}

namespace {

template <class Fwd, class Bwd>
TensorPtr unary_ew(const TensorPtr& x, const char* name, Fwd fwd, Bwd bwd) {
    auto out = make_tensor(x->shape, x->dtype, false);
    const int64_t n = x->numel();
    if (x->dtype == Dtype::F32) {
        const float* p = x->data<float>();
        float* q = out->data<float>();
        for (int64_t i = 0; i < n; ++i) q[i] = static_cast<float>(fwd(static_cast<double>(p[i])));
    } else {
        const double* p = x->data<double>();
        double* q = out->data<double>();
        for (int64_t i = 0; i < n; ++i) q[i] = fwd(p[i]);
    }
    attach(out, {x}, name, [bwd](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        const int64_t n = self.numel();
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            const float* y = self.data<float>();
            float* gx = px->grad<float>();
            for (int64_t i = 0; i < n; ++i)
                gx[i] += static_cast<float>(bwd(static_cast<double>(y[i])) * static_cast<double>(g[i]));
        } else {
            const double* g = self.grad<double>();
            const double* y = self.data<double>();
            double* gx = px->grad<double>();
            for (int64_t i = 0; i < n; ++i) gx[i] += bwd(y[i]) * g[i];
        }
    });
    finish(out, name);
    return out;
}

}  // namespace

TensorPtr relu(const TensorPtr& x) {
    return unary_ew(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double y) { return y > 0.0 ? 1.0 : 0.0; });
}

TensorPtr tanh_op(const TensorPtr& x) {
    return unary_ew(
        x, "tanh", [](double v) { return std::tanh(v); }, [](double y) { return 1.0 - y * y; });
}

TensorPtr sigmoid(const TensorPtr& x) {
    return unary_ew(
        x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double y) { return y * (1.0 - y); });
}

TensorPtr concat(const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw std::runtime_error("concat: no inputs");
    const auto& first = parts.front();
    const size_t rank = first->shape.size();
    if (rank > 2 || axis < 0 || axis >= static_cast<int>(rank))
        throw std::runtime_error("concat: unsupported rank/axis for shape " + shape_str(first->shape));
    for (const auto& p : parts) {
        require_same_dtype("concat", *first, *p);
        if (p->shape.size() != rank) shape_error("concat", *first, *p);
        for (size_t d = 0; d < rank; ++d)
            if (static_cast<int>(d) != axis && p->shape[d] != first->shape[d]) shape_error("concat", *first, *p);
    }
    std::vector<int64_t> oshape = first->shape;
    oshape[static_cast<size_t>(axis)] = 0;
    for (const auto& p : parts) oshape[static_cast<size_t>(axis)] += p->shape[static_cast<size_t>(axis)];
    auto out = make_tensor(oshape, first->dtype, false);

    // row-major copy; axis==0 is contiguous, axis==1 interleaves per row
    const int64_t rows = rank == 2 ? oshape[0] : 1;
    const int64_t ocols = rank == 2 ? oshape[1] : oshape[0];
    if (axis == 0 && rank <= 1) {
        int64_t off = 0;
        for (const auto& p : parts) {
            for (int64_t i = 0; i < p->numel(); ++i) out->write(off + i, p->read(i));
            off += p->numel();
        }
    } else if (axis == 0) {
        int64_t off = 0;
        for (const auto& p : parts) {
            for (int64_t i = 0; i < p->numel(); ++i) out->write(off + i, p->read(i));
            off += p->numel();
        }
    } else {
        int64_t coff = 0;
        for (const auto& p : parts) {
            const int64_t pc = p->shape[1];
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < pc; ++c) out->write(r * ocols + coff + c, p->read(r * pc + c));
            coff += pc;
        }
    }

    attach(out, parts, "concat", [axis, rows, ocols](Tensor& self) {
        if (axis == 0 || self.shape.size() == 1) {
            int64_t off = 0;
            for (auto& p : self.parents) {
                if (wants_grad(*p)) {
                    for (int64_t i = 0; i < p->numel(); ++i) {
                        const double g = self.grad_read(off + i);
                        if (p->dtype == Dtype::F32) p->grad<float>()[i] += static_cast<float>(g);
                        else p->grad<double>()[i] += g;
                    }
                }
                off += p->numel();
            }
        } else {
            int64_t coff = 0;
            for (auto& p : self.parents) {
                const int64_t pc = p->shape[1];
                if (wants_grad(*p)) {
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < pc; ++c) {
                            const double g = self.grad_read(r * ocols + coff + c);
                            if (p->dtype == Dtype::F32) p->grad<float>()[r * pc + c] += static_cast<float>(g);
                            else p->grad<double>()[r * pc + c] += g;
                        }
                }
                coff += pc;
            }
        }
    });
    finish(out, "concat");
    return out;
}

TensorPtr embedding(const TensorPtr& table, const std::vector<int64_t>& ids) {
    if (table->shape.size() != 2) throw std::runtime_error("embedding: table must be 2-d");
    const int64_t V = table->shape[0], D = table->shape[1];
    for (int64_t id : ids)
        if (id < 0 || id >= V)
            throw std::runtime_error("embedding: id " + std::to_string(id) + " outside table of " +
                                     std::to_string(V) + " rows");
    const int64_t B = static_cast<int64_t>(ids.size());
    auto out = make_tensor({B, D}, table->dtype, false);
    auto idsv = std::make_shared<std::vector<int64_t>>(ids);
    if (table->dtype == Dtype::F32) {
        const float* td = table->data<float>();
        float* od = out->data<float>();
        for (int64_t r = 0; r < B; ++r)
            std::memcpy(od + r * D, td + ids[static_cast<size_t>(r)] * D, sizeof(float) * static_cast<size_t>(D));
    } else {
        const double* td = table->data<double>();
        double* od = out->data<double>();
        for (int64_t r = 0; r < B; ++r)
            std::memcpy(od + r * D, td + ids[static_cast<size_t>(r)] * D, sizeof(double) * static_cast<size_t>(D));
    }
    attach(out, {table}, "embedding", [idsv, D](Tensor& self) {
        auto& pt = self.parents[0];
        if (!wants_grad(*pt)) return;
        const int64_t B = static_cast<int64_t>(idsv->size());
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            float* gt = pt->grad<float>();
            for (int64_t r = 0; r < B; ++r) {
                float* row = gt + (*idsv)[static_cast<size_t>(r)] * D;
                const float* src = g + r * D;
                for (int64_t i = 0; i < D; ++i) row[i] += src[i];
            }
        } else {
            const double* g = self.grad<double>();
            double* gt = pt->grad<double>();
            for (int64_t r = 0; r < B; ++r) {
                double* row = gt + (*idsv)[static_cast<size_t>(r)] * D;
                const double* src = g + r * D;
                for (int64_t i = 0; i < D; ++i) row[i] += src[i];
            }
        }
    });
    finish(out, "embedding");
    return out;
}

namespace {

std::pair<int64_t, int64_t> rows_cols(const Tensor& t, const char* op) {
    if (t.shape.size() == 1) return {1, t.shape[0]};
    if (t.shape.size() == 2) return {t.shape[0], t.shape[1]};
    throw std::runtime_error(std::string(op) + ": need 1-d or 2-d input, got " + shape_str(t.shape));
}

}  // namespace

TensorPtr softmax(const TensorPtr& x) {
    auto [rows, cols] = rows_cols(*x, "softmax");
    auto out = make_tensor(x->shape, x->dtype, false);
    auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* p = x->data<T>();
        T* q = out->data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = p + r * cols;
            T* orow = q + r * cols;
            double mx = static_cast<double>(row[0]);
            for (int64_t i = 1; i < cols; ++i) mx = std::max(mx, static_cast<double>(row[i]));
            double z = 0.0;
            for (int64_t i = 0; i < cols; ++i) {
                const double e = std::exp(static_cast<double>(row[i]) - mx);
                orow[i] = static_cast<T>(e);
                z += e;
            }
            const double inv = 1.0 / z;
            for (int64_t i = 0; i < cols; ++i) orow[i] = static_cast<T>(static_cast<double>(orow[i]) * inv);
        }
    };
    if (x->dtype == Dtype::F32) run(float{});
    else run(double{});
    attach(out, {x}, "softmax", [rows, cols](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            const T* y = self.data<T>();
            T* gx = px->grad<T>();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * cols;
                const T* yr = y + r * cols;
                T* xr = gx + r * cols;
                double gy = 0.0;
                for (int64_t i = 0; i < cols; ++i) gy += static_cast<double>(gr[i]) * static_cast<double>(yr[i]);
                for (int64_t i = 0; i < cols; ++i)
                    xr[i] += static_cast<T>(static_cast<double>(yr[i]) * (static_cast<double>(gr[i]) - gy));
            }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "softmax");
    return out;
}

TensorPtr log_softmax(const TensorPtr& x) {
    auto [rows, cols] = rows_cols(*x, "log_softmax");
    auto out = make_tensor(x->shape, x->dtype, false);
    auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* p = x->data<T>();
        T* q = out->data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = p + r * cols;
            T* orow = q + r * cols;
            double mx = static_cast<double>(row[0]);
            for (int64_t i = 1; i < cols; ++i) mx = std::max(mx, static_cast<double>(row[i]));
            double z = 0.0;
            for (int64_t i = 0; i < cols; ++i) z += std::exp(static_cast<double>(row[i]) - mx);
            const double lz = mx + std::log(z);
            for (int64_t i = 0; i < cols; ++i) orow[i] = static_cast<T>(static_cast<double>(row[i]) - lz);
        }
    };
    if (x->dtype == Dtype::F32) run(float{});
    else run(double{});
    attach(out, {x}, "log_softmax", [rows, cols](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            const T* y = self.data<T>();
            T* gx = px->grad<T>();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * cols;
                const T* yr = y + r * cols;
                T* xr = gx + r * cols;
                double gs = 0.0;
                for (int64_t i = 0; i < cols; ++i) gs += static_cast<double>(gr[i]);
                for (int64_t i = 0; i < cols; ++i)
                    xr[i] += static_cast<T>(static_cast<double>(gr[i]) -
                                            std::exp(static_cast<double>(yr[i])) * gs);
            }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "log_softmax");
    return out;
}

TensorPtr dot(const TensorPtr& a, const TensorPtr& b) {
    require_same_dtype("dot", *a, *b);
    if (a->shape.size() != 1 || a->shape != b->shape) shape_error("dot", *a, *b);
    auto out = make_tensor({1}, a->dtype, false);
    double acc = 0.0;
    for (int64_t i = 0; i < a->numel(); ++i) acc += a->read(i) * b->read(i);
    out->write(0, acc);
    attach(out, {a, b}, "dot", [](Tensor& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double g = self.grad_read(0);
        const int64_t n = pa->numel();
        for (int64_t i = 0; i < n; ++i) {
            if (wants_grad(*pa)) {
                const double v = g * pb->read(i);
                if (pa->dtype == Dtype::F32) pa->grad<float>()[i] += static_cast<float>(v);
                else pa->grad<double>()[i] += v;
            }
            if (wants_grad(*pb)) {
                const double v = g * pa->read(i);
                if (pb->dtype == Dtype::F32) pb->grad<float>()[i] += static_cast<float>(v);
                else pb->grad<double>()[i] += v;
            }
        }
    });
    finish(out, "dot");
    return out;
}

namespace {

TensorPtr reduce_all(const TensorPtr& x, const char* name, double denom) {
    auto out = make_tensor({1}, x->dtype, false);
    double acc = 0.0;
    if (x->dtype == Dtype::F32) {
        const float* p = x->data<float>();
        for (int64_t i = 0; i < x->numel(); ++i) acc += static_cast<double>(p[i]);
    } else {
        const double* p = x->data<double>();
        for (int64_t i = 0; i < x->numel(); ++i) acc += p[i];
    }
    out->write(0, acc / denom);
    attach(out, {x}, name, [denom](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        const double g = self.grad_read(0) / denom;
        const int64_t n = px->numel();
        if (px->dtype == Dtype::F32) {
            float* gx = px->grad<float>();
            const float gf = static_cast<float>(g);
            for (int64_t i = 0; i < n; ++i) gx[i] += gf;
        } else {
            double* gx = px->grad<double>();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        }
    });
    finish(out, name);
    return out;
}

}  // namespace

TensorPtr sum(const TensorPtr& x) { return reduce_all(x, "sum", 1.0); }
TensorPtr mean(const TensorPtr& x) { return reduce_all(x, "mean", static_cast<double>(x->numel())); }

TensorPtr reshape(const TensorPtr& x, std::vector<int64_t> shape) {
    if (shape_numel(shape) != x->numel())
        throw std::runtime_error("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
    auto out = make_tensor(shape, x->dtype, false);
    if (x->dtype == Dtype::F32) out->v32 = x->v32;
    else out->v64 = x->v64;
    attach(out, {x}, "reshape", [](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        const int64_t n = self.numel();
        if (self.dtype == Dtype::F32) {
            const float* g = self.grad<float>();
            float* gx = px->grad<float>();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        } else {
            const double* g = self.grad<double>();
            double* gx = px->grad<double>();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        }
    });
    // values copied from a checked tensor; no re-check needed
    return out;
}

TensorPtr repeat_rows(const TensorPtr& x, int64_t k) {
    if (x->shape.size() != 2 || k <= 0)
        throw std::runtime_error("repeat_rows: need 2-d input and k>0, got " + shape_str(x->shape));
    const int64_t N = x->shape[0], D = x->shape[1];
    auto out = make_tensor({N * k, D}, x->dtype, false);
    auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* p = x->data<T>();
        T* q = out->data<T>();
        for (int64_t r = 0; r < N; ++r)
            for (int64_t j = 0; j < k; ++j)
                std::memcpy(q + (r * k + j) * D, p + r * D, sizeof(T) * static_cast<size_t>(D));
    };
    if (x->dtype == Dtype::F32) run(float{});
    else run(double{});
    attach(out, {x}, "repeat_rows", [N, D, k](Tensor& self) {
        auto& px = self.parents[0];
        if (!wants_grad(*px)) return;
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            T* gx = px->grad<T>();
            for (int64_t r = 0; r < N; ++r)
                for (int64_t j = 0; j < k; ++j) {
                    const T* src = g + (r * k + j) * D;
                    T* dst = gx + r * D;
                    for (int64_t i = 0; i < D; ++i) dst[i] += src[i];
                }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "repeat_rows");
    return out;
}

TensorPtr rowdot(const TensorPtr& a, const TensorPtr& b) {
    require_same_dtype("rowdot", *a, *b);
    if (a->shape.size() != 2 || a->shape != b->shape) shape_error("rowdot", *a, *b);
    const int64_t N = a->shape[0], D = a->shape[1];
    auto out = make_tensor({N}, a->dtype, false);
    auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->data<T>();
        const T* pb = b->data<T>();
        T* q = out->data<T>();
        for (int64_t r = 0; r < N; ++r) {
            double acc = 0.0;
            const T* ra = pa + r * D;
            const T* rb = pb + r * D;
            for (int64_t i = 0; i < D; ++i) acc += static_cast<double>(ra[i]) * static_cast<double>(rb[i]);
            q[r] = static_cast<T>(acc);
        }
    };
    if (a->dtype == Dtype::F32) run(float{});
    else run(double{});
    attach(out, {a, b}, "rowdot", [N, D](Tensor& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        auto run = [&](auto tag) {
            using T = decltype(tag);
            const T* g = self.grad<T>();
            const T* va = pa->data<T>();
            const T* vb = pb->data<T>();
            T* ga = wants_grad(*pa) ? pa->grad<T>() : nullptr;
            T* gb = wants_grad(*pb) ? pb->grad<T>() : nullptr;
            for (int64_t r = 0; r < N; ++r) {
                const T gr = g[r];
                if (ga) {
                    T* row = ga + r * D;
                    const T* src = vb + r * D;
                    for (int64_t i = 0; i < D; ++i) row[i] += gr * src[i];
                }
                if (gb) {
                    T* row = gb + r * D;
                    const T* src = va + r * D;
                    for (int64_t i = 0; i < D; ++i) row[i] += gr * src[i];
                }
            }
        };
        if (self.dtype == Dtype::F32) run(float{});
        else run(double{});
    });
    finish(out, "rowdot");
    return out;
}

TensorPtr gumbel_noise_like(const TensorPtr& t, Rng& rng) {
    auto noise = make_tensor(t->shape, t->dtype, false);
    for (int64_t i = 0; i < noise->numel(); ++i) noise->write(i, rng.gumbel());
    return noise;
}

TensorPtr gumbel_softmax_st(const TensorPtr& logits, double tau, bool hard, Rng& rng) {
    return gumbel_softmax_st_with_noise(logits, tau, hard, gumbel_noise_like(logits, rng));
}

TensorPtr gumbel_softmax_st_with_noise(const TensorPtr& logits, double tau, bool hard,
                                       const TensorPtr& noise) {
    if (tau <= 0.0) throw std::runtime_error("gumbel_softmax_st: tau must be positive");
    if (noise->shape != logits->shape) shape_error("gumbel_softmax_st", *logits, *noise);
    auto [rows, cols] = rows_cols(*logits, "gumbel_softmax_st");

    auto out = make_tensor(logits->shape, logits->dtype, false);
    auto soft = std::make_shared<std::vector<double>>(static_cast<size_t>(logits->numel()));

    for (int64_t r = 0; r < rows; ++r) {
        double mx = -1e300;
        for (int64_t i = 0; i < cols; ++i) {
            const double z = (logits->read(r * cols + i) + noise->read(r * cols + i)) / tau;
            (*soft)[static_cast<size_t>(r * cols + i)] = z;
            mx = std::max(mx, z);
        }
        double zsum = 0.0;
        for (int64_t i = 0; i < cols; ++i) {
            double& v = (*soft)[static_cast<size_t>(r * cols + i)];
            v = std::exp(v - mx);
            zsum += v;
        }
        int64_t best = 0;
        for (int64_t i = 0; i < cols; ++i) {
            double& v = (*soft)[static_cast<size_t>(r * cols + i)];
            v /= zsum;
            if (v > (*soft)[static_cast<size_t>(r * cols + best)]) best = i;
        }
        for (int64_t i = 0; i < cols; ++i) {
            const double y = hard ? (i == best ? 1.0 : 0.0) : (*soft)[static_cast<size_t>(r * cols + i)];
            out->write(r * cols + i, y);
        }
    }

    attach(out, {logits}, "gumbel_softmax_st", [rows, cols, tau, soft](Tensor& self) {
        auto& pl = self.parents[0];
        if (!wants_grad(*pl)) return;
        // both modes backpropagate through the soft sample
        for (int64_t r = 0; r < rows; ++r) {
            double gy = 0.0;
            for (int64_t i = 0; i < cols; ++i)
                gy += self.grad_read(r * cols + i) * (*soft)[static_cast<size_t>(r * cols + i)];
            for (int64_t i = 0; i < cols; ++i) {
                const double y = (*soft)[static_cast<size_t>(r * cols + i)];
                const double d = y * (self.grad_read(r * cols + i) - gy) / tau;
                if (pl->dtype == Dtype::F32) pl->grad<float>()[r * cols + i] += static_cast<float>(d);
                else pl->grad<double>()[r * cols + i] += d;
            }
        }
    });
    finish(out, "gumbel_softmax_st");
    return out;
}

}  // namespace refgame::ad
