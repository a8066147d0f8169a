#include "acllm/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace acllm {

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

TensorPtr make_node(const char* op, std::vector<int> shape,
                    std::vector<TensorPtr> parents) {
    auto n = std::make_shared<TensorImpl>();
    n->shape = std::move(shape);
    n->v.assign(shape_numel(n->shape), 0.0f);
    n->op = op;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) n->parents = std::move(parents);
    }
    return n;
}

void finish(const TensorPtr& n) { check_finite(n->op, n->v); }

void require_2d(const char* op, const Tensor& t) {
    if (!t.defined() || t.impl->shape.size() != 2)
        throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor");
}

}  // namespace

GradGuard::GradGuard(bool enabled) : prev_(g_grad_enabled) { g_grad_enabled = enabled; }
GradGuard::~GradGuard() { g_grad_enabled = prev_; }
bool GradGuard::enabled() { return g_grad_enabled; }

void check_finite(const char* op, const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = std::make_shared<TensorImpl>();
    n->shape = std::move(shape);
    n->v.assign(shape_numel(n->shape), 0.0f);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl->v.begin(), t.impl->v.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values,
                    bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("Tensor::from: values length does not match shape");
    auto n = std::make_shared<TensorImpl>();
    n->shape = std::move(shape);
    n->v = std::move(values);
    n->requires_grad = requires_grad;
    check_finite("leaf", n->v);
    return Tensor(n);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, float stddev, Rng& rng,
                     bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<float> dist(0.0f, stddev);
    for (auto& x : t.impl->v) x = dist(rng);
    return t;
}

float Tensor::item() const {
    if (!impl || impl->v.size() != 1)
        throw std::invalid_argument("Tensor::item: tensor is not a scalar");
    return impl->v[0];
}

void Tensor::backward() {
    if (!impl) throw std::invalid_argument("backward: undefined tensor");
    if (impl->v.size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar");
    // Reverse topological order via iterative DFS.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack{{impl.get(), 0}};
    seen.insert(impl.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (TensorImpl* n : order) n->ensure_grad();
    impl->g[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop();
}

// ---------------------------------------------------------------------------
// elementwise

static Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b,
                                float (*fwd)(float, float),
                                void (*bwd)(float ga, float av, float bv,
                                            float* da, float* db)) {
    if (a.impl->shape != b.impl->shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    auto n = make_node(op, a.impl->shape, {a.impl, b.impl});
    const auto& av = a.impl->v;
    const auto& bv = b.impl->v;
    for (size_t i = 0; i < av.size(); ++i) n->v[i] = fwd(av[i], bv[i]);
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        TensorImpl* pb = b.impl.get();
        n->backprop = [self, pa, pb, bwd]() {
            for (size_t i = 0; i < self->v.size(); ++i) {
                float da = 0, db = 0;
                bwd(self->g[i], pa->v[i], pb->v[i], &da, &db);
                if (pa->requires_grad) pa->g[i] += da;
                if (pb->requires_grad) pb->g[i] += db;
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        "add", a, b, [](float x, float y) { return x + y; },
        [](float g, float, float, float* da, float* db) { *da = g; *db = g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        "sub", a, b, [](float x, float y) { return x - y; },
        [](float g, float, float, float* da, float* db) { *da = g; *db = -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        "mul", a, b, [](float x, float y) { return x * y; },
        [](float g, float x, float y, float* da, float* db) { *da = g * y; *db = g * x; });
}

Tensor scale(const Tensor& a, float s) {
    auto n = make_node("scale", a.impl->shape, {a.impl});
    for (size_t i = 0; i < a.impl->v.size(); ++i) n->v[i] = a.impl->v[i] * s;
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        n->backprop = [self, pa, s]() {
            for (size_t i = 0; i < self->v.size(); ++i) pa->g[i] += self->g[i] * s;
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
    require_2d("add_rowvec", a);
    const int R = a.rows(), C = a.cols();
    if (static_cast<int>(row.size()) != C)
        throw std::invalid_argument("add_rowvec: width mismatch");
    auto n = make_node("add_rowvec", a.impl->shape, {a.impl, row.impl});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
            n->v[r * C + c] = a.impl->v[r * C + c] + row.impl->v[c];
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        TensorImpl* pr = row.impl.get();
        n->backprop = [self, pa, pr, R, C]() {
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) {
                    float g = self->g[r * C + c];
                    if (pa->requires_grad) pa->g[r * C + c] += g;
                    if (pr->requires_grad) pr->g[c] += g;
                }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor relu(const Tensor& a) {
    auto n = make_node("relu", a.impl->shape, {a.impl});
    for (size_t i = 0; i < a.impl->v.size(); ++i)
        n->v[i] = a.impl->v[i] > 0.0f ? a.impl->v[i] : 0.0f;
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        n->backprop = [self, pa]() {
            for (size_t i = 0; i < self->v.size(); ++i)
                if (pa->v[i] > 0.0f) pa->g[i] += self->g[i];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor gelu(const Tensor& a) {
    // tanh approximation of GELU
    constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
    auto n = make_node("gelu", a.impl->shape, {a.impl});
    for (size_t i = 0; i < a.impl->v.size(); ++i) {
        float x = a.impl->v[i];
        float t = std::tanh(k * (x + 0.044715f * x * x * x));
        n->v[i] = 0.5f * x * (1.0f + t);
    }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        n->backprop = [self, pa]() {
            for (size_t i = 0; i < self->v.size(); ++i) {
                float x = pa->v[i];
                float u = k * (x + 0.044715f * x * x * x);
                float t = std::tanh(u);
                float du = k * (1.0f + 3.0f * 0.044715f * x * x);
                float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
                pa->g[i] += self->g[i] * d;
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    const int R = a.rows(), C = a.cols();
    auto n = make_node("transpose", {C, R}, {a.impl});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) n->v[c * R + r] = a.impl->v[r * C + c];
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        n->backprop = [self, pa, R, C]() {
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) pa->g[r * C + c] += self->g[c * R + r];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
    require_2d("slice_rows", a);
    const int R = a.rows(), C = a.cols();
    if (r0 < 0 || r1 > R || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    auto n = make_node("slice_rows", {r1 - r0, C}, {a.impl});
    std::memcpy(n->v.data(), a.impl->v.data() + static_cast<size_t>(r0) * C,
                static_cast<size_t>(r1 - r0) * C * sizeof(float));
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        n->backprop = [self, pa, r0, C]() {
            for (size_t i = 0; i < self->v.size(); ++i)
                pa->g[static_cast<size_t>(r0) * C + i] += self->g[i];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    require_2d("slice_cols", a);
    const int R = a.rows(), C = a.cols();
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    const int W = c1 - c0;
    auto n = make_node("slice_cols", {R, W}, {a.impl});
    for (int r = 0; r < R; ++r)
        std::memcpy(n->v.data() + static_cast<size_t>(r) * W,
                    a.impl->v.data() + static_cast<size_t>(r) * C + c0,
                    static_cast<size_t>(W) * sizeof(float));
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        n->backprop = [self, pa, R, C, c0, W]() {
            for (int r = 0; r < R; ++r)
                for (int w = 0; w < W; ++w)
                    pa->g[static_cast<size_t>(r) * C + c0 + w] +=
                        self->g[static_cast<size_t>(r) * W + w];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int C = parts[0].cols();
    int R = 0;
    std::vector<TensorPtr> parents;
    for (const auto& p : parts) {
        require_2d("concat_rows", p);
        if (p.cols() != C) throw std::invalid_argument("concat_rows: width mismatch");
        R += p.rows();
        parents.push_back(p.impl);
    }
    auto n = make_node("concat_rows", {R, C}, parents);
    size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(n->v.data() + off, p.impl->v.data(), p.size() * sizeof(float));
        off += p.size();
    }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        std::vector<TensorImpl*> raw;
        for (const auto& p : parts) raw.push_back(p.impl.get());
        n->backprop = [self, raw]() {
            size_t off = 0;
            for (TensorImpl* p : raw) {
                if (p->requires_grad)
                    for (size_t i = 0; i < p->v.size(); ++i) p->g[i] += self->g[off + i];
                off += p->v.size();
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const int R = parts[0].rows();
    int C = 0;
    std::vector<TensorPtr> parents;
    for (const auto& p : parts) {
        require_2d("concat_cols", p);
        if (p.rows() != R) throw std::invalid_argument("concat_cols: height mismatch");
        C += p.cols();
        parents.push_back(p.impl);
    }
    auto n = make_node("concat_cols", {R, C}, parents);
    int c0 = 0;
    for (const auto& p : parts) {
        const int W = p.cols();
        for (int r = 0; r < R; ++r)
            std::memcpy(n->v.data() + static_cast<size_t>(r) * C + c0,
                        p.impl->v.data() + static_cast<size_t>(r) * W,
                        static_cast<size_t>(W) * sizeof(float));
        c0 += W;
    }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        std::vector<std::pair<TensorImpl*, int>> raw;
        int off = 0;
        for (const auto& p : parts) {
            raw.emplace_back(p.impl.get(), off);
            off += p.cols();
        }
        n->backprop = [self, raw, R, C]() {
            for (const auto& [p, c0] : raw) {
                if (!p->requires_grad) continue;
                const int W = p->shape[1];
                for (int r = 0; r < R; ++r)
                    for (int w = 0; w < W; ++w)
                        p->g[static_cast<size_t>(r) * W + w] +=
                            self->g[static_cast<size_t>(r) * C + c0 + w];
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) throw std::invalid_argument("stack_scalars: empty input");
    std::vector<TensorPtr> parents;
    for (const auto& s : scalars) {
        if (s.size() != 1) throw std::invalid_argument("stack_scalars: non-scalar input");
        parents.push_back(s.impl);
    }
    auto n = make_node("stack_scalars", {1, static_cast<int>(scalars.size())}, parents);
    for (size_t i = 0; i < scalars.size(); ++i) n->v[i] = scalars[i].impl->v[0];
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        std::vector<TensorImpl*> raw;
        for (const auto& s : scalars) raw.push_back(s.impl.get());
        n->backprop = [self, raw]() {
            for (size_t i = 0; i < raw.size(); ++i)
                if (raw[i]->requires_grad) raw[i]->g[0] += self->g[i];
        };
    }
    finish(n);
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// linear algebra

namespace {
void sgemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
           int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const int M = a.rows(), K = a.cols(), N = b.cols();
    if (b.rows() != K) throw std::invalid_argument("matmul: inner dimension mismatch");
    auto n = make_node("matmul", {M, N}, {a.impl, b.impl});
    sgemm(false, false, M, N, K, 1.0f, a.impl->v.data(), K, b.impl->v.data(), N,
          0.0f, n->v.data(), N);
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pa = a.impl.get();
        TensorImpl* pb = b.impl.get();
        n->backprop = [self, pa, pb, M, N, K]() {
            if (pa->requires_grad)  // dA += dC * B^T
                sgemm(false, true, M, K, N, 1.0f, self->g.data(), N, pb->v.data(), N,
                      1.0f, pa->g.data(), K);
            if (pb->requires_grad)  // dB += A^T * dC
                sgemm(true, false, K, N, M, 1.0f, pa->v.data(), K, self->g.data(), N,
                      1.0f, pb->g.data(), N);
        };
    }
    finish(n);
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// normalization / attention

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    require_2d("layernorm", x);
    const int R = x.rows(), C = x.cols();
    if (static_cast<int>(gain.size()) != C || static_cast<int>(bias.size()) != C)
        throw std::invalid_argument("layernorm: gain/bias width mismatch");
    auto n = make_node("layernorm", x.impl->shape, {x.impl, gain.impl, bias.impl});
    std::vector<float> inv_std(R), mean(R);
    for (int r = 0; r < R; ++r) {
        const float* xr = x.impl->v.data() + static_cast<size_t>(r) * C;
        float m = 0;
        for (int c = 0; c < C; ++c) m += xr[c];
        m /= C;
        float var = 0;
        for (int c = 0; c < C; ++c) var += (xr[c] - m) * (xr[c] - m);
        var /= C;
        float is = 1.0f / std::sqrt(var + eps);
        mean[r] = m;
        inv_std[r] = is;
        float* yr = n->v.data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c)
            yr[c] = (xr[c] - m) * is * gain.impl->v[c] + bias.impl->v[c];
    }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        TensorImpl* pg = gain.impl.get();
        TensorImpl* pb = bias.impl.get();
        n->backprop = [self, px, pg, pb, R, C, mean, inv_std]() {
            for (int r = 0; r < R; ++r) {
                const float* xr = px->v.data() + static_cast<size_t>(r) * C;
                const float* gr = self->g.data() + static_cast<size_t>(r) * C;
                float m = mean[r], is = inv_std[r];
                // xhat = (x - m) * is
                float sum_gy = 0, sum_gy_xhat = 0;
                for (int c = 0; c < C; ++c) {
                    float xhat = (xr[c] - m) * is;
                    float gy = gr[c] * pg->v[c];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                }
                for (int c = 0; c < C; ++c) {
                    float xhat = (xr[c] - m) * is;
                    if (pg->requires_grad) pg->g[c] += gr[c] * xhat;
                    if (pb->requires_grad) pb->g[c] += gr[c];
                    if (px->requires_grad) {
                        float gy = gr[c] * pg->v[c];
                        px->g[static_cast<size_t>(r) * C + c] +=
                            is * (gy - sum_gy / C - xhat * sum_gy_xhat / C);
                    }
                }
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor softmax_rows(const Tensor& x) { return masked_softmax_rows(x, false); }

Tensor masked_softmax_rows(const Tensor& x, bool causal, int query_offset) {
    require_2d("softmax", x);
    const int R = x.rows(), C = x.cols();
    auto n = make_node("softmax", x.impl->shape, {x.impl});
    for (int r = 0; r < R; ++r) {
        const float* xr = x.impl->v.data() + static_cast<size_t>(r) * C;
        float* yr = n->v.data() + static_cast<size_t>(r) * C;
        int limit = causal ? std::min(C, r + query_offset + 1) : C;
        if (limit <= 0)
            throw std::invalid_argument("softmax: causal mask excludes entire row");
        float mx = xr[0];
        for (int c = 0; c < limit; ++c) mx = std::max(mx, xr[c]);
        float z = 0;
        for (int c = 0; c < limit; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            z += yr[c];
        }
        for (int c = 0; c < limit; ++c) yr[c] /= z;
        for (int c = limit; c < C; ++c) yr[c] = 0.0f;
    }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        n->backprop = [self, px, R, C]() {
            for (int r = 0; r < R; ++r) {
                const float* yr = self->v.data() + static_cast<size_t>(r) * C;
                const float* gr = self->g.data() + static_cast<size_t>(r) * C;
                float dot = 0;
                for (int c = 0; c < C; ++c) dot += yr[c] * gr[c];
                for (int c = 0; c < C; ++c)
                    px->g[static_cast<size_t>(r) * C + c] += yr[c] * (gr[c] - dot);
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor rope(const Tensor& x, int heads, int pos_offset) {
    require_2d("rope", x);
    const int T = x.rows(), C = x.cols();
    if (heads < 1 || C % heads != 0 || (C / heads) % 2 != 0)
        throw std::invalid_argument("rope: head dim must be even");
    const int dh = C / heads;
    auto n = make_node("rope", x.impl->shape, {x.impl});
    // Precompute cos/sin per (t, pair).
    std::vector<float> cs(static_cast<size_t>(T) * dh / 2),
        sn(static_cast<size_t>(T) * dh / 2);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < dh / 2; ++i) {
            float theta = static_cast<float>(t + pos_offset) *
                          std::pow(10000.0f, -2.0f * i / dh);
            cs[static_cast<size_t>(t) * (dh / 2) + i] = std::cos(theta);
            sn[static_cast<size_t>(t) * (dh / 2) + i] = std::sin(theta);
        }
    auto apply = [cs, sn, heads, dh](const float* src, float* dst, int t,
                                     bool inverse) {
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < dh / 2; ++i) {
                float c = cs[static_cast<size_t>(t) * (dh / 2) + i];
                float s = sn[static_cast<size_t>(t) * (dh / 2) + i];
                if (inverse) s = -s;
                int a = h * dh + 2 * i, b = a + 1;
                float xa = src[a], xb = src[b];
                dst[a] = xa * c - xb * s;
                dst[b] = xa * s + xb * c;
            }
    };
    for (int t = 0; t < T; ++t)
        apply(x.impl->v.data() + static_cast<size_t>(t) * C,
              n->v.data() + static_cast<size_t>(t) * C, t, false);
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        n->backprop = [self, px, T, C, apply]() {
            std::vector<float> tmp(C);
            for (int t = 0; t < T; ++t) {
                apply(self->g.data() + static_cast<size_t>(t) * C, tmp.data(), t, true);
                for (int c = 0; c < C; ++c)
                    px->g[static_cast<size_t>(t) * C + c] += tmp[c];
            }
        };
    }
    finish(n);
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// sequence ops

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    require_2d("embedding", table);
    const int V = table.rows(), C = table.cols();
    for (int id : ids)
        if (id < 0 || id >= V)
            throw std::out_of_range("embedding: id out of range");
    auto n = make_node("embedding", {static_cast<int>(ids.size()), C}, {table.impl});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(n->v.data() + i * C,
                    table.impl->v.data() + static_cast<size_t>(ids[i]) * C,
                    static_cast<size_t>(C) * sizeof(float));
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pt = table.impl.get();
        n->backprop = [self, pt, ids, C]() {
            for (size_t i = 0; i < ids.size(); ++i)
                for (int c = 0; c < C; ++c)
                    pt->g[static_cast<size_t>(ids[i]) * C + c] += self->g[i * C + c];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w) {
    require_2d("depthwise_conv1d", x);
    require_2d("depthwise_conv1d", w);
    const int T = x.rows(), D = x.cols(), K = w.rows();
    if (w.cols() != D)
        throw std::invalid_argument("depthwise_conv1d: channel mismatch");
    const int pad = K / 2;
    auto n = make_node("depthwise_conv1d", x.impl->shape, {x.impl, w.impl});
    for (int t = 0; t < T; ++t)
        for (int d = 0; d < D; ++d) {
            float acc = 0;
            for (int k = 0; k < K; ++k) {
                int src = t + k - pad;
                if (src >= 0 && src < T)
                    acc += x.impl->v[static_cast<size_t>(src) * D + d] *
                           w.impl->v[static_cast<size_t>(k) * D + d];
            }
            n->v[static_cast<size_t>(t) * D + d] = acc;
        }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        TensorImpl* pw = w.impl.get();
        n->backprop = [self, px, pw, T, D, K, pad]() {
            for (int t = 0; t < T; ++t)
                for (int d = 0; d < D; ++d) {
                    float g = self->g[static_cast<size_t>(t) * D + d];
                    for (int k = 0; k < K; ++k) {
                        int src = t + k - pad;
                        if (src < 0 || src >= T) continue;
                        if (px->requires_grad)
                            px->g[static_cast<size_t>(src) * D + d] +=
                                g * pw->v[static_cast<size_t>(k) * D + d];
                        if (pw->requires_grad)
                            pw->g[static_cast<size_t>(k) * D + d] +=
                                g * px->v[static_cast<size_t>(src) * D + d];
                    }
                }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor splice_rows(const Tensor& x, int factor) {
    require_2d("splice_rows", x);
    if (factor < 1) throw std::invalid_argument("splice_rows: factor must be >= 1");
    const int T = x.rows(), D = x.cols();
    const int To = (T + factor - 1) / factor;
    auto n = make_node("splice_rows", {To, factor * D}, {x.impl});
    for (int t = 0; t < T; ++t) {
        int to = t / factor, slot = t % factor;
        std::memcpy(n->v.data() + (static_cast<size_t>(to) * factor + slot) * D,
                    x.impl->v.data() + static_cast<size_t>(t) * D,
                    static_cast<size_t>(D) * sizeof(float));
    }
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        n->backprop = [self, px, T, D, factor]() {
            for (int t = 0; t < T; ++t) {
                int to = t / factor, slot = t % factor;
                for (int d = 0; d < D; ++d)
                    px->g[static_cast<size_t>(t) * D + d] +=
                        self->g[(static_cast<size_t>(to) * factor + slot) * D + d];
            }
        };
    }
    finish(n);
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// losses / reductions

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
    const int V = static_cast<int>(logits.size());
    if (target < 0 || target >= V)
        throw std::out_of_range("softmax_cross_entropy: target index out of range");
    std::vector<int> targets{target};
    std::vector<uint8_t> mask{1};
    if (logits.impl->shape.size() == 2 && logits.rows() == 1)
        return cross_entropy_rows(logits, targets, mask);
    // View a flat vector as 1xV through an identity node.
    auto n = make_node("reshape", {1, V}, {logits.impl});
    n->v = logits.impl->v;
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* p = logits.impl.get();
        n->backprop = [self, p]() {
            for (size_t i = 0; i < p->v.size(); ++i) p->g[i] += self->g[i];
        };
    }
    return cross_entropy_rows(Tensor(n), targets, mask);
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& row_mask) {
    require_2d("cross_entropy", logits);
    const int R = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != R || static_cast<int>(row_mask.size()) != R)
        throw std::invalid_argument("cross_entropy: targets/mask length mismatch");
    int count = 0;
    for (int r = 0; r < R; ++r)
        if (row_mask[r]) {
            if (targets[r] < 0 || targets[r] >= V)
                throw std::out_of_range("cross_entropy: target index out of range");
            ++count;
        }
    if (count == 0)
        throw std::invalid_argument("cross_entropy: mask selects zero rows");
    auto n = make_node("cross_entropy", {1}, {logits.impl});
    // Cache softmax for the backward pass.
    auto probs = std::make_shared<std::vector<float>>(logits.impl->v.size());
    double total = 0;
    for (int r = 0; r < R; ++r) {
        if (!row_mask[r]) continue;
        const float* xr = logits.impl->v.data() + static_cast<size_t>(r) * V;
        float* pr = probs->data() + static_cast<size_t>(r) * V;
        float mx = xr[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, xr[c]);
        double z = 0;
        for (int c = 0; c < V; ++c) {
            pr[c] = std::exp(xr[c] - mx);
            z += pr[c];
        }
        for (int c = 0; c < V; ++c) pr[c] = static_cast<float>(pr[c] / z);
        total += -std::log(std::max(static_cast<double>(pr[targets[r]]), 1e-30));
    }
    n->v[0] = static_cast<float>(total / count);
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* pl = logits.impl.get();
        n->backprop = [self, pl, probs, targets, row_mask, R, V, count]() {
            float g = self->g[0] / count;
            for (int r = 0; r < R; ++r) {
                if (!row_mask[r]) continue;
                const float* pr = probs->data() + static_cast<size_t>(r) * V;
                float* gr = pl->g.data() + static_cast<size_t>(r) * V;
                for (int c = 0; c < V; ++c) gr[c] += g * pr[c];
                gr[targets[r]] -= g;
            }
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor sum_all(const Tensor& x) {
    auto n = make_node("sum", {1}, {x.impl});
    double s = 0;
    for (float v : x.impl->v) s += v;
    n->v[0] = static_cast<float>(s);
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        n->backprop = [self, px]() {
            for (size_t i = 0; i < px->v.size(); ++i) px->g[i] += self->g[0];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0f / static_cast<float>(x.size()));
}

Tensor dot_const(const Tensor& x, const std::vector<float>& c) {
    if (x.size() != c.size())
        throw std::invalid_argument("dot_const: length mismatch");
    auto n = make_node("dot_const", {1}, {x.impl});
    double s = 0;
    for (size_t i = 0; i < c.size(); ++i) s += x.impl->v[i] * c[i];
    n->v[0] = static_cast<float>(s);
    if (n->requires_grad) {
        TensorImpl* self = n.get();
        TensorImpl* px = x.impl.get();
        n->backprop = [self, px, c]() {
            for (size_t i = 0; i < c.size(); ++i) px->g[i] += self->g[0] * c[i];
        };
    }
    finish(n);
    return Tensor(n);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            int heads, bool causal) {
    require_2d("attention", q);
    const int C = q.cols();
    if (heads < 1 || C % heads != 0)
        throw std::invalid_argument("attention: width not divisible by heads");
    if (k.cols() != C || v.cols() != C || k.rows() != v.rows())
        throw std::invalid_argument("attention: key/value shape mismatch");
    const int dh = C / heads;
    const float scl = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), scl);
        Tensor probs = masked_softmax_rows(scores, causal, k.rows() - q.rows());
        outs.push_back(matmul(probs, vh));
    }
    return concat_cols(outs);
}

std::string fnv1a_hex(const std::string& data) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace acllm
