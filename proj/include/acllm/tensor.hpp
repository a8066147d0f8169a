#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "acllm/common.hpp"

namespace acllm {

// Reverse-mode autograd over dense float32 matrices. Tensors are immutable
// once created inside a forward graph; backward() walks the graph in reverse
// topological order and accumulates gradients into every node that
// requires_grad. Leaf gradients persist across backward() calls until
// explicitly cleared, so losses can be accumulated.

struct TensorImpl;
using TensorPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> v;
    std::vector<float> g;  // allocated lazily, same length as v
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<TensorPtr> parents;
    std::function<void()> backprop;  // captures raw parent pointers

    size_t size() const { return v.size(); }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorPtr p) : impl(std::move(p)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<float> values,
                       bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, float stddev, Rng& rng,
                        bool requires_grad = false);

    bool defined() const { return impl != nullptr; }
    const std::vector<int>& shape() const { return impl->shape; }
    int rows() const { return impl->shape.size() >= 1 ? impl->shape[0] : 1; }
    int cols() const { return impl->shape.size() >= 2 ? impl->shape[1] : 1; }
    size_t size() const { return impl->v.size(); }
    std::vector<float>& values() { return impl->v; }
    const std::vector<float>& values() const { return impl->v; }
    std::vector<float>& grad() { impl->ensure_grad(); return impl->g; }
    bool requires_grad() const { return impl->requires_grad; }
    void set_requires_grad(bool rg) { impl->requires_grad = rg; }
    float item() const;

    // Seeds d(self)=1 and accumulates gradients through the whole graph.
    void backward();
    void zero_grad() { if (impl) impl->g.assign(impl->v.size(), 0.0f); }

    TensorPtr impl;
};

// While false, ops do not record the graph (inference mode).
class GradGuard {
public:
    explicit GradGuard(bool enabled);
    ~GradGuard();
    static bool enabled();

private:
    bool prev_;
};

// Forward-pass finiteness policy: any op producing NaN/Inf throws
// NumericError naming the op.
void check_finite(const char* op, const std::vector<float>& v);

// --- elementwise / shape ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_rowvec(const Tensor& a, const Tensor& row);  // row is 1xC
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor stack_scalars(const std::vector<Tensor>& scalars);  // -> 1xN

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);

// --- normalization / attention pieces ---
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps = 1e-5f);
Tensor softmax_rows(const Tensor& x);
// Causal mask: entry (i, j) with j > i + query_offset is excluded.
Tensor masked_softmax_rows(const Tensor& x, bool causal, int query_offset = 0);
// Rotary position embedding applied per head to pairs of channels.
Tensor rope(const Tensor& x, int heads, int pos_offset = 0);

// --- sequence ops ---
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Depthwise 1-D convolution along time with same-padding; w is KxD.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w);
// T x D -> ceil(T/factor) x (factor*D), zero padded at the tail.
Tensor splice_rows(const Tensor& x, int factor);

// --- losses / reductions ---
// -log softmax(logits)[target] for a single 1xV row of logits.
Tensor softmax_cross_entropy(const Tensor& logits, int target);
// Mean CE over rows with row_mask[i] != 0; targets[i] indexes row i.
// Errors if the mask selects zero rows.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& row_mask);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Sum_i x[i] * c[i] for a 1xN tensor and constant weights.
Tensor dot_const(const Tensor& x, const std::vector<float>& c);

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            int heads, bool causal);

}  // namespace acllm
