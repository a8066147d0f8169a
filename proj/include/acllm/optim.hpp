#pragma once

#include <functional>
#include <string>
#include <vector>

#include "acllm/tensor.hpp"

namespace acllm {

// A named model weight. Frozen parameters receive no optimizer update and
// accumulate no gradient (requires_grad is cleared).
struct Parameter {
    std::string name;
    Tensor tensor;
    bool frozen = false;

    void set_frozen(bool f) {
        frozen = f;
        tensor.set_requires_grad(!f);
        if (f) tensor.impl->g.clear();
    }
};

// Flat registry of parameters; names must be unique.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor t, bool frozen = false);
    Parameter* find(const std::string& name);
    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    size_t param_count() const;  // total scalar count
    void zero_grad();

private:
    std::vector<Parameter> params_;
};

enum class OptKind { sgd, adam };

struct OptimizerConfig {
    OptKind kind = OptKind::adam;
    float learning_rate = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

class Optimizer {
public:
    Optimizer(ParamStore& store, OptimizerConfig cfg);

    // One update over all non-frozen parameters; step_count increments by 1.
    void step();
    void zero_grad() { store_.zero_grad(); }
    int64_t step_count() const { return step_count_; }
    const OptimizerConfig& config() const { return cfg_; }
    void set_learning_rate(float lr) { cfg_.learning_rate = lr; }

    // Adam moments, exposed for checkpointing (parallel to store params).
    std::vector<std::vector<float>>& moment1() { return m_; }
    std::vector<std::vector<float>>& moment2() { return v_; }
    void set_step_count(int64_t s) { step_count_ = s; }

private:
    ParamStore& store_;
    OptimizerConfig cfg_;
    int64_t step_count_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// Compares analytic gradients of a deterministic scalar function against
// central finite differences (h = 1e-3); returns the max relative error over
// all coordinates of all non-frozen parameters. Frozen parameters are checked
// to report an analytic gradient of exactly zero.
double grad_check(const std::function<Tensor()>& f, ParamStore& store,
                  double h = 1e-3);

}  // namespace acllm
