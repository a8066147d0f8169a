#include "acllm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace acllm {

Parameter& ParamStore::add(const std::string& name, Tensor t, bool frozen) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Parameter p;
    p.name = name;
    p.tensor = std::move(t);
    p.tensor.set_requires_grad(!frozen);
    p.frozen = frozen;
    params_.push_back(std::move(p));
    return params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

size_t ParamStore::param_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_)
        if (!p.frozen) p.tensor.zero_grad();
}

Optimizer::Optimizer(ParamStore& store, OptimizerConfig cfg)
    : store_(store), cfg_(cfg) {
    m_.resize(store_.params().size());
    v_.resize(store_.params().size());
}

void Optimizer::step() {
    ++step_count_;
    const auto& c = cfg_;
    for (size_t pi = 0; pi < store_.params().size(); ++pi) {
        Parameter& p = store_.params()[pi];
        if (p.frozen) continue;
        auto& val = p.tensor.values();
        auto& grad = p.tensor.grad();
        for (float g : grad)
            if (!std::isfinite(g))
                throw NumericError("non-finite gradient for parameter '" + p.name + "'");
        if (c.kind == OptKind::sgd) {
            for (size_t i = 0; i < val.size(); ++i) {
                val[i] -= c.learning_rate * grad[i];
                if (c.weight_decay > 0) val[i] -= c.learning_rate * c.weight_decay * val[i];
            }
            continue;
        }
        if (m_[pi].size() != val.size()) {
            m_[pi].assign(val.size(), 0.0f);
            v_[pi].assign(val.size(), 0.0f);
        }
        const float bc1 = 1.0f - std::pow(c.beta1, static_cast<float>(step_count_));
        const float bc2 = 1.0f - std::pow(c.beta2, static_cast<float>(step_count_));
        for (size_t i = 0; i < val.size(); ++i) {
            m_[pi][i] = c.beta1 * m_[pi][i] + (1.0f - c.beta1) * grad[i];
            v_[pi][i] = c.beta2 * v_[pi][i] + (1.0f - c.beta2) * grad[i] * grad[i];
            float mhat = m_[pi][i] / bc1;
            float vhat = v_[pi][i] / bc2;
            val[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.eps);
            if (c.weight_decay > 0) val[i] -= c.learning_rate * c.weight_decay * val[i];
        }
    }
}

double grad_check(const std::function<Tensor()>& f, ParamStore& store, double h) {
    store.zero_grad();
    Tensor loss = f();
    loss.backward();
    if (!std::isfinite(loss.item()))
        throw NumericError("grad_check: non-finite loss");

    double max_rel = 0.0;
    for (auto& p : store.params()) {
        if (p.frozen) {
            // Frozen contract: analytic grad is exactly zero (never allocated).
            if (!p.tensor.impl->g.empty())
                for (float g : p.tensor.impl->g)
                    if (g != 0.0f) return 1e9;
            continue;
        }
        auto analytic = p.tensor.grad();  // copy
        auto& val = p.tensor.values();
        for (size_t i = 0; i < val.size(); ++i) {
            float orig = val[i];
            double fp, fm;
            {
                GradGuard no_grad(false);
                val[i] = orig + static_cast<float>(h);
                fp = f().item();
                val[i] = orig - static_cast<float>(h);
                fm = f().item();
                val[i] = orig;
            }
            double num = (fp - fm) / (2.0 * h);
            double ana = analytic[i];
            double denom = std::max({std::abs(num), std::abs(ana), 1.0});
            max_rel = std::max(max_rel, std::abs(num - ana) / denom);
        }
    }
    return max_rel;
}

}  // namespace acllm
