#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tsexplain/common.hpp"
#include "tsexplain/tensor.hpp"

namespace tsexplain {

// Adam with bias correction over a fixed set of parameter tensors. Moment
// buffers are laid out per-parameter in registration order; the step counter
// is shared.
class AdamState {
  public:
    explicit AdamState(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    double learning_rate() const { return lr_; }
    std::uint64_t step_count() const { return step_; }

    void register_params(const std::vector<Tensor*>& params) {
        m_.clear();
        v_.clear();
        for (const Tensor* p : params) {
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
    }

    // One update over all registered parameters, reading each tensor's grad.
    void step(const std::vector<Tensor*>& params) {
        if (params.size() != m_.size()) throw ShapeError("adam: parameter set changed");
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            if (!p.requires_grad || p.grad.size() != p.data.size())
                throw ShapeError("adam: parameter without gradient");
            if (m_[k].size() != p.numel()) throw ShapeError("adam: moment shape mismatch");
            double* m = m_[k].data();
            double* v = v_[k].data();
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double g = p.grad[i];
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

  private:
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace tsexplain
