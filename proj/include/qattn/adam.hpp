#pragma once

#include <cmath>
#include <vector>

#include "qattn/tensor.hpp"

namespace qattn {

/// Adam with bias correction. First/second moment buffers persist across
/// steps, one pair per parameter, in registration order.
template <typename T>
class Adam {
  public:
    Adam(ParamRefs<T> params, double lr, double eps, double beta1 = 0.9, double beta2 = 0.999)
        : params_(std::move(params)), lr_(lr), eps_(eps), beta1_(beta1), beta2_(beta2) {
        for (auto* p : params_) {
            m_.push_back(Tensor<T>::zeros(p->value.shape()));
            v_.push_back(Tensor<T>::zeros(p->value.shape()));
        }
    }

    /// One update from the gradients currently held by the parameters.
    void step() {
        ++t_;
        const T bc1 = static_cast<T>(1.0 - std::pow(beta1_, t_));
        const T bc2 = static_cast<T>(1.0 - std::pow(beta2_, t_));
        const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
        const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_);
        for (size_t i = 0; i < params_.size(); ++i) {
            T* w = params_[i]->value.data();
            const T* g = params_[i]->grad.data();
            T* m = m_[i].data();
            T* v = v_[i].data();
            const int64_t n = params_[i]->numel();
            for (int64_t j = 0; j < n; ++j) {
                m[j] = b1 * m[j] + (T(1) - b1) * g[j];
                v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
                const T mhat = m[j] / bc1;
                const T vhat = v[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void zero_grads() { qattn::zero_grads(params_); }

    /// Scale all gradients so their global L2 norm is at most max_norm.
    /// Returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        double sq = 0;
        for (auto* p : params_) {
            const T* g = p->grad.data();
            for (int64_t j = 0; j < p->numel(); ++j) sq += double(g[j]) * double(g[j]);
        }
        double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0) {
            const T s = static_cast<T>(max_norm / norm);
            for (auto* p : params_) {
                T* g = p->grad.data();
                for (int64_t j = 0; j < p->numel(); ++j) g[j] *= s;
            }
        }
        return norm;
    }

    int64_t step_count() const { return t_; }

  private:
    ParamRefs<T> params_;
    std::vector<Tensor<T>> m_, v_;
    double lr_, eps_, beta1_, beta2_;
    int64_t t_ = 0;
};

}  // namespace qattn
