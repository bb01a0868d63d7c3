#pragma once

#include <cmath>
#include <vector>

#include "t2t/nn.hpp"

namespace t2t {

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(const nn::ParamRefs<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) {
    if (p->trainable && p->grad.size() > 0) sq += p->grad.template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto* p : params) {
      if (p->trainable && p->grad.size() > 0) p->grad *= factor;
    }
  }
  return norm;
}

template <class T>
class Adam {
 public:
  Adam(nn::ParamRefs<T> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double weight_decay = 0.0)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (auto* p : params_) {
      m_.push_back(ag::Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(ag::Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step = static_cast<T>(lr_ / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->trainable || p->grad.size() == 0) continue;
      ag::Matrix<T> g = p->grad;
      if (wd_ > 0) g += static_cast<T>(wd_) * p->value;
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      p->value.array() -= step * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

 private:
  nn::ParamRefs<T> params_;
  std::vector<ag::Matrix<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_, wd_;
  long t_ = 0;
};

}  // namespace t2t
