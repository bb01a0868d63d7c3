#pragma once

// App-type, prototype-contrastive, caption and sentence losses plus their
// weighted combination.

#include <cmath>
#include <limits>
#include <vector>

#include "t2t/autograd.hpp"
#include "t2t/config.hpp"
#include "t2t/text.hpp"

namespace t2t {

/// -(1/B) sum_i log p_i[k_i], log clamped at 1e-12.
template <class T>
Var<T> loss_app(const Var<T>& p, const std::vector<int>& labels) {
  require(static_cast<ag::Index>(labels.size()) == p.rows() && !labels.empty(), ErrorKind::LengthMismatch,
          "loss_app: one label per row required");
  for (int k : labels) {
    require(k >= 0 && k < p.cols(), ErrorKind::LabelOutOfRange, "loss_app: label " + std::to_string(k));
  }
  Var<T> logp = ag::log_clamped(p, static_cast<T>(1e-12));
  return ag::scale(ag::pick_sum(logp, labels), T(-1) / static_cast<T>(labels.size()));
}

namespace detail {

/// Per row i: log(sum_all exp(z)) - log(sum_pos exp(z)), averaged over rows.
/// Positives of row i are columns [k_i*M, (k_i+1)*M).
template <class T>
Var<T> contrastive_from_logits(const Var<T>& logits, const std::vector<int>& labels, int per_type, bool stabilize) {
  const auto& z = logits.value();
  const ag::Index B = z.rows(), C = z.cols();
  Matrix<T> soft_all(B, C), soft_pos = Matrix<T>::Zero(B, C);
  T total = 0;
  for (ag::Index i = 0; i < B; ++i) {
    const int lo = labels[i] * per_type, hi = lo + per_type;
    const T shift = stabilize ? z.row(i).maxCoeff() : T(0);
    T z_pos = 0, z_all = 0;
    for (ag::Index c = 0; c < C; ++c) {
      const T e = std::exp(z(i, c) - shift);
      soft_all(i, c) = e;
      z_all += e;
      if (c >= lo && c < hi) {
        soft_pos(i, c) = e;
        z_pos += e;
      }
    }
    soft_all.row(i) /= z_all;
    soft_pos.row(i) /= z_pos;
    // -log(z_pos / (z_pos + z_neg))
    total += std::log(z_all) - std::log(z_pos);
  }
  const T inv_b = T(1) / static_cast<T>(B);
  const int il = logits.id();
  return logits.tape()->make(Matrix<T>::Constant(1, 1, total * inv_b), {logits},
                             [il, inv_b, grad = Matrix<T>((soft_all - soft_pos) * inv_b)](Tape<T>& t, int self) {
                               t.accumulate(il, grad * t.grad(self)(0, 0));
                             });
}

}  // namespace detail

/// Prototype contrastive loss. `bank` is (K*M) x H with type k in rows
/// [k*M, (k+1)*M). Dot products are max-shifted per sample unless
/// `stabilize` is false.
template <class T>
Var<T> loss_contrastive(const Var<T>& f, const std::vector<int>& labels, const Var<T>& bank, int per_type, T tau,
                        bool stabilize = true) {
  require(tau > 0, ErrorKind::InvalidConfig, "tau must be > 0");
  require(per_type >= 1 && bank.rows() % per_type == 0, ErrorKind::ShapeMismatch, "bank rows must be K*M");
  require(static_cast<ag::Index>(labels.size()) == f.rows() && !labels.empty(), ErrorKind::LengthMismatch,
          "loss_contrastive: one label per row required");
  const int K = static_cast<int>(bank.rows() / per_type);
  for (int k : labels) require(k >= 0 && k < K, ErrorKind::LabelOutOfRange, "loss_contrastive: label");
  Var<T> logits = ag::scale(ag::matmul_bt(f, bank), T(1) / tau);
  return detail::contrastive_from_logits(logits, labels, per_type, stabilize);
}

/// Mean over samples of summed -log q_t[d_t]; PAD targets are skipped.
template <class T>
Var<T> loss_caption(const std::vector<Var<T>>& log_probs, const std::vector<std::vector<int>>& gold) {
  require(!log_probs.empty() && log_probs.size() == gold.size(), ErrorKind::LengthMismatch,
          "loss_caption: one distribution sequence per sample required");
  std::vector<Var<T>> terms;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    require(log_probs[i].rows() == static_cast<ag::Index>(gold[i].size()), ErrorKind::LengthMismatch,
            "loss_caption: " + std::to_string(log_probs[i].rows()) + " distributions for " +
                std::to_string(gold[i].size()) + " gold tokens");
    std::vector<int> cols;
    std::vector<ag::Index> rows;
    for (std::size_t t = 0; t < gold[i].size(); ++t) {
      if (gold[i][t] == Vocabulary::kPad) continue;
      rows.push_back(static_cast<ag::Index>(t));
      cols.push_back(gold[i][t]);
    }
    if (rows.size() == gold[i].size()) {
      terms.push_back(ag::pick_sum(log_probs[i], cols));
    } else {
      for (std::size_t j = 0; j < rows.size(); ++j) {
        terms.push_back(ag::pick_sum(ag::slice_rows(log_probs[i], rows[j], 1), std::vector<int>{cols[j]}));
      }
    }
  }
  Var<T> total = terms.size() == 1 ? terms.front() : ag::sum_all(ag::concat_rows(terms));
  return ag::scale(total, T(-1) / static_cast<T>(gold.size()));
}

/// 1 - mean_i cos(s_i, g_i) with epsilon-guarded norms.
template <class T>
Var<T> loss_sentence(const Var<T>& s, const Var<T>& g) {
  Var<T> cos = ag::cosine_rows(s, g);
  return ag::add_scalar(ag::scale(ag::sum_all(cos), T(-1) / static_cast<T>(s.rows())), T(1));
}

template <class T>
struct LossComponents {
  Var<T> app, cont, cap, sent;  // any may be invalid (absent)
};

/// Weighted sum of the present components. Throws NonFiniteLoss if any
/// present component is NaN or infinite.
template <class T>
Var<T> loss_overall(const LossComponents<T>& c, const LossWeights& w) {
  std::vector<std::pair<Var<T>, double>> parts;
  if (c.app.valid()) parts.emplace_back(c.app, w.lambda_app);
  if (c.cont.valid()) parts.emplace_back(c.cont, w.lambda_cont);
  if (c.cap.valid()) parts.emplace_back(c.cap, w.lambda_cap);
  if (c.sent.valid()) parts.emplace_back(c.sent, w.lambda_sent);
  require(!parts.empty(), ErrorKind::InvalidConfig, "loss_overall: no components");
  for (auto& [v, lambda] : parts) {
    require(std::isfinite(static_cast<double>(v.scalar())), ErrorKind::NonFiniteLoss, "loss component is not finite");
  }
  Var<T> total = ag::scale(parts.front().first, static_cast<T>(parts.front().second));
  for (std::size_t i = 1; i < parts.size(); ++i) {
    total = ag::add(total, ag::scale(parts[i].first, static_cast<T>(parts[i].second)));
  }
  return total;
}

}  // namespace t2t
