#include "xmodal/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "xmodal/error.hpp"
#include "xmodal/parallel.hpp"

namespace xmodal {

namespace {

void check_inputs(const RowMatrixD& features, std::size_t labels, const PrototypeBank& bank, double tau) {
  if (!(tau > 0.0)) throw UsageError("tau must be > 0");
  if (static_cast<std::size_t>(features.rows()) != labels) throw UsageError("label count does not match feature rows");
  if (static_cast<std::size_t>(features.cols()) != bank.dim()) throw UsageError("feature dimension does not match the bank");
}

// Contrastive term of one query over `support`, whose first `n_pos` entries are
// positives: log-sum-exp over the support minus the mean positive logit.
// Accumulates the gradient into `grad`.
double contrast_row(const PrototypeBank& bank, const Eigen::Ref<const Eigen::RowVectorXd>& f,
                    const std::vector<std::size_t>& support, std::size_t n_pos, double tau,
                    Eigen::Ref<Eigen::RowVectorXd> grad) {
  std::vector<double> logits(support.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < support.size(); ++s) {
    logits[s] = bank.vectors.row(static_cast<Eigen::Index>(support[s])).dot(f) / tau;
    top = std::max(top, logits[s]);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - top);
  const double lse = top + std::log(z);
  double pos_mean = 0.0;
  for (std::size_t s = 0; s < n_pos; ++s) pos_mean += logits[s];
  pos_mean /= static_cast<double>(n_pos);

  grad.setZero();
  for (std::size_t s = 0; s < support.size(); ++s) {
    double w = std::exp(logits[s] - lse);
    if (s < n_pos) w -= 1.0 / static_cast<double>(n_pos);
    grad += (w / tau) * bank.vectors.row(static_cast<Eigen::Index>(support[s]));
  }
  // lse >= max logit >= mean positive logit, so only rounding can push this negative.
  return std::max(0.0, lse - pos_mean);
}

LossOutput finish(std::vector<double> per_row, RowMatrixD grad, double scale) {
  LossOutput out;
  for (double v : per_row) out.value += v;
  out.value *= scale;
  out.grad = std::move(grad);
  if (scale != 1.0) out.grad *= scale;
  if (!std::isfinite(out.value) || !out.grad.allFinite()) throw NumericError("loss or gradient is not finite");
  return out;
}

}  // namespace

LossOutput intra_infonce(const RowMatrixD& features, std::span<const std::size_t> labels, const PrototypeBank& bank,
                         double tau) {
  check_inputs(features, labels.size(), bank, tau);
  for (std::size_t y : labels) {
    if (y >= bank.size()) throw UsageError("label " + std::to_string(y) + " out of range for a bank of " + std::to_string(bank.size()));
  }
  const std::size_t n = labels.size();
  std::vector<double> per_row(n);
  RowMatrixD grad(features.rows(), features.cols());
  parallel_for(0, n, [&](std::size_t i) {
    std::vector<std::size_t> support;
    support.reserve(bank.size());
    support.push_back(labels[i]);
    for (std::size_t j = 0; j < bank.size(); ++j) {
      if (j != labels[i]) support.push_back(j);
    }
    per_row[i] = contrast_row(bank, features.row(static_cast<Eigen::Index>(i)), support, 1, tau,
                              grad.row(static_cast<Eigen::Index>(i)));
  });
  return finish(std::move(per_row), std::move(grad), 1.0);
}

LossOutput multi_positive_global(const RowMatrixD& features, std::span<const int> cluster_labels,
                                 const PrototypeBank& bank, double tau, std::size_t k_neg) {
  check_inputs(features, cluster_labels.size(), bank, tau);
  for (int z : cluster_labels) {
    if (z < 0 || static_cast<std::size_t>(z) >= bank.positives.size() || bank.positives[static_cast<std::size_t>(z)].empty()) {
      throw UsageError("cluster label " + std::to_string(z) + " has no positive prototypes");
    }
    if (k_neg > bank.size() - bank.positives[static_cast<std::size_t>(z)].size()) {
      throw UsageError("k_neg = " + std::to_string(k_neg) + " exceeds the available negatives");
    }
  }
  const std::size_t n = cluster_labels.size();
  std::vector<double> per_row(n);
  RowMatrixD grad(features.rows(), features.cols());
  parallel_for(0, n, [&](std::size_t i) {
    const auto& pos = bank.positives[static_cast<std::size_t>(cluster_labels[i])];
    const Eigen::RowVectorXd f = features.row(static_cast<Eigen::Index>(i));
    std::vector<std::size_t> support(pos.begin(), pos.end());
    const auto neg = hard_negatives(bank, std::span<const double>(f.data(), static_cast<std::size_t>(f.size())), pos, k_neg);
    support.insert(support.end(), neg.begin(), neg.end());
    per_row[i] = contrast_row(bank, f, support, pos.size(), tau, grad.row(static_cast<Eigen::Index>(i)));
  });
  return finish(std::move(per_row), std::move(grad), 0.5);
}

RowMatrixD grad_through_normalization(const RowMatrixD& grad, const RowMatrixD& pre_norm) {
  if (grad.rows() != pre_norm.rows() || grad.cols() != pre_norm.cols()) throw UsageError("gradient and feature shapes differ");
  RowMatrixD out(grad.rows(), grad.cols());
  for (Eigen::Index i = 0; i < grad.rows(); ++i) {
    const double norm = pre_norm.row(i).norm();
    if (!(norm > 0.0)) throw DataError("zero-norm feature row " + std::to_string(i));
    const Eigen::RowVectorXd unit = pre_norm.row(i) / norm;
    out.row(i) = (grad.row(i) - grad.row(i).dot(unit) * unit) / norm;
  }
  return out;
}

}  // namespace xmodal
