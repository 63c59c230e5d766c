#pragma once

#include <cstddef>
#include <span>

#include "xmodal/embed_store.hpp"
#include "xmodal/prototype_memory.hpp"

namespace xmodal {

struct LossOutput {
  double value = 0.0;
  RowMatrixD grad;  // d loss / d feature rows
};

// Summed InfoNCE of each feature row against its prototype label, bank held
// constant.
LossOutput intra_infonce(const RowMatrixD& features, std::span<const std::size_t> labels, const PrototypeBank& bank,
                         double tau);

// Multi-positive contrastive loss over positives[z] plus the k_neg hardest
// negatives of each query, summed over the batch and scaled by 0.5.
LossOutput multi_positive_global(const RowMatrixD& features, std::span<const int> cluster_labels,
                                 const PrototypeBank& bank, double tau, std::size_t k_neg);

// Chain rule through x -> x / |x|.
RowMatrixD grad_through_normalization(const RowMatrixD& grad, const RowMatrixD& pre_norm);

}  // namespace xmodal
