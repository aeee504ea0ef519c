#pragma once

#include <optional>
#include <span>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

enum class KernelFamily { gaussian };

/// Multi-bandwidth Gaussian kernel used by the MMD term.
///
/// Entry (i, j) of a Gram matrix is the mean over multipliers m of
/// exp(-||x_i - y_j||^2 / (m * sigma2)). `fixed_bandwidth` pins sigma2; when
/// absent, sigma2 is the median pairwise squared distance over the pooled
/// batch (1.0 if that median is zero).
struct KernelConfig {
  KernelFamily family = KernelFamily::gaussian;
  std::vector<double> bandwidth_multipliers{0.25, 0.5, 1.0, 2.0, 4.0};
  std::optional<double> fixed_bandwidth;

  void validate() const;
  bool operator==(const KernelConfig&) const = default;
};

/// Penalty weights of the joint objective.
struct LossWeights {
  double lambda = 0.5;  // feature discrepancy
  double gamma = 0.1;   // class discrepancy

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// sigma2 for the rows of `pooled`, as a scalar tensor. Differentiable through
/// the median; constant when fixed or when the fallback applies.
Tensor kernel_bandwidth(const Tensor& pooled, const KernelConfig& cfg);

Tensor gram(const Tensor& x, const Tensor& y, const KernelConfig& cfg);

/// Biased (V-statistic) squared MMD, all pairs including i == i'.
Tensor mmd_squared(const Tensor& source, const Tensor& target,
                   const KernelConfig& cfg);

/// Sample covariance (n - 1 divisor) from raw and summed cross products.
Tensor covariance(const Tensor& features);

/// ||C_s - C_t||_F^2 / (4 d^2)
Tensor coral_loss(const Tensor& source_feats, const Tensor& target_feats);

/// mmd_squared + coral_loss
Tensor feature_discrepancy(const Tensor& source_feats,
                           const Tensor& target_feats,
                           const KernelConfig& cfg);

/// Mean over classifier pairs of the batch-and-class mean absolute difference
/// between their probability outputs.
Tensor class_discrepancy(std::span<const Tensor> outputs);

/// Mean negative log-likelihood of `labels` under softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// cl + lambda * fd + gamma * cd; throws NumericError naming a non-finite term.
Tensor total_loss(const Tensor& cl, const Tensor& fd, const Tensor& cd,
                  const LossWeights& w);

}  // namespace msda
