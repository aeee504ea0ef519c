#include "msda/losses.hpp"

#include <cmath>
#include <string>

#include "msda/ops.hpp"

namespace msda {

void KernelConfig::validate() const {
  if (bandwidth_multipliers.empty()) {
    throw ContractError("kernel config: at least one bandwidth multiplier");
  }
  for (double m : bandwidth_multipliers) {
    if (!(m > 0.0) || !std::isfinite(m)) {
      throw ContractError("kernel config: multipliers must be positive, got " +
                          std::to_string(m));
    }
  }
  if (fixed_bandwidth && (!(*fixed_bandwidth > 0.0) ||
                          !std::isfinite(*fixed_bandwidth))) {
    throw ContractError("kernel config: fixed bandwidth must be positive");
  }
}

void LossWeights::validate() const {
  if (!std::isfinite(lambda) || !std::isfinite(gamma) || lambda < 0.0 ||
      gamma < 0.0) {
    throw ContractError("loss weights must be finite and non-negative (lambda=" +
                        std::to_string(lambda) +
                        ", gamma=" + std::to_string(gamma) + ")");
  }
}

namespace {

void require_batch(const char* op, const Tensor& t, std::size_t min_rows) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected [rows x features], got " +
                         shape_str(t.shape()));
  }
  if (t.size(0) < min_rows) {
    throw ContractError(std::string(op) + ": batch of " +
                        std::to_string(t.size(0)) + " rows, need at least " +
                        std::to_string(min_rows));
  }
}

void require_same_features(const char* op, const Tensor& a, const Tensor& b) {
  if (a.size(1) != b.size(1)) {
    throw DimensionError(std::string(op) + ": feature dimension mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor kernel_from_distances(const Tensor& sq_dist, const Tensor& sigma2,
                             const KernelConfig& cfg) {
  const Tensor inv = reciprocal(sigma2);
  Tensor acc;
  for (double m : cfg.bandwidth_multipliers) {
    Tensor term = exp(mul_scalar(sq_dist, scale(inv, -1.0 / m)));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(cfg.bandwidth_multipliers.size()));
}

}  // namespace

Tensor kernel_bandwidth(const Tensor& pooled, const KernelConfig& cfg) {
  if (cfg.fixed_bandwidth) return Tensor::scalar(*cfg.fixed_bandwidth);
  if (pooled.size(0) < 2) return Tensor::scalar(1.0);
  Tensor med = median(upper_triangle(pairwise_sq_dist(pooled, pooled)));
  if (med.item() == 0.0) return Tensor::scalar(1.0);
  return med;
}

Tensor gram(const Tensor& x, const Tensor& y, const KernelConfig& cfg) {
  cfg.validate();
  require_batch("gram", x, 1);
  require_batch("gram", y, 1);
  require_same_features("gram", x, y);
  const Tensor pooled[] = {x, y};
  const Tensor sigma2 = kernel_bandwidth(concat_rows(pooled), cfg);
  return kernel_from_distances(pairwise_sq_dist(x, y), sigma2, cfg);
}

Tensor mmd_squared(const Tensor& source, const Tensor& target,
                   const KernelConfig& cfg) {
  cfg.validate();
  require_batch("mmd_squared", source, 1);
  require_batch("mmd_squared", target, 1);
  require_same_features("mmd_squared", source, target);
  const Tensor pooled[] = {source, target};
  const Tensor sigma2 = kernel_bandwidth(concat_rows(pooled), cfg);
  const Tensor k_ss = kernel_from_distances(pairwise_sq_dist(source, source), sigma2, cfg);
  const Tensor k_st = kernel_from_distances(pairwise_sq_dist(source, target), sigma2, cfg);
  const Tensor k_tt = kernel_from_distances(pairwise_sq_dist(target, target), sigma2, cfg);
  return add(sub(mean(k_ss), scale(mean(k_st), 2.0)), mean(k_tt));
}

Tensor covariance(const Tensor& features) {
  if (features.rank() != 2) {
    throw DimensionError("covariance: expected [rows x features], got " +
                         shape_str(features.shape()));
  }
  const std::size_t n = features.size(0);
  if (n < 2) {
    throw ContractError("covariance: degenerate batch of " + std::to_string(n) +
                        " rows (the n - 1 divisor needs n >= 2)");
  }
  const Tensor sums = column_sums(features);
  const Tensor cross = matmul(transpose(features), features);
  const Tensor outer = matmul(transpose(sums), sums);
  return scale(sub(cross, scale(outer, 1.0 / static_cast<double>(n))),
               1.0 / static_cast<double>(n - 1));
}

Tensor coral_loss(const Tensor& source_feats, const Tensor& target_feats) {
  require_batch("coral_loss", source_feats, 2);
  require_batch("coral_loss", target_feats, 2);
  require_same_features("coral_loss", source_feats, target_feats);
  const double d = static_cast<double>(source_feats.size(1));
  const Tensor diff = sub(covariance(source_feats), covariance(target_feats));
  return scale(sum(square(diff)), 1.0 / (4.0 * d * d));
}

Tensor feature_discrepancy(const Tensor& source_feats,
                           const Tensor& target_feats,
                           const KernelConfig& cfg) {
  return add(mmd_squared(source_feats, target_feats, cfg),
             coral_loss(source_feats, target_feats));
}

Tensor class_discrepancy(std::span<const Tensor> outputs) {
  const std::size_t n = outputs.size();
  if (n < 2) {
    throw ContractError("class_discrepancy: needs at least 2 classifier outputs, got " +
                        std::to_string(n));
  }
  for (const auto& o : outputs) {
    if (o.rank() != 2 || o.shape() != outputs[0].shape()) {
      throw DimensionError("class_discrepancy: output shape " +
                           shape_str(o.shape()) + " vs " +
                           shape_str(outputs[0].shape()));
    }
    const std::size_t rows = o.size(0), cols = o.size(1);
    const auto p = o.data();
    for (std::size_t i = 0; i < rows; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        if (p[i * cols + j] < -1e-12) {
          throw ContractError("class_discrepancy: negative probability in row " +
                              std::to_string(i));
        }
        total += p[i * cols + j];
      }
      if (std::abs(total - 1.0) > 1e-6) {
        throw ContractError("class_discrepancy: row " + std::to_string(i) +
                            " sums to " + std::to_string(total) +
                            ", not a probability vector");
      }
    }
  }
  Tensor acc;
  for (std::size_t j = 0; j + 1 < n; ++j)
    for (std::size_t i = j + 1; i < n; ++i) {
      Tensor term = mean(abs(sub(outputs[i], outputs[j])));
      acc = acc.defined() ? add(acc, term) : term;
    }
  const double pairs = static_cast<double>(n * (n - 1) / 2);
  return scale(acc, 1.0 / pairs);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: expected [batch x classes], got " +
                         shape_str(logits.shape()));
  }
  const auto classes = static_cast<int>(logits.size(1));
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(y) +
                          " out of range [0, " + std::to_string(classes) + ")");
    }
  }
  return scale(mean(select_per_row(log_softmax_rows(logits), labels)), -1.0);
}

Tensor total_loss(const Tensor& cl, const Tensor& fd, const Tensor& cd,
                  const LossWeights& w) {
  w.validate();
  const std::pair<const char*, const Tensor*> terms[] = {
      {"classification (cl)", &cl}, {"feature discrepancy (fd)", &fd},
      {"class discrepancy (cd)", &cd}};
  for (const auto& [name, t] : terms) {
    if (t->numel() != 1) {
      throw DimensionError(std::string("total_loss: ") + name +
                           " term is not a scalar: " + shape_str(t->shape()));
    }
    if (!std::isfinite(t->item())) {
      throw NumericError(std::string("total_loss: non-finite ") + name +
                         " term (" + std::to_string(t->item()) + ")");
    }
  }
  return add(add(cl, scale(fd, w.lambda)), scale(cd, w.gamma));
}

}  // namespace msda
