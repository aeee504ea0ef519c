#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "msda/data.hpp"
#include "msda/losses.hpp"
#include "msda/model.hpp"

namespace msda {

struct HyperParams {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch = 16;
  std::size_t epochs = 10;
  LossWeights weights;
  KernelConfig kernel;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

/// First and second moment buffers, one per parameter tensor.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(std::span<const Tensor> params);
};

/// Bias-corrected Adam update of one buffer at step t (t >= 1).
void adam_update(std::span<double> param, std::span<const double> grad,
                 std::span<double> m, std::span<double> v,
                 const HyperParams& hp, std::size_t t);

/// Applies adam_update to every parameter using its current gradient.
void adam_step(std::span<Tensor> params, AdamState& state,
               const HyperParams& hp, std::size_t t);

enum class Protocol { single, combined, multi };

std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& text);

struct EpochLog {
  double cl = 0.0;
  double fd = 0.0;
  double cd = 0.0;
  double total = 0.0;
  double val_accuracy = 0.0;  // on the labelled source validation splits

  bool operator==(const EpochLog&) const = default;
};

struct TrainReport {
  Protocol protocol = Protocol::single;
  std::vector<std::string> source_names;
  std::string target_name;
  std::vector<EpochLog> per_epoch;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  HyperParams hyper;
};

/// Labelled data of one source domain.
struct SourceDomain {
  LabeledSet train;
  LabeledSet val;
};

struct ObjectiveTerms {
  Tensor cl;  // mean_j CL_j
  Tensor fd;  // mean_j FD_j
  Tensor cd;
  Tensor total;
};

/// Loss of one iteration: batch j goes through branch j and is aligned with
/// the target batch in that branch's feature space. CD is computed over all
/// branch outputs on the target when `use_class_discrepancy` is set.
ObjectiveTerms joint_objective(const MsdaModel& model, std::span<const Batch> sources,
                               const Tensor& target_images, const HyperParams& hp,
                               bool use_class_discrepancy);

/// Joint objective over N >= 2 sources: per iteration one batch per source and
/// one target batch of the same size; loss = mean_j CL_j + lambda mean_j FD_j
/// + gamma CD, one Adam step.
TrainReport train_multi_source(MsdaModel& model,
                               std::span<const SourceDomain> sources,
                               const UnlabeledSet& target_train,
                               const HyperParams& hp);

/// N = 1 variant without the class-discrepancy term (gamma is ignored).
TrainReport train_single_source(MsdaModel& model, const SourceDomain& source,
                                const UnlabeledSet& target_train,
                                const HyperParams& hp);

/// Pools the sources into one domain and trains as single-source, with the
/// epoch length of a multi-source run over the same sources.
TrainReport train_source_combined(MsdaModel& model,
                                  std::span<const SourceDomain> sources,
                                  const UnlabeledSet& target_train,
                                  const HyperParams& hp);

/// Fraction of ensemble predictions equal to the labels.
double evaluate(const MsdaModel& model, const LabeledSet& test);

}  // namespace msda
