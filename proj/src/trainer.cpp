#include "msda/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "msda/autodiff.hpp"
#include "msda/ops.hpp"

namespace msda {

void HyperParams::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ContractError("hyper: lr must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ContractError("hyper: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ContractError("hyper: adam_eps must be positive");
  if (batch < 2) {
    throw ContractError("hyper: batch must be >= 2 (covariance needs two rows)");
  }
  weights.validate();
  kernel.validate();
}

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_update(std::span<double> param, std::span<const double> grad,
                 std::span<double> m, std::span<double> v,
                 const HyperParams& hp, std::size_t t) {
  if (t < 1) throw ContractError("adam: step index starts at 1");
  if (grad.size() != param.size() || m.size() != param.size() ||
      v.size() != param.size()) {
    throw DimensionError("adam: parameter of " + std::to_string(param.size()) +
                         " values with gradient/state of " +
                         std::to_string(grad.size()) + "/" +
                         std::to_string(m.size()) + "/" +
                         std::to_string(v.size()));
  }
  const double td = static_cast<double>(t);
  const double c1 = 1.0 - std::pow(hp.beta1, td);
  const double c2 = 1.0 - std::pow(hp.beta2, td);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.adam_eps);
  }
}

void adam_step(std::span<Tensor> params, AdamState& state,
               const HyperParams& hp, std::size_t t) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam: state tracks " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    auto grad = p.grad_mut();
    adam_update(p.data_mut(), grad, state.m[k], state.v[k], hp, t);
  }
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::single: return "single";
    case Protocol::combined: return "combined";
    case Protocol::multi: return "multi";
  }
  return "unknown";
}

Protocol parse_protocol(const std::string& text) {
  if (text == "single") return Protocol::single;
  if (text == "combined") return Protocol::combined;
  if (text == "multi") return Protocol::multi;
  throw ContractError("unknown protocol '" + text +
                      "' (expected single, combined or multi)");
}

namespace {

std::size_t count_correct(const MsdaModel& model, const LabeledSet& set) {
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < set.size(); start += kChunk) {
    rows.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + kChunk); ++i) {
      rows.push_back(i);
    }
    const auto part = subset(set, rows);
    const auto pred = predict(model, part.images);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      correct += pred.labels[i] == part.labels[i] ? 1 : 0;
    }
  }
  return correct;
}

// Batch `it` of an epoch: `batch` consecutive positions of the epoch order,
// wrapping around so every batch has the same size.
std::vector<std::size_t> window(const std::vector<std::size_t>& order,
                                std::size_t it, std::size_t batch) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t k = 0; k < batch; ++k) {
    rows[k] = order[(it * batch + k) % order.size()];
  }
  return rows;
}

}  // namespace

ObjectiveTerms joint_objective(const MsdaModel& model, std::span<const Batch> sources,
                               const Tensor& target_images, const HyperParams& hp,
                               bool use_class_discrepancy) {
  if (sources.size() != model.num_sources()) {
    throw ContractError("objective: " + std::to_string(sources.size()) +
                        " source batches for a model with " +
                        std::to_string(model.num_sources()) + " branches");
  }
  LossWeights weights = hp.weights;
  if (!use_class_discrepancy) weights.gamma = 0.0;
  const Tensor target_shared = shared_features(model, target_images);

  Tensor cl_sum, fd_sum;
  std::vector<Tensor> target_probs;
  for (std::size_t j = 0; j < sources.size(); ++j) {
    const BranchOutput src = forward_branch(model, sources[j].images, j);
    const BranchOutput tgt = forward_from_shared(model, target_shared, j);
    const Tensor cl = cross_entropy(src.logits, sources[j].labels);
    const Tensor fd = feature_discrepancy(src.features, tgt.features, hp.kernel);
    cl_sum = cl_sum.defined() ? add(cl_sum, cl) : cl;
    fd_sum = fd_sum.defined() ? add(fd_sum, fd) : fd;
    target_probs.push_back(tgt.probs);
  }
  const double inv_n = 1.0 / static_cast<double>(sources.size());
  ObjectiveTerms out;
  out.cl = scale(cl_sum, inv_n);
  out.fd = scale(fd_sum, inv_n);
  out.cd = use_class_discrepancy ? class_discrepancy(target_probs) : Tensor::scalar(0.0);
  out.total = total_loss(out.cl, out.fd, out.cd, weights);
  return out;
}

namespace {

TrainReport train_branches(MsdaModel& model,
                           std::span<const SourceDomain> sources,
                           const UnlabeledSet& target, const HyperParams& hp,
                           bool use_class_discrepancy,
                           std::size_t smallest_source = 0) {
  hp.validate();
  const std::size_t n_sources = sources.size();
  if (model.num_sources() != n_sources) {
    throw ContractError("model has " + std::to_string(model.num_sources()) +
                        " branches but " + std::to_string(n_sources) +
                        " sources were given");
  }
  std::size_t min_size = target.size();
  for (const auto& s : sources) min_size = std::min(min_size, s.train.size());
  if (hp.batch > min_size) {
    throw ContractError("batch " + std::to_string(hp.batch) +
                        " exceeds the smallest training set (" +
                        std::to_string(min_size) + ")");
  }
  if (smallest_source == 0) {
    smallest_source = sources[0].train.size();
    for (const auto& s : sources) {
      smallest_source = std::min(smallest_source, s.train.size());
    }
  }
  const std::size_t steps = (smallest_source + hp.batch - 1) / hp.batch;

  std::vector<Tensor> params = model.parameter_tensors();
  AdamState state = AdamState::for_params(params);
  TrainReport report;
  report.hyper = hp;
  report.target_name = target.domain_name;
  for (const auto& s : sources) report.source_names.push_back(s.train.domain_name);

  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t j = 0; j < n_sources; ++j) {
      orders.push_back(epoch_order(sources[j].train.size(),
                                   derive_seed(hp.seed, "source" + std::to_string(j)),
                                   epoch));
    }
    const auto target_order =
        epoch_order(target.size(), derive_seed(hp.seed, "target"), epoch);

    EpochLog log;
    for (std::size_t it = 0; it < steps; ++it) {
      std::vector<Batch> batches;
      for (std::size_t j = 0; j < n_sources; ++j) {
        auto b = subset(sources[j].train, window(orders[j], it, hp.batch));
        batches.push_back({std::move(b.images), std::move(b.labels)});
      }
      const Tensor target_images =
          gather_rows(target.images, window(target_order, it, hp.batch));
      const ObjectiveTerms terms =
          joint_objective(model, batches, target_images, hp, use_class_discrepancy);

      model.zero_grad();
      backward(terms.total);
      adam_step(params, state, hp, ++t);

      log.cl += terms.cl.item();
      log.fd += terms.fd.item();
      log.cd += terms.cd.item();
      log.total += terms.total.item();
    }
    const double inv_steps = 1.0 / static_cast<double>(steps);
    log.cl *= inv_steps;
    log.fd *= inv_steps;
    log.cd *= inv_steps;
    log.total *= inv_steps;

    std::size_t correct = 0, seen = 0;
    for (const auto& s : sources) {
      correct += count_correct(model, s.val);
      seen += s.val.size();
    }
    log.val_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    report.per_epoch.push_back(log);
  }
  return report;
}

}  // namespace

TrainReport train_multi_source(MsdaModel& model,
                               std::span<const SourceDomain> sources,
                               const UnlabeledSet& target_train,
                               const HyperParams& hp) {
  if (sources.size() < 2) {
    throw ContractError("multi-source training needs at least 2 sources, got " +
                        std::to_string(sources.size()));
  }
  auto report = train_branches(model, sources, target_train, hp, true);
  report.protocol = Protocol::multi;
  return report;
}

TrainReport train_single_source(MsdaModel& model, const SourceDomain& source,
                                const UnlabeledSet& target_train,
                                const HyperParams& hp) {
  if (model.num_sources() != 1) {
    throw ContractError("single-source training needs a one-branch model");
  }
  auto report = train_branches(model, std::span(&source, 1), target_train, hp, false);
  report.protocol = Protocol::single;
  return report;
}

TrainReport train_source_combined(MsdaModel& model,
                                  std::span<const SourceDomain> sources,
                                  const UnlabeledSet& target_train,
                                  const HyperParams& hp) {
  if (sources.size() < 2) {
    throw ContractError("source-combined training needs at least 2 sources, got " +
                        std::to_string(sources.size()));
  }
  std::vector<LabeledSet> trains, vals;
  for (const auto& s : sources) {
    trains.push_back(s.train);
    vals.push_back(s.val);
  }
  if (model.num_sources() != 1) {
    throw ContractError("source-combined training needs a one-branch model");
  }
  // Same iteration budget as the multi-source run over these sources.
  std::size_t smallest = trains[0].size();
  for (const auto& t : trains) smallest = std::min(smallest, t.size());
  const SourceDomain pooled{combine_sources(trains), combine_sources(vals)};
  auto report =
      train_branches(model, std::span(&pooled, 1), target_train, hp, false, smallest);
  report.protocol = Protocol::combined;
  report.source_names.clear();
  for (const auto& s : sources) report.source_names.push_back(s.train.domain_name);
  return report;
}

double evaluate(const MsdaModel& model, const LabeledSet& test) {
  if (test.size() == 0) throw ContractError("evaluate on an empty set");
  return static_cast<double>(count_correct(model, test)) /
         static_cast<double>(test.size());
}

}  // namespace msda
