#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msda/data.hpp"
#include "msda/trainer.hpp"

namespace msda {

/// One row of the protocol enumeration.
struct RunSpec {
  Protocol protocol = Protocol::single;
  std::vector<std::string> sources;

  /// "single-source", "combined-2", "combined-3", "multi-2" or "multi-3".
  std::string method() const;
};

struct RunResult {
  RunSpec spec;
  double accuracy = 0.0;  // fraction in [0, 1]
  TrainReport report;
};

struct MethodAverage {
  std::string method;
  double accuracy_pct = 0.0;  // mean of the rounded per-run percentages
  std::size_t runs = 0;
};

struct SuiteResult {
  std::string target;
  std::uint64_t seed = 0;
  std::vector<RunResult> runs;
  std::vector<MethodAverage> averages;
};

/// Per-domain data shared by every run of a suite.
struct DomainData {
  std::string name;
  Split split;
};

struct SuiteOptions {
  std::size_t images_per_domain = 800;
  /// Domain every run includes; defaults to the first non-target roster entry.
  std::optional<std::string> anchor;
  /// Worker threads; each run is independent.
  std::size_t jobs = 1;
  /// Called after each run (serialised across workers).
  std::function<void(const RunSpec&, const MsdaModel&, const RunResult&,
                     const DomainData& target)>
      observer;
};

/// The five method names in table order.
const std::vector<std::string>& method_names();

/// 1 single-source baseline on the anchor, then the anchor paired with every
/// 1- and 2-subset of the remaining non-target domains, in combined and then
/// multi mode.
std::vector<RunSpec> enumerate_runs(const std::vector<DomainSpec>& roster,
                                    const std::string& target,
                                    const std::optional<std::string>& anchor = {});

std::vector<DomainData> prepare_domains(const std::vector<DomainSpec>& roster,
                                        std::size_t images_per_domain,
                                        std::uint64_t seed);

/// Runs one protocol row and evaluates it on the target test split.
RunResult run_one(const RunSpec& spec, const std::vector<DomainData>& domains,
                  const std::string& target, const HyperParams& hp,
                  std::optional<MsdaModel>* trained = nullptr);

SuiteResult run_protocol_suite(const std::vector<DomainSpec>& roster,
                               const std::string& target, const HyperParams& hp,
                               const SuiteOptions& options = {});

std::vector<MethodAverage> method_averages(const std::vector<RunResult>& runs);

/// Accuracy as a percentage with two decimals, '.' separator.
std::string format_pct(double pct);

/// Header "protocol,target,sources,accuracy,seed"; one row per run, then one
/// "average" row per method with the method name in the sources column.
std::string suite_csv(const SuiteResult& result);

/// Header "method,average,runs"; the five method averages.
std::string summary_csv(const std::vector<MethodAverage>& averages);

}  // namespace msda
