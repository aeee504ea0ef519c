#include "msda/suite.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace msda {

std::string RunSpec::method() const {
  if (protocol == Protocol::single) return "single-source";
  return to_string(protocol) + "-" + std::to_string(sources.size());
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {
      "single-source", "combined-2", "combined-3", "multi-2", "multi-3"};
  return names;
}

std::vector<RunSpec> enumerate_runs(const std::vector<DomainSpec>& roster,
                                    const std::string& target,
                                    const std::optional<std::string>& anchor) {
  validate_roster(roster);
  if (roster.size() < 4) {
    throw ContractError("protocol suite needs a roster of at least 4 domains, got " +
                        std::to_string(roster.size()));
  }
  find_domain(roster, target);
  std::string first;
  if (anchor) {
    find_domain(roster, *anchor);
    if (*anchor == target) throw ContractError("anchor must differ from the target");
    first = *anchor;
  } else {
    for (const auto& d : roster) {
      if (d.name != target) {
        first = d.name;
        break;
      }
    }
  }
  std::vector<std::string> rest;
  for (const auto& d : roster) {
    if (d.name != target && d.name != first) rest.push_back(d.name);
  }

  std::vector<RunSpec> runs;
  runs.push_back({Protocol::single, {first}});
  for (Protocol p : {Protocol::combined, Protocol::multi}) {
    for (const auto& a : rest) runs.push_back({p, {first, a}});
    for (std::size_t i = 0; i < rest.size(); ++i)
      for (std::size_t k = i + 1; k < rest.size(); ++k)
        runs.push_back({p, {first, rest[i], rest[k]}});
  }
  return runs;
}

std::vector<DomainData> prepare_domains(const std::vector<DomainSpec>& roster,
                                        std::size_t images_per_domain,
                                        std::uint64_t seed) {
  std::vector<DomainData> out;
  for (const auto& spec : roster) {
    const auto ds = generate_domain(spec, images_per_domain, seed);
    out.push_back({spec.name, split(ds, derive_seed(seed, "split:" + spec.name))});
  }
  return out;
}

namespace {

const DomainData& lookup(const std::vector<DomainData>& domains,
                         const std::string& name) {
  for (const auto& d : domains) {
    if (d.name == name) return d;
  }
  throw ContractError("no prepared data for domain '" + name + "'");
}

}  // namespace

RunResult run_one(const RunSpec& spec, const std::vector<DomainData>& domains,
                  const std::string& target, const HyperParams& hp,
                  std::optional<MsdaModel>* trained) {
  const DomainData& tgt = lookup(domains, target);
  std::vector<SourceDomain> sources;
  for (const auto& name : spec.sources) {
    const auto& d = lookup(domains, name);
    sources.push_back({d.split.train, d.split.val});
  }
  const UnlabeledSet target_train = strip_labels(tgt.split.train);
  const std::size_t branches = spec.protocol == Protocol::multi ? sources.size() : 1;
  const ImageSpec image{1, kImageSide, kImageSide};
  MsdaModel model = build_model(branches, 2, image, derive_seed(hp.seed, "model"));

  RunResult result;
  result.spec = spec;
  switch (spec.protocol) {
    case Protocol::single:
      if (sources.size() != 1) {
        throw ContractError("single-source protocol takes exactly one source");
      }
      result.report = train_single_source(model, sources[0], target_train, hp);
      break;
    case Protocol::combined:
      result.report = train_source_combined(model, sources, target_train, hp);
      break;
    case Protocol::multi:
      result.report = train_multi_source(model, sources, target_train, hp);
      break;
  }
  result.accuracy = evaluate(model, tgt.split.test);
  result.report.test_accuracy = result.accuracy;
  if (trained) trained->emplace(std::move(model));
  return result;
}

std::string format_pct(double pct) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", pct);
  return buf;
}

std::vector<MethodAverage> method_averages(const std::vector<RunResult>& runs) {
  std::vector<MethodAverage> out;
  for (const auto& method : method_names()) {
    MethodAverage avg{method, 0.0, 0};
    double total = 0.0;
    for (const auto& r : runs) {
      if (r.spec.method() != method) continue;
      total += std::stod(format_pct(100.0 * r.accuracy));
      ++avg.runs;
    }
    if (avg.runs) avg.accuracy_pct = total / static_cast<double>(avg.runs);
    out.push_back(avg);
  }
  return out;
}

SuiteResult run_protocol_suite(const std::vector<DomainSpec>& roster,
                               const std::string& target, const HyperParams& hp,
                               const SuiteOptions& options) {
  hp.validate();
  const auto specs = enumerate_runs(roster, target, options.anchor);
  const auto domains = prepare_domains(roster, options.images_per_domain, hp.seed);
  const DomainData& tgt = lookup(domains, target);

  SuiteResult result;
  result.target = target;
  result.seed = hp.seed;
  result.runs.resize(specs.size());

  std::mutex observer_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        std::optional<MsdaModel> model;
        result.runs[i] = run_one(specs[i], domains, target, hp,
                                 options.observer ? &model : nullptr);
        if (options.observer) {
          std::lock_guard lock(observer_mutex);
          options.observer(specs[i], *model, result.runs[i], tgt);
        }
      } catch (...) {
        std::lock_guard lock(observer_mutex);
        if (!failure) failure = std::current_exception();
        next = specs.size();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, specs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < jobs; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  result.averages = method_averages(result.runs);
  return result;
}

std::string suite_csv(const SuiteResult& result) {
  std::ostringstream os;
  os << "protocol,target,sources,accuracy,seed\n";
  for (const auto& r : result.runs) {
    os << to_string(r.spec.protocol) << ',' << result.target << ',';
    for (std::size_t k = 0; k < r.spec.sources.size(); ++k) {
      os << (k ? "+" : "") << r.spec.sources[k];
    }
    os << ',' << format_pct(100.0 * r.accuracy) << ',' << result.seed << '\n';
  }
  for (const auto& a : result.averages) {
    os << "average," << result.target << ',' << a.method << ','
       << format_pct(a.accuracy_pct) << ',' << result.seed << '\n';
  }
  return os.str();
}

std::string summary_csv(const std::vector<MethodAverage>& averages) {
  std::ostringstream os;
  os << "method,average,runs\n";
  for (const auto& a : averages) {
    os << a.method << ',' << format_pct(a.accuracy_pct) << ',' << a.runs << '\n';
  }
  return os.str();
}

}  // namespace msda
