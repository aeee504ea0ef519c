#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msda/cam.hpp"
#include "msda/suite.hpp"

namespace msda {

/// Bad configuration or arguments (exit code 1).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::vector<DomainSpec> roster = default_roster();
  std::string target = "Os";
  Protocol protocol = Protocol::multi;
  std::vector<std::string> sources{"Ab", "Bu", "Bo"};
  HyperParams hyper;
  std::string output_dir = "out";
  bool export_cams = false;
  std::size_t images_per_domain = 800;
  std::size_t cam_images = 4;
  int cam_class = kLabelOk;
  std::optional<std::string> anchor;
  std::size_t jobs = 1;

  /// Names resolve, target is not a source, protocol arity holds.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Flat "key=value" lines; '#' starts a comment. Unknown keys are errors.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

std::string data_dir(const RunConfig& cfg);
std::string dataset_path(const RunConfig& cfg, const std::string& domain);

/// Writes one dataset per roster domain and data/manifest.csv
/// (name,n,seed,checksum). Returns the written paths.
std::vector<std::string> cmd_generate(const RunConfig& cfg);

/// Loads a dataset after checking it against the manifest checksum.
LabeledSet load_verified(const RunConfig& cfg, const std::string& domain);

/// Runs the configured protocol on generated data; writes report.csv,
/// epochs.csv and model.ckpt (and CAMs when export_cams is set).
TrainReport cmd_train(const RunConfig& cfg);

/// Writes suite.csv and summary.csv.
SuiteResult cmd_suite(const RunConfig& cfg);

/// Per-branch and aggregate heatmaps for the first n target test images.
std::vector<std::string> cmd_cam(const RunConfig& cfg,
                                 const std::string& checkpoint,
                                 std::size_t n_images);

}  // namespace msda
