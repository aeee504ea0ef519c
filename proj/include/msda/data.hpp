#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

inline constexpr std::size_t kImageSide = 28;
inline constexpr int kLabelOk = 0;
inline constexpr int kLabelNotOk = 1;

/// Nuisance parameters of one synthetic production site.
struct DomainSpec {
  std::string name;
  double background_level = 0.2;  // [0, 1]
  double blur_radius = 0.0;       // box blur, >= 0
  double noise_sigma = 0.0;       // additive Gaussian, >= 0
  double rotation_degrees = 0.0;
  double glyph_contrast = 1.0;    // (0, 1]

  void validate() const;
  bool operator==(const DomainSpec&) const = default;
};

/// Six sites with spread nuisance parameters (Ab, Bu, Bo, Li, Wi, Os).
std::vector<DomainSpec> default_roster();

/// Throws on duplicate names or invalid specs.
void validate_roster(const std::vector<DomainSpec>& roster);

const DomainSpec& find_domain(const std::vector<DomainSpec>& roster,
                              std::string_view name);

struct LabeledSet {
  Tensor images;  // [n x 1 x 28 x 28], values in [0, 1]
  std::vector<int> labels;
  std::string domain_name;

  std::size_t size() const { return labels.size(); }
};

/// Target-domain images with the labels removed. Training entry points only
/// accept this type for the target.
struct UnlabeledSet {
  Tensor images;
  std::string domain_name;

  std::size_t size() const { return images.defined() ? images.size(0) : 0; }
};

UnlabeledSet strip_labels(const LabeledSet& set);

struct Split {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// Mixes a base seed with a tag into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

/// Clean glyph of one sample: a bar-and-dot date pattern in the top-left
/// quadrant, values in {0, 1}, [28 x 28] row-major.
std::vector<double> make_glyph(std::uint64_t sample_seed);
std::uint64_t sample_seed(const DomainSpec& spec, std::uint64_t seed,
                          std::size_t index);

/// n/2 OK and n/2 NOT-OK images (labels alternate starting with OK).
LabeledSet generate_domain(const DomainSpec& spec, std::size_t n,
                           std::uint64_t seed);

/// Stratified 70/10/20 partition, deterministic in `seed`.
Split split(const LabeledSet& ds, std::uint64_t seed);

LabeledSet combine_sources(const std::vector<LabeledSet>& sets);

/// Row subset of a labeled set.
LabeledSet subset(const LabeledSet& ds, std::span<const std::size_t> rows);

/// Permutation of [0, n) for one epoch, keyed by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch);

/// One shuffled pass; the final batch may be short.
std::vector<Batch> minibatches(const LabeledSet& ds, std::size_t batch,
                               std::uint64_t seed, std::size_t epoch);

void save_dataset(const LabeledSet& ds, const std::string& path);
LabeledSet load_dataset(const std::string& path);

}  // namespace msda
