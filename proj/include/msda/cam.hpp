#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msda/model.hpp"

namespace msda {

/// Class activation map normalised to [0, 1].
struct Heatmap {
  Tensor values;                      // [h' x w']
  std::optional<std::size_t> branch;  // empty for an aggregate
  int class_index = 0;
  std::size_t source_height = 0;
  std::size_t source_width = 0;

  /// Branch index as text, or "aggregate".
  std::string branch_label() const;
};

/// Per-map weights and offset of class `class_index` in branch j, folding the
/// projection into the classifier: logit = bias + sum_k weights[k] * GAP(f_k).
struct ClassWeights {
  std::vector<double> weights;
  double bias = 0.0;
};

ClassWeights class_weights(const MsdaModel& model, std::size_t j, int class_index);

/// sum_k weights[k] * maps[0, k] for maps of shape [1 x K x h x w].
Tensor weighted_map_sum(const Tensor& maps, std::span<const double> weights);

/// Un-normalised CAM of one image [1 x c x h x w].
Tensor raw_cam(const MsdaModel& model, const Tensor& image, int class_index,
               std::size_t j);

/// Min-max normalisation; a constant map becomes all 0.5.
Tensor normalize_map(const Tensor& raw);

Heatmap compute_cam(const MsdaModel& model, const Tensor& image,
                    int class_index, std::size_t j);

/// Pixelwise mean of the maps, renormalised.
Heatmap aggregate_cams(const std::vector<Heatmap>& maps);

/// Nearest-neighbour upsampling to the source image size, row-major.
std::vector<double> upsample_nearest(const Heatmap& hm);

/// Row and column of the largest upsampled value; the first one wins ties.
std::pair<std::size_t, std::size_t> heatmap_peak(const Heatmap& hm);

/// Plain "P2" file at the source image size, values round(255 v).
void export_pgm(const Heatmap& hm, const std::string& path);

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 0;
  std::vector<int> pixels;  // row-major
};

PgmImage read_pgm(const std::string& path);

/// "<target>_<branch>_<class>_<index>.pgm"
std::string cam_filename(const std::string& target, const std::string& branch,
                         int class_index, std::size_t index);

}  // namespace msda
