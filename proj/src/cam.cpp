#include "msda/cam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace msda {

std::string Heatmap::branch_label() const {
  return branch ? std::to_string(*branch) : "aggregate";
}

ClassWeights class_weights(const MsdaModel& model, std::size_t j, int class_index) {
  const Branch& b = model.branch(j);
  if (class_index < 0 || static_cast<std::size_t>(class_index) >= model.num_classes()) {
    throw ContractError("cam: class index " + std::to_string(class_index) +
                        " out of range for " + std::to_string(model.num_classes()) +
                        " classes");
  }
  const auto c = static_cast<std::size_t>(class_index);
  const Tensor& pw = b.projection.weight;  // [K x d]
  const Tensor& cw = b.classifier.weight;  // [d x classes]
  const std::size_t k_maps = pw.size(0), d = pw.size(1);
  ClassWeights out;
  out.weights.assign(k_maps, 0.0);
  for (std::size_t k = 0; k < k_maps; ++k)
    for (std::size_t i = 0; i < d; ++i) out.weights[k] += pw.at(k, i) * cw.at(i, c);
  const auto pb = b.projection.bias.data();
  out.bias = b.classifier.bias.data()[c];
  for (std::size_t i = 0; i < d; ++i) out.bias += pb[i] * cw.at(i, c);
  return out;
}

Tensor weighted_map_sum(const Tensor& maps, std::span<const double> weights) {
  if (maps.rank() != 4 || maps.size(0) != 1 || maps.size(1) != weights.size()) {
    throw DimensionError("cam: maps " + shape_str(maps.shape()) + " with " +
                         std::to_string(weights.size()) + " weights");
  }
  const std::size_t h = maps.size(2), w = maps.size(3), plane = h * w;
  const auto f = maps.data();
  std::vector<double> out(plane, 0.0);
  for (std::size_t k = 0; k < weights.size(); ++k)
    for (std::size_t p = 0; p < plane; ++p) out[p] += weights[k] * f[k * plane + p];
  return Tensor::from_data({h, w}, std::move(out));
}

namespace {

void check_image(const MsdaModel& model, const Tensor& image) {
  const ImageSpec& s = model.image_spec();
  if (image.shape() != Shape{1, s.channels, s.height, s.width}) {
    throw DimensionError("cam: expected one image of shape " +
                         shape_str({1, s.channels, s.height, s.width}) + ", got " +
                         shape_str(image.shape()));
  }
}

}  // namespace

Tensor raw_cam(const MsdaModel& model, const Tensor& image, int class_index,
               std::size_t j) {
  const ClassWeights cw = class_weights(model, j, class_index);
  check_image(model, image);
  NoGradGuard no_grad;
  return weighted_map_sum(feature_maps(model, image, j), cw.weights);
}

Tensor normalize_map(const Tensor& raw) {
  const auto v = raw.data();
  if (v.empty()) throw DimensionError("cam: empty map");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size(), 0.5);
  if (*hi > *lo) {
    const double span = *hi - *lo;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / span;
  }
  return Tensor::from_data(raw.shape(), std::move(out));
}

Heatmap compute_cam(const MsdaModel& model, const Tensor& image,
                    int class_index, std::size_t j) {
  Heatmap hm;
  hm.values = normalize_map(raw_cam(model, image, class_index, j));
  hm.branch = j;
  hm.class_index = class_index;
  hm.source_height = model.image_spec().height;
  hm.source_width = model.image_spec().width;
  return hm;
}

Heatmap aggregate_cams(const std::vector<Heatmap>& maps) {
  if (maps.empty()) throw ContractError("aggregate_cams: no maps");
  const Heatmap& first = maps.front();
  std::vector<double> acc(first.values.numel(), 0.0);
  for (const auto& m : maps) {
    if (m.values.shape() != first.values.shape() ||
        m.source_height != first.source_height ||
        m.source_width != first.source_width) {
      throw DimensionError("aggregate_cams: map " + shape_str(m.values.shape()) +
                           " vs " + shape_str(first.values.shape()));
    }
    if (m.class_index != first.class_index) {
      throw ContractError("aggregate_cams: class " + std::to_string(m.class_index) +
                          " vs " + std::to_string(first.class_index));
    }
    const auto v = m.values.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  for (auto& a : acc) a /= static_cast<double>(maps.size());
  Heatmap out = first;
  out.values = normalize_map(Tensor::from_data(first.values.shape(), std::move(acc)));
  out.branch.reset();
  return out;
}

std::vector<double> upsample_nearest(const Heatmap& hm) {
  const std::size_t h = hm.values.size(0), w = hm.values.size(1);
  const std::size_t H = hm.source_height, W = hm.source_width;
  const auto v = hm.values.data();
  std::vector<double> out(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = v[(y * h / H) * w + x * w / W];
  return out;
}

std::pair<std::size_t, std::size_t> heatmap_peak(const Heatmap& hm) {
  const auto up = upsample_nearest(hm);
  const auto it = std::max_element(up.begin(), up.end());
  const auto idx = static_cast<std::size_t>(it - up.begin());
  return {idx / hm.source_width, idx % hm.source_width};
}

void export_pgm(const Heatmap& hm, const std::string& path) {
  const auto up = upsample_nearest(hm);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P2\n" << hm.source_width << ' ' << hm.source_height << "\n255\n";
  for (std::size_t y = 0; y < hm.source_height; ++y) {
    for (std::size_t x = 0; x < hm.source_width; ++x) {
      const long px = std::lround(255.0 * std::clamp(up[y * hm.source_width + x], 0.0, 1.0));
      out << (x ? " " : "") << px;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

PgmImage read_pgm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  // Drop comments, then read whitespace-separated tokens.
  std::ostringstream clean;
  for (std::string line; std::getline(in, line);) {
    clean << line.substr(0, line.find('#')) << '\n';
  }
  std::istringstream ts(clean.str());
  std::string magic;
  PgmImage img;
  ts >> magic >> img.width >> img.height >> img.maxval;
  if (magic != "P2" || ts.fail() || img.maxval <= 0) {
    throw std::runtime_error(path + " is not a plain PGM file");
  }
  img.pixels.resize(img.width * img.height);
  for (auto& p : img.pixels) {
    if (!(ts >> p) || p < 0 || p > img.maxval) {
      throw std::runtime_error(path + ": bad or missing pixel value");
    }
  }
  return img;
}

std::string cam_filename(const std::string& target, const std::string& branch,
                         int class_index, std::size_t index) {
  return target + "_" + branch + "_" + std::to_string(class_index) + "_" +
         std::to_string(index) + ".pgm";
}

}  // namespace msda
