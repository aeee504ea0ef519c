#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

/// Subtracted from every pixel before the first convolution.
inline constexpr double kInputCentre = 0.5;

struct ImageSpec {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;

  bool operator==(const ImageSpec&) const = default;
};

struct ConvStage {
  std::size_t maps = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;

  bool operator==(const ConvStage&) const = default;
};

/// Layer geometry: two shared conv stages, then per branch one conv stage,
/// global average pooling, an affine projection and an affine classifier.
struct Architecture {
  ConvStage shared1{8, 3, 1};
  ConvStage shared2{16, 3, 2};
  ConvStage branch{16, 3, 1};
  std::size_t feature_dim = 16;

  bool operator==(const Architecture&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
};

struct ConvLayer {
  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // [out]
  std::size_t stride = 1;
};

struct AffineLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct Branch {
  ConvLayer conv;
  AffineLayer projection;
  AffineLayer classifier;
};

/// Shared extractor, N source-specific subnets and N classifiers.
///
/// Tensors are handles, so copying a model would alias its parameters; the
/// type is move-only and `clone()` makes an independent copy.
class MsdaModel {
 public:
  MsdaModel(std::size_t num_sources, std::size_t num_classes, ImageSpec image,
            Architecture arch);
  MsdaModel(MsdaModel&&) = default;
  MsdaModel& operator=(MsdaModel&&) = default;
  MsdaModel(const MsdaModel&) = delete;
  MsdaModel& operator=(const MsdaModel&) = delete;

  MsdaModel clone() const;

  std::size_t num_sources() const { return branches_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  const ImageSpec& image_spec() const { return image_; }
  const Architecture& architecture() const { return arch_; }

  const ConvLayer& shared(std::size_t stage) const { return shared_.at(stage); }
  const Branch& branch(std::size_t j) const;

  /// Every parameter exactly once, in a stable order.
  const std::vector<Parameter>& parameters() const { return registry_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t parameter_count() const;
  const Tensor& parameter(const std::string& name) const;

  void zero_grad();

  /// Spatial size of the branch feature maps.
  std::pair<std::size_t, std::size_t> map_size() const;

 private:
  void build_registry();

  std::size_t num_classes_;
  ImageSpec image_;
  Architecture arch_;
  std::vector<ConvLayer> shared_;
  std::vector<Branch> branches_;
  std::vector<Parameter> registry_;
};

struct BranchOutput {
  Tensor features;  // [b x d], pre-classifier
  Tensor logits;    // [b x c]
  Tensor probs;     // [b x c]
};

struct Prediction {
  std::vector<int> labels;
  Tensor avg_probs;  // [b x c]
};

/// Deterministic in `seed`: weights uniform in +-sqrt(k / fan_in), biases zero.
MsdaModel build_model(std::size_t num_sources, std::size_t num_classes,
                      ImageSpec image, std::uint64_t seed,
                      Architecture arch = {});

/// Output of the shared extractor for a batch of images.
Tensor shared_features(const MsdaModel& model, const Tensor& images);

/// Branch j applied to already-extracted shared features.
BranchOutput forward_from_shared(const MsdaModel& model, const Tensor& shared,
                                 std::size_t j);

BranchOutput forward_branch(const MsdaModel& model, const Tensor& images,
                            std::size_t j);

/// Uniform average of branch probabilities; ties go to the lower class index.
Prediction predict(const MsdaModel& model, const Tensor& images);

/// Last pre-pooling activation of branch j: [b x maps x h' x w'].
Tensor feature_maps(const MsdaModel& model, const Tensor& images, std::size_t j);

/// Applies branch j's pooling, projection and classifier to its feature maps.
BranchOutput head_from_maps(const MsdaModel& model, const Tensor& maps,
                            std::size_t j);

void save_checkpoint(const MsdaModel& model, const std::string& path);
MsdaModel load_checkpoint(const std::string& path);

}  // namespace msda
