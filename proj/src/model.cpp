#include "msda/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "msda/binary_io.hpp"
#include "msda/ops.hpp"

namespace msda {

namespace {

std::size_t conv_out(std::size_t in, const ConvStage& s) {
  if (s.kernel > in) return 0;
  return (in - s.kernel) / s.stride + 1;
}

ConvLayer make_conv(std::size_t in_maps, const ConvStage& s) {
  return {Tensor::zeros({s.maps, in_maps, s.kernel, s.kernel}, true),
          Tensor::zeros({s.maps}, true), s.stride};
}

AffineLayer make_affine(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

void fill_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data_mut()) v = dist(rng);
}

Tensor conv_block(const ConvLayer& layer, const Tensor& x) {
  return relu(add_channel_bias(conv2d(x, layer.weight, layer.stride), layer.bias));
}

Tensor affine(const AffineLayer& layer, const Tensor& x) {
  return add_row_bias(matmul(x, layer.weight), layer.bias);
}

void check_images(const MsdaModel& model, const Tensor& images) {
  const auto& spec = model.image_spec();
  if (images.rank() != 4 || images.size(1) != spec.channels ||
      images.size(2) != spec.height || images.size(3) != spec.width) {
    throw DimensionError("model expects images [b x " +
                         std::to_string(spec.channels) + " x " +
                         std::to_string(spec.height) + " x " +
                         std::to_string(spec.width) + "], got " +
                         shape_str(images.shape()));
  }
}

constexpr const char* kCheckpointMagic = "MSDA-CHECKPOINT 1";

}  // namespace

MsdaModel::MsdaModel(std::size_t num_sources, std::size_t num_classes,
                     ImageSpec image, Architecture arch)
    : num_classes_(num_classes), image_(image), arch_(arch) {
  if (num_sources < 1) throw ContractError("model needs at least one source");
  if (num_classes < 2) throw ContractError("model needs at least two classes");
  for (const auto* s : {&arch.shared1, &arch.shared2, &arch.branch}) {
    if (s->maps == 0 || s->kernel == 0 || s->stride == 0) {
      throw ContractError("conv stages need positive maps, kernel and stride");
    }
  }
  std::size_t h = image.height, w = image.width;
  for (const auto* s : {&arch.shared1, &arch.shared2, &arch.branch}) {
    h = conv_out(h, *s);
    w = conv_out(w, *s);
    if (h == 0 || w == 0) {
      throw DimensionError("image " + std::to_string(image.height) + "x" +
                           std::to_string(image.width) +
                           " is too small for the convolution stack");
    }
  }
  shared_.push_back(make_conv(image.channels, arch.shared1));
  shared_.push_back(make_conv(arch.shared1.maps, arch.shared2));
  for (std::size_t j = 0; j < num_sources; ++j) {
    branches_.push_back({make_conv(arch.shared2.maps, arch.branch),
                         make_affine(arch.branch.maps, arch.feature_dim),
                         make_affine(arch.feature_dim, num_classes)});
  }
  build_registry();
}

void MsdaModel::build_registry() {
  registry_.clear();
  const char* stage_names[] = {"shared.conv1", "shared.conv2"};
  for (std::size_t s = 0; s < shared_.size(); ++s) {
    registry_.push_back({std::string(stage_names[s]) + ".weight", shared_[s].weight});
    registry_.push_back({std::string(stage_names[s]) + ".bias", shared_[s].bias});
  }
  for (std::size_t j = 0; j < branches_.size(); ++j) {
    const std::string p = "branch" + std::to_string(j);
    const auto& b = branches_[j];
    registry_.push_back({p + ".conv.weight", b.conv.weight});
    registry_.push_back({p + ".conv.bias", b.conv.bias});
    registry_.push_back({p + ".proj.weight", b.projection.weight});
    registry_.push_back({p + ".proj.bias", b.projection.bias});
    registry_.push_back({p + ".cls.weight", b.classifier.weight});
    registry_.push_back({p + ".cls.bias", b.classifier.bias});
  }
}

MsdaModel MsdaModel::clone() const {
  MsdaModel copy(num_sources(), num_classes_, image_, arch_);
  for (std::size_t i = 0; i < registry_.size(); ++i) {
    auto src = registry_[i].value.data();
    auto dst = copy.registry_[i].value.data_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

const Branch& MsdaModel::branch(std::size_t j) const {
  if (j >= branches_.size()) {
    throw ContractError("branch index " + std::to_string(j) + " out of range [0, " +
                        std::to_string(branches_.size()) + ")");
  }
  return branches_[j];
}

std::vector<Tensor> MsdaModel::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(registry_.size());
  for (const auto& p : registry_) out.push_back(p.value);
  return out;
}

std::size_t MsdaModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : registry_) n += p.value.numel();
  return n;
}

const Tensor& MsdaModel::parameter(const std::string& name) const {
  for (const auto& p : registry_) {
    if (p.name == name) return p.value;
  }
  throw ContractError("no parameter named " + name);
}

void MsdaModel::zero_grad() {
  for (auto& p : registry_) p.value.zero_grad();
}

std::pair<std::size_t, std::size_t> MsdaModel::map_size() const {
  std::size_t h = image_.height, w = image_.width;
  for (const auto* s : {&arch_.shared1, &arch_.shared2, &arch_.branch}) {
    h = conv_out(h, *s);
    w = conv_out(w, *s);
  }
  return {h, w};
}

MsdaModel build_model(std::size_t num_sources, std::size_t num_classes,
                      ImageSpec image, std::uint64_t seed, Architecture arch) {
  MsdaModel model(num_sources, num_classes, image, arch);
  std::mt19937_64 rng(seed);
  for (const auto& p : model.parameters()) {
    Tensor t = p.value;
    if (t.rank() == 1) continue;  // biases stay zero
    const std::size_t fan_in = t.rank() == 4
                                   ? t.size(1) * t.size(2) * t.size(3)
                                   : t.size(0);
    // Uniform, variance 2/fan_in for conv stages and 4/fan_in for the affine
    // layers after pooling, whose inputs are small early in training.
    const double gain = t.rank() == 4 ? 6.0 : 12.0;
    fill_uniform(t, std::sqrt(gain / static_cast<double>(fan_in)), rng);
  }
  return model;
}

Tensor shared_features(const MsdaModel& model, const Tensor& images) {
  check_images(model, images);
  const Tensor centred = sub(images, Tensor::full(images.shape(), kInputCentre));
  return conv_block(model.shared(1), conv_block(model.shared(0), centred));
}

BranchOutput head_from_maps(const MsdaModel& model, const Tensor& maps,
                            std::size_t j) {
  const Branch& b = model.branch(j);
  BranchOutput out;
  out.features = affine(b.projection, global_avg_pool(maps));
  out.logits = affine(b.classifier, out.features);
  out.probs = softmax_rows(out.logits);
  return out;
}

BranchOutput forward_from_shared(const MsdaModel& model, const Tensor& shared,
                                 std::size_t j) {
  return head_from_maps(model, conv_block(model.branch(j).conv, shared), j);
}

BranchOutput forward_branch(const MsdaModel& model, const Tensor& images,
                            std::size_t j) {
  model.branch(j);
  return forward_from_shared(model, shared_features(model, images), j);
}

Tensor feature_maps(const MsdaModel& model, const Tensor& images, std::size_t j) {
  const Branch& b = model.branch(j);
  return conv_block(b.conv, shared_features(model, images));
}

Prediction predict(const MsdaModel& model, const Tensor& images) {
  NoGradGuard no_grad;
  const Tensor shared = shared_features(model, images);
  const std::size_t n = images.size(0), c = model.num_classes();
  std::vector<double> avg(n * c, 0.0);
  for (std::size_t j = 0; j < model.num_sources(); ++j) {
    const Tensor probs_j = forward_from_shared(model, shared, j).probs;
    const auto probs = probs_j.data();
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += probs[i];
  }
  const double inv = static_cast<double>(model.num_sources());
  for (auto& v : avg) v /= inv;
  Prediction out;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (avg[i * c + k] > avg[i * c + static_cast<std::size_t>(best)]) {
        best = static_cast<int>(k);
      }
    }
    out.labels[i] = best;
  }
  out.avg_probs = Tensor::from_data({n, c}, std::move(avg));
  return out;
}

// Layout: text header terminated by a line "end", then one little-endian
// float64 block. Offsets in the header are byte offsets into that block.
void save_checkpoint(const MsdaModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const auto& arch = model.architecture();
  const auto& img = model.image_spec();
  out << kCheckpointMagic << '\n';
  out << "sources " << model.num_sources() << '\n';
  out << "classes " << model.num_classes() << '\n';
  out << "image " << img.channels << ' ' << img.height << ' ' << img.width << '\n';
  out << "arch";
  for (const auto* s : {&arch.shared1, &arch.shared2, &arch.branch}) {
    out << ' ' << s->maps << ' ' << s->kernel << ' ' << s->stride;
  }
  out << ' ' << arch.feature_dim << '\n';
  out << "params " << model.parameters().size() << '\n';
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    out << "param " << p.name << ' ' << p.value.rank();
    for (auto d : p.value.shape()) out << ' ' << d;
    out << " offset " << offset << '\n';
    offset += p.value.numel() * 8;
  }
  out << "bytes " << offset << '\n';
  out << "end\n";
  for (const auto& p : model.parameters()) io::write_f64_le(out, p.value.data());
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

MsdaModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  const auto lines = io::read_header_lines(in, "end");
  if (lines.empty() || lines[0] != kCheckpointMagic) {
    throw std::runtime_error(path + " is not a checkpoint file");
  }
  std::size_t sources = 0, classes = 0, declared = 0;
  ImageSpec img;
  Architecture arch;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream ls(lines[i]);
    std::string key;
    ls >> key;
    if (key == "sources") {
      ls >> sources;
    } else if (key == "classes") {
      ls >> classes;
    } else if (key == "image") {
      ls >> img.channels >> img.height >> img.width;
    } else if (key == "arch") {
      for (auto* s : {&arch.shared1, &arch.shared2, &arch.branch}) {
        ls >> s->maps >> s->kernel >> s->stride;
      }
      ls >> arch.feature_dim;
    } else if (key == "params") {
      ls >> declared;
    } else if (key == "param") {
      Entry e;
      std::size_t rank = 0;
      ls >> e.name >> rank;
      e.shape.resize(rank);
      for (auto& d : e.shape) ls >> d;
      std::string tag;
      ls >> tag >> e.offset;
      if (tag != "offset") throw std::runtime_error("malformed param line: " + lines[i]);
      entries.push_back(std::move(e));
    }
    if (ls.fail()) throw std::runtime_error("malformed checkpoint line: " + lines[i]);
  }
  MsdaModel model(sources, classes, img, arch);
  const auto& params = model.parameters();
  if (entries.size() != declared || entries.size() != params.size()) {
    throw std::runtime_error("checkpoint parameter count mismatch in " + path);
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = params[i].value;
    if (entries[i].name != params[i].name || entries[i].shape != t.shape() ||
        entries[i].offset != expected_offset) {
      throw std::runtime_error("checkpoint entry " + entries[i].name +
                               " does not match the model layout");
    }
    io::read_f64_le(in, t.data_mut());
    expected_offset += t.numel() * 8;
  }
  return model;
}

}  // namespace msda
