#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "msda/autodiff.hpp"
#include "msda/model.hpp"
#include "msda/ops.hpp"
#include "msda/trainer.hpp"

using namespace msda;
using testutil::random_tensor;

namespace {

const ImageSpec kImage{1, 28, 28};

bool same_values(const MsdaModel& a, const MsdaModel& b) {
  const auto& pa = a.parameters();
  const auto& pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || pa[i].value.shape() != pb[i].value.shape()) return false;
    const auto x = pa[i].value.data(), y = pb[i].value.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("structure and registry") {
  const MsdaModel m = build_model(3, 2, kImage, 1);
  CHECK(m.num_sources() == 3);
  CHECK(m.num_classes() == 2);
  std::set<std::string> names;
  std::set<const void*> nodes;
  for (const auto& p : m.parameters()) {
    names.insert(p.name);
    nodes.insert(p.value.node().get());
  }
  // 2 shared conv layers plus 3 tensors-pairs per branch, weight and bias each.
  CHECK(m.parameters().size() == 4 + 3 * 6);
  CHECK(names.size() == m.parameters().size());
  CHECK(nodes.size() == m.parameters().size());
  CHECK(names.count("shared.conv1.weight") == 1);
  CHECK(names.count("branch2.cls.bias") == 1);
  for (std::size_t j = 1; j < 3; ++j) {
    CHECK(m.branch(j).conv.weight.shape() == m.branch(0).conv.weight.shape());
    CHECK_FALSE(m.branch(j).conv.weight.same_node(m.branch(0).conv.weight));
  }
  CHECK(m.branch(0).projection.weight.size(1) == m.branch(0).classifier.weight.size(0));
  CHECK_THROWS_AS(m.branch(3), ContractError);
  const MsdaModel single = build_model(1, 2, kImage, 1);
  CHECK(single.num_sources() == 1);
}

TEST_CASE("initialisation is deterministic, biases zero, weights bounded") {
  const MsdaModel a = build_model(2, 2, kImage, 7), b = build_model(2, 2, kImage, 7);
  CHECK(same_values(a, b));
  CHECK_FALSE(same_values(a, build_model(2, 2, kImage, 8)));
  for (const auto& p : a.parameters()) {
    const auto v = p.value.data();
    if (p.value.rank() == 1) {
      for (double x : v) CHECK(x == 0.0);
    } else {
      const double fan_in = static_cast<double>(p.value.numel() / p.value.size(p.value.rank() == 4 ? 0 : 1));
      const double bound = std::sqrt(12.0 / fan_in);
      for (double x : v) CHECK(std::abs(x) <= bound);
    }
  }
}

TEST_CASE("image too small or wrong shape") {
  CHECK_THROWS_AS(build_model(1, 2, {1, 6, 6}, 1), DimensionError);
  CHECK_THROWS_AS(build_model(0, 2, kImage, 1), ContractError);
  CHECK_THROWS_AS(build_model(1, 1, kImage, 1), ContractError);
  const MsdaModel m = build_model(1, 2, kImage, 1);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(forward_branch(m, random_tensor({2, 1, 27, 28}, rng), 0), DimensionError);
  CHECK_THROWS_AS(forward_branch(m, random_tensor({2, 1, 28, 28}, rng), 1), ContractError);
}

TEST_CASE("forward shapes and probabilities") {
  const MsdaModel m = build_model(2, 2, kImage, 3);
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({5, 1, 28, 28}, rng, false, 0.0, 1.0);
  const BranchOutput out = forward_branch(m, x, 1);
  CHECK(out.features.shape() == Shape{5, 16});
  CHECK(out.logits.shape() == Shape{5, 2});
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(out.probs.at(i, 0) + out.probs.at(i, 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto [h, w] = m.map_size();
  CHECK(feature_maps(m, x, 0).shape() == Shape{5, 16, h, w});
  // 28 -> 26 (3x3) -> 12 (3x3, stride 2) -> 10 (3x3)
  CHECK(h == 10);
  CHECK(w == 10);
}

TEST_CASE("an input equal to the centre gives zero maps and uniform probabilities") {
  const MsdaModel m = build_model(2, 2, kImage, 4);
  const Tensor x = Tensor::full({2, 1, 28, 28}, kInputCentre);
  for (double v : testutil::to_vec(feature_maps(m, x, 1))) CHECK(v == 0.0);
  const auto out = forward_branch(m, x, 0);
  for (double p : out.probs.data()) CHECK(p == 0.5);
}

TEST_CASE("pooling and projection of the feature maps give the features") {
  const MsdaModel m = build_model(3, 2, kImage, 5);
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({4, 1, 28, 28}, rng, false, 0.0, 1.0);
  for (std::size_t j = 0; j < 3; ++j) {
    const Tensor maps = feature_maps(m, x, j);
    const std::size_t k = maps.size(1), plane = maps.size(2) * maps.size(3);
    const Tensor& pw = m.branch(j).projection.weight;
    const auto pb = m.branch(j).projection.bias.data();
    const BranchOutput out = forward_branch(m, x, j);
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> gap(k, 0.0);
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t p = 0; p < plane; ++p) gap[c] += maps.data()[(i * k + c) * plane + p];
      for (auto& g : gap) g /= static_cast<double>(plane);
      for (std::size_t d = 0; d < pw.size(1); ++d) {
        double f = pb[d];
        for (std::size_t c = 0; c < k; ++c) f += gap[c] * pw.at(c, d);
        CHECK(std::abs(out.features.at(i, d) - f) < 1e-12);
      }
    }
  }
}

TEST_CASE("branch gradients reach only the shared extractor and that branch") {
  MsdaModel m = build_model(3, 2, kImage, 6);
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({4, 1, 28, 28}, rng, false, 0.0, 1.0);
  const int labels[] = {0, 1, 0, 1};
  m.zero_grad();
  backward(cross_entropy(forward_branch(m, x, 1).logits, labels));
  for (const auto& p : m.parameters()) {
    const bool own = p.name.rfind("shared.", 0) == 0 || p.name.rfind("branch1.", 0) == 0;
    double norm = 0.0;
    if (p.value.has_grad()) {
      for (double g : p.value.grad()) norm += std::abs(g);
    }
    if (own && p.name.find("bias") == std::string::npos) CHECK(norm > 0.0);
    if (!own) CHECK(norm == 0.0);
  }
}

TEST_CASE("one step on branch 0 changes only branch 0 outputs beyond the shared part") {
  MsdaModel m = build_model(2, 2, kImage, 8);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({4, 1, 28, 28}, rng, false, 0.0, 1.0);
  const auto before0 = testutil::to_vec(forward_branch(m, x, 0).probs);
  const auto before1 = testutil::to_vec(forward_branch(m, x, 1).probs);
  CHECK(before0 != before1);
  const int labels[] = {0, 1, 1, 0};
  m.zero_grad();
  backward(cross_entropy(forward_branch(m, x, 0).logits, labels));
  auto params = m.parameter_tensors();
  auto state = AdamState::for_params(params);
  adam_step(params, state, HyperParams{}, 1);
  CHECK(testutil::to_vec(forward_branch(m, x, 0).probs) != before0);
  CHECK(testutil::to_vec(forward_branch(m, x, 0).probs) != testutil::to_vec(forward_branch(m, x, 1).probs));
}

TEST_CASE("predict averages branches, breaks ties low, scales invariantly") {
  const MsdaModel m = build_model(3, 2, kImage, 9);
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({6, 1, 28, 28}, rng, false, 0.0, 1.0);
  const Prediction p = predict(m, x);
  for (std::size_t i = 0; i < 6; ++i) {
    double avg0 = 0.0;
    for (std::size_t j = 0; j < 3; ++j) avg0 += forward_branch(m, x, j).probs.at(i, 0) / 3.0;
    CHECK(p.avg_probs.at(i, 0) == doctest::Approx(avg0).epsilon(1e-14));
    CHECK(p.avg_probs.at(i, 0) + p.avg_probs.at(i, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.labels[i] == (p.avg_probs.at(i, 1) > p.avg_probs.at(i, 0) ? 1 : 0));
  }
  CHECK(predict(m, x).labels == p.labels);

  // One branch: prediction is that branch's argmax.
  const MsdaModel one = build_model(1, 2, kImage, 10);
  const auto probs = forward_branch(one, x, 0).probs;
  const auto labels = predict(one, x).labels;
  for (std::size_t i = 0; i < 6; ++i) CHECK(labels[i] == (probs.at(i, 1) > probs.at(i, 0) ? 1 : 0));

  // Scaling every classifier by a positive constant keeps the labels.
  MsdaModel scaled = m.clone();
  for (std::size_t j = 0; j < 3; ++j) {
    for (Tensor t : {scaled.branch(j).classifier.weight, scaled.branch(j).classifier.bias}) {
      for (auto& v : t.data_mut()) v *= 3.0;
    }
  }
  CHECK(predict(scaled, x).labels == p.labels);

  // Tie: identical zero classifiers give [0.5, 0.5] and label 0.
  MsdaModel tie = m.clone();
  for (std::size_t j = 0; j < 3; ++j) {
    for (Tensor t : {tie.branch(j).classifier.weight, tie.branch(j).classifier.bias}) {
      for (auto& v : t.data_mut()) v = 0.0;
    }
  }
  for (int label : predict(tie, x).labels) CHECK(label == 0);
}

TEST_CASE("clone is independent") {
  const MsdaModel a = build_model(2, 2, kImage, 11);
  MsdaModel b = a.clone();
  CHECK(same_values(a, b));
  Tensor first = b.parameters()[0].value;
  first.data_mut()[0] += 1.0;
  CHECK_FALSE(same_values(a, b));
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  MsdaModel m = build_model(3, 2, kImage, 12);
  std::mt19937_64 rng(7);
  for (const auto& p : m.parameters()) {
    Tensor t = p.value;
    for (auto& v : t.data_mut()) v = std::uniform_real_distribution<double>(-1, 1)(rng) / 3.0;
  }
  const auto dir = std::filesystem::temp_directory_path() / "msda_model_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(m, path);
  const MsdaModel back = load_checkpoint(path);
  CHECK(same_values(m, back));
  CHECK(back.num_sources() == 3);
  CHECK(back.architecture() == m.architecture());
  save_checkpoint(back, (dir / "m2.ckpt").string());
  std::ifstream f1(path, std::ios::binary), f2(dir / "m2.ckpt", std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  // Truncated file is rejected.
  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << s1.substr(0, s1.size() - 10);
  }
  CHECK_THROWS(load_checkpoint((dir / "bad.ckpt").string()));
  CHECK_THROWS(load_checkpoint((dir / "missing.ckpt").string()));
  std::filesystem::remove_all(dir);
}
